//! Refiner training: uniform timesteps, Gaussian noise, noise-regression loss.

use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diffusion::{cdm_loss_with_condition, gaussian, upsample_condition};
use super::schedule::NoiseSchedule;
use super::{images_to_tensor, PatchPair, RefinerModel};
use crate::error::{bail, Result};
use crate::imaging::Image;
use crate::nn::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRefinerParams {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Exponential smoothing factor for the reported loss.
    pub smoothing: f64,
    pub time_budget_secs: Option<f64>,
    pub seed: u64,
}

impl Default for TrainRefinerParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            smoothing: 0.95,
            time_budget_secs: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerStep {
    pub step: usize,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinerHistory {
    pub steps: Vec<RefinerStep>,
}

impl RefinerHistory {
    pub fn initial_smoothed(&self) -> Option<f64> {
        self.steps.first().map(|s| s.smoothed)
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.steps.last().map(|s| s.smoothed)
    }
}

/// Trains on random pairs with `t ~ U{1..T}` and `eps ~ N(0, I)`; the RNG
/// stream is fixed by `params.seed`.
pub fn train_refiner(
    model: &mut RefinerModel,
    pairs: &[PatchPair],
    sched: &NoiseSchedule,
    params: &TrainRefinerParams,
) -> Result<RefinerHistory> {
    if pairs.is_empty() {
        bail!(InvalidInput, "refiner training set is empty");
    }
    if params.batch_size == 0 {
        bail!(Config, "batch_size must be positive");
    }
    if !(params.learning_rate.is_finite() && params.learning_rate >= 0.0) {
        bail!(Config, "learning rate must be non-negative");
    }
    model.check_schedule(sched)?;
    let scale = model.config().scale;
    if let Some(p) = pairs.iter().find(|p| p.scale != scale) {
        bail!(Shape, "pair has scale {}, model expects {scale}", p.scale);
    }
    let dims = pairs[0].x0.dims();
    if pairs.iter().any(|p| p.x0.dims() != dims) {
        bail!(Shape, "all training pairs must share dimensions");
    }
    let dtype = model.dtype();
    let lows: Vec<&Image> = pairs.iter().map(|p| &p.z).collect();
    let highs: Vec<&Image> = pairs.iter().map(|p| &p.x0).collect();
    let conds = upsample_condition(&images_to_tensor(&lows, dtype)?, scale)?;
    let targets = images_to_tensor(&highs, dtype)?;

    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: params.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "refiner-train"));
    let budget = params.time_budget_secs.map(Duration::from_secs_f64);
    let start = Instant::now();
    let (c, h, w) = (dims.2, dims.0, dims.1);
    let mut history = RefinerHistory::default();
    let mut smoothed = None;
    for step in 0..params.steps {
        let idx: Vec<u32> = (0..params.batch_size)
            .map(|_| rng.gen_range(0..pairs.len()) as u32)
            .collect();
        let t: Vec<usize> = (0..params.batch_size)
            .map(|_| rng.gen_range(1..=sched.len()))
            .collect();
        let eps = gaussian(&mut rng, &[params.batch_size, c, h, w], dtype)?;
        let index = Tensor::new(idx.as_slice(), conds.device())?;
        let cond = conds.index_select(&index, 0)?;
        let x0 = targets.index_select(&index, 0)?;
        let loss = cdm_loss_with_condition(model, &cond, &x0, &t, &eps, sched)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            bail!(NonFinite, "refiner loss became {value} at step {step}");
        }
        opt.backward_step(&loss)?;
        let s = match smoothed {
            None => value,
            Some(prev) => params.smoothing * prev + (1.0 - params.smoothing) * value,
        };
        smoothed = Some(s);
        history.steps.push(RefinerStep {
            step,
            loss: value,
            smoothed: s,
        });
        if step % 100 == 0 {
            log::debug!("refiner step {step}: loss {value:.5} smoothed {s:.5}");
        }
        if budget.is_some_and(|b| start.elapsed() > b) {
            log::warn!("refiner training stopped by time budget after step {step}");
            break;
        }
    }
    if !model.params().all_finite()? {
        bail!(NonFinite, "refiner parameters became non-finite");
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::RefinerConfig;

    fn tiny() -> RefinerConfig {
        RefinerConfig {
            widths: [8, 8, 16],
            groups: 4,
            timesteps: 20,
            beta_start: 1e-3,
            beta_end: 0.2,
            ..RefinerConfig::default()
        }
    }

    fn pair() -> PatchPair {
        let hi = Image::new(ndarray::Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y + 2 * x + c) % 5) as f32 / 4.0
        }))
        .unwrap();
        let lo = crate::imaging::resize(&hi, 4, 4, crate::imaging::Interpolation::Area).unwrap();
        PatchPair::from_unit(&lo, &hi).unwrap()
    }

    #[test]
    fn empty_set_is_error() {
        let mut m = RefinerModel::new(&tiny()).unwrap();
        let s = m.config().schedule().unwrap();
        assert!(train_refiner(&mut m, &[], &s, &TrainRefinerParams::default()).is_err());
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut m = RefinerModel::new(&tiny()).unwrap();
        let s = m.config().schedule().unwrap();
        let before = m.params().snapshot().unwrap();
        let p = TrainRefinerParams {
            steps: 3,
            batch_size: 2,
            learning_rate: 0.0,
            ..Default::default()
        };
        train_refiner(&mut m, &[pair()], &s, &p).unwrap();
        assert_eq!(before, m.params().snapshot().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let p = TrainRefinerParams {
            steps: 5,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = RefinerModel::new(&tiny()).unwrap();
            let s = m.config().schedule().unwrap();
            let h = train_refiner(&mut m, &[pair()], &s, &p).unwrap();
            (h, m.params().snapshot().unwrap())
        };
        assert_eq!(run(), run());
    }
}
