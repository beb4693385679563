//! Selector training loop.

use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::selection::{aggregate_scores, pooled_selection_metrics, threshold_mask};
use super::{pyramid_loss_from_logits, SelectorModel};
use crate::dataset::PatchLabelPyramid;
use crate::error::{bail, Result};
use crate::imaging::Image;
use crate::nn::derive_seed;

/// Selector-resolution image with its label pyramid.
#[derive(Clone, Debug)]
pub struct SelectorExample {
    pub id: String,
    pub image: Image,
    pub labels: PatchLabelPyramid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSelectorParams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to the config's attention learning rate.
    pub learning_rate: Option<f64>,
    /// Stop once an epoch's mean loss falls below this value.
    pub target_loss: Option<f64>,
    /// Wall-clock budget; training stops after the epoch that exceeds it.
    pub time_budget_secs: Option<f64>,
    pub seed: u64,
}

impl Default for TrainSelectorParams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: None,
            target_loss: None,
            time_budget_secs: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    pub val_tpr: Option<f64>,
    pub val_max_f: Option<f64>,
    pub val_iou: Option<f64>,
    pub val_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorHistory {
    pub epochs: Vec<EpochRecord>,
}

impl SelectorHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

fn label_tensors(batch: &[&SelectorExample], device: &Device) -> Result<Vec<Tensor>> {
    let levels = batch[0].labels.levels().len();
    (0..levels)
        .map(|l| {
            let (h, w) = batch[0].labels.level(l).dim();
            let mut data = Vec::with_capacity(batch.len() * h * w);
            for ex in batch {
                let grid = ex.labels.level(l);
                if grid.dim() != (h, w) {
                    bail!(Shape, "label grids differ within a batch");
                }
                data.extend(grid.iter().map(|&v| f32::from(v)));
            }
            Ok(Tensor::from_vec(data, (batch.len(), h, w), device)?)
        })
        .collect()
}

/// Mean pooled metrics on the selection grid (the coarsest label level).
fn validate(model: &SelectorModel, val: &[SelectorExample], batch: usize) -> Result<(f64, f64, f64, f64)> {
    let tau = model.config().tau;
    let mut masks = Vec::with_capacity(val.len());
    for chunk in val.chunks(batch.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|e| &e.image).collect();
        for (sp, ex) in model.score_images(&images)?.iter().zip(chunk) {
            let g = ex.labels.y3().nrows();
            masks.push(threshold_mask(&aggregate_scores(sp, g), tau));
        }
    }
    let m = pooled_selection_metrics(masks.iter().zip(val.iter().map(|e| e.labels.y3())))?;
    let fraction = masks.iter().map(|m| m.fraction()).sum::<f64>() / masks.len() as f64;
    Ok((m.tpr, m.max_f, m.iou, fraction))
}

/// Minimizes the pyramid loss with Adam. Batches are drawn in a seeded
/// shuffled order, so runs are reproducible.
pub fn train_selector(
    model: &mut SelectorModel,
    train: &[SelectorExample],
    val: &[SelectorExample],
    params: &TrainSelectorParams,
) -> Result<SelectorHistory> {
    if train.is_empty() {
        bail!(InvalidInput, "selector training set is empty");
    }
    if params.batch_size == 0 {
        bail!(Config, "batch_size must be positive");
    }
    let lr = params.learning_rate.unwrap_or(model.config().lr_attn);
    if !(lr.is_finite() && lr >= 0.0) {
        bail!(Config, "learning rate must be non-negative, got {lr}");
    }
    let beta_neg = model.config().loss_weight_beta_neg;
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let device = model.params().device().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "selector-shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let budget = params.time_budget_secs.map(Duration::from_secs_f64);
    let start = Instant::now();
    let mut history = SelectorHistory::default();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in order.chunks(params.batch_size) {
            let batch: Vec<&SelectorExample> = idx.iter().map(|&i| &train[i]).collect();
            let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
            let fp = model.encode_batch(&images)?;
            let logits = model.logits(&fp)?;
            let labels = label_tensors(&batch, &device)?;
            let loss = pyramid_loss_from_logits(&logits, &labels, beta_neg)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                bail!(
                    NonFinite,
                    "selector loss became {value} at epoch {epoch}, step {steps} (batch {:?})",
                    batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>()
                );
            }
            opt.backward_step(&loss)?;
            total += value;
            steps += 1;
        }
        let loss = total / steps as f64;
        let (val_tpr, val_max_f, val_iou, val_fraction) = if val.is_empty() {
            (None, None, None, None)
        } else {
            let (t, f, i, fr) = validate(model, val, params.batch_size)?;
            (Some(t), Some(f), Some(i), Some(fr))
        };
        log::info!(
            "selector epoch {epoch}: loss {loss:.5} val tpr {val_tpr:?} fraction {val_fraction:?}"
        );
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            steps,
            val_tpr,
            val_max_f,
            val_iou,
            val_fraction,
        });
        if params.target_loss.is_some_and(|t| loss < t) {
            break;
        }
        if budget.is_some_and(|b| start.elapsed() > b) {
            log::warn!("selector training stopped by time budget after epoch {epoch}");
            break;
        }
    }
    if !model.params().all_finite()? {
        bail!(NonFinite, "selector parameters became non-finite");
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_pyramid_labels, generate_synthetic_scene, SceneConfig};
    use crate::selector::{init_selector, SelectorConfig};

    fn tiny() -> SelectorConfig {
        SelectorConfig {
            embed_channels: 8,
            mlp_ratio: 1.0,
            ..SelectorConfig::desk()
        }
    }

    fn example(seed: u64) -> SelectorExample {
        let cfg = SceneConfig {
            width: 32,
            height: 32,
            ..SceneConfig::default()
        };
        let s = generate_synthetic_scene(&cfg, seed).unwrap();
        let labels = build_pyramid_labels(&s.boxes, (32, 32), &[8, 4, 2]).unwrap();
        SelectorExample {
            id: s.id,
            image: s.image,
            labels,
        }
    }

    #[test]
    fn empty_training_set_is_error() {
        let mut m = init_selector(&tiny()).unwrap();
        assert!(train_selector(&mut m, &[], &[], &TrainSelectorParams::default()).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut m = init_selector(&tiny()).unwrap();
        let before = m.params().snapshot().unwrap();
        let params = TrainSelectorParams {
            epochs: 1,
            batch_size: 2,
            learning_rate: Some(0.0),
            ..Default::default()
        };
        train_selector(&mut m, &[example(1), example(2)], &[], &params).unwrap();
        assert_eq!(before, m.params().snapshot().unwrap());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data: Vec<_> = (0..4).map(example).collect();
        let params = TrainSelectorParams {
            epochs: 6,
            batch_size: 2,
            learning_rate: Some(3e-3),
            seed: 3,
            ..Default::default()
        };
        let mut a = init_selector(&tiny()).unwrap();
        let ha = train_selector(&mut a, &data, &data[..2], &params).unwrap();
        let mut b = init_selector(&tiny()).unwrap();
        let hb = train_selector(&mut b, &data, &data[..2], &params).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
        let first = ha.epochs[0].loss;
        assert!(ha.final_loss().unwrap() < first, "{ha:?}");
        assert!(ha.epochs[0].val_tpr.is_some());
    }
}
