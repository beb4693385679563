//! Forward noising, the noise-prediction objective, and ancestral sampling.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Conv2d;
use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::schedule::NoiseSchedule;
use crate::error::{bail, Result};
use crate::imaging::{resample_plane, Interpolation};
use crate::nn::ParamStore;

/// Anything that predicts the added noise from a noisy sample.
pub trait NoisePredictor {
    /// `cond`: low-res input already upsampled to the sample grid, `[B, C, H, W]`.
    /// `x_t`: noisy sample `[B, C, H, W]`; `t`: one timestep per batch item.
    fn predict_noise(&self, cond: &Tensor, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// Standard normal samples of `shape` drawn from `rng`.
pub fn gaussian(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear upsampling by integer factor `k` with half-pixel alignment, `[B, C, h, w]` → `[B, C, kh, kw]`.
pub fn upsample_condition(z: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        bail!(InvalidInput, "scale factor must be positive");
    }
    if k == 1 {
        return Ok(z.clone());
    }
    let (b, c, h, w) = z.dims4()?;
    let flat: Vec<f64> = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut out: Vec<f64> = Vec::with_capacity(flat.len() * k * k);
    for plane in flat.chunks(h * w) {
        let view = ArrayView2::from_shape((h, w), plane).expect("plane size");
        out.extend(resample_plane(view, k * h, k * w, Interpolation::Bilinear).iter());
    }
    Ok(Tensor::from_vec(out, (b, c, k * h, k * w), &Device::Cpu)?.to_dtype(z.dtype())?)
}

fn per_item(values: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps` with one timestep per batch item.
pub fn forward_noising_batch(
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        bail!(Shape, "x0 {:?} vs noise {:?}", x0.dims(), eps.dims());
    }
    if t.len() != x0.dim(0)? {
        bail!(Shape, "{} timesteps for a batch of {}", t.len(), x0.dim(0)?);
    }
    for &s in t {
        sched.check_step(s)?;
    }
    let a: Vec<f64> = t.iter().map(|&s| sched.alpha_bar(s).sqrt()).collect();
    let n: Vec<f64> = t.iter().map(|&s| (1.0 - sched.alpha_bar(s)).sqrt()).collect();
    let a = per_item(&a, x0.dtype())?;
    let n = per_item(&n, x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&n)?)?)
}

/// Noisy sample at a single timestep; works on tensors of any rank.
pub fn forward_noising(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if x0.dims() != eps.dims() {
        bail!(Shape, "x0 {:?} vs noise {:?}", x0.dims(), eps.dims());
    }
    let ab = sched.alpha_bar(t);
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Clean-sample estimate `(x_t − √(1−ᾱ_t)·eps) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let num = (x_t - eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(num.affine(1.0 / ab.sqrt(), 0.0)?)
}

/// One ancestral step given a noise prediction; `noise = None` means zero.
pub fn reverse_step_from_prediction(
    x_t: &Tensor,
    predicted: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let (alpha, ab, beta) = (sched.alpha(t), sched.alpha_bar(t), sched.beta(t));
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let mean = (x_t - predicted.affine(coef, 0.0)?)?.affine(1.0 / alpha.sqrt(), 0.0)?;
    Ok(match noise {
        Some(eps) => (mean + eps.affine(beta.sqrt(), 0.0)?)?,
        None => mean,
    })
}

pub fn reverse_step(
    model: &dyn NoisePredictor,
    cond: &Tensor,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let b = x_t.dim(0)?;
    let predicted = model.predict_noise(cond, x_t, &vec![t; b])?;
    if predicted.dims() != x_t.dims() {
        bail!(Shape, "predictor returned {:?} for {:?}", predicted.dims(), x_t.dims());
    }
    reverse_step_from_prediction(x_t, &predicted, t, sched, noise)
}

/// Checks that `x0` is exactly `k` times larger than `z` and returns `k`.
pub fn scale_between(z: &Tensor, x0: &Tensor) -> Result<usize> {
    let (bz, cz, hz, wz) = z.dims4()?;
    let (bx, cx, hx, wx) = x0.dims4()?;
    if bz != bx || cz != cx || hz == 0 || wz == 0 || hx % hz != 0 || hx / hz != wx / wz || wx % wz != 0 {
        bail!(Shape, "low-res {:?} does not divide high-res {:?}", z.dims(), x0.dims());
    }
    Ok(hx / hz)
}

/// Mean squared error between predicted and true noise.
pub fn cdm_loss(
    model: &dyn NoisePredictor,
    z: &Tensor,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let k = scale_between(z, x0)?;
    let cond = upsample_condition(z, k)?;
    cdm_loss_with_condition(model, &cond, x0, t, eps, sched)
}

pub fn cdm_loss_with_condition(
    model: &dyn NoisePredictor,
    cond: &Tensor,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = forward_noising_batch(x0, t, eps, sched)?;
    let predicted = model.predict_noise(cond, &x_t, t)?;
    if predicted.dims() != eps.dims() {
        bail!(Shape, "predictor returned {:?} for {:?}", predicted.dims(), eps.dims());
    }
    Ok((predicted - eps)?.sqr()?.mean_all()?)
}

/// Ancestral sampling from pure noise; item `i` uses only `seeds[i]`, so
/// results do not depend on what else is in the batch. The result is clipped
/// to `[-1, 1]`.
pub fn sample(
    model: &dyn NoisePredictor,
    z: &Tensor,
    scale: usize,
    sched: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Tensor> {
    let cond = upsample_condition(z, scale)?;
    let (b, c, h, w) = cond.dims4()?;
    if seeds.len() != b {
        bail!(Shape, "{} seeds for a batch of {b}", seeds.len());
    }
    let dtype = z.dtype();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let items = rngs
            .iter_mut()
            .map(|r| gaussian(r, &[1, c, h, w], dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&items, 0)?)
    };
    let mut x = draw(&mut rngs)?;
    for t in (1..=sched.len()).rev() {
        let noise = if t > 1 { Some(draw(&mut rngs)?) } else { None };
        x = reverse_step(model, &cond, &x, t, sched, noise.as_ref())?;
        let check = x.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            bail!(NonFinite, "sampling produced non-finite values at step {t}");
        }
    }
    Ok(x.clamp(-1.0, 1.0)?)
}

/// Tiny per-pixel predictor: a two-layer 1×1 convolution over the noisy sample
/// (and optionally the condition) with a timestep bias.
#[derive(Clone, Debug)]
pub struct PointwisePredictor {
    store: ParamStore,
    hidden: Conv2d,
    out: Conv2d,
    time_scale: Tensor,
    use_condition: bool,
    steps: usize,
}

impl PointwisePredictor {
    pub fn new(
        channels: usize,
        width: usize,
        use_condition: bool,
        steps: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, &Device::Cpu);
        let vb = store.builder();
        let cin = if use_condition { 2 * channels } else { channels };
        Ok(Self {
            hidden: candle_nn::conv2d(cin, width, 1, Default::default(), vb.pp("hidden"))?,
            out: candle_nn::conv2d(width, channels, 1, Default::default(), vb.pp("out"))?,
            time_scale: vb.get_with_hints(
                width,
                "time_scale",
                candle_nn::Init::Randn {
                    mean: 0.0,
                    stdev: 1.0,
                },
            )?,
            store,
            use_condition,
            steps: steps.max(1),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }
}

impl NoisePredictor for PointwisePredictor {
    fn predict_noise(&self, cond: &Tensor, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let input = if self.use_condition {
            Tensor::cat(&[x_t, cond], 1)?
        } else {
            x_t.clone()
        };
        let frac: Vec<f64> = t.iter().map(|&s| s as f64 / self.steps as f64).collect();
        let frac = per_item(&frac, x_t.dtype())?;
        let tb = frac.broadcast_mul(&self.time_scale.reshape((1, (), 1, 1))?)?;
        let h = self.hidden.forward(&input)?.broadcast_add(&tb)?.tanh()?;
        Ok(self.out.forward(&h)?)
    }
}
