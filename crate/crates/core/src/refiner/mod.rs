//! Patch refiner: a conditional denoising diffusion model that super-resolves
//! low-resolution patches, plus the interpolation fallback for the rest.

pub mod diffusion;
pub mod schedule;
pub mod train;
mod unet;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{bail, DprError, Result};
use crate::imaging::{self, Image, Interpolation};
use crate::nn::ParamStore;

pub use diffusion::{
    cdm_loss, forward_noising, forward_noising_batch, gaussian, predict_x0, reverse_step,
    reverse_step_from_prediction, sample, upsample_condition, NoisePredictor, PointwisePredictor,
};
pub use schedule::{make_schedule, NoiseSchedule};
pub use train::{train_refiner, RefinerHistory, RefinerStep, TrainRefinerParams};
pub use unet::timestep_embedding;

use unet::UNet;

const CHECKPOINT_KIND: &str = "refiner";

/// What the U-Net output means before it is turned into a noise estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The output is the noise estimate itself.
    Noise,
    /// The output is a clean-patch correction added to the upsampled condition;
    /// the noise estimate follows from the forward-noising identity.
    #[default]
    ResidualX0,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Upscaling factor `k` between the low-res input and the output.
    pub scale: usize,
    pub channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub time_embed_dim: usize,
    pub groups: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub prediction: Prediction,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            channels: 3,
            widths: [32, 32, 64],
            time_embed_dim: 32,
            groups: 8,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            prediction: Prediction::ResidualX0,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.channels == 0 || self.groups == 0 || self.time_embed_dim < 2 {
            bail!(Config, "refiner scale, channels, groups and time_embed_dim must be positive");
        }
        if self.widths.iter().any(|&w| w == 0) {
            bail!(Config, "refiner widths must be positive");
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Low-res input and high-res target, both in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub z: Image,
    pub x0: Image,
    pub scale: usize,
}

impl PatchPair {
    pub fn new(z: Image, x0: Image) -> Result<Self> {
        let (h, w, c) = z.dims();
        let (hx, wx, cx) = x0.dims();
        if h == 0 || w == 0 || c != cx || hx % h != 0 || wx % w != 0 || hx / h != wx / w {
            bail!(Shape, "patch pair dims {:?} and {:?} are not related by an integer scale", z.dims(), x0.dims());
        }
        for img in [&z, &x0] {
            let (lo, hi) = img.min_max();
            if lo < -1.0 || hi > 1.0 {
                bail!(InvalidInput, "patch values must lie in [-1, 1]");
            }
        }
        Ok(Self {
            scale: hx / h,
            z,
            x0,
        })
    }

    /// Builds a pair from `[0, 1]` images.
    pub fn from_unit(low: &Image, high: &Image) -> Result<Self> {
        Self::new(low.to_signed(), high.to_signed())
    }
}

/// Stacks HWC images into an NCHW tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail!(InvalidInput, "empty image batch");
    };
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dims() != (h, w, c) {
            bail!(Shape, "batch mixes {:?} and {:?} images", (h, w, c), img.dims());
        }
        data.extend(img.pixels().iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, c), &Device::Cpu)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

/// Splits an NCHW tensor back into HWC images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    let data: Vec<f32> = t
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1()?;
    data.chunks(h * w * c)
        .take(b)
        .map(|chunk| {
            let arr = Array3::from_shape_vec((h, w, c), chunk.to_vec())
                .map_err(|e| DprError::Shape(e.to_string()))?;
            Image::new(arr)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RefinerModel {
    config: RefinerConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    unet: UNet,
}

impl RefinerModel {
    pub fn new(config: &RefinerConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: &RefinerConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, dtype, &Device::Cpu);
        let unet = UNet::new(config, store.builder().pp("unet"))?;
        Ok(Self {
            config: config.clone(),
            schedule: config.schedule()?,
            store,
            unet,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub(crate) fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        if sched != &self.schedule {
            bail!(Config, "noise schedule differs from the one the refiner was built with");
        }
        Ok(())
    }

    /// Multiply-accumulates to refine one `h × w` low-res patch over the full schedule.
    pub fn macs_per_patch(&self, h: usize, w: usize) -> f64 {
        let k = self.config.scale;
        self.unet.macs(k * h, k * w) * self.config.timesteps as f64
    }

    /// Super-resolves `[0, 1]` patches; `seeds[i]` drives patch `i`.
    pub fn refine(&self, patches: &[&Image], sched: &NoiseSchedule, seeds: &[u64]) -> Result<Vec<Image>> {
        self.check_schedule(sched)?;
        let signed: Vec<Image> = patches.iter().map(|p| p.to_signed()).collect();
        let refs: Vec<&Image> = signed.iter().collect();
        let z = images_to_tensor(&refs, self.dtype())?;
        let out = sample(self, &z, self.config.scale, sched, seeds)?;
        Ok(tensor_to_images(&out)?.iter().map(|i| i.to_unit()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_string(&self.config)?,
            params: checkpoint::export_params(&self.store)?,
        };
        checkpoint::save_checkpoint(path, &ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load_checkpoint(path)?;
        if ckpt.kind != CHECKPOINT_KIND {
            bail!(Checkpoint, "expected a refiner checkpoint, found `{}`", ckpt.kind);
        }
        let config: RefinerConfig = serde_json::from_str(&ckpt.config)?;
        let model = Self::new(&config)?;
        checkpoint::import_params(&model.store, &ckpt.params)?;
        Ok(model)
    }
}

impl NoisePredictor for RefinerModel {
    fn predict_noise(&self, cond: &Tensor, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        if cond.dims() != x_t.dims() {
            bail!(Shape, "condition {:?} vs sample {:?}", cond.dims(), x_t.dims());
        }
        if x_t.dim(1)? != self.config.channels {
            bail!(Shape, "refiner expects {} channels, got {}", self.config.channels, x_t.dim(1)?);
        }
        let out = self.unet.forward(&Tensor::cat(&[x_t, cond], 1)?, t)?;
        match self.config.prediction {
            Prediction::Noise => Ok(out),
            Prediction::ResidualX0 => {
                for &s in t {
                    self.schedule.check_step(s)?;
                }
                let signal: Vec<f64> = t.iter().map(|&s| self.schedule.alpha_bar(s).sqrt()).collect();
                let inv_noise: Vec<f64> = t
                    .iter()
                    .map(|&s| 1.0 / (1.0 - self.schedule.alpha_bar(s)).sqrt())
                    .collect();
                let per_item = |v: Vec<f64>| -> Result<Tensor> {
                    let n = v.len();
                    Ok(Tensor::from_vec(v, (n, 1, 1, 1), x_t.device())?.to_dtype(x_t.dtype())?)
                };
                let x0 = (cond + out)?;
                let eps = (x_t - x0.broadcast_mul(&per_item(signal)?)?)?;
                Ok(eps.broadcast_mul(&per_item(inv_noise)?)?)
            }
        }
    }
}

/// Interpolation upscaling for patches that skip diffusion.
pub fn enlarge(patch: &Image, k: usize, method: Interpolation) -> Result<Image> {
    imaging::enlarge(patch, k, method)
}

pub fn tile_file_name(image_id: &str, row: usize, col: usize) -> String {
    format!("{image_id}_r{row}_c{col}.png")
}

/// Writes a `[0, 1]` tile as `<dir>/<image_id>_r<row>_c<col>.png`.
pub fn save_tile(dir: &Path, image_id: &str, row: usize, col: usize, tile: &Image) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| DprError::io(dir, e))?;
    let path = dir.join(tile_file_name(image_id, row, col));
    tile.save_png(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RefinerConfig {
        RefinerConfig {
            widths: [8, 8, 16],
            groups: 4,
            timesteps: 4,
            beta_start: 0.01,
            beta_end: 0.2,
            ..RefinerConfig::default()
        }
    }

    fn patch(side: usize, seed: u64) -> Image {
        let mut i = seed;
        Image::new(Array3::from_shape_fn((side, side, 3), |_| {
            i = i.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (i >> 40) as f32 / (1u64 << 24) as f32
        }))
        .unwrap()
    }

    #[test]
    fn output_matches_sample_dims_and_starts_at_zero() {
        let m = RefinerModel::new(&RefinerConfig {
            prediction: Prediction::Noise,
            ..tiny()
        })
        .unwrap();
        let x = images_to_tensor(&[&patch(16, 1), &patch(16, 2)], DType::F32).unwrap();
        let out = m.predict_noise(&x, &x, &[1, 3]).unwrap();
        assert_eq!(out.dims(), x.dims());
        // The output convolution starts at zero.
        assert_eq!(out.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert!(m.predict_noise(&x, &x, &[1]).is_err());
    }

    #[test]
    fn residual_prediction_starts_at_the_condition() {
        let m = RefinerModel::new(&tiny()).unwrap();
        let s = m.schedule().clone();
        let cond = images_to_tensor(&[&patch(16, 4)], DType::F32).unwrap();
        let x_t = images_to_tensor(&[&patch(16, 5)], DType::F32).unwrap();
        for t in [1, s.len() / 2, s.len()] {
            let eps = m.predict_noise(&cond, &x_t, &[t]).unwrap();
            let x0 = predict_x0(&x_t, t, &eps, &s).unwrap();
            let err = (x0 - &cond).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(err < 1e-3, "t {t}: {err}");
        }
    }

    #[test]
    fn refine_is_deterministic_and_sized() {
        let m = RefinerModel::new(&tiny()).unwrap();
        let s = m.config().schedule().unwrap();
        let p = patch(8, 3);
        let a = m.refine(&[&p], &s, &[5]).unwrap();
        let b = m.refine(&[&p], &s, &[5]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].dims(), (16, 16, 3));
        let (lo, hi) = a[0].min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let m = RefinerModel::new(&RefinerConfig { seed: 9, ..tiny() }).unwrap();
        m.save(&path).unwrap();
        let back = RefinerModel::load(&path).unwrap();
        assert_eq!(back.params().snapshot().unwrap(), m.params().snapshot().unwrap());
        let wrong_kind = dir.path().join("s.ckpt");
        crate::selector::init_selector(&crate::selector::SelectorConfig {
            embed_channels: 8,
            ..crate::selector::SelectorConfig::desk()
        })
        .unwrap()
        .save(&wrong_kind)
        .unwrap();
        assert!(RefinerModel::load(&wrong_kind).is_err());
    }

    #[test]
    fn pair_validation() {
        assert!(PatchPair::from_unit(&patch(8, 1), &patch(32, 2)).is_ok());
        assert_eq!(PatchPair::from_unit(&patch(8, 1), &patch(32, 2)).unwrap().scale, 4);
        assert!(PatchPair::from_unit(&patch(8, 1), &patch(30, 2)).is_err());
        assert!(PatchPair::new(Image::filled(2, 2, 3, 2.0), Image::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn enlarge_examples() {
        let arr = Array3::from_shape_vec((2, 2, 1), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let p = Image::new(arr).unwrap();
        let n = enlarge(&p, 2, Interpolation::Nearest).unwrap();
        let rows: Vec<f32> = n.pixels().iter().copied().collect();
        assert_eq!(rows, [0., 0., 1., 1.].repeat(4));
        for method in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
            assert_eq!(enlarge(&p, 1, method).unwrap(), p);
            let c = enlarge(&Image::filled(3, 3, 3, 0.4), 3, method).unwrap();
            assert!(c.pixels().iter().all(|v| (v - 0.4).abs() < 1e-6));
        }
        assert!(enlarge(&p, 2, Interpolation::Area).is_err());
    }

    #[test]
    fn tiles_use_index_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_tile(dir.path(), "scene000001", 2, 3, &patch(4, 1)).unwrap();
        assert!(path.ends_with("scene000001_r2_c3.png"));
        assert!(path.exists());
    }
}
