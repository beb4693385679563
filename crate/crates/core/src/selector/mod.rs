//! Patch selector: a hierarchical windowed-attention encoder, a cross-attention
//! patch classifier on three feature scales, the pyramid loss, max aggregation
//! and thresholded patch routing.

mod attention;
mod classifier;
mod encoder;
pub mod loss;
pub mod selection;
pub mod train;

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::ImageSample;
use crate::error::{bail, DprError, Result};
use crate::imaging::Image;
use crate::nn::ParamStore;

pub use attention::{window_attention, WindowAttention};
pub use encoder::FeaturePyramid;
pub use loss::{pyramid_loss, pyramid_loss_from_logits, LossWithGrad, SCORE_EPS};
pub use selection::{
    aggregate_scores, pooled_selection_metrics, select_patches, selection_metrics,
    threshold_mask, ConfusionCounts, PatchRouting, SelectionMask, SelectionMetrics,
};
pub use train::{train_selector, EpochRecord, SelectorExample, SelectorHistory, TrainSelectorParams};

use classifier::PatchClassifier;
use encoder::Encoder;

const CHECKPOINT_KIND: &str = "selector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub image_channels: usize,
    /// Kernel and stride of the patch embedding convolution.
    pub embed_stride: usize,
    pub embed_channels: usize,
    /// Blocks per transformer layer, alternating plain and shifted windows.
    pub tl_depth: usize,
    pub window_size: usize,
    pub num_heads: usize,
    /// Transformer layers; the last three produce the output scales.
    pub num_layers: usize,
    pub mlp_ratio: f64,
    pub relative_position_bias: bool,
    /// When false every block uses plain windows.
    pub shifted_windows: bool,
    pub class_tokens: usize,
    /// Adds the patch feature to the token attention output.
    pub token_residual: bool,
    pub loss_weight_beta_neg: f64,
    pub lr_conv: f64,
    pub lr_attn: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            embed_stride: 16,
            embed_channels: 96,
            tl_depth: 2,
            window_size: 7,
            num_heads: 3,
            num_layers: 4,
            mlp_ratio: 4.0,
            relative_position_bias: true,
            shifted_windows: true,
            class_tokens: 2,
            token_residual: true,
            loss_weight_beta_neg: 0.01,
            lr_conv: 0.001,
            lr_attn: 1e-5,
            tau: 0.5,
            seed: 0,
        }
    }
}

impl SelectorConfig {
    /// Small configuration for 64×64 inputs: token grid 32, scales 16/8/4.
    pub fn desk() -> Self {
        Self {
            embed_stride: 2,
            embed_channels: 16,
            window_size: 4,
            num_heads: 2,
            mlp_ratio: 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_channels", self.image_channels),
            ("embed_stride", self.embed_stride),
            ("embed_channels", self.embed_channels),
            ("tl_depth", self.tl_depth),
            ("window_size", self.window_size),
            ("num_heads", self.num_heads),
            ("class_tokens", self.class_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!(Config, "selector.{name} must be positive");
            }
        }
        if !(3..=6).contains(&self.num_layers) {
            bail!(Config, "selector.num_layers must be in 3..=6, got {}", self.num_layers);
        }
        for (name, v) in [
            ("mlp_ratio", self.mlp_ratio),
            ("loss_weight_beta_neg", self.loss_weight_beta_neg),
            ("lr_conv", self.lr_conv),
            ("lr_attn", self.lr_attn),
        ] {
            if !(v.is_finite() && v > 0.0) {
                bail!(Config, "selector.{name} must be positive, got {v}");
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            bail!(Config, "selector.tau must lie in (0, 1), got {}", self.tau);
        }
        if self.embed_channels % self.num_heads != 0 {
            bail!(
                Config,
                "selector.num_heads {} does not divide embed_channels {}",
                self.num_heads,
                self.embed_channels
            );
        }
        Ok(())
    }

    /// Output grid sides for an `h × w` input (fine to coarse).
    pub fn score_grids(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let (mut gh, mut gw) = (h / self.embed_stride, w / self.embed_stride);
        let mut out = Vec::new();
        for i in 0..self.num_layers {
            if i > 0 {
                gh = gh.div_ceil(2);
                gw = gw.div_ceil(2);
            }
            if i + 3 >= self.num_layers {
                out.push((gh, gw));
            }
        }
        out
    }
}

/// Positive-class probabilities per scale, fine to coarse.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePyramid {
    pub levels: Vec<Array2<f64>>,
}

impl ScorePyramid {
    pub fn s1(&self) -> &Array2<f64> {
        &self.levels[0]
    }

    pub fn s2(&self) -> &Array2<f64> {
        &self.levels[1]
    }

    pub fn s3(&self) -> &Array2<f64> {
        &self.levels[self.levels.len() - 1]
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.nrows()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SelectorModel {
    config: SelectorConfig,
    store: ParamStore,
    encoder: Encoder,
    classifier: PatchClassifier,
}

/// Builds a freshly initialized selector; parameters depend only on the config (including its seed).
pub fn init_selector(config: &SelectorConfig) -> Result<SelectorModel> {
    SelectorModel::with_dtype(config, DType::F32)
}

impl SelectorModel {
    pub fn with_dtype(config: &SelectorConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.seed, dtype, &Device::Cpu);
        let vb = store.builder();
        let encoder = Encoder::new(config, vb.pp("encoder"))?;
        let classifier = PatchClassifier::new(
            &encoder.output_dims(),
            config.class_tokens,
            config.token_residual,
            vb.pp("classifier"),
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            classifier,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Stacks images into a `[B, C, H, W]` tensor mapped to `[-1, 1]`.
    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let Some(first) = images.first() else {
            bail!(InvalidInput, "empty image batch");
        };
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                bail!(Shape, "batch mixes {:?} and {:?} images", (h, w, c), img.dims());
            }
            data.extend(img.pixels().iter().map(|&v| 2.0 * v - 1.0));
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "input image contains non-finite values");
        }
        let t = Tensor::from_vec(data, (images.len(), h, w, c), &Device::Cpu)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(self.store.dtype())?;
        Ok(t)
    }

    pub fn encode(&self, image: &ImageSample) -> Result<FeaturePyramid> {
        self.encode_batch(&[&image.image])
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<FeaturePyramid> {
        let x = self.images_to_tensor(images)?;
        self.encoder.forward(&x)
    }

    /// Class logits `[B, h, w, 2]` per scale; index 1 is the positive class.
    pub fn logits(&self, fp: &FeaturePyramid) -> Result<Vec<Tensor>> {
        self.classifier.logits(&fp.levels)
    }

    /// Class probability pairs `[B, h, w, 2]` per scale.
    pub fn class_probabilities(&self, fp: &FeaturePyramid) -> Result<Vec<Tensor>> {
        self.logits(fp)?
            .iter()
            .map(|z| Ok(candle_nn::ops::softmax(z, D::Minus1)?))
            .collect()
    }

    /// Score pyramids for every image in the batch behind `fp`.
    pub fn classify_patches(&self, fp: &FeaturePyramid) -> Result<Vec<ScorePyramid>> {
        let probs = self.class_probabilities(fp)?;
        let b = probs[0].dim(0)?;
        let mut out = vec![ScorePyramid { levels: Vec::new() }; b];
        for p in &probs {
            let (_, h, w, _) = p.dims4()?;
            let pos: Vec<f64> = p
                .narrow(3, 1, 1)?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1()?;
            for (i, sp) in out.iter_mut().enumerate() {
                let chunk = pos[i * h * w..(i + 1) * h * w].to_vec();
                let grid = Array2::from_shape_vec((h, w), chunk)
                    .map_err(|e| DprError::Shape(e.to_string()))?;
                if grid.iter().any(|v| !v.is_finite()) {
                    bail!(NonFinite, "selector produced non-finite scores");
                }
                sp.levels.push(grid);
            }
        }
        Ok(out)
    }

    /// Encode and classify a batch of images.
    pub fn score_images(&self, images: &[&Image]) -> Result<Vec<ScorePyramid>> {
        let fp = self.encode_batch(images)?;
        self.classify_patches(&fp)
    }

    /// Forward multiply-accumulate count for one `h × w` image.
    pub fn macs(&self, h: usize, w: usize) -> f64 {
        let patches: Vec<usize> = self
            .config
            .score_grids(h, w)
            .iter()
            .map(|(a, b)| a * b)
            .collect();
        self.encoder.macs(h, w) + self.classifier.macs(&patches)
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
            bail!(Checkpoint, "expected a selector checkpoint, found `{}`", ckpt.kind);
        }
        let config: SelectorConfig = serde_json::from_str(&ckpt.config)?;
        let model = init_selector(&config)?;
        checkpoint::import_params(&model.store, &ckpt.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SelectorConfig {
        SelectorConfig {
            embed_channels: 8,
            mlp_ratio: 1.0,
            ..SelectorConfig::desk()
        }
    }

    fn image(seed: u64, side: usize) -> Image {
        let mut i = 0u64;
        let data = ndarray::Array3::from_shape_fn((side, side, 3), |_| {
            i += 1;
            ((i.wrapping_mul(2654435761).wrapping_add(seed * 7919)) % 1000) as f32 / 1000.0
        });
        Image::new(data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_selector(&tiny()).unwrap();
        let b = init_selector(&tiny()).unwrap();
        assert_eq!(a.params().snapshot().unwrap(), b.params().snapshot().unwrap());
        assert!(a.params().all_finite().unwrap());
        let zero = Image::zeros(32, 32, 3);
        let sp = a.score_images(&[&zero]).unwrap();
        assert_eq!(sp[0].grid_sizes(), vec![8, 4, 2]);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = SelectorConfig {
            num_heads: 3,
            ..tiny()
        };
        assert!(init_selector(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn full_scale_grids() {
        let cfg = SelectorConfig::default();
        assert_eq!(cfg.score_grids(1024, 1024), vec![(32, 32), (16, 16), (8, 8)]);
        cfg.validate().unwrap();
    }

    #[test]
    fn more_layers_more_parameters() {
        let four = init_selector(&tiny()).unwrap().parameter_count();
        let six = init_selector(&SelectorConfig {
            num_layers: 6,
            ..tiny()
        })
        .unwrap()
        .parameter_count();
        // Each extra merging stage doubles width, so blocks grow ~4× per layer.
        assert!(six > 10 * four, "{four} vs {six}");
    }

    #[test]
    fn probabilities_are_distributions() {
        let m = init_selector(&tiny()).unwrap();
        let fp = m.encode_batch(&[&image(1, 32)]).unwrap();
        for p in m.class_probabilities(&fp).unwrap() {
            let sums: Vec<f32> = p.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn batch_is_independent() {
        let m = init_selector(&tiny()).unwrap();
        let (a, b) = (image(1, 32), image(2, 32));
        let single = m.score_images(&[&a]).unwrap();
        let pair = m.score_images(&[&a, &b]).unwrap();
        for (x, y) in single[0].levels.iter().zip(&pair[0].levels) {
            let d = (x - y).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(d < 1e-6);
        }
    }

    #[test]
    fn single_token_without_residual_is_constant() {
        let cfg = SelectorConfig {
            class_tokens: 1,
            token_residual: false,
            ..tiny()
        };
        let m = init_selector(&cfg).unwrap();
        let sp = &m.score_images(&[&image(3, 32)]).unwrap()[0];
        for l in &sp.levels {
            let first = l[[0, 0]];
            assert!(l.iter().all(|v| (v - first).abs() < 1e-6));
        }
        let m = init_selector(&SelectorConfig {
            token_residual: false,
            ..tiny()
        })
        .unwrap();
        let sp = &m.score_images(&[&image(3, 32)]).unwrap()[0];
        let l = sp.s1();
        let first = l[[0, 0]];
        assert!(l.iter().any(|v| (v - first).abs() > 1e-7));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.ckpt");
        let m = init_selector(&SelectorConfig { seed: 4, ..tiny() }).unwrap();
        m.save(&path).unwrap();
        let back = SelectorModel::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        let img = image(5, 32);
        assert_eq!(
            m.score_images(&[&img]).unwrap(),
            back.score_images(&[&img]).unwrap()
        );
    }

    #[test]
    fn indivisible_input_is_error() {
        let m = init_selector(&tiny()).unwrap();
        assert!(m.score_images(&[&image(0, 33)]).is_err());
    }
}
