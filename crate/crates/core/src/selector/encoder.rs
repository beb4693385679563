//! Hierarchical windowed-attention encoder producing three feature scales.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

use super::attention::WindowAttention;
use super::SelectorConfig;
use crate::error::{bail, Result};
use crate::nn::LayerNorm;

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(dim, hidden, vb.pp("fc1"))?,
            fc2: candle_nn::linear(hidden, dim, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?)
    }
}

/// Pre-norm transformer block around (shifted) window attention.
#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    shifted: bool,
    hidden: usize,
}

impl Block {
    fn new(dim: usize, shifted: bool, cfg: &SelectorConfig, vb: VarBuilder) -> Result<Self> {
        let hidden = ((dim as f64) * cfg.mlp_ratio).round().max(1.0) as usize;
        Ok(Self {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn: WindowAttention::new(
                dim,
                cfg.num_heads,
                cfg.window_size,
                cfg.relative_position_bias,
                vb.pp("attn"),
            )?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, hidden, vb.pp("mlp"))?,
            shifted,
            hidden,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.attn.forward(&self.norm1.forward(x)?, self.shifted)?;
        let x = (x + y)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }

    fn macs(&self, h: usize, w: usize, dim: usize) -> f64 {
        self.attn.macs(h, w, self.shifted) + (h * w) as f64 * 2.0 * (dim * self.hidden) as f64
    }
}

/// 2×2 neighbourhood concat, norm, and linear projection 4C → 2C.
#[derive(Clone, Debug)]
struct FeatureMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl FeatureMerging {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(4 * dim, vb.pp("norm"))?,
            reduction: candle_nn::linear_no_bias(4 * dim, 2 * dim, vb.pp("reduction"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let mut x = x.clone();
        if h % 2 == 1 {
            x = x.pad_with_zeros(1, 0, 1)?;
        }
        if w % 2 == 1 {
            x = x.pad_with_zeros(2, 0, 1)?;
        }
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        // [B, h2, 2, w2, 2, C] -> [B, h2, w2, (dx, dy, C)]
        let x = x
            .reshape((b, h2, 2, w2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .reshape((b, h2, w2, 4 * c))?;
        Ok(self.reduction.forward(&self.norm.forward(&x)?)?)
    }
}

/// One transformer layer: optional merging, then alternating W-MSA / SW-MSA blocks.
#[derive(Clone, Debug)]
struct TransformerLayer {
    merge: Option<FeatureMerging>,
    blocks: Vec<Block>,
    out_dim: usize,
}

impl TransformerLayer {
    fn new(in_dim: usize, merge: bool, cfg: &SelectorConfig, vb: VarBuilder) -> Result<Self> {
        let (merge, dim) = if merge {
            (Some(FeatureMerging::new(in_dim, vb.pp("merge"))?), 2 * in_dim)
        } else {
            (None, in_dim)
        };
        let blocks = (0..cfg.tl_depth)
            .map(|j| {
                let shifted = cfg.shifted_windows && j % 2 == 1;
                Block::new(dim, shifted, cfg, vb.pp(format!("block{j}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            merge,
            blocks,
            out_dim: dim,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = match &self.merge {
            Some(m) => m.forward(x)?,
            None => x.clone(),
        };
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }
}

/// Feature maps at the three output scales, channels-last `[B, h, w, c]`, fine to coarse.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn r1(&self) -> &Tensor {
        &self.levels[0]
    }

    pub fn r2(&self) -> &Tensor {
        &self.levels[1]
    }

    pub fn r3(&self) -> &Tensor {
        &self.levels[2]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    embed: Conv2d,
    embed_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
    stride: usize,
    in_channels: usize,
}

impl Encoder {
    pub(crate) fn new(cfg: &SelectorConfig, vb: VarBuilder) -> Result<Self> {
        let conv_cfg = Conv2dConfig {
            stride: cfg.embed_stride,
            ..Default::default()
        };
        let embed = candle_nn::conv2d(
            cfg.image_channels,
            cfg.embed_channels,
            cfg.embed_stride,
            conv_cfg,
            vb.pp("embed"),
        )?;
        let embed_norm = LayerNorm::new(cfg.embed_channels, vb.pp("embed_norm"))?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut dim = cfg.embed_channels;
        for i in 0..cfg.num_layers {
            let layer = TransformerLayer::new(dim, i > 0, cfg, vb.pp(format!("layer{i}")))?;
            dim = layer.out_dim;
            layers.push(layer);
        }
        Ok(Self {
            embed,
            embed_norm,
            layers,
            stride: cfg.embed_stride,
            in_channels: cfg.image_channels,
        })
    }

    pub(crate) fn output_dims(&self) -> Vec<usize> {
        let n = self.layers.len();
        self.layers[n - 3..].iter().map(|l| l.out_dim).collect()
    }

    /// `images`: `[B, C, H, W]`.
    pub(crate) fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.in_channels {
            bail!(Shape, "encoder expects {} channels, got {c}", self.in_channels);
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            bail!(Shape, "image {h}x{w} not divisible by embed stride {}", self.stride);
        }
        let x = self.embed.forward(images)?.permute((0, 2, 3, 1))?.contiguous()?;
        let mut x = self.embed_norm.forward(&x)?;
        let n = self.layers.len();
        let mut levels = Vec::with_capacity(3);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 3 >= n {
                levels.push(x.clone());
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub(crate) fn macs(&self, h: usize, w: usize) -> f64 {
        let (mut th, mut tw) = (h / self.stride, w / self.stride);
        let mut dim = self.embed_norm_dim();
        let mut macs = (th * tw) as f64 * (self.in_channels * self.stride * self.stride * dim) as f64;
        for layer in &self.layers {
            if layer.merge.is_some() {
                th = th.div_ceil(2);
                tw = tw.div_ceil(2);
                macs += (th * tw) as f64 * (4 * dim * 2 * dim) as f64;
                dim *= 2;
            }
            macs += layer.blocks.iter().map(|b| b.macs(th, tw, dim)).sum::<f64>();
        }
        macs
    }

    fn embed_norm_dim(&self) -> usize {
        self.layers[0].out_dim
    }
}
