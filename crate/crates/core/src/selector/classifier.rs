//! Patch classifier: cross-attention between patch features and learnable
//! class tokens, followed by a per-scale MLP head.
//!
//! Queries come from the patches and keys/values from the tokens. With a
//! single token the attention output would be the same for every patch, so
//! each scale carries one token per class and adds the patch feature back
//! before the head.

use candle_core::{Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

use crate::error::{bail, Result};
use crate::nn::LayerNorm;

#[derive(Clone, Debug)]
struct ScaleHead {
    norm: LayerNorm,
    tokens: Tensor,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
    residual: bool,
}

impl ScaleHead {
    fn new(dim: usize, num_tokens: usize, residual: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(dim, vb.pp("norm"))?,
            tokens: vb.get_with_hints(
                (num_tokens, dim),
                "class_tokens",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.02,
                },
            )?,
            wq: candle_nn::linear(dim, dim, vb.pp("wq"))?,
            wk: candle_nn::linear(dim, dim, vb.pp("wk"))?,
            wv: candle_nn::linear(dim, dim, vb.pp("wv"))?,
            fc1: candle_nn::linear(dim, dim, vb.pp("mlp.fc1"))?,
            fc2: candle_nn::linear(dim, 2, vb.pp("mlp.fc2"))?,
            dim,
            residual,
        })
    }

    /// Returns class logits `[B, h, w, 2]`.
    fn forward(&self, r: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = r.dims4()?;
        if c != self.dim {
            bail!(Shape, "classifier expects {} channels, got {c}", self.dim);
        }
        let r = self.norm.forward(&r.reshape((b, h * w, c))?)?;
        let q = self.wq.forward(&r)?;
        let k = self.wk.forward(&self.tokens)?;
        let v = self.wv.forward(&self.tokens)?;
        let scores = (q.broadcast_matmul(&k.t()?)? / (self.dim as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mut a = weights.broadcast_matmul(&v)?;
        if self.residual {
            a = (a + &r)?;
        }
        let logits = self.fc2.forward(&self.fc1.forward(&a)?.gelu()?)?;
        Ok(logits.reshape((b, h, w, 2))?)
    }

    fn macs(&self, patches: usize) -> f64 {
        let d = self.dim as f64;
        let t = self.tokens.dim(0).unwrap_or(1) as f64;
        patches as f64 * (2.0 * d * d + 2.0 * t * d + 2.0 * d)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PatchClassifier {
    heads: Vec<ScaleHead>,
}

impl PatchClassifier {
    pub(crate) fn new(
        dims: &[usize],
        num_tokens: usize,
        residual: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        let heads = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| ScaleHead::new(d, num_tokens, residual, vb.pp(format!("scale{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    /// Class logits for each scale.
    pub(crate) fn logits(&self, levels: &[Tensor]) -> Result<Vec<Tensor>> {
        if levels.len() != self.heads.len() {
            bail!(Shape, "expected {} feature scales, got {}", self.heads.len(), levels.len());
        }
        self.heads
            .iter()
            .zip(levels)
            .map(|(h, r)| h.forward(r))
            .collect()
    }

    pub(crate) fn macs(&self, patches: &[usize]) -> f64 {
        self.heads.iter().zip(patches).map(|(h, &n)| h.macs(n)).sum()
    }
}
