//! Window-based multi-head self-attention with optional half-window cyclic shift.
//!
//! Features are channels-last `[B, H, W, C]`. Sides not divisible by the window
//! are zero-padded; padded keys are masked out of the softmax.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

use crate::error::{bail, Result};

const MASKED: f32 = -1e9;

#[derive(Clone, Debug)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    /// `[(2w-1)^2, heads]`, absent when relative position terms are disabled.
    bias_table: Option<Tensor>,
    dim: usize,
    num_heads: usize,
    window: usize,
}

/// Per-call window geometry after clamping to the feature size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    window: usize,
    shift: usize,
    padded_h: usize,
    padded_w: usize,
}

impl Geometry {
    fn new(h: usize, w: usize, window: usize, shifted: bool) -> Self {
        // A window covering the whole feature degenerates to global attention.
        let (window, shift) = if window >= h.max(w) {
            (h.max(w), 0)
        } else if shifted {
            (window, window / 2)
        } else {
            (window, 0)
        };
        Self {
            window,
            shift,
            padded_h: h.div_ceil(window) * window,
            padded_w: w.div_ceil(window) * window,
        }
    }

    fn windows(&self) -> (usize, usize) {
        (self.padded_h / self.window, self.padded_w / self.window)
    }
}

impl WindowAttention {
    pub fn new(
        dim: usize,
        num_heads: usize,
        window: usize,
        relative_position_bias: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            bail!(Shape, "{num_heads} heads do not divide channel width {dim}");
        }
        if window == 0 {
            bail!(InvalidInput, "window size must be positive");
        }
        let bias_table = if relative_position_bias {
            let n = (2 * window - 1) * (2 * window - 1);
            Some(vb.get_with_hints(
                (n, num_heads),
                "relative_position_bias_table",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.02,
                },
            )?)
        } else {
            None
        };
        Ok(Self {
            qkv: candle_nn::linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: candle_nn::linear(dim, dim, vb.pp("proj"))?,
            bias_table,
            dim,
            num_heads,
            window,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    fn relative_bias(&self, window: usize, device: &Device) -> Result<Option<Tensor>> {
        let Some(table) = &self.bias_table else {
            return Ok(None);
        };
        // Clamped windows index a sub-range of the full table.
        let span = 2 * self.window - 1;
        let n = window * window;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            let (yi, xi) = ((i / window) as isize, (i % window) as isize);
            for j in 0..n {
                let (yj, xj) = ((j / window) as isize, (j % window) as isize);
                let dy = (yi - yj + self.window as isize - 1) as usize;
                let dx = (xi - xj + self.window as isize - 1) as usize;
                index.push((dy * span + dx) as u32);
            }
        }
        let index = Tensor::from_vec(index, n * n, device)?;
        let bias = table
            .index_select(&index, 0)?
            .reshape((n, n, self.num_heads))?
            .permute((2, 0, 1))?;
        Ok(Some(bias))
    }

    /// Additive mask `[nW, N, N]` for shifted-region boundaries and padding.
    fn attention_mask(
        h: usize,
        w: usize,
        g: Geometry,
        dtype: DType,
        device: &Device,
    ) -> Result<Option<Tensor>> {
        if g.shift == 0 && g.padded_h == h && g.padded_w == w {
            return Ok(None);
        }
        let (nwh, nww) = g.windows();
        let n = g.window * g.window;
        let region = |p: usize, len: usize| -> usize {
            if g.shift == 0 || p < len - g.window {
                0
            } else if p < len - g.shift {
                1
            } else {
                2
            }
        };
        let mut mask = vec![0f32; nwh * nww * n * n];
        let mut meta = vec![(0usize, false); n];
        for wy in 0..nwh {
            for wx in 0..nww {
                for (t, m) in meta.iter_mut().enumerate() {
                    let y = wy * g.window + t / g.window;
                    let x = wx * g.window + t % g.window;
                    let oy = (y + g.shift) % g.padded_h;
                    let ox = (x + g.shift) % g.padded_w;
                    *m = (
                        region(y, g.padded_h) * 3 + region(x, g.padded_w),
                        oy >= h || ox >= w,
                    );
                }
                let base = (wy * nww + wx) * n * n;
                for i in 0..n {
                    for j in 0..n {
                        if meta[i].0 != meta[j].0 || meta[j].1 {
                            mask[base + i * n + j] = MASKED;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(mask, (nwh * nww, n, n), device)?.to_dtype(dtype)?;
        Ok(Some(t))
    }

    pub fn forward(&self, x: &Tensor, shifted: bool) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.dim {
            bail!(Shape, "attention expects {} channels, got {c}", self.dim);
        }
        let g = Geometry::new(h, w, self.window, shifted);
        let mut x = x.clone();
        if g.padded_h > h {
            x = x.pad_with_zeros(1, 0, g.padded_h - h)?;
        }
        if g.padded_w > w {
            x = x.pad_with_zeros(2, 0, g.padded_w - w)?;
        }
        if g.shift > 0 {
            x = x
                .roll(-(g.shift as i32), 1)?
                .roll(-(g.shift as i32), 2)?;
        }
        let (nwh, nww) = g.windows();
        let n = g.window * g.window;
        let windows = x
            .reshape((b, nwh, g.window, nww, g.window, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b * nwh * nww, n, c))?;

        let head_dim = c / self.num_heads;
        let qkv = self
            .qkv
            .forward(&windows)?
            .reshape((b * nwh * nww, n, 3, self.num_heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (head_dim as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?)?;
        if let Some(bias) = self.relative_bias(g.window, x.device())? {
            attn = attn.broadcast_add(&bias.unsqueeze(0)?)?;
        }
        if let Some(mask) = Self::attention_mask(h, w, g, x.dtype(), x.device())? {
            attn = attn
                .reshape((b, nwh * nww, self.num_heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b * nwh * nww, self.num_heads, n, n))?;
        }
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b * nwh * nww, n, c))?;
        let out = self.proj.forward(&out)?;

        let mut out = out
            .reshape((b, nwh, nww, g.window, g.window, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, g.padded_h, g.padded_w, c))?;
        if g.shift > 0 {
            out = out.roll(g.shift as i32, 1)?.roll(g.shift as i32, 2)?;
        }
        if g.padded_h > h || g.padded_w > w {
            out = out.narrow(1, 0, h)?.narrow(2, 0, w)?;
        }
        Ok(out.contiguous()?)
    }

    /// Multiply-accumulate count for one call on an `h × w` feature.
    pub fn macs(&self, h: usize, w: usize, shifted: bool) -> f64 {
        let g = Geometry::new(h, w, self.window, shifted);
        let tokens = (g.padded_h * g.padded_w) as f64;
        let n = (g.window * g.window) as f64;
        let d = self.dim as f64;
        tokens * (4.0 * d * d + 2.0 * n * d)
    }
}

/// Applies `attn` over non-overlapping windows of `feature`, shifting by half
/// a window first when `shifted` is set.
pub fn window_attention(feature: &Tensor, shifted: bool, attn: &WindowAttention) -> Result<Tensor> {
    attn.forward(feature, shifted)
}
