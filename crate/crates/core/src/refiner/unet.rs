//! Three-level convolutional encoder-decoder noise predictor.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Init, Linear, VarBuilder};

use super::RefinerConfig;
use crate::error::{bail, Result};
use crate::nn::silu;

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: candle_core::DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

fn conv3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, 3, cfg, vb)?)
}

fn conv_macs(h: usize, w: usize, k: usize, cin: usize, cout: usize) -> f64 {
    (h * w * k * k * cin * cout) as f64
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cin: usize,
    cout: usize,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, tdim: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let skip = if cin != cout {
            Some(candle_nn::conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: candle_nn::group_norm(groups.min(cin), cin, 1e-5, vb.pp("norm1"))?,
            conv1: conv3(cin, cout, 1, vb.pp("conv1"))?,
            time: candle_nn::linear(tdim, 2 * cout, vb.pp("time"))?,
            norm2: candle_nn::group_norm(groups.min(cout), cout, 1e-5, vb.pp("norm2"))?,
            conv2: conv3(cout, cout, 1, vb.pp("conv2"))?,
            skip,
            cin,
            cout,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        // Timestep scale and shift applied after the second normalization.
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let scale = (t.narrow(1, 0, self.cout)? + 1.0)?;
        let shift = t.narrow(1, self.cout, self.cout)?;
        let h = self.norm2.forward(&h)?.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }

    fn macs(&self, h: usize, w: usize, tdim: usize) -> f64 {
        let mut m = conv_macs(h, w, 3, self.cin, self.cout)
            + conv_macs(h, w, 3, self.cout, self.cout)
            + (tdim * 2 * self.cout) as f64;
        if self.skip.is_some() {
            m += conv_macs(h, w, 1, self.cin, self.cout);
        }
        m
    }
}

#[derive(Clone, Debug)]
pub(crate) struct UNet {
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    mid0: ResBlock,
    mid1: ResBlock,
    up1: Conv2d,
    dec1: ResBlock,
    up0: Conv2d,
    dec0: ResBlock,
    out_norm: GroupNorm,
    output: Conv2d,
    widths: [usize; 3],
    embed_dim: usize,
    channels: usize,
}

impl UNet {
    pub(crate) fn new(cfg: &RefinerConfig, vb: VarBuilder) -> Result<Self> {
        let [c0, c1, c2] = cfg.widths;
        let c = cfg.channels;
        let e = cfg.time_embed_dim;
        let td = 4 * c0;
        let g = cfg.groups;
        for w in cfg.widths {
            if w % g.min(w) != 0 {
                bail!(Config, "refiner width {w} is not divisible by {g} groups");
            }
        }
        let zero = Init::Const(0.0);
        let out_vb = vb.pp("output");
        let output = Conv2d::new(
            out_vb.get_with_hints((c, c0, 3, 3), "weight", zero)?,
            Some(out_vb.get_with_hints(c, "bias", zero)?),
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
        );
        Ok(Self {
            time1: candle_nn::linear(e, td, vb.pp("time1"))?,
            time2: candle_nn::linear(td, td, vb.pp("time2"))?,
            input: conv3(2 * c, c0, 1, vb.pp("input"))?,
            enc0: ResBlock::new(c0, c0, td, g, vb.pp("enc0"))?,
            down0: conv3(c0, c1, 2, vb.pp("down0"))?,
            enc1: ResBlock::new(c1, c1, td, g, vb.pp("enc1"))?,
            down1: conv3(c1, c2, 2, vb.pp("down1"))?,
            mid0: ResBlock::new(c2, c2, td, g, vb.pp("mid0"))?,
            mid1: ResBlock::new(c2, c2, td, g, vb.pp("mid1"))?,
            up1: conv3(c2, c1, 1, vb.pp("up1"))?,
            dec1: ResBlock::new(2 * c1, c1, td, g, vb.pp("dec1"))?,
            up0: conv3(c1, c0, 1, vb.pp("up0"))?,
            dec0: ResBlock::new(2 * c0, c0, td, g, vb.pp("dec0"))?,
            out_norm: candle_nn::group_norm(g.min(c0), c0, 1e-5, vb.pp("out_norm"))?,
            output,
            widths: cfg.widths,
            embed_dim: e,
            channels: c,
        })
    }

    /// `x`: concatenated `[B, 2C, H, W]` noisy sample and upsampled condition.
    pub(crate) fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        if t.len() != b {
            bail!(Shape, "{} timesteps for a batch of {b}", t.len());
        }
        if h % 4 != 0 || w % 4 != 0 {
            bail!(Shape, "refiner input {h}x{w} must be divisible by 4");
        }
        let temb = timestep_embedding(t, self.embed_dim, x.dtype())?;
        let temb = self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?;
        let temb = silu(&temb)?;

        let h0 = self.enc0.forward(&self.input.forward(x)?, &temb)?;
        let h1 = self.enc1.forward(&self.down0.forward(&h0)?, &temb)?;
        let m = self.down1.forward(&h1)?;
        let m = self.mid1.forward(&self.mid0.forward(&m, &temb)?, &temb)?;
        let u1 = self.up1.forward(&m.upsample_nearest2d(h / 2, w / 2)?)?;
        let d1 = self.dec1.forward(&Tensor::cat(&[&u1, &h1], 1)?, &temb)?;
        let u0 = self.up0.forward(&d1.upsample_nearest2d(h, w)?)?;
        let d0 = self.dec0.forward(&Tensor::cat(&[&u0, &h0], 1)?, &temb)?;
        Ok(self.output.forward(&silu(&self.out_norm.forward(&d0)?)?)?)
    }

    /// Multiply-accumulates for one forward pass on an `h × w` sample.
    pub(crate) fn macs(&self, h: usize, w: usize) -> f64 {
        let [c0, c1, c2] = self.widths;
        let td = 4 * c0;
        let c = self.channels;
        let (h1, w1, h2, w2) = (h / 2, w / 2, h / 4, w / 4);
        (self.embed_dim * td + td * td) as f64
            + conv_macs(h, w, 3, 2 * c, c0)
            + self.enc0.macs(h, w, td)
            + conv_macs(h1, w1, 3, c0, c1)
            + self.enc1.macs(h1, w1, td)
            + conv_macs(h2, w2, 3, c1, c2)
            + self.mid0.macs(h2, w2, td)
            + self.mid1.macs(h2, w2, td)
            + conv_macs(h1, w1, 3, c2, c1)
            + self.dec1.macs(h1, w1, td)
            + conv_macs(h, w, 3, c1, c0)
            + self.dec0.macs(h, w, td)
            + conv_macs(h, w, 3, c0, c)
    }
}
