//! Pixel-level reconstruction metrics.

use ndarray::{Array2, ArrayView2};

use crate::error::{bail, Result};
use crate::imaging::Image;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        bail!(Shape, "image dims differ: {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.pixels().len().max(1) as f64;
    Ok(a.pixels()
        .iter()
        .zip(b.pixels().iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        bail!(InvalidInput, "max_val must be positive");
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// Odd window side.
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range `L`.
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable weighted filtering over the valid region only.
fn filter_valid(x: ArrayView2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, x0)| {
        (0..n).map(|i| k[i] * x[[y, x0 + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(y0, x0)| {
        (0..n).map(|i| k[i] * rows[[y0 + i, x0]]).sum::<f64>()
    })
}

fn ssim_plane(a: ArrayView2<f64>, b: ArrayView2<f64>, k: &[f64], c1: f64, c2: f64) -> f64 {
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let aa = filter_valid((&a * &a).view(), k);
    let bb = filter_valid((&b * &b).view(), k);
    let ab = filter_valid((&a * &b).view(), k);
    let mut total = 0.0;
    for (((ma, mb), (saa, sbb)), sab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()))
        .zip(ab.iter())
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean structural similarity over Gaussian-weighted windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    check_dims(a, b)?;
    if params.window == 0 || params.window % 2 == 0 {
        bail!(InvalidInput, "ssim window must be odd, got {}", params.window);
    }
    let (h, w, c) = a.dims();
    if h < params.window || w < params.window {
        bail!(Shape, "{h}x{w} image is smaller than the {} window", params.window);
    }
    let k = gaussian_kernel(params.window, params.sigma);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = a.pixels().index_axis(ndarray::Axis(2), ch).mapv(f64::from);
        let pb = b.pixels().index_axis(ndarray::Axis(2), ch).mapv(f64::from);
        total += ssim_plane(pa.view(), pb.view(), &k, c1, c2);
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn noise_image(side: usize, seed: u64) -> Image {
        let mut s = seed;
        Image::new(Array3::from_shape_fn((side, side, 3), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        }))
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, 3, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Image::filled(8, 8, 3, 0.25);
        let c = Image::filled(8, 8, 3, 0.35);
        // 0.1 is not exact in binary; the tolerance covers f32 rounding.
        assert!((psnr(&b, &c, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let x = noise_image(8, 1);
        let y = noise_image(8, 2);
        assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        assert!(psnr(&x, &Image::zeros(4, 4, 3), 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = Image::filled(16, 16, 3, 0.5);
        let noise = noise_image(16, 3).map(|v| v - 0.5);
        let values: Vec<f64> = [0.05f32, 0.1, 0.2, 0.4, 0.8]
            .iter()
            .map(|&amp| {
                let mut noisy = base.clone();
                noisy
                    .pixels_mut()
                    .zip_mut_with(noise.pixels(), |p, &n| *p += amp * n);
                psnr(&base, &noisy, 1.0).unwrap()
            })
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn ssim_examples() {
        let p = SsimParams::default();
        let a = noise_image(16, 4);
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        let checker = Image::new(Array3::from_shape_fn((16, 16, 3), |(y, x, _)| {
            ((y + x) % 2) as f32
        }))
        .unwrap();
        let inverted = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &inverted, &p).unwrap() < 0.5);
        assert!(ssim(&Image::zeros(5, 5, 1), &Image::zeros(5, 5, 1), &p).is_err());
        let even = SsimParams { window: 6, ..p };
        assert!(ssim(&a, &a, &even).is_err());
    }

    #[test]
    fn ssim_is_shift_invariant() {
        let p = SsimParams::default();
        let a = noise_image(24, 5);
        let b = a.map(|v| (v * 0.8 + 0.1).min(1.0)).map(|v| v * v);
        let base = ssim(&a.crop(2, 3, 18, 18).unwrap(), &b.crop(2, 3, 18, 18).unwrap(), &p).unwrap();
        // Shifting both images by the same offset before cropping to the same support.
        let shift = |img: &Image| -> Image {
            let mut out = Image::zeros(24, 24, 3);
            out.paste(&img.crop(0, 0, 21, 22).unwrap(), 3, 2).unwrap();
            out
        };
        let shifted = ssim(
            &shift(&a).crop(5, 5, 18, 18).unwrap(),
            &shift(&b).crop(5, 5, 18, 18).unwrap(),
            &p,
        )
        .unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }
}
