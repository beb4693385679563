//! Dense float images and separable resampling.
//!
//! Images are stored height × width × channels. Resampling uses half-pixel
//! center alignment: output sample `o` maps to input coordinate
//! `(o + 0.5) * in / out - 0.5`, with clamp-to-edge at the borders.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{bail, DprError, Result};

/// Interpolation kernel used by [`resize`] and friends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
    /// Box filter weighted by exact coverage.
    Area,
}

impl std::str::FromStr for Interpolation {
    type Err = DprError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            "area" => Ok(Self::Area),
            other => bail!(InvalidInput, "unsupported interpolation method `{other}`"),
        }
    }
}

/// A finite-valued H × W × C float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            bail!(InvalidInput, "image dims must be positive, got {h}x{w}x{c}");
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(DprError::NonFinite(format!("image contains {v}")));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            data: Array3::from_elem((height, width, channels), value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.data
    }

    /// Copies the `h × w` region whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height() || x + w > self.width() || h == 0 || w == 0 {
            bail!(
                Shape,
                "crop {h}x{w} at ({y},{x}) outside {}x{}",
                self.height(),
                self.width()
            );
        }
        Ok(Self {
            data: self.data.slice(s![y..y + h, x..x + w, ..]).to_owned(),
        })
    }

    /// Writes `tile` into this image with its top-left corner at `(y, x)`.
    pub fn paste(&mut self, tile: &Image, y: usize, x: usize) -> Result<()> {
        let (h, w, c) = tile.dims();
        if y + h > self.height() || x + w > self.width() || c != self.channels() {
            bail!(
                Shape,
                "tile {h}x{w}x{c} at ({y},{x}) does not fit {:?}",
                self.dims()
            );
        }
        self.data
            .slice_mut(s![y..y + h, x..x + w, ..])
            .assign(&tile.data);
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.mapv(f),
        }
    }

    /// Maps [0,1] pixel values to the [-1,1] range used by the diffusion model.
    pub fn to_signed(&self) -> Self {
        self.map(|v| v * 2.0 - 1.0)
    }

    /// Inverse of [`Image::to_signed`], clamped to [0,1].
    pub fn to_unit(&self) -> Self {
        self.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::new(data)
    }

    /// Saves the image as 8-bit RGB (or grayscale for single-channel images).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.dims();
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match c {
            1 => {
                let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([quant(self.data[[y as usize, x as usize, 0]])])
                });
                buf.save(path)?;
            }
            3 => {
                let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let (y, x) = (y as usize, x as usize);
                    image::Rgb([
                        quant(self.data[[y, x, 0]]),
                        quant(self.data[[y, x, 1]]),
                        quant(self.data[[y, x, 2]]),
                    ])
                });
                buf.save(path)?;
            }
            _ => bail!(InvalidInput, "cannot save {c}-channel image as png"),
        }
        Ok(())
    }
}

/// Sparse interpolation weights for one output sample along one axis.
type Taps = Vec<(usize, f64)>;

fn cubic_weight(x: f64) -> f64 {
    // Keys kernel, a = -0.5.
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x.powi(2) + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn axis_taps(in_len: usize, out_len: usize, method: Interpolation) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (0..out_len)
        .map(|o| match method {
            Interpolation::Nearest => {
                let src = ((o as f64 + 0.5) * scale).floor() as isize;
                vec![(clamp(src), 1.0)]
            }
            Interpolation::Bilinear => {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = x.floor() as isize;
                let frac = x - i0 as f64;
                vec![(clamp(i0), 1.0 - frac), (clamp(i0 + 1), frac)]
            }
            Interpolation::Bicubic => {
                let x = (o as f64 + 0.5) * scale - 0.5;
                let i0 = x.floor() as isize;
                let frac = x - i0 as f64;
                (-1..=2)
                    .map(|k| (clamp(i0 + k), cubic_weight(frac - k as f64)))
                    .collect()
            }
            Interpolation::Area => {
                let lo = o as f64 * scale;
                let hi = (o as f64 + 1.0) * scale;
                let first = lo.floor() as usize;
                let end = (hi.ceil() as usize).min(in_len);
                (first..end)
                    .filter_map(|i| {
                        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        (overlap > 0.0).then_some((i, overlap / scale))
                    })
                    .collect()
            }
        })
        .collect()
}

/// Resamples a single plane to `out_h × out_w`.
pub fn resample_plane(
    plane: ArrayView2<f64>,
    out_h: usize,
    out_w: usize,
    method: Interpolation,
) -> Array2<f64> {
    let (in_h, in_w) = plane.dim();
    let row_taps = axis_taps(in_w, out_w, method);
    let col_taps = axis_taps(in_h, out_h, method);

    let mut horiz = Array2::<f64>::zeros((in_h, out_w));
    for y in 0..in_h {
        for (ox, taps) in row_taps.iter().enumerate() {
            horiz[[y, ox]] = taps.iter().map(|&(i, w)| w * plane[[y, i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (oy, taps) in col_taps.iter().enumerate() {
        for ox in 0..out_w {
            out[[oy, ox]] = taps.iter().map(|&(i, w)| w * horiz[[i, ox]]).sum();
        }
    }
    out
}

/// Resizes every channel of `img` to `out_h × out_w`; results are clamped to
/// the input's value range so cubic overshoot never leaves it.
pub fn resize(img: &Image, out_h: usize, out_w: usize, method: Interpolation) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        bail!(InvalidInput, "resize target must be positive");
    }
    let (h, w, c) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let (lo, hi) = img.min_max();
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for ch in 0..c {
        let plane = img.pixels().index_axis(Axis(2), ch).mapv(f64::from);
        let res = resample_plane(plane.view(), out_h, out_w, method);
        out.index_axis_mut(Axis(2), ch)
            .assign(&res.mapv(|v| (v as f32).clamp(lo, hi)));
    }
    Image::new(out)
}

/// Upscales a patch by an integer factor `k`.
pub fn enlarge(patch: &Image, k: usize, method: Interpolation) -> Result<Image> {
    if k == 0 {
        bail!(InvalidInput, "enlarge factor must be >= 1");
    }
    if method == Interpolation::Area {
        bail!(InvalidInput, "area interpolation is not an enlarge method");
    }
    resize(patch, patch.height() * k, patch.width() * k, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((h, w, 2), |(y, x, c)| {
            ((y * w + x) as f32 / (h * w) as f32 + c as f32 * 0.1).min(1.0)
        }))
        .unwrap()
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Array3::<f32>::zeros((2, 2, 1));
        a[[0, 1, 0]] = f32::NAN;
        assert!(matches!(Image::new(a), Err(DprError::NonFinite(_))));
    }

    #[test]
    fn constant_survives_every_method() {
        let img = Image::filled(8, 12, 3, 0.37);
        for m in [
            Interpolation::Nearest,
            Interpolation::Bilinear,
            Interpolation::Bicubic,
            Interpolation::Area,
        ] {
            for (oh, ow) in [(4, 6), (16, 24), (3, 5)] {
                let out = resize(&img, oh, ow, m).unwrap();
                assert!(out.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-6), "{m:?}");
            }
        }
    }

    #[test]
    fn nearest_enlarge_duplicates_columns() {
        let p = Image::new(array![[[0.0f32], [1.0]], [[0.0], [1.0]]]).unwrap();
        let out = enlarge(&p, 2, Interpolation::Nearest).unwrap();
        let got: Vec<f32> = out.pixels().iter().copied().collect();
        let row = [0.0, 0.0, 1.0, 1.0];
        let expected: Vec<f32> = row.iter().cycle().take(16).copied().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn k_one_is_identity() {
        let img = ramp(5, 7);
        for m in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
            assert_eq!(enlarge(&img, 1, m).unwrap(), img);
        }
    }

    #[test]
    fn area_downsample_is_block_mean() {
        let img = ramp(4, 4);
        let out = resize(&img, 2, 2, Interpolation::Area).unwrap();
        let src = img.pixels();
        let mean = (src[[0, 0, 0]] + src[[0, 1, 0]] + src[[1, 0, 0]] + src[[1, 1, 0]]) / 4.0;
        assert!((out.pixels()[[0, 0, 0]] - mean).abs() < 1e-6);
    }

    #[test]
    fn bicubic_stays_in_range() {
        let mut a = Array3::<f32>::zeros((4, 4, 1));
        a[[1, 1, 0]] = 1.0;
        let img = Image::new(a).unwrap();
        let out = enlarge(&img, 4, Interpolation::Bicubic).unwrap();
        let (lo, hi) = out.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn area_not_an_enlarge_method() {
        assert!(enlarge(&ramp(2, 2), 2, Interpolation::Area).is_err());
        assert!("lanczos".parse::<Interpolation>().is_err());
    }

    #[test]
    fn crop_paste_roundtrip() {
        let img = ramp(6, 6);
        let tile = img.crop(2, 4, 3, 2).unwrap();
        let mut blank = Image::zeros(6, 6, 2);
        blank.paste(&tile, 2, 4).unwrap();
        assert_eq!(blank.crop(2, 4, 3, 2).unwrap(), tile);
        assert!(img.crop(5, 5, 2, 2).is_err());
    }
}
