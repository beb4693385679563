//! Deterministic synthetic scenes: bright textured shapes on a dark noisy ground.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, ImageSample};
use crate::error::{bail, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

impl ShapeKind {
    pub fn class_id(self) -> u32 {
        match self {
            Self::Rectangle => 0,
            Self::Disc => 1,
        }
    }
}

/// Scene generator parameters. Object sides are integers drawn uniformly
/// from `min_size..=max_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub background: f32,
    pub noise_level: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 4,
            max_size: 8,
            background: 0.15,
            noise_level: 0.08,
        }
    }
}

fn uniform_moments(lo: usize, hi: usize) -> (f64, f64) {
    let n = (hi - lo + 1) as f64;
    let mean = (lo + hi) as f64 / 2.0;
    let var = (n * n - 1.0) / 12.0;
    (mean, var + mean * mean)
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            bail!(InvalidInput, "scene dims must be positive");
        }
        if self.min_objects > self.max_objects || self.min_size == 0 || self.min_size > self.max_size {
            bail!(InvalidInput, "object count/size ranges are inverted or empty: {self:?}");
        }
        if self.max_objects > 0 && self.max_size > self.width.min(self.height) {
            bail!(
                InvalidInput,
                "objects up to {} px do not fit a {}x{} image",
                self.max_size,
                self.width,
                self.height
            );
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.noise_level) {
            bail!(InvalidInput, "background and noise level must lie in [0,1]");
        }
        Ok(())
    }

    /// Expected box-area fraction per image, ignoring overlaps.
    pub fn expected_object_fraction(&self) -> f64 {
        let mean_count = (self.min_objects + self.max_objects) as f64 / 2.0;
        let (m1, m2) = uniform_moments(self.min_size, self.max_size);
        // Rectangles draw w and h independently, discs use one diameter.
        let mean_area = 0.5 * m1 * m1 + 0.5 * m2;
        mean_count * mean_area / (self.width * self.height) as f64
    }

    /// Picks the integer size range whose expected fraction is closest to `target`.
    pub fn with_target_ratio(mut self, target: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&target) || self.max_objects == 0 {
            bail!(InvalidInput, "cannot target ratio {target} with this object count");
        }
        let side = self.width.min(self.height);
        let mut best: Option<(f64, usize, usize)> = None;
        for lo in 1..=side {
            for hi in lo..=(lo + lo / 2 + 1).min(side) {
                let cand = Self {
                    min_size: lo,
                    max_size: hi,
                    ..self.clone()
                };
                let err = (cand.expected_object_fraction() - target).abs();
                if best.map_or(true, |(e, _, _)| err < e) {
                    best = Some((err, lo, hi));
                }
            }
        }
        let (_, lo, hi) = best.expect("non-empty search");
        self.min_size = lo;
        self.max_size = hi;
        self.validate()?;
        Ok(self)
    }
}

/// Renders one scene. Identical `(config, seed)` pairs give identical samples.
pub fn generate_synthetic_scene(config: &SceneConfig, seed: u64) -> Result<ImageSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let noise = config.noise_level;
    let mut pixels = Array3::from_shape_fn((h, w, 3), |_| {
        let n = if noise > 0.0 {
            rng.gen_range(-noise..=noise)
        } else {
            0.0
        };
        (config.background + n).clamp(0.0, 1.0)
    });

    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = if rng.gen_bool(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Disc
        };
        let ow = rng.gen_range(config.min_size..=config.max_size);
        let oh = match kind {
            ShapeKind::Rectangle => rng.gen_range(config.min_size..=config.max_size),
            ShapeKind::Disc => ow,
        };
        let x0 = rng.gen_range(0..=w - ow);
        let y0 = rng.gen_range(0..=h - oh);
        // Bright base colour: one channel saturated, others random.
        let hot = rng.gen_range(0..3);
        let mut color = [0f32; 3];
        for (c, v) in color.iter_mut().enumerate() {
            *v = if c == hot { 1.0 } else { rng.gen_range(0.55..1.0) };
        }
        let texture = rng.gen_range(0..3u8);
        let (cx, cy, r2) = (
            x0 as f64 + ow as f64 / 2.0,
            y0 as f64 + oh as f64 / 2.0,
            (ow as f64 / 2.0).powi(2),
        );
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y0 + oh {
            for x in x0..x0 + ow {
                if kind == ShapeKind::Disc {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy > r2 {
                        continue;
                    }
                }
                let dim = match texture {
                    0 => false,
                    1 => (y - y0) % 2 == 1,
                    _ => ((x - x0) + (y - y0)) % 2 == 1,
                };
                let k = if dim { 0.75 } else { 1.0 };
                for c in 0..3 {
                    pixels[[y, x, c]] = color[c] * k;
                }
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
        if bx0 < bx1 {
            boxes.push(BoundingBox::new(
                bx0 as f64,
                by0 as f64,
                bx1 as f64,
                by1 as f64,
                kind.class_id(),
            )?);
        }
    }
    ImageSample::new(format!("scene{seed:06}"), Image::new(pixels)?, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::object_pixel_ratio;

    #[test]
    fn zero_objects_is_background() {
        let cfg = SceneConfig {
            min_objects: 0,
            max_objects: 0,
            noise_level: 0.0,
            ..SceneConfig::default()
        };
        let s = generate_synthetic_scene(&cfg, 3).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.image.pixels().iter().all(|&v| v == cfg.background));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        let a = generate_synthetic_scene(&cfg, 42).unwrap();
        let b = generate_synthetic_scene(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&cfg, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn oversized_objects_rejected() {
        let cfg = SceneConfig {
            max_size: 100,
            ..SceneConfig::default()
        };
        assert!(generate_synthetic_scene(&cfg, 0).is_err());
    }

    #[test]
    fn boxes_are_tight_and_bright() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = generate_synthetic_scene(&cfg, seed).unwrap();
            let b = s.boxes[0];
            let px = s.image.pixels();
            let top = (b.x_min as usize..b.x_max as usize)
                .any(|x| px[[b.y_min as usize, x, 0]].max(px[[b.y_min as usize, x, 1]]) > 0.5);
            assert!(top, "top row of box {b:?} has no object pixel");
        }
    }

    #[test]
    fn targeted_ratio_is_met_on_average() {
        let target = 0.012;
        let cfg = SceneConfig::default().with_target_ratio(target).unwrap();
        let n = 1000;
        let mean: f64 = (0..n)
            .map(|seed| object_pixel_ratio(&generate_synthetic_scene(&cfg, seed).unwrap()))
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean - target).abs() <= 0.2 * target,
            "mean ratio {mean} vs target {target} ({cfg:?})"
        );
    }
}
