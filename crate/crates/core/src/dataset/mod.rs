//! Annotated images, object-pixel statistics and pyramid patch labels.

mod io;
mod synthetic;

use std::ops::{Bound, RangeBounds};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, DprError, Result};
use crate::imaging::{self, Image, Interpolation};

pub use io::{
    load_annotations, load_dataset_sample, load_labels, load_manifest, save_annotations,
    save_labels, save_manifest, AnnotationRecord, LabelRecord,
};
pub use synthetic::{generate_synthetic_scene, SceneConfig, ShapeKind};

/// Axis-aligned box in continuous pixel coordinates; covers `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: u32,
}

impl BoundingBox {
    /// Builds a box, rejecting zero-area and non-finite boxes.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: u32) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|v| !v.is_finite()) {
            bail!(InvalidInput, "box has non-finite coordinates: {self:?}");
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            bail!(InvalidInput, "degenerate box (zero area): {self:?}");
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Intersection with `[0,w) × [0,h)`, or `None` when it has zero area.
    pub fn clip(&self, height: f64, width: f64) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(width),
            y_max: self.y_max.min(height),
            class_id: self.class_id,
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
            class_id: self.class_id,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
            class_id: self.class_id,
        }
    }
}

/// An image with its ground-truth boxes. Pixel values lie in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub boxes: Vec<BoundingBox>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Image, boxes: Vec<BoundingBox>) -> Result<Self> {
        let id = id.into();
        let (lo, hi) = image.min_max();
        if lo < 0.0 || hi > 1.0 {
            bail!(InvalidInput, "sample `{id}` has pixels outside [0,1]: [{lo}, {hi}]");
        }
        let (h, w) = (image.height() as f64, image.width() as f64);
        for b in &boxes {
            b.validate()
                .map_err(|e| DprError::InvalidInput(format!("sample `{id}`: {e}")))?;
            if b.clip(h, w).is_none() {
                bail!(InvalidInput, "sample `{id}`: box {b:?} lies outside the image");
            }
        }
        Ok(Self { id, image, boxes })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Area of the union of `boxes` clipped to the image, divided by the image area.
pub fn object_pixel_ratio(sample: &ImageSample) -> f64 {
    let (h, w) = (sample.height() as f64, sample.width() as f64);
    let clipped: Vec<BoundingBox> = sample.boxes.iter().filter_map(|b| b.clip(h, w)).collect();
    (union_area(&clipped) / (h * w)).clamp(0.0, 1.0)
}

/// Exact union area by coordinate compression.
fn union_area(boxes: &[BoundingBox]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x_min, b.x_max]).collect();
    let mut ys: Vec<f64> = boxes.iter().flat_map(|b| [b.y_min, b.y_max]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (cx, cy) = (0.5 * (xw[0] + xw[1]), 0.5 * (yw[0] + yw[1]));
            if boxes
                .iter()
                .any(|b| b.x_min <= cx && cx < b.x_max && b.y_min <= cy && cy < b.y_max)
            {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

/// Train/validation split tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub object_pixel_ratio: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Keeps the entries whose object-pixel ratio falls inside `range`, in order.
///
/// `0.0..0.015` selects a far-object subset; `(Excluded(0.0), Included(1.0))`
/// drops images without objects.
pub fn partition_by_ratio(
    manifest: &DatasetManifest,
    range: impl RangeBounds<f64>,
) -> Result<DatasetManifest> {
    let value = |b: Bound<&f64>| match b {
        Bound::Included(v) | Bound::Excluded(v) => Some(*v),
        Bound::Unbounded => None,
    };
    let lo = value(range.start_bound()).unwrap_or(0.0);
    let hi = value(range.end_bound()).unwrap_or(1.0);
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        bail!(InvalidInput, "ratio bounds must satisfy 0 <= low < high <= 1, got {lo}..{hi}");
    }
    Ok(DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| range.contains(&e.object_pixel_ratio))
            .cloned()
            .collect(),
    })
}

/// Shrinks a sample by an integer `factor`, rescaling its boxes by `1/factor`.
pub fn downsample_image(
    sample: &ImageSample,
    factor: usize,
    method: Interpolation,
) -> Result<ImageSample> {
    if factor == 0 {
        bail!(InvalidInput, "downsample factor must be positive");
    }
    let (h, w) = (sample.height(), sample.width());
    if h % factor != 0 || w % factor != 0 {
        bail!(InvalidInput, "image {h}x{w} not divisible by factor {factor}");
    }
    if factor == 1 {
        return Ok(sample.clone());
    }
    let image = imaging::resize(&sample.image, h / factor, w / factor, method)?;
    let inv = 1.0 / factor as f64;
    let boxes = sample.boxes.iter().map(|b| b.scaled(inv)).collect();
    ImageSample::new(sample.id.clone(), image, boxes)
}

/// Binary object-presence grids, ordered fine to coarse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabelPyramid {
    levels: Vec<Array2<u8>>,
}

impl PatchLabelPyramid {
    pub fn from_levels(levels: Vec<Array2<u8>>) -> Result<Self> {
        let p = Self { levels };
        p.check_consistency()?;
        Ok(p)
    }

    pub fn levels(&self) -> &[Array2<u8>] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Array2<u8> {
        &self.levels[i]
    }

    /// Finest grid.
    pub fn y1(&self) -> &Array2<u8> {
        &self.levels[0]
    }

    pub fn y2(&self) -> &Array2<u8> {
        &self.levels[1]
    }

    /// Coarsest grid; this is the grid patches are selected on.
    pub fn y3(&self) -> &Array2<u8> {
        &self.levels[self.levels.len() - 1]
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.nrows()).collect()
    }

    /// Verifies that every coarse cell is 1 exactly when one of its fine children is.
    pub fn check_consistency(&self) -> Result<()> {
        for pair in self.levels.windows(2) {
            let pooled = pool_any(&pair[0], pair[1].nrows())?;
            if pooled != pair[1] {
                bail!(
                    InvalidInput,
                    "label grids {} and {} are inconsistent",
                    pair[0].nrows(),
                    pair[1].nrows()
                );
            }
        }
        Ok(())
    }
}

/// Any-positive-child pooling of a square binary grid down to `coarse × coarse`.
pub fn pool_any(fine: &Array2<u8>, coarse: usize) -> Result<Array2<u8>> {
    let g = fine.nrows();
    if coarse == 0 || g % coarse != 0 || fine.ncols() != g {
        bail!(Shape, "cannot pool {g}x{} grid to {coarse}", fine.ncols());
    }
    let f = g / coarse;
    Ok(Array2::from_shape_fn((coarse, coarse), |(r, c)| {
        let any = (0..f).any(|i| (0..f).any(|j| fine[[r * f + i, c * f + j]] != 0));
        u8::from(any)
    }))
}

/// Marks every cell of each `G × G` grid that overlaps a box with positive area.
pub fn build_pyramid_labels(
    boxes: &[BoundingBox],
    image_dims: (usize, usize),
    grids: &[usize],
) -> Result<PatchLabelPyramid> {
    let (h, w) = image_dims;
    if grids.is_empty() {
        bail!(InvalidInput, "at least one grid size is required");
    }
    for (i, &g) in grids.iter().enumerate() {
        if g == 0 || h % g != 0 || w % g != 0 {
            bail!(InvalidInput, "grid {g} does not divide image dims {h}x{w}");
        }
        if i > 0 && grids[i - 1] % g != 0 {
            bail!(
                InvalidInput,
                "grids must be ordered fine to coarse and nest, got {} then {g}",
                grids[i - 1]
            );
        }
    }
    let clipped: Vec<BoundingBox> = boxes
        .iter()
        .filter_map(|b| b.clip(h as f64, w as f64))
        .collect();
    let levels = grids
        .iter()
        .map(|&g| {
            let (ch, cw) = ((h / g) as f64, (w / g) as f64);
            let mut grid = Array2::<u8>::zeros((g, g));
            for b in &clipped {
                let (r0, r1) = cell_span(b.y_min, b.y_max, ch, g);
                let (c0, c1) = cell_span(b.x_min, b.x_max, cw, g);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        grid[[r, c]] = 1;
                    }
                }
            }
            grid
        })
        .collect();
    PatchLabelPyramid::from_levels(levels)
}

/// Inclusive range of cells whose half-open extent overlaps `[lo, hi)`.
fn cell_span(lo: f64, hi: f64, cell: f64, g: usize) -> (usize, usize) {
    let first = (lo / cell).floor().max(0.0) as usize;
    let last = ((hi / cell).ceil() as usize).saturating_sub(1);
    (first.min(g - 1), last.min(g - 1))
}
