//! Aggregation, thresholding, patch routing, and selection metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ScorePyramid;
use crate::error::{bail, Result};
use crate::imaging::{resample_plane, Image, Interpolation};

/// Resamples each scale to `target_grid × target_grid` bilinearly, then takes
/// the elementwise maximum.
pub fn aggregate_scores(sp: &ScorePyramid, target_grid: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((target_grid, target_grid));
    for level in &sp.levels {
        let resampled = if level.dim() == (target_grid, target_grid) {
            level.clone()
        } else {
            resample_plane(level.view(), target_grid, target_grid, Interpolation::Bilinear)
        };
        out.zip_mut_with(&resampled, |o, &v| *o = o.max(v.clamp(0.0, 1.0)));
    }
    out
}

/// Binary selection grid together with the scores it was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub tau: f64,
    pub grid: Array2<u8>,
    pub scores: Array2<f64>,
}

impl SelectionMask {
    pub fn selected_count(&self) -> usize {
        self.grid.iter().filter(|&&b| b != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.selected_count() as f64 / self.grid.len().max(1) as f64
    }

    pub fn side(&self) -> usize {
        self.grid.nrows()
    }
}

pub fn threshold_mask(scores: &Array2<f64>, tau: f64) -> SelectionMask {
    SelectionMask {
        tau,
        grid: scores.mapv(|s| u8::from(s >= tau)),
        scores: scores.clone(),
    }
}

/// Tiles of one image split by the mask bit, indexed by `(row, col)`.
#[derive(Clone, Debug)]
pub struct PatchRouting {
    pub positives: Vec<(Image, (usize, usize))>,
    pub negatives: Vec<(Image, (usize, usize))>,
}

pub fn select_patches(image: &Image, mask: &SelectionMask, patch_px: usize) -> Result<PatchRouting> {
    let (gh, gw) = mask.grid.dim();
    if patch_px == 0 || image.height() != gh * patch_px || image.width() != gw * patch_px {
        bail!(
            Shape,
            "image {}x{} is not a {gh}x{gw} grid of {patch_px}px patches",
            image.height(),
            image.width()
        );
    }
    let mut routing = PatchRouting {
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for ((r, c), &bit) in mask.grid.indexed_iter() {
        let tile = image.crop(r * patch_px, c * patch_px, patch_px, patch_px)?;
        if bit != 0 {
            routing.positives.push((tile, (r, c)));
        } else {
            routing.negatives.push((tile, (r, c)));
        }
    }
    Ok(routing)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_grids(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            bail!(Shape, "prediction {:?} vs truth {:?}", pred.dim(), gt.dim());
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// 1 when there are no positives.
    pub fn tpr(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }

    /// 1 when nothing was predicted and nothing exists.
    pub fn iou(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio_or_one(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub tpr: f64,
    pub max_f: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

/// Best F1 over all thresholds on the pooled `(score, label)` pairs.
fn max_f1(pairs: &mut [(f64, bool)]) -> f64 {
    let positives = pairs.iter().filter(|p| p.1).count();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Threshold above every score: nothing selected.
    let mut best = ratio_or_one(0, positives);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f = ratio_or_one(2 * tp, 2 * tp + fp + (positives - tp));
        best = best.max(f);
    }
    best
}

pub fn selection_metrics(pred: &SelectionMask, gt: &Array2<u8>) -> Result<SelectionMetrics> {
    pooled_selection_metrics(std::iter::once((pred, gt)))
}

/// Metrics over many images: confusion counts are summed and maxF sweeps one
/// shared threshold over all cells.
pub fn pooled_selection_metrics<'a>(
    items: impl IntoIterator<Item = (&'a SelectionMask, &'a Array2<u8>)>,
) -> Result<SelectionMetrics> {
    let mut counts = ConfusionCounts::default();
    let mut pairs = Vec::new();
    for (pred, gt) in items {
        counts.add(&ConfusionCounts::from_grids(&pred.grid, gt)?);
        if pred.scores.dim() != gt.dim() {
            bail!(Shape, "scores {:?} vs truth {:?}", pred.scores.dim(), gt.dim());
        }
        pairs.extend(pred.scores.iter().zip(gt).map(|(&s, &g)| (s, g != 0)));
    }
    Ok(SelectionMetrics {
        tpr: counts.tpr(),
        max_f: max_f1(&mut pairs),
        iou: counts.iou(),
        counts,
    })
}
