//! Detection evaluation (interpolated AP over IoU thresholds) and a toy detector.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::BoundingBox;
use crate::error::{bail, DprError, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Carries the predicted class in `class_id`.
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&confidence) {
            bail!(InvalidInput, "confidence {confidence} outside [0, 1]");
        }
        Ok(Self { bbox, confidence })
    }

    pub fn class_id(&self) -> u32 {
        self.bbox.class_id
    }
}

/// Detections per image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub images: BTreeMap<String, Vec<Detection>>,
}

impl DetectionSet {
    pub fn insert(&mut self, image_id: &str, detections: Vec<Detection>) {
        self.images.insert(image_id.to_string(), detections);
    }

    pub fn len(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground-truth boxes per image id.
pub type GroundTruth = BTreeMap<String, Vec<BoundingBox>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapProtocol {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    /// Confidence cut for the single-point recall/precision.
    pub operating_confidence: f64,
    /// IoU used for the single-point recall/precision.
    pub operating_iou: f64,
}

impl Default for MapProtocol {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            operating_confidence: 0.5,
            operating_iou: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// Mean AP over classes and IoU thresholds.
    pub map: f64,
    /// Mean AP over classes at IoU 0.5.
    pub map50: f64,
    pub tpr: f64,
    pub precision: f64,
    /// `(iou_threshold, mean AP over classes)`.
    pub per_threshold: Vec<(f64, f64)>,
}

/// Greedy confidence-descending matching of one image's detections of one class.
/// Each detection takes the unmatched ground truth with the highest IoU at or
/// above `thr`. Returns true-positive flags in the given order.
pub fn greedy_match(dets: &[Detection], gts: &[BoundingBox], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let iou = d.bbox.iou(g);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Interpolated AP from confidence-ordered TP flags.
pub fn interpolated_ap(tp_flags: &[bool], num_gt: usize, recall_points: usize) -> f64 {
    if num_gt == 0 {
        return if tp_flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        tp += usize::from(flag);
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope: best precision at any later cut.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let points = recall_points.max(2);
    let mut total = 0.0;
    for k in 0..points {
        let r = k as f64 / (points - 1) as f64;
        let idx = recalls.partition_point(|&x| x < r - 1e-12);
        if idx < precisions.len() {
            total += precisions[idx];
        }
    }
    total / points as f64
}

/// Per-class detections sorted by descending confidence; ties keep image-id then list order.
fn class_ranking<'a>(pred: &'a DetectionSet, class: u32) -> Vec<(&'a str, &'a Detection)> {
    let mut out: Vec<(&str, &Detection)> = pred
        .images
        .iter()
        .flat_map(|(id, dets)| dets.iter().filter(|d| d.class_id() == class).map(move |d| (id.as_str(), d)))
        .collect();
    out.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    out
}

fn average_precision(pred: &DetectionSet, gt: &GroundTruth, class: u32, thr: f64, points: usize) -> f64 {
    let ranking = class_ranking(pred, class);
    let gts: BTreeMap<&str, Vec<BoundingBox>> = gt
        .iter()
        .map(|(id, boxes)| {
            (id.as_str(), boxes.iter().filter(|b| b.class_id == class).copied().collect())
        })
        .collect();
    let num_gt: usize = gts.values().map(Vec::len).sum();
    let mut used: BTreeMap<&str, Vec<bool>> =
        gts.iter().map(|(id, b)| (*id, vec![false; b.len()])).collect();
    let empty = Vec::new();
    let flags: Vec<bool> = ranking
        .iter()
        .map(|(id, d)| {
            let boxes = gts.get(id).unwrap_or(&empty);
            let Some(taken) = used.get_mut(id) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = d.bbox.iou(g);
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                true
            } else {
                false
            }
        })
        .collect();
    interpolated_ap(&flags, num_gt, points)
}

pub fn evaluate_detections(
    pred: &DetectionSet,
    gt: &GroundTruth,
    protocol: &MapProtocol,
) -> Result<DetectionMetrics> {
    if protocol.iou_thresholds.is_empty() {
        bail!(Config, "at least one IoU threshold is required");
    }
    let classes: BTreeSet<u32> = gt
        .values()
        .flatten()
        .map(|b| b.class_id)
        .chain(pred.images.values().flatten().map(|d| d.class_id()))
        .collect();
    let per_threshold: Vec<(f64, f64)> = protocol
        .iou_thresholds
        .iter()
        .map(|&thr| {
            let ap = if classes.is_empty() {
                1.0
            } else {
                classes
                    .iter()
                    .map(|&c| average_precision(pred, gt, c, thr, protocol.recall_points))
                    .sum::<f64>()
                    / classes.len() as f64
            };
            (thr, ap)
        })
        .collect();
    if classes.is_empty() {
        log::info!("no ground truth and no detections; AP defined as 1");
    }
    let map = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    let map50 = if classes.is_empty() {
        1.0
    } else {
        classes
            .iter()
            .map(|&c| average_precision(pred, gt, c, 0.5, protocol.recall_points))
            .sum::<f64>()
            / classes.len() as f64
    };

    // Single operating point: class-aware greedy matching per image.
    let (mut tp, mut n_pred, mut n_gt) = (0usize, 0usize, 0usize);
    let empty = Vec::new();
    let ids: BTreeSet<&String> = gt.keys().chain(pred.images.keys()).collect();
    for id in ids {
        let boxes = gt.get(id).unwrap_or(&empty);
        let dets = pred.images.get(id).map(Vec::as_slice).unwrap_or(&[]);
        n_gt += boxes.len();
        for &c in &classes {
            let mut kept: Vec<Detection> = dets
                .iter()
                .filter(|d| d.class_id() == c && d.confidence >= protocol.operating_confidence)
                .copied()
                .collect();
            kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let g: Vec<BoundingBox> = boxes.iter().filter(|b| b.class_id == c).copied().collect();
            n_pred += kept.len();
            tp += greedy_match(&kept, &g, protocol.operating_iou).iter().filter(|&&f| f).count();
        }
    }
    let tpr = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
    let precision = match (n_pred, n_gt) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => tp as f64 / n_pred as f64,
    };
    Ok(DetectionMetrics {
        map,
        map50,
        tpr,
        precision,
        per_threshold,
    })
}

/// Pluggable detector interface.
pub trait Detector {
    fn detect(&self, image: &Image) -> Vec<Detection>;
}

/// Threshold plus connected-components detector for the synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDetector {
    /// Foreground when the brightest channel reaches this value.
    pub threshold: f32,
    /// Components with fewer pixels are dropped.
    pub min_pixels: usize,
    /// Components filling at least this fraction of their box are rectangles (class 0), else discs (class 1).
    pub rectangle_fill: f64,
}

impl Default for ToyDetector {
    fn default() -> Self {
        Self {
            threshold: 0.45,
            min_pixels: 4,
            rectangle_fill: 0.9,
        }
    }
}

impl Detector for ToyDetector {
    fn detect(&self, image: &Image) -> Vec<Detection> {
        let (h, w, c) = image.dims();
        let px = image.pixels();
        let value = |y: usize, x: usize| (0..c).map(|ch| px[[y, x, ch]]).fold(f32::MIN, f32::max);
        let mut label = vec![usize::MAX; h * w];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                if label[sy * w + sx] != usize::MAX || value(sy, sx) < self.threshold {
                    continue;
                }
                let id = out.len();
                label[sy * w + sx] = id;
                stack.push((sy, sx));
                let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
                let (mut count, mut sum) = (0usize, 0f64);
                while let Some((y, x)) = stack.pop() {
                    count += 1;
                    sum += value(y, x) as f64;
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    let neighbours = [
                        (y.wrapping_sub(1), x),
                        (y + 1, x),
                        (y, x.wrapping_sub(1)),
                        (y, x + 1),
                    ];
                    for (ny, nx) in neighbours {
                        if ny < h && nx < w && label[ny * w + nx] == usize::MAX && value(ny, nx) >= self.threshold {
                            label[ny * w + nx] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
                out.push((x0, y0, x1 + 1, y1 + 1, count, sum));
            }
        }
        out.into_iter()
            .filter(|o| o.4 >= self.min_pixels)
            .filter_map(|(x0, y0, x1, y1, count, sum)| {
                let area = ((x1 - x0) * (y1 - y0)) as f64;
                let class = if count as f64 / area >= self.rectangle_fill { 0 } else { 1 };
                let bbox = BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64, class).ok()?;
                Detection::new(bbox, (sum / count as f64).clamp(0.0, 1.0)).ok()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_id: u32,
    pub confidence: f64,
}

/// One JSON object per detection, images in id order.
pub fn save_detections(path: &Path, set: &DetectionSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DprError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (id, dets) in &set.images {
        for d in dets {
            let rec = DetectionRecord {
                image_id: id.clone(),
                bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
                class_id: d.class_id(),
                confidence: d.confidence,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| DprError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| DprError::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<DetectionSet> {
    let file = std::fs::File::open(path).map_err(|e| DprError::io(path, e))?;
    let mut set = DetectionSet::default();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DprError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| DprError::InvalidInput(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let [x0, y0, x1, y1] = rec.bbox;
        let det = Detection::new(BoundingBox::new(x0, y0, x1, y1, rec.class_id)?, rec.confidence)?;
        set.images.entry(rec.image_id).or_default().push(det);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64, c: u32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1, c).unwrap()
    }

    fn det(b: BoundingBox, conf: f64) -> Detection {
        Detection::new(b, conf).unwrap()
    }

    #[test]
    fn perfect_detections_score_one() {
        let boxes = vec![bx(0., 0., 10., 10., 0), bx(20., 20., 30., 28., 1)];
        let gt: GroundTruth = [("a".to_string(), boxes.clone())].into();
        let mut pred = DetectionSet::default();
        pred.insert("a", boxes.iter().map(|&b| det(b, 1.0)).collect());
        let m = evaluate_detections(&pred, &gt, &MapProtocol::default()).unwrap();
        assert_eq!((m.map, m.map50, m.tpr, m.precision), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn false_positive_first_halves_ap() {
        let g = bx(0., 0., 10., 10., 0);
        let gt: GroundTruth = [("a".to_string(), vec![g])].into();
        let mut pred = DetectionSet::default();
        let tp = bx(0., 0., 10., 8., 0);
        assert!((tp.iou(&g) - 0.8).abs() < 1e-12);
        pred.insert("a", vec![det(bx(50., 50., 60., 60., 0), 0.95), det(tp, 0.9)]);
        let m = evaluate_detections(&pred, &gt, &MapProtocol::default()).unwrap();
        assert!((m.map50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = bx(0., 0., 10., 10., 0);
        let flags = greedy_match(&[det(g, 0.9), det(g, 0.8)], &[g], 0.5);
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn empty_conventions() {
        let p = MapProtocol::default();
        let m = evaluate_detections(&DetectionSet::default(), &GroundTruth::new(), &p).unwrap();
        assert_eq!((m.map, m.tpr, m.precision), (1.0, 1.0, 1.0));
        let mut pred = DetectionSet::default();
        pred.insert("a", vec![det(bx(0., 0., 2., 2., 0), 0.9)]);
        let m = evaluate_detections(&pred, &GroundTruth::new(), &p).unwrap();
        assert_eq!((m.map, m.precision), (0.0, 0.0));
        let gt: GroundTruth = [("a".to_string(), vec![bx(0., 0., 2., 2., 0)])].into();
        let m = evaluate_detections(&DetectionSet::default(), &gt, &p).unwrap();
        assert_eq!((m.map, m.tpr, m.precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn toy_detector_finds_square() {
        let d = ToyDetector::default();
        assert!(d.detect(&Image::filled(32, 32, 3, 0.15)).is_empty());
        let mut img = Image::filled(48, 48, 3, 0.1);
        img.paste(&Image::filled(16, 16, 3, 0.9), 10, 20).unwrap();
        let found = d.detect(&img);
        assert_eq!(found.len(), 1);
        let g = bx(20., 10., 36., 26., 0);
        assert!(found[0].bbox.iou(&g) >= 0.8);
        assert_eq!(found[0].class_id(), 0);
        assert!((found[0].confidence - 0.9).abs() < 1e-6);
    }

    #[test]
    fn toy_detector_labels_discs() {
        let img = Image::new(Array3::from_shape_fn((32, 32, 3), |(y, x, _)| {
            let (dy, dx) = (y as f64 + 0.5 - 16.0, x as f64 + 0.5 - 16.0);
            if dx * dx + dy * dy <= 64.0 { 1.0 } else { 0.1 }
        }))
        .unwrap();
        let found = ToyDetector::default().detect(&img);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].class_id(), 1);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut set = DetectionSet::default();
        set.insert("a", vec![det(bx(1., 2., 3., 4., 1), 0.25)]);
        set.insert("b", vec![det(bx(0., 0., 5., 5., 0), 1.0), det(bx(1., 1., 2., 9., 0), 0.5)]);
        save_detections(&path, &set).unwrap();
        assert_eq!(load_detections(&path).unwrap(), set);
        std::fs::write(&path, "{\"image_id\":\"a\"}\n").unwrap();
        assert!(load_detections(&path).is_err());
    }

    #[test]
    fn recall_grid_interpolation() {
        let ap = interpolated_ap(&[true, false, true], 2, 101);
        // recall ≤ 0.5 → 1.0 (51 points); recall > 0.5 → 2/3 (50 points).
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }
}
