//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/<id>.png
//! <root>/annotations.jsonl   {"id", "width", "height", "boxes": [[x_min, y_min, x_max, y_max, class_id], ...]}
//! <root>/manifest.json       per-sample object_pixel_ratio and split tag
//! <root>/labels/<id>.json    pyramid grids, row-major, fine to coarse
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, DatasetManifest, ImageSample, PatchLabelPyramid};
use crate::error::{bail, DprError, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[f64; 5]>,
}

impl AnnotationRecord {
    pub fn from_sample(sample: &ImageSample) -> Self {
        Self {
            id: sample.id.clone(),
            width: sample.width(),
            height: sample.height(),
            boxes: sample
                .boxes
                .iter()
                .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max, b.class_id as f64])
                .collect(),
        }
    }

    pub fn bounding_boxes(&self) -> Result<Vec<BoundingBox>> {
        self.boxes
            .iter()
            .map(|b| {
                if b[4] < 0.0 || b[4].fract() != 0.0 {
                    bail!(InvalidInput, "record `{}`: bad class id {}", self.id, b[4]);
                }
                BoundingBox::new(b[0], b[1], b[2], b[3], b[4] as u32)
                    .map_err(|e| DprError::InvalidInput(format!("record `{}`: {e}", self.id)))
            })
            .collect()
    }
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| DprError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| DprError::io(path, e))?;
    }
    out.flush().map_err(|e| DprError::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path).map_err(|e| DprError::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DprError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| {
            DprError::InvalidInput(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads `images/<id>.png` for an annotation record and validates its boxes.
pub fn load_dataset_sample(root: &Path, record: &AnnotationRecord) -> Result<ImageSample> {
    let path = root.join("images").join(format!("{}.png", record.id));
    let image = Image::load_png(&path)?;
    if (image.height(), image.width()) != (record.height, record.width) {
        bail!(
            InvalidInput,
            "{}: image is {}x{}, annotation says {}x{}",
            path.display(),
            image.height(),
            image.width(),
            record.height,
            record.width
        );
    }
    ImageSample::new(record.id.clone(), image, record.bounding_boxes()?)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json).map_err(|e| DprError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| DprError::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    for e in &manifest.entries {
        if !(0.0..=1.0).contains(&e.object_pixel_ratio) {
            bail!(InvalidInput, "manifest entry `{}` has ratio {}", e.id, e.object_pixel_ratio);
        }
    }
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub size: usize,
    pub cells: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub grids: Vec<LabelGrid>,
}

pub fn save_labels(path: &Path, id: &str, labels: &PatchLabelPyramid) -> Result<()> {
    let record = LabelRecord {
        id: id.to_string(),
        grids: labels
            .levels()
            .iter()
            .map(|l| LabelGrid {
                size: l.nrows(),
                cells: l.iter().copied().collect(),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_string(&record)?).map_err(|e| DprError::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<(String, PatchLabelPyramid)> {
    let text = fs::read_to_string(path).map_err(|e| DprError::io(path, e))?;
    let record: LabelRecord = serde_json::from_str(&text)?;
    let levels = record
        .grids
        .into_iter()
        .map(|g| {
            Array2::from_shape_vec((g.size, g.size), g.cells)
                .map_err(|e| DprError::Shape(format!("label grid {}: {e}", g.size)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((record.id, PatchLabelPyramid::from_levels(levels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_pyramid_labels, generate_synthetic_scene, SceneConfig};

    #[test]
    fn sample_survives_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic_scene(&SceneConfig::default(), 9).unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        s.image
            .save_png(&dir.path().join("images").join(format!("{}.png", s.id)))
            .unwrap();
        let rec = AnnotationRecord::from_sample(&s);
        let ann = dir.path().join("annotations.jsonl");
        save_annotations(&ann, std::slice::from_ref(&rec)).unwrap();
        let back = load_annotations(&ann).unwrap();
        assert_eq!(back, vec![rec]);
        let loaded = load_dataset_sample(dir.path(), &back[0]).unwrap();
        assert_eq!(loaded.boxes, s.boxes);
        let err = s
            .image
            .pixels()
            .iter()
            .zip(loaded.image.pixels().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);

        let labels = build_pyramid_labels(&s.boxes, (64, 64), &[16, 8, 4]).unwrap();
        let lp = dir.path().join("l.json");
        save_labels(&lp, &s.id, &labels).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), (s.id.clone(), labels));
    }

    #[test]
    fn bad_annotation_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"width\":4,\"height\":4,\"boxes\":[[1,1,1,2,0]]}\nnot json\n")
            .unwrap();
        let err = load_annotations(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"));
        fs::write(&p, "{\"id\":\"a\",\"width\":4,\"height\":4,\"boxes\":[[1,1,1,2,0]]}\n").unwrap();
        let recs = load_annotations(&p).unwrap();
        assert!(recs[0].bounding_boxes().is_err());
    }
}
