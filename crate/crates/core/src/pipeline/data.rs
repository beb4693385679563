//! Synthetic dataset generation and loading.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::dataset::{
    build_pyramid_labels, downsample_image, generate_synthetic_scene, load_annotations, load_dataset_sample,
    load_manifest, object_pixel_ratio, save_annotations, save_labels, save_manifest, AnnotationRecord,
    DatasetManifest, ImageSample, ManifestEntry, Split,
};
use crate::error::{bail, DprError, Result};
use crate::imaging::Interpolation;
use crate::nn::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub val: usize,
    /// Scenes drawn and rejected for falling outside the ratio band.
    pub rejected: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DprError::io(dir, e))
}

/// Writes images, annotations, labels and the manifest under the data root.
pub fn run_generate_data(cfg: &RunConfig) -> Result<DataSummary> {
    let root = cfg.data_root();
    create_dir(&root.join("images"))?;
    create_dir(&root.join("labels"))?;
    let [lo, hi] = cfg.data.ratio_band;
    let grids = cfg.label_grids();
    let mut samples = Vec::with_capacity(cfg.data.count);
    let mut rejected = 0;
    for i in 0..cfg.data.count {
        let mut kept = None;
        for attempt in 0..cfg.data.max_attempts.max(1) {
            let seed = derive_seed(cfg.seed, &format!("scene-{i}-{attempt}"));
            let mut sample = generate_synthetic_scene(&cfg.data.scene, seed)?;
            let ratio = object_pixel_ratio(&sample);
            if (lo..hi).contains(&ratio) {
                sample.id = format!("img{i:05}");
                kept = Some((sample, ratio));
                break;
            }
            rejected += 1;
        }
        let Some(entry) = kept else {
            bail!(
                Config,
                "no scene within ratio band [{lo}, {hi}) after {} attempts; adjust data.scene",
                cfg.data.max_attempts
            );
        };
        samples.push(entry);
    }

    let n_val = (cfg.data.count as f64 * cfg.data.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split")));
    let mut split = vec![Split::Train; samples.len()];
    for &i in order.iter().take(n_val) {
        split[i] = Split::Val;
    }

    let mut records = Vec::with_capacity(samples.len());
    let mut manifest = DatasetManifest::default();
    for ((sample, ratio), split) in samples.iter().zip(split) {
        sample.image.save_png(&root.join("images").join(format!("{}.png", sample.id)))?;
        let labels = build_pyramid_labels(&sample.boxes, (sample.height(), sample.width()), &grids)?;
        save_labels(&root.join("labels").join(format!("{}.json", sample.id)), &sample.id, &labels)?;
        records.push(AnnotationRecord::from_sample(sample));
        manifest.entries.push(ManifestEntry {
            id: sample.id.clone(),
            split,
            object_pixel_ratio: *ratio,
            width: sample.width(),
            height: sample.height(),
        });
    }
    save_annotations(&root.join("annotations.jsonl"), &records)?;
    save_manifest(&root.join("manifest.json"), &manifest)?;
    let val = manifest.split(Split::Val).count();
    log::info!("wrote {} scenes ({} val) to {}", manifest.len(), val, root.display());
    Ok(DataSummary {
        train: manifest.len() - val,
        val,
        rejected,
    })
}

/// Loads one split in manifest order.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<ImageSample>> {
    let root = cfg.data_root();
    if cfg.data.root.is_some() && !root.is_dir() {
        bail!(Config, "data.root {} does not exist", root.display());
    }
    let manifest_path = root.join("manifest.json");
    if !manifest_path.exists() {
        return Err(DprError::Missing(manifest_path));
    }
    let manifest = load_manifest(&manifest_path)?;
    let records = load_annotations(&root.join("annotations.jsonl"))?;
    let by_id: std::collections::HashMap<&str, &AnnotationRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    manifest
        .split(split)
        .map(|e| {
            let rec = by_id
                .get(e.id.as_str())
                .ok_or_else(|| DprError::InvalidInput(format!("no annotation for `{}`", e.id)))?;
            load_dataset_sample(&root, rec)
        })
        .collect()
}

/// Full-resolution sample and its low-resolution counterpart.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub high: ImageSample,
    pub low: ImageSample,
}

pub fn low_res_pairs(cfg: &RunConfig, samples: Vec<ImageSample>) -> Result<Vec<SamplePair>> {
    samples
        .into_iter()
        .map(|high| {
            let low = downsample_image(&high, cfg.refiner.scale, Interpolation::Area)?;
            Ok(SamplePair { high, low })
        })
        .collect()
}
