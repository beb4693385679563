//! Sequential training stages: selector first, then the refiner on positive patches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{load_split, low_res_pairs, SamplePair};
use super::{create_dir, write_csv, RunConfig};
use crate::dataset::{build_pyramid_labels, Split};
use crate::error::{bail, DprError, Result};
use crate::imaging::Image;
use crate::nn::derive_seed;
use crate::refiner::{train_refiner, PatchPair, RefinerModel, TrainRefinerParams};
use crate::selector::{
    aggregate_scores, init_selector, threshold_mask, train_selector, SelectorExample, SelectorModel,
    TrainSelectorParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorTrainSummary {
    pub train_images: usize,
    pub val_images: usize,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub val_tpr: Option<f64>,
    pub val_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerTrainSummary {
    /// Equals the number of positive cells over all training masks.
    pub pairs: usize,
    pub steps_run: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Selector examples at low resolution with labels on the selector's output grids.
pub fn selector_examples(cfg: &RunConfig, pairs: &[SamplePair]) -> Result<Vec<SelectorExample>> {
    let grids = cfg.label_grids();
    pairs
        .iter()
        .map(|p| {
            let labels = build_pyramid_labels(&p.low.boxes, (p.low.height(), p.low.width()), &grids)?;
            Ok(SelectorExample {
                id: p.low.id.clone(),
                image: p.low.image.clone(),
                labels,
            })
        })
        .collect()
}

pub fn run_train_selector(cfg: &RunConfig) -> Result<SelectorTrainSummary> {
    let train = low_res_pairs(cfg, load_split(cfg, Split::Train)?)?;
    let val = low_res_pairs(cfg, load_split(cfg, Split::Val)?)?;
    let train_ex = selector_examples(cfg, &train)?;
    let val_ex = selector_examples(cfg, &val)?;
    let ckpt = cfg.selector_checkpoint();
    let mut model = if cfg.resume && ckpt.exists() {
        log::info!("resuming selector from {}", ckpt.display());
        SelectorModel::load(&ckpt)?
    } else {
        init_selector(&cfg.seeded_selector())?
    };
    let params = TrainSelectorParams {
        seed: derive_seed(cfg.seed, "selector-train"),
        ..cfg.selector_training.clone()
    };
    let history = if params.epochs == 0 {
        Default::default()
    } else {
        train_selector(&mut model, &train_ex, &val_ex, &params)?
    };
    let dir = ckpt.parent().expect("checkpoint has a parent");
    create_dir(dir)?;
    model.save(&ckpt)?;
    let rows: Vec<Vec<String>> = history
        .epochs
        .iter()
        .map(|e| {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            vec![
                e.epoch.to_string(),
                e.loss.to_string(),
                e.steps.to_string(),
                opt(e.val_tpr),
                opt(e.val_max_f),
                opt(e.val_iou),
                opt(e.val_fraction),
            ]
        })
        .collect();
    write_csv(
        &dir.join("history.csv"),
        &["epoch", "loss", "steps", "val_tpr", "val_max_f", "val_iou", "val_fraction"],
        &rows,
    )?;
    let last = history.epochs.last();
    Ok(SelectorTrainSummary {
        train_images: train_ex.len(),
        val_images: val_ex.len(),
        epochs_run: history.epochs.len(),
        final_loss: history.final_loss(),
        val_tpr: last.and_then(|e| e.val_tpr),
        val_fraction: last.and_then(|e| e.val_fraction),
    })
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(DprError::Missing(path.to_path_buf()));
    }
    Ok(())
}

/// Low-res/high-res tile pairs for every cell the selector marks positive.
pub fn positive_pairs(cfg: &RunConfig, selector: &SelectorModel, samples: &[SamplePair]) -> Result<Vec<PatchPair>> {
    let grid = cfg.mask_grid();
    let tau = cfg.tau();
    let k = cfg.refiner.scale;
    let mut pairs = Vec::new();
    for chunk in samples.chunks(cfg.inference.batch_size) {
        let images: Vec<&Image> = chunk.iter().map(|p| &p.low.image).collect();
        for (sp, p) in selector.score_images(&images)?.iter().zip(chunk) {
            let mask = threshold_mask(&aggregate_scores(sp, grid), tau);
            let lp = p.low.height() / grid;
            for ((r, c), &bit) in mask.grid.indexed_iter() {
                if bit == 0 {
                    continue;
                }
                let low = p.low.image.crop(r * lp, c * lp, lp, lp)?;
                let high = p.high.image.crop(r * lp * k, c * lp * k, lp * k, lp * k)?;
                pairs.push(PatchPair::from_unit(&low, &high)?);
            }
        }
    }
    Ok(pairs)
}

pub fn run_train_refiner(cfg: &RunConfig) -> Result<RefinerTrainSummary> {
    let selector_ckpt = cfg.selector_checkpoint();
    require(&selector_ckpt)?;
    let selector = SelectorModel::load(&selector_ckpt)?;
    let train = low_res_pairs(cfg, load_split(cfg, Split::Train)?)?;
    let pairs = positive_pairs(cfg, &selector, &train)?;
    if pairs.is_empty() {
        bail!(InvalidInput, "the selector marked no training patch positive at tau {}", cfg.tau());
    }
    let ckpt = cfg.refiner_checkpoint();
    let mut model = if cfg.resume && ckpt.exists() {
        log::info!("resuming refiner from {}", ckpt.display());
        RefinerModel::load(&ckpt)?
    } else {
        RefinerModel::new(&cfg.seeded_refiner())?
    };
    let sched = model.schedule().clone();
    let params = TrainRefinerParams {
        seed: derive_seed(cfg.seed, "refiner-train"),
        ..cfg.refiner_training.clone()
    };
    let history = if params.steps == 0 {
        Default::default()
    } else {
        train_refiner(&mut model, &pairs, &sched, &params)?
    };
    let dir = ckpt.parent().expect("checkpoint has a parent");
    create_dir(dir)?;
    model.save(&ckpt)?;
    sched.save_csv(&dir.join("schedule.csv"))?;
    let rows: Vec<Vec<String>> = history
        .steps
        .iter()
        .map(|s| vec![s.step.to_string(), s.loss.to_string(), s.smoothed.to_string()])
        .collect();
    write_csv(&dir.join("history.csv"), &["step", "loss", "smoothed"], &rows)?;
    log::info!("refiner trained on {} positive patches", pairs.len());
    Ok(RefinerTrainSummary {
        pairs: pairs.len(),
        steps_run: history.steps.len(),
        initial_loss: history.steps.first().map(|s| s.loss),
        final_loss: history.steps.last().map(|s| s.loss),
    })
}
