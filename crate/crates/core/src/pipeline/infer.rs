//! Inference: select, refine or enlarge each tile, reassemble, detect, evaluate.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cache::ScoreCache;
use super::config::DetectorConfig;
use super::data::{load_split, low_res_pairs, SamplePair};
use super::{create_dir, write_csv, RunConfig};
use crate::checkpoint::file_hash;
use crate::dataset::{build_pyramid_labels, Split};
use crate::error::{DprError, Result};
use crate::evaluation::{
    evaluate_detections, flops_report, frechet_distance, kernel_mmd, load_detections, pixel_features, psnr,
    save_detections, ssim, DetectionMetrics, DetectionSet, Detector, FlopsReport, GroundTruth, MetricsReport,
    SsimParams,
};
use crate::imaging::Image;
use crate::nn::derive_seed;
use crate::organizer::{organize, partition, save_patch_set, Polarity};
use crate::refiner::{enlarge, RefinerModel};
use crate::selector::{aggregate_scores, threshold_mask, ConfusionCounts, ScorePyramid, SelectionMask, SelectorModel};

/// Refined tiles keyed by `(image id, row, col)`; valid for one refiner and seed.
pub type TileMemo = HashMap<(String, usize, usize), Image>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub refined: usize,
    pub enlarged: usize,
    pub total: usize,
    pub fraction: f64,
    /// `None` when the assembly is identical to the reference.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub selection: ConfusionCounts,
    pub detections: usize,
    pub gt_boxes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub tau: f64,
    pub grid: usize,
    pub images_processed: usize,
    pub skipped: Vec<SkippedImage>,
    pub metrics: MetricsReport,
    pub flops: FlopsReport,
    pub detection: DetectionMetrics,
    /// Pooled selection confusion counts against the ground-truth cells.
    pub selection: ConfusionCounts,
    pub selection_tpr: f64,
    pub per_image: Vec<ImageRow>,
}

#[derive(Serialize, Deserialize)]
struct MaskExport<'a> {
    id: &'a str,
    grid: usize,
    tau: f64,
    scores: Vec<f64>,
    mask: Vec<u8>,
}

/// Loaded models and inputs shared by inference runs.
pub struct InferContext {
    pub selector: SelectorModel,
    pub refiner: RefinerModel,
    pub cache: ScoreCache,
    pub images: Vec<SamplePair>,
    detector: Box<dyn Detector>,
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(DprError::Missing(path.to_path_buf()));
    }
    Ok(())
}

impl InferContext {
    /// Loads both checkpoints and the validation split.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let sel_path = cfg.selector_checkpoint();
        let ref_path = cfg.refiner_checkpoint();
        require(&sel_path)?;
        require(&ref_path)?;
        let selector = SelectorModel::load(&sel_path)?;
        let refiner = RefinerModel::load(&ref_path)?;
        if refiner.config().scale != cfg.refiner.scale {
            return Err(DprError::Config(format!(
                "refiner checkpoint has scale {}, config says {}",
                refiner.config().scale,
                cfg.refiner.scale
            )));
        }
        let cache = ScoreCache::new(&cfg.out_dir.join("cache"), &file_hash(&sel_path)?);
        let mut samples = load_split(cfg, Split::Val)?;
        if let Some(n) = cfg.inference.max_images {
            samples.truncate(n);
        }
        let detector: Box<dyn Detector> = match &cfg.detector {
            DetectorConfig::Toy(d) => Box::new(d.clone()),
        };
        Ok(Self {
            selector,
            refiner,
            cache,
            images: low_res_pairs(cfg, samples)?,
            detector,
        })
    }

    /// Selector scores per image id; cached scores are reused, failures are returned per image.
    pub fn scores(&self, batch: usize) -> BTreeMap<String, Result<ScorePyramid>> {
        let mut out = BTreeMap::new();
        let missing: Vec<&SamplePair> = self
            .images
            .iter()
            .filter(|p| match self.cache.get(&p.low.id) {
                Some(sp) => {
                    out.insert(p.low.id.clone(), Ok(sp));
                    false
                }
                None => true,
            })
            .collect();
        for chunk in missing.chunks(batch.max(1)) {
            let images: Vec<&Image> = chunk.iter().map(|p| &p.low.image).collect();
            let scored = match self.selector.score_images(&images) {
                Ok(all) => all.into_iter().map(Ok).collect(),
                // Score one by one so a bad image does not take its batch down.
                Err(_) => images.iter().map(|img| self.selector.score_images(&[img]).map(|mut v| v.remove(0))).collect(),
            };
            let scored: Vec<Result<ScorePyramid>> = scored;
            for (p, sp) in chunk.iter().zip(scored) {
                if let Ok(sp) = &sp {
                    if let Err(e) = self.cache.put(&p.low.id, sp) {
                        log::warn!("could not cache scores for {}: {e}", p.low.id);
                    }
                }
                out.insert(p.low.id.clone(), sp);
            }
        }
        out
    }
}

struct ImageOutcome {
    row: ImageRow,
    assembled: Image,
    detections: Vec<crate::evaluation::Detection>,
}

#[allow(clippy::too_many_arguments)]
fn process_image(
    cfg: &RunConfig,
    ctx: &InferContext,
    pair: &SamplePair,
    scores: &ScorePyramid,
    tau: f64,
    memo: &mut TileMemo,
    out: Option<&Path>,
) -> Result<ImageOutcome> {
    let id = pair.low.id.as_str();
    let grid = cfg.mask_grid();
    let k = cfg.refiner.scale;
    let mask: SelectionMask = threshold_mask(&aggregate_scores(scores, grid), tau);
    let mut set = partition(&pair.low.image, grid, id)?;
    set.apply_mask(&mask.grid)?;

    let todo: Vec<usize> = set
        .patches
        .iter()
        .enumerate()
        .filter(|(_, p)| p.polarity == Polarity::Positive && !memo.contains_key(&(id.to_string(), p.row, p.col)))
        .map(|(i, _)| i)
        .collect();
    if !todo.is_empty() {
        let tiles: Vec<&Image> = todo.iter().map(|&i| &set.patches[i].tile).collect();
        let seeds: Vec<u64> = todo
            .iter()
            .map(|&i| {
                let p = &set.patches[i];
                derive_seed(cfg.seed, &format!("refine/{id}/{}/{}", p.row, p.col))
            })
            .collect();
        let refined = ctx.refiner.refine(&tiles, ctx.refiner.schedule(), &seeds)?;
        for (&i, tile) in todo.iter().zip(refined) {
            let p = &set.patches[i];
            memo.insert((id.to_string(), p.row, p.col), tile);
        }
    }
    for p in &mut set.patches {
        p.tile = match p.polarity {
            Polarity::Positive => memo[&(id.to_string(), p.row, p.col)].clone(),
            Polarity::Negative => enlarge(&p.tile, k, cfg.inference.enlarge_method)?,
        };
    }
    set.patch_px *= k;
    let assembled = organize(&set, cfg.inference.assembly)?;
    let detections = ctx.detector.detect(&assembled);

    let reference = &pair.high.image;
    let p = psnr(&assembled, reference, 1.0)?;
    let s = ssim(&assembled, reference, &SsimParams::default())?;
    let gt = build_pyramid_labels(&pair.high.boxes, (reference.height(), reference.width()), &[grid])?;
    let selection = ConfusionCounts::from_grids(&mask.grid, gt.y3())?;
    let refined = set.count(Polarity::Positive);
    let total = set.patches.len();

    if let Some(dir) = out {
        save_patch_set(&dir.join("tiles").join(id), &set)?;
        create_dir(&dir.join("assembled"))?;
        assembled.save_png(&dir.join("assembled").join(format!("{id}.png")))?;
        create_dir(&dir.join("masks"))?;
        let export = MaskExport {
            id,
            grid,
            tau,
            scores: mask.scores.iter().copied().collect(),
            mask: mask.grid.iter().copied().collect(),
        };
        let path = dir.join("masks").join(format!("{id}.json"));
        std::fs::write(&path, serde_json::to_vec(&export)?).map_err(|e| DprError::io(&path, e))?;
    }
    Ok(ImageOutcome {
        row: ImageRow {
            id: id.to_string(),
            refined,
            enlarged: total - refined,
            total,
            fraction: refined as f64 / total as f64,
            psnr: p.is_finite().then_some(p),
            ssim: Some(s),
            selection,
            detections: detections.len(),
            gt_boxes: pair.high.boxes.len(),
        },
        assembled,
        detections,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs every validation image at threshold `tau`. Outputs go to `out` when given.
pub fn infer_with(
    cfg: &RunConfig,
    ctx: &InferContext,
    scores: &BTreeMap<String, Result<ScorePyramid>>,
    tau: f64,
    memo: &mut TileMemo,
    out: Option<&Path>,
) -> Result<InferReport> {
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let image_out = out.filter(|_| cfg.inference.write_images);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut pred = DetectionSet::default();
    let mut gt = GroundTruth::new();
    let mut assembled = Vec::new();
    let mut references = Vec::new();
    for pair in &ctx.images {
        let id = &pair.low.id;
        let outcome = match scores.get(id) {
            Some(Ok(sp)) => process_image(cfg, ctx, pair, sp, tau, memo, image_out),
            Some(Err(e)) => Err(DprError::InvalidInput(format!("scoring failed: {e}"))),
            None => Err(DprError::InvalidInput("no scores".into())),
        };
        match outcome {
            Ok(o) => {
                pred.insert(id, o.detections);
                gt.insert(id.clone(), pair.high.boxes.clone());
                rows.push(o.row);
                assembled.push(o.assembled);
                references.push(&pair.high.image);
            }
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(SkippedImage {
                    id: id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }

    let detection = evaluate_detections(&pred, &gt, &cfg.metrics.protocol)?;
    let grid = cfg.mask_grid();
    let low_side = cfg.low_res_side();
    let tile = low_side / grid;
    let n = rows.len();
    let selected = if n == 0 {
        0.0
    } else {
        rows.iter().map(|r| r.refined as f64).sum::<f64>() / n as f64
    };
    let flops = flops_report(
        selected,
        grid * grid,
        ctx.refiner.macs_per_patch(tile, tile),
        ctx.selector.macs(low_side, low_side),
    )?;
    let (frechet, kmmd) = if n >= 2 {
        let side = cfg.metrics.feature_side;
        let a = pixel_features(&assembled.iter().collect::<Vec<_>>(), side)?;
        let b = pixel_features(&references, side)?;
        (frechet_distance(&a, &b).ok(), kernel_mmd(&a, &b).ok())
    } else {
        (None, None)
    };
    let mut selection = ConfusionCounts::default();
    for r in &rows {
        selection.add(&r.selection);
    }
    let metrics = MetricsReport {
        psnr: mean(rows.iter().filter_map(|r| r.psnr)),
        ssim: mean(rows.iter().filter_map(|r| r.ssim)),
        frechet,
        kernel_mmd: kmmd,
        map: detection.map,
        map50: detection.map50,
        tpr: detection.tpr,
        precision: detection.precision,
        flops_ratio: flops.flops_ratio,
        patch_fraction: flops.patch_fraction,
    };
    let report = InferReport {
        tau,
        grid,
        images_processed: n,
        skipped,
        metrics,
        flops,
        detection,
        selection_tpr: selection.tpr(),
        selection,
        per_image: rows,
    };
    if let Some(dir) = out {
        write_report(dir, &report)?;
        save_detections(&dir.join("detections.jsonl"), &pred)?;
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_report(dir: &Path, report: &InferReport) -> Result<()> {
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| DprError::io(&path, e))?;
    let rows: Vec<Vec<String>> = report
        .per_image
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.refined.to_string(),
                r.enlarged.to_string(),
                r.total.to_string(),
                r.fraction.to_string(),
                opt(r.psnr),
                opt(r.ssim),
                r.selection.tpr().to_string(),
                r.detections.to_string(),
                r.gt_boxes.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("per_image.csv"),
        &["id", "refined", "enlarged", "total", "fraction", "psnr", "ssim", "selection_tpr", "detections", "gt_boxes"],
        &rows,
    )
}

pub fn infer_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("infer")
}

pub fn run_infer(cfg: &RunConfig) -> Result<InferReport> {
    let ctx = InferContext::load(cfg)?;
    let scores = ctx.scores(cfg.inference.batch_size);
    let report = infer_with(cfg, &ctx, &scores, cfg.tau(), &mut TileMemo::new(), Some(&infer_dir(cfg)))?;
    log::info!(
        "processed {} images ({} skipped), refined fraction {:.3}, mAP50 {:.4}",
        report.images_processed,
        report.skipped.len(),
        report.flops.patch_fraction,
        report.metrics.map50
    );
    Ok(report)
}

/// Recomputes detection metrics from the detections file of a previous `infer`
/// run and image quality from its assembled PNGs.
pub fn run_evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    let dir = infer_dir(cfg);
    let report_path = dir.join("report.json");
    let det_path = dir.join("detections.jsonl");
    require(&report_path)?;
    require(&det_path)?;
    let text = std::fs::read_to_string(&report_path).map_err(|e| DprError::io(&report_path, e))?;
    let previous: InferReport = serde_json::from_str(&text)?;
    let pred = load_detections(&det_path)?;
    let processed: std::collections::BTreeSet<&str> = previous.per_image.iter().map(|r| r.id.as_str()).collect();
    let samples: Vec<_> = load_split(cfg, Split::Val)?
        .into_iter()
        .filter(|s| processed.contains(s.id.as_str()))
        .collect();
    let gt: GroundTruth = samples.iter().map(|s| (s.id.clone(), s.boxes.clone())).collect();
    let detection = evaluate_detections(&pred, &gt, &cfg.metrics.protocol)?;

    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    let mut assembled = Vec::new();
    for s in &samples {
        let path = dir.join("assembled").join(format!("{}.png", s.id));
        if !path.exists() {
            continue;
        }
        let img = Image::load_png(&path)?;
        let p = psnr(&img, &s.image, 1.0)?;
        if p.is_finite() {
            psnrs.push(p);
        }
        ssims.push(ssim(&img, &s.image, &SsimParams::default())?);
        assembled.push((img, &s.image));
    }
    let (frechet, kmmd) = if assembled.len() >= 2 {
        let side = cfg.metrics.feature_side;
        let a = pixel_features(&assembled.iter().map(|p| &p.0).collect::<Vec<_>>(), side)?;
        let b = pixel_features(&assembled.iter().map(|p| p.1).collect::<Vec<_>>(), side)?;
        (frechet_distance(&a, &b).ok(), kernel_mmd(&a, &b).ok())
    } else {
        (None, None)
    };
    let metrics = MetricsReport {
        psnr: mean(psnrs.into_iter()),
        ssim: mean(ssims.into_iter()),
        frechet,
        kernel_mmd: kmmd,
        map: detection.map,
        map50: detection.map50,
        tpr: detection.tpr,
        precision: detection.precision,
        flops_ratio: previous.flops.flops_ratio,
        patch_fraction: previous.flops.patch_fraction,
    };
    let path = dir.join("evaluation.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&metrics)?).map_err(|e| DprError::io(&path, e))?;
    Ok(metrics)
}
