//! Threshold sweeps over cached selector scores.

use serde::{Deserialize, Serialize};

use super::infer::{infer_with, InferContext, TileMemo};
use super::plot::{line_chart, Series};
use super::{create_dir, write_csv, RunConfig};
use crate::error::{bail, DprError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    /// Pooled selection recall on ground-truth cells.
    pub ps_tpr: f64,
    pub patch_fraction: f64,
    pub map: f64,
    pub map50: f64,
    pub precision: f64,
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Sorted by tau.
    pub rows: Vec<SweepRow>,
}

/// One inference pass per threshold; scores and refined tiles are shared across passes.
pub fn sweep_with(cfg: &RunConfig, ctx: &InferContext, taus: &[f64]) -> Result<SweepResult> {
    if taus.len() < 2 {
        bail!(Config, "a sweep needs at least two thresholds");
    }
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);
    let scores = ctx.scores(cfg.inference.batch_size);
    let mut memo = TileMemo::new();
    let dir = cfg.out_dir.join("sweep");
    let mut rows = Vec::with_capacity(taus.len());
    for tau in taus {
        let run_dir = dir.join(format!("tau_{tau}"));
        let quiet = RunConfig {
            inference: super::config::InferenceConfig {
                write_images: false,
                ..cfg.inference.clone()
            },
            ..cfg.clone()
        };
        let r = infer_with(&quiet, ctx, &scores, tau, &mut memo, Some(&run_dir))?;
        rows.push(SweepRow {
            tau,
            ps_tpr: r.selection_tpr,
            patch_fraction: r.flops.patch_fraction,
            map: r.metrics.map,
            map50: r.metrics.map50,
            precision: r.metrics.precision,
            flops_ratio: r.flops.flops_ratio,
        });
    }
    Ok(SweepResult { rows })
}

pub fn write_sweep(dir: &std::path::Path, result: &SweepResult) -> Result<()> {
    create_dir(dir)?;
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            [r.tau, r.ps_tpr, r.patch_fraction, r.map, r.map50, r.precision, r.flops_ratio]
                .iter()
                .map(|v| v.to_string())
                .collect()
        })
        .collect();
    write_csv(
        &dir.join("sweep.csv"),
        &["tau", "ps_tpr", "patch_fraction", "map", "map50", "precision", "flops_ratio"],
        &rows,
    )?;
    let path = dir.join("sweep.json");
    std::fs::write(&path, serde_json::to_vec_pretty(result)?).map_err(|e| DprError::io(&path, e))?;
    let tradeoff = line_chart(
        "Detection quality against refined-patch fraction",
        "refined patch fraction",
        "score",
        &[
            Series {
                label: "mAP",
                points: result.rows.iter().map(|r| (r.patch_fraction, r.map)).collect(),
            },
            Series {
                label: "mAP50",
                points: result.rows.iter().map(|r| (r.patch_fraction, r.map50)).collect(),
            },
        ],
    );
    let tpr = line_chart(
        "Selection recall and patch fraction against threshold",
        "tau",
        "value",
        &[
            Series {
                label: "selection TPR",
                points: result.rows.iter().map(|r| (r.tau, r.ps_tpr)).collect(),
            },
            Series {
                label: "patch fraction",
                points: result.rows.iter().map(|r| (r.tau, r.patch_fraction)).collect(),
            },
        ],
    );
    for (name, svg) in [("tradeoff.svg", tradeoff), ("tpr_vs_tau.svg", tpr)] {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|e| DprError::io(&path, e))?;
    }
    Ok(())
}

pub fn run_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    let ctx = InferContext::load(cfg)?;
    let result = sweep_with(cfg, &ctx, &cfg.sweep.taus)?;
    write_sweep(&cfg.out_dir.join("sweep"), &result)?;
    Ok(result)
}
