//! Compute accounting for selective refinement.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Spent compute over the compute of refining every patch.
    pub flops_ratio: f64,
    /// Share of patches sent to the refiner.
    pub patch_fraction: f64,
    pub saving: f64,
    /// Spent compute in the caller's cost unit.
    pub absolute: f64,
    pub full_image: f64,
}

/// `selected` may be fractional (an average over images).
pub fn flops_report(selected: f64, total: usize, per_patch_cost: f64, selector_cost: f64) -> Result<FlopsReport> {
    if total == 0 {
        bail!(InvalidInput, "total patch count must be positive");
    }
    if !(per_patch_cost > 0.0) || !(selector_cost >= 0.0) || !per_patch_cost.is_finite() || !selector_cost.is_finite() {
        bail!(InvalidInput, "costs must be finite, per-patch cost positive and selector cost non-negative");
    }
    if !(0.0..=total as f64).contains(&selected) {
        bail!(InvalidInput, "selected count {selected} outside [0, {total}]");
    }
    let full_image = total as f64 * per_patch_cost;
    let absolute = selected * per_patch_cost + selector_cost;
    let flops_ratio = absolute / full_image;
    Ok(FlopsReport {
        flops_ratio,
        patch_fraction: selected / total as f64,
        saving: 1.0 - flops_ratio,
        absolute,
        full_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let all = flops_report(64.0, 64, 3.0, 0.0).unwrap();
        assert_eq!(all.flops_ratio, 1.0);
        let r = flops_report(14.59, 64, 1.0, 0.0).unwrap();
        assert_eq!((r.patch_fraction * 1000.0).round() / 1000.0, 0.228);
        assert_eq!((r.saving * 1000.0).round() / 1000.0, 0.772);
        assert!(flops_report(1.0, 0, 1.0, 0.0).is_err());
        assert!(flops_report(1.0, 4, -1.0, 0.0).is_err());
        assert!(flops_report(5.0, 4, 1.0, 0.0).is_err());
    }

    #[test]
    fn monotone_in_selected() {
        let ratios: Vec<f64> = (0..=16)
            .map(|s| flops_report(s as f64, 16, 2.5, 0.7).unwrap().flops_ratio)
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] >= w[0]));
        assert!((ratios[0] - 0.7 / 40.0).abs() < 1e-12);
    }
}
