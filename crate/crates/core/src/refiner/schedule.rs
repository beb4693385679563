//! Linear variance schedule for the forward diffusion process.

use std::io::Write;
use std::path::Path;

use crate::error::{bail, DprError, Result};

/// Per-step variances; timesteps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Interpolates `beta` linearly from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        bail!(Config, "schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail!(
            Config,
            "schedule bounds must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        );
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            bail!(Config, "every beta must lie in (0, 1)");
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            bail!(InvalidInput, "timestep {t} outside 1..={}", self.len());
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `t,beta_t,alpha_bar_t` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,beta_t,alpha_bar_t")?;
        for t in 1..=self.len() {
            writeln!(w, "{t},{:e},{:e}", self.beta(t), self.alpha_bar(t))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| DprError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| DprError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn constant_beta_is_geometric() {
        let b = 0.03;
        let s = make_schedule(50, b, b).unwrap();
        for t in 1..=50 {
            let expected = (1.0 - b).powi(t as i32);
            assert!((s.alpha_bar(t) - expected).abs() <= 1e-15 * t as f64);
        }
    }

    #[test]
    fn invalid_bounds_are_errors() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert!(s.check_step(0).is_err() && s.check_step(2).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let s = make_schedule(4, 0.1, 0.4).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("t,beta_t,alpha_bar_t\n1,"));
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.2) {
            let s = make_schedule(steps, lo, lo + span).unwrap();
            for t in 1..=steps {
                prop_assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
                prop_assert_eq!(s.alpha(t) + s.beta(t), 1.0);
                if t > 1 {
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
        }
    }
}
