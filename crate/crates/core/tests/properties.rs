//! Cross-module properties: metric estimators and compute accounting composed with selection.

use dpr_core::evaluation::{flops_report, frechet_distance, kernel_mmd, FeatureSet};
use dpr_core::selector::threshold_mask;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn draws(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f64> {
    let normal = Normal::new(0.3, 0.7).unwrap();
    Array2::from_shape_fn((n, dim), |_| normal.sample(rng))
}

#[test]
fn kernel_distance_of_split_halves_is_zero_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let values: Vec<f64> = (0..40)
        .map(|_| {
            let all = draws(&mut rng, 120, 6);
            let a = FeatureSet::new(all.slice(ndarray::s![..60, ..]).to_owned()).unwrap();
            let b = FeatureSet::new(all.slice(ndarray::s![60.., ..]).to_owned()).unwrap();
            kernel_mmd(&a, &b).unwrap()
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    assert!(mean.abs() <= 3.0 * se, "mean {mean} vs se {se}");
}

#[test]
fn frechet_distance_of_a_set_with_itself_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let f = FeatureSet::new(draws(&mut rng, 50, 5)).unwrap();
    assert!(frechet_distance(&f, &f).unwrap().abs() <= 1e-6);
}

proptest! {
    #[test]
    fn compute_ratio_never_increases_with_tau(
        scores in proptest::collection::vec(0.0f64..=1.0, 16),
        mut taus in proptest::collection::vec(0.0f64..=1.0, 2..10),
        cost in 1.0f64..1e6,
        selector_share in 0.0f64..2.0,
    ) {
        taus.sort_by(f64::total_cmp);
        let grid = Array2::from_shape_vec((4, 4), scores).unwrap();
        let ratios: Vec<f64> = taus
            .iter()
            .map(|&t| {
                let selected = threshold_mask(&grid, t).selected_count() as f64;
                flops_report(selected, 16, cost, selector_share * cost).unwrap().flops_ratio
            })
            .collect();
        for w in ratios.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }
}
