//! Data plumbing, metrics and analysis against independent oracles.

mod common;

use common::*;
use ndarray::{array, Array2};
use rand::Rng;
use spp_core::analysis::{self, HistogramSource};
use spp_core::data::{self, SplitTag, SyntheticSpec};
use spp_core::metrics::{self, AccuracyMatrix};
use spp_core::nn::{self, Architecture, ModelState};

#[test]
fn subsample_keeps_classes_balanced() {
    let spec = SyntheticSpec {
        width: 4,
        ..SyntheticSpec::default()
    };
    let source = data::synthetic_dataset(&spec, 10_000, 1, SplitTag::Train).unwrap();
    for seed in 0..20 {
        let sub = data::subsample(&source, 1000, seed).unwrap();
        for (class, &n) in sub.class_counts().iter().enumerate() {
            assert!((80..=120).contains(&n), "seed {seed} class {class}: {n}");
        }
    }
}

#[test]
fn uniform_values_give_flat_histograms() {
    // 99.9% quantile of chi-squared with 19 degrees of freedom.
    const CRITICAL: f64 = 43.82;
    let (bins, n) = (20usize, 10_000usize);
    for seed in 0..10 {
        let mut r = rng(seed);
        let values: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let source = HistogramSource {
            method: "uniform".into(),
            task: "-".into(),
            layer: "-".into(),
        };
        let h = analysis::importance_histogram(&values, bins, (0.0, 1.0), source).unwrap();
        let expected = n as f64 / bins as f64;
        let chi2: f64 = h
            .densities
            .iter()
            .map(|d| {
                let observed = d * n as f64 / bins as f64;
                (observed - expected).powi(2) / expected
            })
            .sum();
        assert!(chi2 < CRITICAL, "seed {seed}: chi2 {chi2}");
    }
}

#[test]
fn frechet_matches_hand_executed_recurrence() {
    // Coupling table, rows over p and columns over q:
    //   1      √10  √10  √10
    //   √2     3    3    3
    //   √5     √10  3    3
    //   √10    √13  3    3
    let p = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
    let q = [(0.0, 1.0), (1.0, 3.0), (2.0, -1.0), (3.0, 1.0)];
    assert_eq!(analysis::discrete_frechet(&p, &q).unwrap(), 3.0);
    assert_eq!(analysis::discrete_frechet(&p[..1], &q[..2]).unwrap(), 10f64.sqrt());
}

#[test]
fn smt_matches_two_pass_variance_oracle() {
    let mut r = rng(8);
    for _ in 0..10 {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|j| (0..=j).map(|_| r.random_range(0.0..1.0)).collect())
            .collect();
        let p = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        let mut total = 0.0;
        for j in 0..3 {
            let column: Vec<f64> = (j..4).map(|k| rows[k][j]).collect();
            let mean = column.iter().sum::<f64>() / column.len() as f64;
            let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / column.len() as f64;
            total += var;
        }
        let oracle = total / 3.0;
        assert!((metrics::smt(&p).unwrap() - oracle).abs() <= 1e-12);
    }
}

#[test]
fn metrics_match_hand_computed_matrices() {
    let failures = metric_identity_failures();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn accuracy_matches_hand_count() {
    // Identity logits: the prediction is the larger of the two inputs.
    let mut m = ModelState::new(Architecture::single(&[2, 2]).unwrap(), 0, 0.0).unwrap();
    m.params.heads[0].weight = array![[1.0, 0.0], [0.0, 1.0]];
    m.params.heads[0].bias = array![0.0, 0.0];
    let x = Array2::from_shape_fn((20, 2), |(i, c)| if (i % 3 == 0) == (c == 0) { 0.9 } else { 0.1 });
    // Predictions are 0 on rows 0, 3, 6, ..., 18 and 1 elsewhere.
    let labels: Vec<usize> = (0..20).map(|i| if i < 10 { 0 } else { 1 }).collect();
    // Correct: rows 0, 3, 6, 9 predict 0 with label 0; rows 10..20 except
    // 12, 15, 18 predict 1 with label 1.
    let correct = 4 + (10 - 3);
    let got = nn::accuracy(&m, x.view(), &labels, 0).unwrap();
    assert_eq!(got, correct as f64 / 20.0);
}

#[test]
fn change_map_matches_loop_oracle() {
    let m = random_model(Architecture::multi(&[5, 4, 3], &[2, 2]).unwrap(), 3, 1.0);
    let after = random_like(&m.params, 4, -1.0, 1.0);
    let omega = random_like(&m.params, 5, 0.0, 2.0);
    let map = analysis::change_map(&m.params, &after, &omega).unwrap();
    for ((id, b), layer) in m.params.layers().zip(&map.layers) {
        assert_eq!(layer.layer, id.to_string());
        let (a, o) = (after.layer(id), omega.layer(id));
        let mut weighted = 0.0;
        for r in 0..b.weight.nrows() {
            for c in 0..b.weight.ncols() {
                let d = a.weight[[r, c]] - b.weight[[r, c]];
                assert_eq!(layer.abs_change[[r, c]], d.abs());
                weighted += o.weight[[r, c]] * d * d;
            }
            let d = a.bias[r] - b.bias[r];
            weighted += o.bias[r] * d * d;
        }
        assert!((layer.weighted_change - weighted).abs() <= 1e-12 * weighted.max(1.0));
    }
}
