#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spp_core::nn::{Architecture, Batch, ModelState};
use spp_core::params::{ParamMap, TensorId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Model with weights redrawn uniformly from `[-scale, scale]` and small
/// random biases, so ReLUs sit away from their kink.
pub fn random_model(arch: Architecture, seed: u64, scale: f64) -> ModelState {
    let mut m = ModelState::new(arch, seed, 0.0).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    m.params = m.params.map(|_| 0.0);
    for (_, layer) in m.params.layers_mut() {
        layer.weight.mapv_inplace(|_| r.random_range(-scale..scale));
        layer.bias.mapv_inplace(|_| r.random_range(-0.1..0.1));
    }
    m
}

pub fn net_4_3_2(seed: u64) -> ModelState {
    random_model(Architecture::single(&[4, 3, 2]).unwrap(), seed, 1.0)
}

pub fn inputs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

pub fn batch(rows: usize, cols: usize, classes: usize, seed: u64) -> Batch {
    let mut r = rng(seed.wrapping_add(1));
    let labels = (0..rows).map(|_| r.random_range(0..classes)).collect();
    Batch::new(inputs(rows, cols, seed), labels, 0).unwrap()
}

pub fn tensor_ids(p: &ParamMap) -> Vec<TensorId> {
    p.tensors().map(|(id, _, _)| id).collect()
}

/// Central finite differences of `f` with respect to every parameter.
pub fn numeric_gradient(model: &ModelState, h: f64, f: impl Fn(&ModelState) -> f64) -> ParamMap {
    let mut grad = model.params.zeros_like();
    let mut probe = model.clone();
    for id in tensor_ids(&model.params) {
        for i in 0..model.params.tensor(id).len() {
            let w = model.params.tensor(id)[i];
            probe.params.tensor_mut(id)[i] = w + h;
            let up = f(&probe);
            probe.params.tensor_mut(id)[i] = w - h;
            let down = f(&probe);
            probe.params.tensor_mut(id)[i] = w;
            grad.tensor_mut(id)[i] = (up - down) / (2.0 * h);
        }
    }
    grad
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Coordinates where analytic and numeric gradients disagree beyond `tol`.
pub fn gradient_mismatches(analytic: &ParamMap, numeric: &ParamMap, tol: f64, floor: f64) -> Vec<String> {
    let names = analytic.element_names();
    analytic
        .flatten()
        .into_iter()
        .zip(numeric.flatten())
        .zip(names)
        .filter(|((a, n), _)| relative_error(*a, *n, floor) >= tol)
        .map(|((a, n), name)| format!("{name}: analytic {a:e} numeric {n:e}"))
        .collect()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Map shaped like `p` with entries uniform in `[lo, hi)`.
pub fn random_like(p: &ParamMap, seed: u64, lo: f64, hi: f64) -> ParamMap {
    let mut r = rng(seed);
    let mut out = p.zeros_like();
    for (_, layer) in out.layers_mut() {
        layer.weight.mapv_inplace(|_| r.random_range(lo..hi));
        layer.bias.mapv_inplace(|_| r.random_range(lo..hi));
    }
    out
}

/// Spearman correlation between the Taylor saliency of a 3-2 softmax net
/// and the exact change in mean entropy when each parameter is zeroed. The
/// net starts from the library initialization and takes 50 full-batch
/// cross-entropy steps toward a random teacher's labels on a fixed set of 32
/// inputs in `[0, 1]`, so the estimate is taken at a trained state.
pub fn saliency_spearman(seed: u64) -> f64 {
    use spp_core::nn::{self, Objective};
    use spp_core::{analysis, importance};
    let arch = Architecture::single(&[3, 2]).unwrap();
    let mut m = ModelState::new(arch.clone(), seed, 0.0).unwrap();
    let x = inputs(32, 3, seed + 1000).mapv(|v| (v + 1.0) / 2.0);
    let teacher = random_model(arch, seed + 77, 2.0);
    let labels = nn::forward(&teacher, x.view(), 0)
        .unwrap()
        .rows()
        .into_iter()
        .map(|r| nn::argmax(r.iter().copied()))
        .collect();
    let fit = Batch::new(x.clone(), labels, 0).unwrap();
    for _ in 0..50 {
        let g = nn::gradients(&m, &fit, Objective::CrossEntropy).unwrap();
        nn::sgd_step(&mut m, &g, 0.5);
    }

    let mean_entropy = |m: &ModelState| nn::entropy(&nn::softmax(&nn::forward(m, x.view(), 0).unwrap()));
    let base = mean_entropy(&m);
    let est = importance::spp_estimate(&m, x.view(), 0).unwrap();
    let mut taylor = Vec::new();
    let mut exact = Vec::new();
    for id in tensor_ids(&m.params) {
        for i in 0..m.params.tensor(id).len() {
            let mut pruned = m.clone();
            pruned.params.tensor_mut(id)[i] = 0.0;
            exact.push(mean_entropy(&pruned) - base);
            taylor.push(est.saliency.tensor(id)[i]);
        }
    }
    analysis::spearman(&taylor, &exact).unwrap()
}

/// Hand-computed metric values on small matrices; returns a description of
/// every mismatch.
pub fn metric_identity_failures() -> Vec<String> {
    use spp_core::metrics::{acc, bwt, fwt, smt, AccuracyMatrix};
    let mut failures = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if got.to_bits() != want.to_bits() {
            failures.push(format!("{what}: got {got:e}, expected {want:e}"));
        }
    };

    let p3 = AccuracyMatrix::from_rows(vec![vec![0.75], vec![0.5, 1.0], vec![0.25, 0.75, 0.5]]).unwrap();
    check("3x3 ACC", acc(&p3).unwrap(), 0.5);
    check("3x3 BWT", bwt(&p3).unwrap(), -0.375);
    check("3x3 FWT", fwt(&p3, &[Some(0.5), Some(0.75), None]).unwrap(), 0.25);
    // Column variances 1/24 and 1/64.
    check("3x3 SMT", smt(&p3).unwrap(), 11.0 / 384.0);

    let p4 = AccuracyMatrix::from_rows(vec![
        vec![1.0],
        vec![0.875, 0.75],
        vec![0.75, 0.5, 1.0],
        vec![0.5, 0.25, 0.75, 1.0],
    ])
    .unwrap();
    check("4x4 ACC", acc(&p4).unwrap(), 0.625);
    check("4x4 BWT", bwt(&p4).unwrap(), -1.25 / 3.0);
    check("4x4 FWT", fwt(&p4, &[Some(0.5), Some(0.5), Some(0.5), None]).unwrap(), 1.25 / 3.0);
    // Column variances 35/1024, 1/24 and 1/64.
    check("4x4 SMT", smt(&p4).unwrap(), (35.0 / 1024.0 + 0.125 / 3.0 + 1.0 / 64.0) / 3.0);

    let steady = AccuracyMatrix::from_rows(vec![
        vec![0.9],
        vec![0.9, 0.8],
        vec![0.9, 0.8, 0.7],
    ])
    .unwrap();
    check("no-forgetting BWT", bwt(&steady).unwrap(), 0.0);
    check("no-forgetting SMT", smt(&steady).unwrap(), 0.0);
    failures
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;

/// Which analytic gradient a finite-difference check covers.
#[derive(Debug, Clone, Copy)]
pub enum FdTarget {
    CrossEntropy,
    Entropy,
    Penalty,
}

/// Finite-difference check of one gradient on the 4-3-2 net for `seed`;
/// returns the number of coordinates checked and the mismatches.
pub fn fd_check(target: FdTarget, seed: u64) -> (usize, Vec<String>) {
    use spp_core::consolidation;
    use spp_core::importance::ImportanceMap;
    use spp_core::nn::{self, Objective};
    let m = net_4_3_2(seed);
    let (analytic, numeric) = match target {
        FdTarget::CrossEntropy | FdTarget::Entropy => {
            let (objective, offset) = match target {
                FdTarget::CrossEntropy => (Objective::CrossEntropy, 100),
                _ => (Objective::Entropy, 200),
            };
            let b = batch(8, 4, 2, offset + seed);
            let analytic = nn::gradients(&m, &b, objective).unwrap().params;
            let numeric = numeric_gradient(&m, FD_STEP, |p| {
                let probs = nn::softmax(&nn::forward(p, b.inputs.view(), 0).unwrap());
                match objective {
                    Objective::CrossEntropy => nn::cross_entropy(&probs, &b.labels).unwrap(),
                    _ => nn::entropy(&probs),
                }
            });
            (analytic, numeric)
        }
        FdTarget::Penalty => {
            let anchor = consolidation::take_anchor(&net_4_3_2(seed + 1000), 0);
            let mut imp = ImportanceMap::new();
            imp.accumulate(0, random_like(&m.params, seed, 0.0, 2.0)).unwrap();
            let lambda = 1.5;
            let mut analytic = m.params.zeros_like();
            consolidation::add_penalty_gradient(&mut analytic, &m, &anchor, &imp, lambda).unwrap();
            let numeric = numeric_gradient(&m, FD_STEP, |p| consolidation::penalty(p, &anchor, &imp, lambda).unwrap());
            (analytic, numeric)
        }
    };
    (analytic.num_params(), gradient_mismatches(&analytic, &numeric, FD_TOL, FD_FLOOR))
}
