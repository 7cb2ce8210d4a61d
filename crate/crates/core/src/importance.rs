//! Parameter importance estimators.
//!
//! The soft-pruning saliency scores every parameter by the predicted change
//! in output entropy if that parameter were set to zero. The prediction is a
//! second-order Taylor expansion with the Hessian replaced by the diagonal
//! Fisher of the per-sample entropy gradients; the perturbation is confined
//! to the single coordinate being pruned, so for weight `w_k`
//!
//! ```text
//! δE_k = -g_k · w_k + ½ · F_k · w_k²
//! ```
//!
//! where `g` is the gradient of the mean entropy over an unlabelled sample.
//! Negative scores are clamped to zero and per-task maps are summed into a
//! cumulative map.
//!
//! EWC (diagonal Fisher of the log-likelihood), MAS (mean absolute gradient
//! of the squared output norm) and SI (path integral of `-g·Δw`) importance
//! are provided for the baselines.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ModelState, Mode};
use crate::params::ParamMap;

/// Rows processed per reverse pass when reducing per-sample statistics.
const CHUNK_ROWS: usize = 256;

/// Which per-sample objective a Fisher diagonal is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherObjective {
    /// Output entropy (soft pruning).
    Entropy,
    /// Log-likelihood of the model's own argmax prediction (label-free EWC).
    PredictedLabel,
    /// Log-likelihood of the true label.
    TrueLabel,
}

/// Mean squared per-sample gradient, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub params: ParamMap,
    pub sample_count: usize,
    pub objective: FisherObjective,
}

/// Reductions over per-sample gradients.
#[derive(Debug, Default)]
struct SampleStats {
    /// Σ_n g_n
    sum: Option<ParamMap>,
    /// Σ_n g_n²
    sum_sq: Option<ParamMap>,
    /// Σ_n |g_n|
    sum_abs: Option<ParamMap>,
}

#[derive(Clone, Copy)]
struct Want {
    sum: bool,
    sum_sq: bool,
    sum_abs: bool,
}

/// Row order sorted lexicographically by value so that reductions do not
/// depend on the order the sample was supplied in.
fn canonical_order(inputs: &ArrayView2<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    order.sort_by(|&a, &b| {
        inputs
            .row(a)
            .iter()
            .zip(inputs.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Runs the model over the sample in canonical order and reduces the
/// per-sample gradients of an objective given by its logit gradient.
fn per_sample_stats(
    model: &ModelState,
    inputs: ArrayView2<f64>,
    labels: Option<&[usize]>,
    task_id: usize,
    want: Want,
    dlogits: impl Fn(&Array2<f64>, Option<&[usize]>) -> Result<Array2<f64>>,
) -> Result<SampleStats> {
    if inputs.nrows() == 0 {
        return Err(Error::config("importance sample is empty"));
    }
    if let Some(l) = labels {
        if l.len() != inputs.nrows() {
            return Err(Error::shape("importance labels and inputs differ in length"));
        }
    }
    let order = canonical_order(&inputs);
    let zeros = || Some(model.params.zeros_like());
    let mut stats = SampleStats {
        sum: if want.sum { zeros() } else { None },
        sum_sq: if want.sum_sq { zeros() } else { None },
        sum_abs: if want.sum_abs { zeros() } else { None },
    };
    for rows in order.chunks(CHUNK_ROWS) {
        let chunk = inputs.select(Axis(0), rows);
        let chunk_labels: Option<Vec<usize>> =
            labels.map(|l| rows.iter().map(|&r| l[r]).collect());
        let trace = nn::forward_trace(model, chunk.view(), task_id, Mode::Eval)?;
        let d = dlogits(&trace.logits, chunk_labels.as_deref())?;
        nn::backprop(model, &trace, d, |id, delta, input| {
            if let Some(sum) = stats.sum.as_mut() {
                let layer = sum.layer_mut(id);
                ndarray::linalg::general_mat_mul(1.0, &delta.t(), input, 1.0, &mut layer.weight);
                layer.bias += &delta.sum_axis(Axis(0));
            }
            if let Some(sq) = stats.sum_sq.as_mut() {
                // (δ xᵀ)² summed over samples = (δ²)ᵀ (x²)
                let d2 = delta.mapv(|v| v * v);
                let x2 = input.mapv(|v| v * v);
                let layer = sq.layer_mut(id);
                ndarray::linalg::general_mat_mul(1.0, &d2.t(), &x2, 1.0, &mut layer.weight);
                layer.bias += &d2.sum_axis(Axis(0));
            }
            if let Some(abs) = stats.sum_abs.as_mut() {
                let da = delta.mapv(f64::abs);
                let xa = input.mapv(f64::abs);
                let layer = abs.layer_mut(id);
                ndarray::linalg::general_mat_mul(1.0, &da.t(), &xa, 1.0, &mut layer.weight);
                layer.bias += &da.sum_axis(Axis(0));
            }
        });
    }
    Ok(stats)
}

fn mean_of(map: ParamMap, n: usize) -> ParamMap {
    let n = n as f64;
    map.map(|v| v / n)
}

fn fisher_dlogits(
    objective: FisherObjective,
) -> impl Fn(&Array2<f64>, Option<&[usize]>) -> Result<Array2<f64>> {
    move |logits, labels| {
        let probs = nn::softmax(logits);
        match objective {
            FisherObjective::Entropy => Ok(nn::entropy_dlogits(&probs)),
            FisherObjective::PredictedLabel => {
                let predicted: Vec<usize> = probs
                    .rows()
                    .into_iter()
                    .map(|r| nn::argmax(r.iter().copied()))
                    .collect();
                Ok(nn::cross_entropy_dlogits(&probs, &predicted))
            }
            FisherObjective::TrueLabel => {
                let labels = labels
                    .ok_or_else(|| Error::config("true-label Fisher needs labels"))?;
                if let Some(&bad) = labels.iter().find(|&&l| l >= probs.ncols()) {
                    return Err(Error::config(format!("label {bad} out of range")));
                }
                Ok(nn::cross_entropy_dlogits(&probs, labels))
            }
        }
    }
}

/// `F_k = (1/N) Σ_n g_k(x_n)²` for the chosen per-sample objective.
pub fn fisher_diagonal(
    model: &ModelState,
    inputs: ArrayView2<f64>,
    labels: Option<&[usize]>,
    task_id: usize,
    objective: FisherObjective,
) -> Result<FisherDiagonal> {
    let want = Want {
        sum: false,
        sum_sq: true,
        sum_abs: false,
    };
    let stats = per_sample_stats(
        model,
        inputs,
        labels,
        task_id,
        want,
        fisher_dlogits(objective),
    )?;
    Ok(FisherDiagonal {
        params: mean_of(stats.sum_sq.expect("requested"), inputs.nrows()),
        sample_count: inputs.nrows(),
        objective,
    })
}

/// Taylor estimate of the entropy change from zeroing each parameter:
/// `-g_k w_k + ½ F_k w_k²`.
pub fn spp_saliency(
    model: &ModelState,
    entropy_grad: &ParamMap,
    fisher: &FisherDiagonal,
) -> Result<ParamMap> {
    model.params.check_congruent(entropy_grad, "entropy gradient")?;
    model.params.check_congruent(&fisher.params, "Fisher diagonal")?;
    let mut out = model.params.zeros_like();
    for (((_, o), (_, w)), ((_, g), (_, f))) in out
        .layers_mut()
        .zip(model.params.layers())
        .zip(entropy_grad.layers().zip(fisher.params.layers()))
    {
        Zip::from(&mut o.weight)
            .and(&w.weight)
            .and(&g.weight)
            .and(&f.weight)
            .for_each(|o, &w, &g, &f| *o = -g * w + 0.5 * f * w * w);
        Zip::from(&mut o.bias)
            .and(&w.bias)
            .and(&g.bias)
            .and(&f.bias)
            .for_each(|o, &w, &g, &f| *o = -g * w + 0.5 * f * w * w);
    }
    Ok(out)
}

/// Entropy gradient, Fisher diagonal and raw saliency for one task.
#[derive(Debug, Clone)]
pub struct SppEstimate {
    pub entropy_grad: ParamMap,
    pub fisher: FisherDiagonal,
    pub saliency: ParamMap,
}

/// Computes the soft-pruning saliency on an unlabelled sample in one pass.
pub fn spp_estimate(model: &ModelState, inputs: ArrayView2<f64>, task_id: usize) -> Result<SppEstimate> {
    let want = Want {
        sum: true,
        sum_sq: true,
        sum_abs: false,
    };
    let stats = per_sample_stats(
        model,
        inputs,
        None,
        task_id,
        want,
        fisher_dlogits(FisherObjective::Entropy),
    )?;
    let n = inputs.nrows();
    let entropy_grad = mean_of(stats.sum.expect("requested"), n);
    let fisher = FisherDiagonal {
        params: mean_of(stats.sum_sq.expect("requested"), n),
        sample_count: n,
        objective: FisherObjective::Entropy,
    };
    let saliency = spp_saliency(model, &entropy_grad, &fisher)?;
    Ok(SppEstimate {
        entropy_grad,
        fisher,
        saliency,
    })
}

/// Elementwise `max(0, ·)`.
pub fn clamp(map: &ParamMap) -> ParamMap {
    map.map(|v| v.max(0.0))
}

/// Rescaling applied to the cumulative importance before it weights the
/// penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Raw sums.
    #[default]
    None,
    /// Divide by the largest entry, so the map spans `[0, 1]`.
    Max,
}

/// Rescale a non-negative map according to `scaling`. An all-zero map is
/// returned unchanged.
pub fn rescale(map: &ParamMap, scaling: Scaling) -> Result<ParamMap> {
    let values = map.flatten();
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::State(format!("cannot rescale importance entry {bad}")));
    }
    let divisor = match scaling {
        Scaling::None => return Ok(map.clone()),
        Scaling::Max => values.iter().copied().fold(0.0, f64::max),
    };
    if divisor == 0.0 {
        return Ok(map.clone());
    }
    Ok(map.map(|v| v / divisor))
}

/// Mean over the sample of `|∂‖f(x)‖²/∂w|`, with `f` the active head's logits.
pub fn mas_importance(model: &ModelState, inputs: ArrayView2<f64>, task_id: usize) -> Result<ParamMap> {
    let want = Want {
        sum: false,
        sum_sq: false,
        sum_abs: true,
    };
    let stats = per_sample_stats(model, inputs, None, task_id, want, |logits, _| {
        Ok(logits.mapv(|z| 2.0 * z))
    })?;
    Ok(mean_of(stats.sum_abs.expect("requested"), inputs.nrows()))
}

/// `ω_k += -g_k · Δw_k` for one optimizer step.
pub fn si_accumulator_update(omega: &mut ParamMap, grad: &ParamMap, delta_w: &ParamMap) {
    for (((_, o), (_, g)), (_, d)) in omega.layers_mut().zip(grad.layers()).zip(delta_w.layers()) {
        Zip::from(&mut o.weight)
            .and(&g.weight)
            .and(&d.weight)
            .for_each(|o, &g, &d| *o -= g * d);
        Zip::from(&mut o.bias)
            .and(&g.bias)
            .and(&d.bias)
            .for_each(|o, &g, &d| *o -= g * d);
    }
}

/// `max(0, ω_k) / ((Δw_k^total)² + ξ)`.
pub fn si_importance(omega: &ParamMap, total_delta: &ParamMap, damping: f64) -> Result<ParamMap> {
    if !(damping > 0.0) || !damping.is_finite() {
        return Err(Error::config(format!(
            "SI damping must be positive, got {damping}"
        )));
    }
    omega.check_congruent(total_delta, "SI parameter displacement")?;
    let mut out = omega.clone();
    out.zip_apply(total_delta, move |o, d| *o = o.max(0.0) / (d * d + damping));
    Ok(out)
}

/// Running SI state over one task.
#[derive(Debug, Clone)]
pub struct SiTracker {
    omega: ParamMap,
    start: ParamMap,
}

impl SiTracker {
    pub fn new(model: &ModelState) -> Self {
        SiTracker {
            omega: model.params.zeros_like(),
            start: model.params.clone(),
        }
    }

    pub fn update(&mut self, grad: &ParamMap, delta_w: &ParamMap) {
        si_accumulator_update(&mut self.omega, grad, delta_w);
    }

    pub fn omega(&self) -> &ParamMap {
        &self.omega
    }

    /// Importance for the task that started when the tracker was created.
    pub fn finish(&self, model: &ModelState, damping: f64) -> Result<ParamMap> {
        let mut total = model.params.clone();
        total.zip_apply(&self.start, |w, s| *w -= s);
        si_importance(&self.omega, &total, damping)
    }
}

/// Per-task clamped importance and their running sum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub per_task: BTreeMap<usize, ParamMap>,
    pub cumulative: Option<ParamMap>,
    pub last_task: Option<usize>,
}

impl ImportanceMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_task(&self) -> usize {
        self.last_task.map_or(0, |t| t + 1)
    }

    /// Adds the clamped map for `task_id`, which must directly follow the
    /// last accumulated task.
    pub fn accumulate(&mut self, task_id: usize, clamped: ParamMap) -> Result<()> {
        let expected = self.next_task();
        if task_id != expected {
            return Err(Error::Sequence(format!(
                "importance for task {task_id} arrived but task {expected} was expected"
            )));
        }
        let min = clamped.min_value();
        if min < 0.0 || min.is_nan() {
            return Err(Error::config(format!(
                "importance map for task {task_id} is not clamped (min {min})"
            )));
        }
        match &mut self.cumulative {
            Some(cum) => {
                cum.check_congruent(&clamped, "task importance")?;
                cum.add_assign(&clamped);
            }
            None => self.cumulative = Some(clamped.clone()),
        }
        self.per_task.insert(task_id, clamped);
        self.last_task = Some(task_id);
        Ok(())
    }

    /// Replaces the cumulative map by the rescaled sum of the per-task maps.
    pub fn rescale_cumulative(&mut self, scaling: Scaling) -> Result<()> {
        let mut maps = self.per_task.values();
        let Some(first) = maps.next() else {
            return Ok(());
        };
        let mut sum = first.clone();
        for m in maps {
            sum.add_assign(m);
        }
        self.cumulative = Some(rescale(&sum, scaling)?);
        Ok(())
    }
}
