//! Minimal dense-network engine.
//!
//! A model is a ReLU trunk followed by one or more linear output heads.
//! Softmax is only applied at the loss/entropy boundary. Gradients are
//! computed by an explicit reverse pass; [`backprop`] exposes the per-sample
//! layer deltas so Fisher and MAS estimators can reduce them differently
//! from the plain mean gradient.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Dense, LayerId, ParamMap};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One output layer shared by every task.
    Single,
    /// One output layer per task, sharing the trunk.
    Multi,
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(HeadMode::Single),
            "multi" => Ok(HeadMode::Multi),
            _ => Err(Error::config(format!("unknown head mode `{s}`"))),
        }
    }
}

/// Layer sizes plus head layout.
///
/// `layer_sizes` lists the input width, the hidden widths and the nominal
/// output width. In single-head mode the nominal width is the head width; in
/// multi-head mode every head carries its own width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_sizes: Vec<usize>,
    pub head_mode: HeadMode,
    pub head_widths: Vec<usize>,
}

impl Architecture {
    pub fn single(layer_sizes: &[usize]) -> Result<Self> {
        let width = *layer_sizes
            .last()
            .ok_or_else(|| Error::config("architecture must list at least two layer sizes"))?;
        let arch = Architecture {
            layer_sizes: layer_sizes.to_vec(),
            head_mode: HeadMode::Single,
            head_widths: vec![width],
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn multi(layer_sizes: &[usize], head_widths: &[usize]) -> Result<Self> {
        let arch = Architecture {
            layer_sizes: layer_sizes.to_vec(),
            head_mode: HeadMode::Multi,
            head_widths: head_widths.to_vec(),
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "architecture must list at least two layer sizes (input and output)",
            ));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::config(format!(
                "layer size at position {pos} must be positive"
            )));
        }
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            return Err(Error::config("every head needs a positive width"));
        }
        if self.head_mode == HeadMode::Single && self.head_widths.len() != 1 {
            return Err(Error::config("single-head mode has exactly one head"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Width of the last hidden layer, i.e. the input width of every head.
    pub fn trunk_width(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 2
    }
}

/// Parameters plus the metadata needed to rebuild and interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Architecture,
    pub params: ParamMap,
    pub dropout_rate: f64,
    pub seed: u64,
}

/// Single-head model with Gaussian weights and zero biases.
pub fn init_model(layer_sizes: &[usize], seed: u64) -> Result<ModelState> {
    ModelState::new(Architecture::single(layer_sizes)?, seed, 0.0)
}

impl ModelState {
    /// Weights are drawn i.i.d. from N(0, 0.1²) in canonical parameter order
    /// (trunk, then heads, row-major); biases start at zero.
    pub fn new(arch: Architecture, seed: u64, dropout_rate: f64) -> Result<Self> {
        arch.validate()?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut draw = |inputs: usize, outputs: usize| Dense {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || normal.sample(&mut rng)),
            bias: Array1::zeros(outputs),
        };
        let sizes = &arch.layer_sizes;
        let trunk = sizes[..sizes.len() - 1]
            .windows(2)
            .map(|w| draw(w[0], w[1]))
            .collect();
        let trunk_width = arch.trunk_width();
        let heads = arch
            .head_widths
            .iter()
            .map(|&w| draw(trunk_width, w))
            .collect();
        Ok(ModelState {
            arch,
            params: ParamMap { trunk, heads },
            dropout_rate,
            seed,
        })
    }

    /// Head used for `task_id`.
    pub fn head_index(&self, task_id: usize) -> Result<usize> {
        match self.arch.head_mode {
            HeadMode::Single => Ok(0),
            HeadMode::Multi if task_id < self.params.heads.len() => Ok(task_id),
            HeadMode::Multi => Err(Error::config(format!(
                "task {task_id} has no head (model has {})",
                self.params.heads.len()
            ))),
        }
    }

    pub fn class_count(&self, task_id: usize) -> Result<usize> {
        Ok(self.params.heads[self.head_index(task_id)?].outputs())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}

/// A labelled mini-batch for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub task_id: usize,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, task_id: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::config("batch must contain at least one row"));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            task_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CrossEntropy,
    Entropy,
    /// Anything assembled outside the two built-in objectives
    /// (penalty terms, MAS output norm, predicted-label likelihood).
    Custom,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(Objective::CrossEntropy),
            "entropy" => Ok(Objective::Entropy),
            "custom" => Ok(Objective::Custom),
            _ => Err(Error::config(format!("unknown objective `{s}`"))),
        }
    }
}

/// Gradients laid out like the model they came from.
///
/// Inactive heads are present and zero so the map stays shape-congruent.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub params: ParamMap,
    pub objective: Objective,
    pub head: usize,
}

/// Forward-pass mode.
pub enum Mode<'a> {
    Eval,
    /// Inverted dropout on hidden activations, masks drawn from the RNG.
    Train(&'a mut ChaCha8Rng),
}

/// Cached activations from one forward pass, consumed by [`backprop`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each trunk layer, then the input to the head.
    layer_inputs: Vec<Array2<f64>>,
    /// ReLU derivative times dropout scale, one per trunk layer.
    gates: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub head: usize,
}

fn affine(input: &ArrayView2<f64>, layer: &Dense) -> Array2<f64> {
    let mut out = input.dot(&layer.weight.t());
    out += &layer.bias;
    out
}

pub fn forward_trace(
    model: &ModelState,
    inputs: ArrayView2<f64>,
    task_id: usize,
    mut mode: Mode<'_>,
) -> Result<Trace> {
    if inputs.ncols() != model.arch.input_width() {
        return Err(Error::shape(format!(
            "input width {} does not match first layer width {}",
            inputs.ncols(),
            model.arch.input_width()
        )));
    }
    let head = model.head_index(task_id)?;
    let keep = 1.0 - model.dropout_rate;
    let mut layer_inputs = Vec::with_capacity(model.params.trunk.len() + 1);
    let mut gates = Vec::with_capacity(model.params.trunk.len());
    let mut current = inputs.to_owned();
    for layer in &model.params.trunk {
        let mut z = affine(&current.view(), layer);
        let mut gate = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        if let Mode::Train(rng) = &mut mode {
            if model.dropout_rate > 0.0 {
                gate.mapv_inplace(|g| {
                    let draw: f64 = rng.random();
                    if draw < keep {
                        g / keep
                    } else {
                        0.0
                    }
                });
            }
        }
        Zip::from(&mut z).and(&gate).for_each(|v, &g| {
            *v = if g == 0.0 { 0.0 } else { *v * g };
        });
        layer_inputs.push(std::mem::replace(&mut current, z));
        gates.push(gate);
    }
    let logits = affine(&current.view(), &model.params.heads[head]);
    layer_inputs.push(current);
    Ok(Trace {
        layer_inputs,
        gates,
        logits,
        head,
    })
}

/// Evaluation-mode logits.
pub fn forward(model: &ModelState, inputs: ArrayView2<f64>, task_id: usize) -> Result<Array2<f64>> {
    Ok(forward_trace(model, inputs, task_id, Mode::Eval)?.logits)
}

/// Reverse pass from `dlogits` (one row per sample).
///
/// `visit` receives, for every layer from the head down to the first trunk
/// layer, the per-sample output deltas (`n × out`) and the layer input
/// (`n × in`). The parameter gradient contributed by sample `n` is the outer
/// product of row `n` of each.
pub fn backprop(
    model: &ModelState,
    trace: &Trace,
    dlogits: Array2<f64>,
    mut visit: impl FnMut(LayerId, &Array2<f64>, &Array2<f64>),
) {
    let n_trunk = model.params.trunk.len();
    let head = &model.params.heads[trace.head];
    visit(
        LayerId::Head(trace.head),
        &dlogits,
        &trace.layer_inputs[n_trunk],
    );
    if n_trunk == 0 {
        return;
    }
    let mut upstream = dlogits.dot(&head.weight);
    for k in (0..n_trunk).rev() {
        upstream *= &trace.gates[k];
        visit(LayerId::Trunk(k), &upstream, &trace.layer_inputs[k]);
        if k > 0 {
            upstream = upstream.dot(&model.params.trunk[k].weight);
        }
    }
}

/// Mean gradient of a per-sample objective whose logit gradients are `dlogits`.
pub fn gradient_from_dlogits(
    model: &ModelState,
    trace: &Trace,
    mut dlogits: Array2<f64>,
    objective: Objective,
) -> GradientMap {
    let n = dlogits.nrows() as f64;
    dlogits /= n;
    let mut params = model.params.zeros_like();
    backprop(model, trace, dlogits, |id, delta, input| {
        let g = params.layer_mut(id);
        ndarray::linalg::general_mat_mul(1.0, &delta.t(), input, 0.0, &mut g.weight);
        g.bias = delta.sum_axis(Axis(0));
    });
    GradientMap {
        params,
        objective,
        head: trace.head,
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.to_owned();
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    probs
}

fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn check_labels(probs: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} probability rows but {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.ncols()) {
        return Err(Error::config(format!(
            "label {bad} out of range for {} classes",
            probs.ncols()
        )));
    }
    Ok(())
}

/// Mean of `-ln q[label]` over the batch.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| -clamped_ln(row[l]))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Per-row entropy `-Σ q ln q`.
pub fn row_entropies(probs: &Array2<f64>) -> Array1<f64> {
    probs
        .rows()
        .into_iter()
        .map(|row| -row.iter().map(|&q| q * clamped_ln(q)).sum::<f64>())
        .collect()
}

/// Mean entropy over the batch.
pub fn entropy(probs: &Array2<f64>) -> f64 {
    row_entropies(probs).mean().unwrap_or(0.0)
}

/// Per-sample gradient of `-ln q[label]` with respect to the logits.
pub fn cross_entropy_dlogits(probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut d = probs.clone();
    for (mut row, &l) in d.rows_mut().into_iter().zip(labels) {
        row[l] -= 1.0;
    }
    d
}

/// Per-sample gradient of the entropy with respect to the logits:
/// `∂H/∂z_c = -q_c (ln q_c + H)`.
pub fn entropy_dlogits(probs: &Array2<f64>) -> Array2<f64> {
    let h = row_entropies(probs);
    let mut d = probs.clone();
    for (mut row, &hn) in d.rows_mut().into_iter().zip(h.iter()) {
        row.mapv_inplace(|q| -q * (clamped_ln(q) + hn));
    }
    d
}

/// Loss and mean gradient of a built-in objective.
pub fn loss_and_gradients(
    model: &ModelState,
    batch: &Batch,
    objective: Objective,
    mode: Mode<'_>,
) -> Result<(f64, GradientMap)> {
    let trace = forward_trace(model, batch.inputs.view(), batch.task_id, mode)?;
    let probs = softmax(&trace.logits);
    let (loss, dlogits) = match objective {
        Objective::CrossEntropy => (
            cross_entropy(&probs, &batch.labels)?,
            cross_entropy_dlogits(&probs, &batch.labels),
        ),
        Objective::Entropy => (entropy(&probs), entropy_dlogits(&probs)),
        Objective::Custom => {
            return Err(Error::config(
                "the custom objective has no built-in gradient",
            ))
        }
    };
    Ok((loss, gradient_from_dlogits(model, &trace, dlogits, objective)))
}

/// Evaluation-mode gradient of the mean objective over the batch.
pub fn gradients(model: &ModelState, batch: &Batch, objective: Objective) -> Result<GradientMap> {
    loss_and_gradients(model, batch, objective, Mode::Eval).map(|(_, g)| g)
}

/// `w ← w − lr·g` on the trunk and the head the gradient was computed for.
/// Other heads are left untouched.
pub fn sgd_step(model: &mut ModelState, grads: &GradientMap, lr: f64) {
    let update = |w: &mut f64, g: f64| *w -= lr * g;
    for (layer, grad) in model.params.trunk.iter_mut().zip(&grads.params.trunk) {
        Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .for_each(|w, &g| update(w, g));
        Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .for_each(|w, &g| update(w, g));
    }
    let head = &mut model.params.heads[grads.head];
    let grad = &grads.params.heads[grads.head];
    Zip::from(&mut head.weight)
        .and(&grad.weight)
        .for_each(|w, &g| update(w, g));
    Zip::from(&mut head.bias)
        .and(&grad.bias)
        .for_each(|w, &g| update(w, g));
}

/// Step-decayed learning rate: `initial · ratio^⌊step / decay_every⌋`.
/// `decay_every == 0` disables decay.
pub fn lr_schedule(initial_lr: f64, step: usize, decay_every: usize, ratio: f64) -> f64 {
    if decay_every == 0 {
        return initial_lr;
    }
    let periods = (step / decay_every) as i32;
    initial_lr * ratio.powi(periods)
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(model: &ModelState, inputs: ArrayView2<f64>, labels: &[usize], task_id: usize) -> Result<f64> {
    if inputs.nrows() != labels.len() {
        return Err(Error::shape("inputs and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::config("cannot measure accuracy on an empty set"));
    }
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    for (chunk, chunk_labels) in inputs
        .axis_chunks_iter(Axis(0), CHUNK)
        .zip(labels.chunks(CHUNK))
    {
        let logits = forward(model, chunk, task_id)?;
        correct += logits
            .rows()
            .into_iter()
            .zip(chunk_labels)
            .filter(|(row, &l)| argmax(row.iter().copied()) == l)
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the first maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn init_shapes_and_zero_bias() {
        let m = init_model(&[2, 2], 0).unwrap();
        assert!(m.params.trunk.is_empty());
        assert_eq!(m.params.heads.len(), 1);
        assert_eq!(m.params.heads[0].weight.dim(), (2, 2));
        assert!(m.params.heads[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(init_model(&[784, 0, 10], 1), Err(Error::Config(_))));
        assert!(matches!(init_model(&[784], 1), Err(Error::Config(_))));
        assert!(matches!(init_model(&[], 1), Err(Error::Config(_))));
    }

    #[test]
    fn init_statistics_match_gaussian() {
        let m = init_model(&[784, 512, 256, 10], 7).unwrap();
        let layers: Vec<_> = m.params.layers().collect();
        assert_eq!(layers.len(), 3);
        for (_, d) in layers {
            let n = d.weight.len() as f64;
            let mean = d.weight.mean().unwrap();
            assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt(), "mean {mean}");
            let var = d.weight.mapv(|w| (w - mean).powi(2)).sum() / n;
            assert!((var.sqrt() - INIT_STD).abs() < 0.01, "std {}", var.sqrt());
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&[5, 4, 3], 11).unwrap();
        let b = init_model(&[5, 4, 3], 11).unwrap();
        assert_eq!(a, b);
        let c = init_model(&[5, 4, 3], 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = init_model(&[3, 4, 2], 0).unwrap();
        m.params = m.params.zeros_like();
        let x = array![[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let logits = forward(&m, x.view(), 0).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut m = init_model(&[3, 3], 0).unwrap();
        m.params.heads[0].weight = Array2::eye(3);
        let x = array![[1.0, 0.0, 0.0]];
        let logits = forward(&m, x.view(), 0).unwrap();
        assert_eq!(logits, x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_model(&[3, 2], 0).unwrap();
        let x = Array2::zeros((1, 4));
        assert!(matches!(forward(&m, x.view(), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_edge_cases() {
        let p = softmax(&array![[2.0, 2.0, 2.0, 2.0]]);
        for &v in &p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        let p = softmax(&array![[1000.0, 0.0]]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[[0, 0]], 1.0, epsilon = 1e-15);
        assert!(p[[0, 1]] < 1e-300);
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let one_hot = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(cross_entropy(&one_hot, &[1, 0]).unwrap(), 0.0);
        let uniform = Array2::from_elem((3, 10), 0.1);
        assert_abs_diff_eq!(
            cross_entropy(&uniform, &[0, 4, 9]).unwrap(),
            10f64.ln(),
            epsilon = 1e-12
        );
        // q[label] = 0 is clamped, never infinite.
        let ce = cross_entropy(&one_hot, &[0, 1]).unwrap();
        assert_abs_diff_eq!(ce, -PROB_FLOOR.ln(), epsilon = 1e-9);
        assert!(matches!(cross_entropy(&one_hot, &[2, 0]), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_edge_cases() {
        assert_eq!(entropy(&array![[0.0, 1.0, 0.0]]), 0.0);
        let uniform = Array2::from_elem((2, 10), 0.1);
        assert_abs_diff_eq!(entropy(&uniform), 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn custom_objective_has_no_gradient() {
        let m = init_model(&[2, 2], 0).unwrap();
        let b = Batch::new(array![[0.1, 0.2]], vec![0], 0).unwrap();
        assert!(matches!(
            gradients(&m, &b, Objective::Custom),
            Err(Error::Config(_))
        ));
        assert!("hinge".parse::<Objective>().is_err());
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut m = init_model(&[1, 1], 0).unwrap();
        m.params.heads[0].weight[[0, 0]] = 1.0;
        let mut g = m.params.zeros_like();
        g.heads[0].weight[[0, 0]] = 0.5;
        let grads = GradientMap {
            params: g,
            objective: Objective::Custom,
            head: 0,
        };
        let before = m.clone();
        sgd_step(&mut m, &grads, 0.0);
        assert_eq!(m, before);
        sgd_step(&mut m, &grads, 0.1);
        assert_abs_diff_eq!(m.params.heads[0].weight[[0, 0]], 0.95, epsilon = 1e-15);
    }

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_schedule(0.1, 0, 100, 0.96), 0.1);
        assert_abs_diff_eq!(lr_schedule(0.1, 100, 100, 0.96), 0.096, epsilon = 1e-15);
        assert_abs_diff_eq!(lr_schedule(0.1, 250, 100, 0.96), 0.09216, epsilon = 1e-15);
        assert_eq!(lr_schedule(0.1, 99, 100, 0.96), 0.1);
    }

    #[test]
    fn multi_head_routing() {
        let arch = Architecture::multi(&[4, 3, 10], &[2, 2, 5]).unwrap();
        let m = ModelState::new(arch, 3, 0.5).unwrap();
        assert_eq!(m.class_count(2).unwrap(), 5);
        assert!(m.head_index(3).is_err());
        let single = init_model(&[4, 3, 10], 3).unwrap();
        assert_eq!(single.head_index(7).unwrap(), 0);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let mut m = init_model(&[2, 2], 0).unwrap();
        m.params.heads[0].weight = Array2::eye(2);
        let x = array![[1.0, 0.0], [0.0, 1.0], [0.2, 0.1], [0.0, 3.0]];
        let acc = accuracy(&m, x.view(), &[0, 1, 1, 0], 0).unwrap();
        assert_eq!(acc, 0.5);
    }
}
