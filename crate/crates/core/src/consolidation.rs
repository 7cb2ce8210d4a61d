//! Quadratic consolidation toward the previous task's parameters.
//!
//! While training task `t+1` the objective is the new task's cross-entropy
//! plus `λ · Σ_k Ω_k (w_k − w'_k)²`, where `Ω` is the cumulative clamped
//! importance over tasks `1..t` and `w'` the single anchor snapshot taken
//! when task `t` finished. Task-specific heads are excluded in multi-head
//! mode.

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::nn::{self, Batch, GradientMap, HeadMode, ModelState, Mode, Objective};
use crate::params::{LayerId, ParamMap};

/// Immutable snapshot of the parameters at a task boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    params: ParamMap,
    task_id: usize,
}

impl Anchor {
    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Task whose end this anchor marks.
    pub fn task_id(&self) -> usize {
        self.task_id
    }
}

/// Which importance estimator feeds the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Spp,
    Ewc,
    Si,
    Mas,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationConfig {
    pub lambda: f64,
    pub regularizer: Regularizer,
}

impl ConsolidationConfig {
    pub fn new(lambda: f64, regularizer: Regularizer) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::config(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(ConsolidationConfig {
            lambda,
            regularizer,
        })
    }
}

/// Hands out one anchor per task boundary.
#[derive(Debug, Clone, Default)]
pub struct AnchorBook {
    current: Option<Anchor>,
}

impl AnchorBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot `model` as the anchor following `task_id`.
    pub fn take_anchor(&mut self, model: &ModelState, task_id: usize) -> Result<&Anchor> {
        if let Some(prev) = &self.current {
            if task_id <= prev.task_id {
                return Err(Error::Sequence(format!(
                    "boundary after task {task_id} already anchored (last anchor follows task {})",
                    prev.task_id
                )));
            }
        }
        Ok(self.current.insert(take_anchor(model, task_id)))
    }

    pub fn current(&self) -> Option<&Anchor> {
        self.current.as_ref()
    }
}

/// Deep copy of the model's parameters.
pub fn take_anchor(model: &ModelState, task_id: usize) -> Anchor {
    Anchor {
        params: model.params.clone(),
        task_id,
    }
}

fn penalized_layers(model: &ModelState) -> impl Iterator<Item = LayerId> + '_ {
    let heads = match model.arch.head_mode {
        HeadMode::Single => model.params.heads.len(),
        HeadMode::Multi => 0,
    };
    (0..model.params.trunk.len())
        .map(LayerId::Trunk)
        .chain((0..heads).map(LayerId::Head))
}

fn cumulative<'a>(model: &ModelState, importance: &'a ImportanceMap) -> Result<&'a ParamMap> {
    let cum = importance
        .cumulative
        .as_ref()
        .ok_or_else(|| Error::config("no cumulative importance to consolidate against"))?;
    if !model.params.same_shape(cum) {
        return Err(Error::config(
            "importance entries are missing for some model parameters",
        ));
    }
    Ok(cum)
}

/// `λ · Σ_k Ω_k (w_k − w'_k)²` over the penalized layers.
pub fn penalty(model: &ModelState, anchor: &Anchor, importance: &ImportanceMap, lambda: f64) -> Result<f64> {
    model.params.check_congruent(&anchor.params, "anchor")?;
    let omega = cumulative(model, importance)?;
    let mut total = 0.0;
    for id in penalized_layers(model) {
        let (w, a, o) = (model.params.layer(id), anchor.params.layer(id), omega.layer(id));
        Zip::from(&w.weight)
            .and(&a.weight)
            .and(&o.weight)
            .for_each(|&w, &a, &o| total += o * (w - a) * (w - a));
        Zip::from(&w.bias)
            .and(&a.bias)
            .and(&o.bias)
            .for_each(|&w, &a, &o| total += o * (w - a) * (w - a));
    }
    Ok(lambda * total)
}

/// Adds `2λΩ_k(w_k − w'_k)` to `grad` for every penalized parameter.
pub fn add_penalty_gradient(
    grad: &mut ParamMap,
    model: &ModelState,
    anchor: &Anchor,
    importance: &ImportanceMap,
    lambda: f64,
) -> Result<()> {
    model.params.check_congruent(&anchor.params, "anchor")?;
    let omega = cumulative(model, importance)?;
    let scale = 2.0 * lambda;
    for id in penalized_layers(model) {
        let (w, a, o) = (model.params.layer(id), anchor.params.layer(id), omega.layer(id));
        let g = grad.layer_mut(id);
        Zip::from(&mut g.weight)
            .and(&w.weight)
            .and(&a.weight)
            .and(&o.weight)
            .for_each(|g, &w, &a, &o| *g += scale * o * (w - a));
        Zip::from(&mut g.bias)
            .and(&w.bias)
            .and(&a.bias)
            .and(&o.bias)
            .for_each(|g, &w, &a, &o| *g += scale * o * (w - a));
    }
    Ok(())
}

/// Prior-task state the penalty needs; absent for the first task.
#[derive(Debug, Clone, Copy)]
pub struct Prior<'a> {
    pub anchor: &'a Anchor,
    pub importance: &'a ImportanceMap,
}

/// Loss and gradient of cross-entropy plus the consolidation penalty.
///
/// Returns the plain cross-entropy gradient alongside, which SI needs for
/// its path integral.
pub fn total_loss(
    model: &ModelState,
    batch: &Batch,
    prior: Option<Prior<'_>>,
    config: &ConsolidationConfig,
    mode: Mode<'_>,
) -> Result<TotalLoss> {
    let (task_loss, task_grad) = nn::loss_and_gradients(model, batch, Objective::CrossEntropy, mode)?;
    let active = match prior {
        Some(p) if config.lambda > 0.0 && config.regularizer != Regularizer::None => Some(p),
        _ => None,
    };
    let Some(prior) = active else {
        return Ok(TotalLoss {
            loss: task_loss,
            task_loss,
            grad: task_grad.clone(),
            task_grad,
        });
    };
    let pen = penalty(model, prior.anchor, prior.importance, config.lambda)?;
    let mut params = task_grad.params.clone();
    add_penalty_gradient(&mut params, model, prior.anchor, prior.importance, config.lambda)?;
    Ok(TotalLoss {
        loss: task_loss + pen,
        task_loss,
        grad: GradientMap {
            params,
            objective: Objective::Custom,
            head: task_grad.head,
        },
        task_grad,
    })
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: f64,
    pub task_loss: f64,
    pub grad: GradientMap,
    pub task_grad: GradientMap,
}

/// Evaluation-mode value of the full objective, without gradients.
pub fn objective_value(
    model: &ModelState,
    inputs: ArrayView2<f64>,
    labels: &[usize],
    task_id: usize,
    prior: Option<Prior<'_>>,
    lambda: f64,
) -> Result<f64> {
    let probs = nn::softmax(&nn::forward(model, inputs, task_id)?);
    let ce = nn::cross_entropy(&probs, labels)?;
    match prior {
        Some(p) => Ok(ce + penalty(model, p.anchor, p.importance, lambda)?),
        None => Ok(ce),
    }
}
