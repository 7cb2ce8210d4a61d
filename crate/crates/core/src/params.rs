//! Parameter containers shared by models, gradients, Fisher diagonals,
//! importance maps and anchors.
//!
//! Every per-parameter quantity in the crate is a [`ParamMap`]: the same
//! trunk/head layout as the model it was derived from, one dense weight
//! matrix (`out × in`) and one bias vector per layer.

use std::fmt;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One fully connected layer: `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }

    fn zip_apply(&mut self, other: &Dense, f: impl Fn(&mut f64, f64) + Copy) {
        Zip::from(&mut self.weight)
            .and(&other.weight)
            .for_each(|a, &b| f(a, b));
        Zip::from(&mut self.bias)
            .and(&other.bias)
            .for_each(|a, &b| f(a, b));
    }

    fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Dense {
        Dense {
            weight: self.weight.mapv(f),
            bias: self.bias.mapv(f),
        }
    }
}

/// Which group a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Trunk(usize),
    Head(usize),
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Trunk(k) => write!(f, "trunk.{k}"),
            LayerId::Head(h) => write!(f, "head.{h}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Weight,
    Bias,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
        }
    }
}

/// Stable name of one parameter tensor, e.g. `trunk.1.weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId {
    pub layer: LayerId,
    pub role: Role,
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.role.as_str())
    }
}

impl std::str::FromStr for TensorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("malformed tensor name `{s}`"));
        let mut parts = s.split('.');
        let (group, index, role) = (
            parts.next().ok_or_else(bad)?,
            parts.next().ok_or_else(bad)?,
            parts.next().ok_or_else(bad)?,
        );
        if parts.next().is_some() {
            return Err(bad());
        }
        let index: usize = index.parse().map_err(|_| bad())?;
        let layer = match group {
            "trunk" => LayerId::Trunk(index),
            "head" => LayerId::Head(index),
            _ => return Err(bad()),
        };
        let role = match role {
            "weight" => Role::Weight,
            "bias" => Role::Bias,
            _ => return Err(bad()),
        };
        Ok(TensorId { layer, role })
    }
}

/// Name of a single scalar parameter: `trunk.0.weight[3,17]` or `head.1.bias[0]`.
pub fn element_name(id: TensorId, flat_index: usize, cols: usize) -> String {
    match id.role {
        Role::Weight => format!("{id}[{},{}]", flat_index / cols, flat_index % cols),
        Role::Bias => format!("{id}[{flat_index}]"),
    }
}

/// Per-parameter real tensors laid out like a model: hidden trunk layers
/// followed by output heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMap {
    pub trunk: Vec<Dense>,
    pub heads: Vec<Dense>,
}

impl ParamMap {
    pub fn zeros_like(&self) -> ParamMap {
        self.map(|_| 0.0)
    }

    pub fn layer(&self, id: LayerId) -> &Dense {
        match id {
            LayerId::Trunk(k) => &self.trunk[k],
            LayerId::Head(h) => &self.heads[h],
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut Dense {
        match id {
            LayerId::Trunk(k) => &mut self.trunk[k],
            LayerId::Head(h) => &mut self.heads[h],
        }
    }

    /// Layers in canonical order: trunk first, then heads.
    pub fn layers(&self) -> impl Iterator<Item = (LayerId, &Dense)> {
        let trunk = self
            .trunk
            .iter()
            .enumerate()
            .map(|(k, d)| (LayerId::Trunk(k), d));
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, d)| (LayerId::Head(h), d));
        trunk.chain(heads)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = (LayerId, &mut Dense)> {
        let trunk = self
            .trunk
            .iter_mut()
            .enumerate()
            .map(|(k, d)| (LayerId::Trunk(k), d));
        let heads = self
            .heads
            .iter_mut()
            .enumerate()
            .map(|(h, d)| (LayerId::Head(h), d));
        trunk.chain(heads)
    }

    /// Tensors in canonical order with their row-major contents.
    pub fn tensors(&self) -> impl Iterator<Item = (TensorId, &[f64], Vec<usize>)> {
        self.layers().flat_map(|(layer, d)| {
            let w = (
                TensorId {
                    layer,
                    role: Role::Weight,
                },
                d.weight.as_slice().expect("standard layout"),
                vec![d.weight.nrows(), d.weight.ncols()],
            );
            let b = (
                TensorId {
                    layer,
                    role: Role::Bias,
                },
                d.bias.as_slice().expect("standard layout"),
                vec![d.bias.len()],
            );
            [w, b]
        })
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        let d = self.layer(id.layer);
        match id.role {
            Role::Weight => d.weight.as_slice().expect("standard layout"),
            Role::Bias => d.bias.as_slice().expect("standard layout"),
        }
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        let d = self.layer_mut(id.layer);
        match id.role {
            Role::Weight => d.weight.as_slice_mut().expect("standard layout"),
            Role::Bias => d.bias.as_slice_mut().expect("standard layout"),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|(_, d)| d.num_params()).sum()
    }

    pub fn same_shape(&self, other: &ParamMap) -> bool {
        self.trunk.len() == other.trunk.len()
            && self.heads.len() == other.heads.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|((_, a), (_, b))| a.same_shape(b))
    }

    pub fn check_congruent(&self, other: &ParamMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what} is not shape-congruent with the model"
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> ParamMap {
        ParamMap {
            trunk: self.trunk.iter().map(|d| d.map(f)).collect(),
            heads: self.heads.iter().map(|d| d.map(f)).collect(),
        }
    }

    /// Elementwise in-place combination; shapes must already be congruent.
    pub fn zip_apply(&mut self, other: &ParamMap, f: impl Fn(&mut f64, f64) + Copy) {
        debug_assert!(self.same_shape(other));
        for ((_, a), (_, b)) in self.layers_mut().zip(other.layers()) {
            a.zip_apply(b, f);
        }
    }

    pub fn add_assign(&mut self, other: &ParamMap) {
        self.zip_apply(other, |a, b| *a += b);
    }

    /// All values flattened in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .flat_map(|(_, v, _)| v.iter().copied())
            .collect()
    }

    /// Scalar names matching [`ParamMap::flatten`] order.
    pub fn element_names(&self) -> Vec<String> {
        self.tensors()
            .flat_map(|(id, v, shape)| {
                let cols = *shape.last().unwrap_or(&1);
                (0..v.len()).map(move |i| element_name(id, i, cols))
            })
            .collect()
    }

    pub fn min_value(&self) -> f64 {
        self.tensors()
            .flat_map(|(_, v, _)| v.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}
