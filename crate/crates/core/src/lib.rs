//! Continual learning with soft parameter pruning.
//!
//! The crate trains small dense networks on a sequence of classification
//! tasks and protects what earlier tasks learned with a quadratic penalty
//! weighted by per-parameter importance. Importance for the soft-pruning
//! strategy is the predicted change in output entropy when a parameter is
//! zeroed; EWC, SI and MAS estimators are included as baselines.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod consolidation;
pub mod data;
pub mod error;
pub mod importance;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
pub use importance::{FisherDiagonal, ImportanceMap};
pub use metrics::{AccuracyMatrix, MetricSummary};
pub use nn::{Architecture, Batch, GradientMap, HeadMode, ModelState, Objective};
pub use params::{Dense, LayerId, ParamMap, TensorId};
