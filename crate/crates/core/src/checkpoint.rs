//! JSON checkpoints and importance snapshots.
//!
//! Both documents map fully-qualified tensor names (`trunk.0.weight`,
//! `head.2.bias`, ...) to a shape and row-major values. Files are written to
//! a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelState};
use crate::params::{Dense, LayerId, ParamMap, Role, TensorId};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub dropout_rate: f64,
    pub seed: u64,
    pub parameters: BTreeMap<String, TensorRecord>,
}

/// Importance map for one task, tagged with how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSnapshot {
    pub schema_version: u32,
    pub task_id: usize,
    /// Estimator name: `spp`, `ewc`, `mas`, `si`.
    pub method: String,
    pub objective: String,
    pub sample_size: usize,
    pub seed: u64,
    pub parameters: BTreeMap<String, TensorRecord>,
}

pub fn params_to_records(params: &ParamMap) -> BTreeMap<String, TensorRecord> {
    params
        .tensors()
        .map(|(id, values, shape)| {
            (
                id.to_string(),
                TensorRecord {
                    shape,
                    values: values.to_vec(),
                },
            )
        })
        .collect()
}

/// Rebuilds a parameter map from named records; every layer needs both a
/// weight and a bias and indices must be contiguous from zero.
pub fn records_to_params(records: &BTreeMap<String, TensorRecord>) -> Result<ParamMap> {
    let mut weights: BTreeMap<LayerId, Array2<f64>> = BTreeMap::new();
    let mut biases: BTreeMap<LayerId, Array1<f64>> = BTreeMap::new();
    for (name, rec) in records {
        let id: TensorId = name.parse()?;
        let expected: usize = rec.shape.iter().product();
        if expected != rec.values.len() {
            return Err(Error::shape(format!(
                "{name}: shape {:?} needs {expected} values, found {}",
                rec.shape,
                rec.values.len()
            )));
        }
        match (id.role, rec.shape.as_slice()) {
            (Role::Weight, &[r, c]) => {
                let w = Array2::from_shape_vec((r, c), rec.values.clone())
                    .map_err(|e| Error::shape(format!("{name}: {e}")))?;
                weights.insert(id.layer, w);
            }
            (Role::Bias, &[n]) => {
                biases.insert(id.layer, Array1::from_vec(rec.values[..n].to_vec()));
            }
            _ => {
                return Err(Error::shape(format!(
                    "{name}: unexpected shape {:?}",
                    rec.shape
                )))
            }
        }
    }
    let mut take = |layer: LayerId| -> Result<Dense> {
        let weight = weights
            .remove(&layer)
            .ok_or_else(|| Error::config(format!("missing tensor {layer}.weight")))?;
        let bias = biases
            .remove(&layer)
            .ok_or_else(|| Error::config(format!("missing tensor {layer}.bias")))?;
        if bias.len() != weight.nrows() {
            return Err(Error::shape(format!("{layer}: bias length mismatch")));
        }
        Ok(Dense { weight, bias })
    };
    let count = |pred: fn(&LayerId) -> bool| -> usize {
        records
            .keys()
            .filter_map(|k| k.parse::<TensorId>().ok())
            .filter(|id| pred(&id.layer))
            .map(|id| match id.layer {
                LayerId::Trunk(k) | LayerId::Head(k) => k + 1,
            })
            .max()
            .unwrap_or(0)
    };
    let n_trunk = count(|l| matches!(l, LayerId::Trunk(_)));
    let n_heads = count(|l| matches!(l, LayerId::Head(_)));
    let trunk = (0..n_trunk)
        .map(|k| take(LayerId::Trunk(k)))
        .collect::<Result<Vec<_>>>()?;
    let heads = (0..n_heads)
        .map(|h| take(LayerId::Head(h)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamMap { trunk, heads })
}

/// Serializes `value` to `path` via a temporary file in the same directory.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        serde_json::to_writer(&mut w, value)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

pub fn checkpoint_of(model: &ModelState) -> Checkpoint {
    Checkpoint {
        schema_version: SCHEMA_VERSION,
        architecture: model.arch.clone(),
        dropout_rate: model.dropout_rate,
        seed: model.seed,
        parameters: params_to_records(&model.params),
    }
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<ModelState> {
    if ck.schema_version != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "checkpoint schema {} is not supported (expected {SCHEMA_VERSION})",
            ck.schema_version
        )));
    }
    let params = records_to_params(&ck.parameters)?;
    let model = ModelState {
        arch: ck.architecture.clone(),
        params,
        dropout_rate: ck.dropout_rate,
        seed: ck.seed,
    };
    let template = ModelState::new(model.arch.clone(), 0, 0.0)?;
    model.params.check_congruent(&template.params, "checkpoint parameters")?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &ModelState) -> Result<()> {
    write_json_atomic(path, &checkpoint_of(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    model_from_checkpoint(&read_json(path)?)
}

pub fn save_importance(path: &Path, snapshot: &ImportanceSnapshot) -> Result<()> {
    write_json_atomic(path, snapshot)
}

pub fn load_importance(path: &Path) -> Result<(ImportanceSnapshot, ParamMap)> {
    let snap: ImportanceSnapshot = read_json(path)?;
    if snap.schema_version != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "importance schema {} is not supported",
            snap.schema_version
        )));
    }
    let params = records_to_params(&snap.parameters)?;
    Ok((snap, params))
}
