use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{DataError, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor plus its Adagrad squared-gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub accumulator: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let accumulator = vec![0.0; tensor.numel()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            accumulator,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_coordinates(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let file = CheckpointFile {
            format: FORMAT_TAG.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .params
                .iter()
                .map(|p| SavedParam {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().to_vec(),
                    accumulator: p.accumulator.clone(),
                })
                .collect(),
        };
        serde_json::to_value(file).expect("parameter checkpoint serialises")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, DataError> {
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        if file.format != FORMAT_TAG {
            return Err(DataError::Checkpoint(format!("unexpected format tag {}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(DataError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let mut store = ParamStore::new();
        for saved in file.params {
            let tensor = Tensor::new(saved.shape, saved.values)
                .map_err(|e| DataError::Checkpoint(format!("{}: {e}", saved.name)))?;
            if saved.accumulator.len() != tensor.numel() {
                return Err(DataError::Checkpoint(format!(
                    "{}: accumulator length {} does not match {} values",
                    saved.name,
                    saved.accumulator.len(),
                    tensor.numel()
                )));
            }
            let id = store
                .add(saved.name.clone(), tensor)
                .map_err(|e| DataError::Checkpoint(e.to_string()))?;
            store.get_mut(id).accumulator = saved.accumulator;
        }
        Ok(store)
    }
}

const FORMAT_TAG: &str = "hiertab-params";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: Vec<SavedParam>,
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    accumulator: Vec<f64>,
}

/// Gradient buffers for every parameter of a store, zero where the loss did
/// not reach.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_slice()))
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 0.25]).unwrap()).unwrap();
        store.add("b", Tensor::vector(vec![3.0])).unwrap();
        store.get_mut(a).accumulator = vec![0.1, 0.2, 0.3, 0.4];
        let back = ParamStore::from_json(store.to_json()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn checkpoint_rejects_future_version() {
        let store = ParamStore::new();
        let mut json = store.to_json();
        json["version"] = serde_json::json!(99);
        assert!(ParamStore::from_json(json).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.add("w", Tensor::scalar(1.0)).is_err());
    }
}
