//! Dense f64 tensors and the named parameter list exchanged in federation.

use std::collections::HashSet;

use crate::error::ModelError;

/// Row-major 64-bit float buffer with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer matches the shape and holds only finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ModelError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ModelError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("component {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// One-dimensional tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    // Crate-internal: callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Ordered list of named tensors; the order is fixed by the model architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if name.is_empty() {
                return Err(ModelError::Structure("empty tensor name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(ModelError::Structure(format!("duplicate tensor name {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Names and shapes, in canonical order.
    pub fn structure(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect()
    }

    pub fn same_structure(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape == tb.shape)
    }

    /// All components concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Rebuilds params with this structure from a flat buffer.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams, ModelError> {
        if flat.len() != self.num_parameters() {
            return Err(ModelError::Shape(format!(
                "flat buffer has {} values, model has {}",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let n = t.len();
            entries.push((
                name.clone(),
                Tensor::new(t.shape.clone(), flat[offset..offset + n].to_vec())?,
            ));
            offset += n;
        }
        Ok(ModelParams { entries })
    }

    /// Same structure with every component set to zero.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }
}
