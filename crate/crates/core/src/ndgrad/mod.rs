//! Dense tensors, a reverse-mode tape, parameter storage and Adam.

mod adam;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig, Moments};
pub use graph::{sigmoid, softplus, softplus_inv, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid input to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named learnable tensors in a fixed canonical order.
///
/// New tensors are only ever appended, so flat offsets of existing
/// parameters never move.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat offset of each tensor.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.tensors
            .iter()
            .map(|t| {
                let o = acc;
                acc += t.len();
                o
            })
            .collect()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<(), GradError> {
        if flat.len() != self.flat_len() {
            return Err(GradError::Invalid {
                op: "set_flat_values",
                msg: format!("expected {} values, got {}", self.flat_len(), flat.len()),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every parameter as a leaf of `graph`, in canonical order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.leaf(t.clone())).collect()
    }

    /// Flattens per-parameter gradients into one vector in canonical order.
    pub fn flatten(&self, grads: &[Tensor]) -> Vec<f64> {
        grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Splits a flat vector back into tensors shaped like the parameters.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<Tensor>, GradError> {
        if flat.len() != self.flat_len() {
            return Err(GradError::Invalid {
                op: "unflatten",
                msg: format!("expected {} values, got {}", self.flat_len(), flat.len()),
            });
        }
        let mut off = 0;
        self.tensors
            .iter()
            .map(|t| {
                let n = t.len();
                let out = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec());
                off += n;
                out
            })
            .collect()
    }
}
