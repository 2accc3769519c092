//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then a blob of
//! LE f64: all parameters in canonical order, followed (if present) by the
//! Adam first and second moments in the same order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig};
use crate::ndgrad::{Adam, AdamConfig, Moments};
use crate::rng;

const MAGIC: &[u8; 8] = b"CCICAMDL";
const VERSION: u32 = 1;
const LATENT_LAYOUT: &str = "z[..n_c] invariant, z[n_c..] changing";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    /// Step count per parameter tensor.
    pub steps: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub architecture: String,
    pub config: ModelConfig,
    pub latent_layout: String,
    pub domains: Vec<usize>,
    pub param_names: Vec<String>,
    pub param_shapes: Vec<Vec<usize>>,
    pub param_count: usize,
    pub optimizer: Option<OptimizerHeader>,
}

pub fn header(model: &Model, adam: Option<&Adam>) -> CheckpointHeader {
    let p = &model.params;
    CheckpointHeader {
        version: VERSION,
        architecture: format!(
            "vae-mlp(hidden={}, depth={}, leaky={}) + rq-spline(bins={}, bound={})",
            model.config.hidden, model.config.depth, model.config.slope, model.config.bins, model.config.bound
        ),
        config: model.config,
        latent_layout: LATENT_LAYOUT.to_string(),
        domains: model.flows().domains(),
        param_names: p.names().to_vec(),
        param_shapes: p.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        param_count: p.flat_len(),
        optimizer: adam.map(|a| OptimizerHeader {
            config: a.config,
            steps: a.state().iter().map(|m| m.t).collect(),
        }),
    }
}

pub fn to_bytes(model: &Model, adam: Option<&Adam>) -> Vec<u8> {
    let head = serde_json::to_vec(&header(model, adam)).expect("header serializes");
    let mut out = Vec::with_capacity(16 + head.len() + 8 * model.params.flat_len() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    put(&model.params.flat_values());
    if let Some(a) = adam {
        for m in a.state() {
            put(&m.m);
        }
        for m in a.state() {
            put(&m.v);
        }
    }
    out
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or(CheckpointError::Truncated)?;
    let head: CheckpointHeader = serde_json::from_slice(body)?;
    if head.version != VERSION {
        return Err(CheckpointError::Version(head.version));
    }
    Ok((head, &bytes[16 + len..]))
}

/// Rebuilds the model (and optimizer, if stored) from checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Option<Adam>), CheckpointError> {
    let (head, blob) = read_header(bytes)?;
    if blob.len() % 8 != 0 {
        return Err(CheckpointError::Truncated);
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    // Initial values are overwritten below; only the layout matters.
    let mut model = Model::new(head.config, &mut rng::seeded(0));
    for &u in &head.domains {
        model.ensure_domain(u);
    }
    if model.params.names() != head.param_names.as_slice() {
        return Err(CheckpointError::Layout("parameter names differ".into()));
    }
    let n = model.params.flat_len();
    if n != head.param_count {
        return Err(CheckpointError::Layout(format!("{} parameters, header says {}", n, head.param_count)));
    }
    let expected = if head.optimizer.is_some() { 3 * n } else { n };
    if values.len() != expected {
        return Err(CheckpointError::Layout(format!("blob holds {} values, expected {expected}", values.len())));
    }
    model
        .params
        .set_flat_values(&values[..n])
        .map_err(|e| CheckpointError::Layout(e.to_string()))?;
    let adam = match head.optimizer {
        None => None,
        Some(opt) => {
            if opt.steps.len() != model.params.len() {
                return Err(CheckpointError::Layout("optimizer step count per tensor".into()));
            }
            let offsets = model.params.offsets();
            let state = (0..model.params.len())
                .map(|i| {
                    let (a, b) = (offsets[i], offsets[i] + model.params.tensor(i).len());
                    Moments {
                        m: values[n + a..n + b].to_vec(),
                        v: values[2 * n + a..2 * n + b].to_vec(),
                        t: opt.steps[i],
                    }
                })
                .collect();
            Some(Adam::from_state(opt.config, state))
        }
    };
    Ok((model, adam))
}
