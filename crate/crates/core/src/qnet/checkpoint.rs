//! JSON checkpoint format.
//!
//! ```json
//! {"format": "voltgrid-qnet", "version": 1, "input_dim": 9,
//!  "trunk": [{"fan_in": 9, "fan_out": 128, "weights": [...], "bias": [...]}, ...],
//!  "heads": [{"fan_in": 128, "fan_out": 21, "weights": [...], "bias": [...]}, ...]}
//! ```
//!
//! `weights` is the `fan_in × fan_out` matrix in row-major order. Values are
//! written with shortest round-trip formatting, so save/load is bit-exact.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dense, QNetwork};

pub const CHECKPOINT_FORMAT: &str = "voltgrid-qnet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub trunk: Vec<LayerRecord>,
    pub heads: Vec<LayerRecord>,
}

impl LayerRecord {
    fn from_dense(layer: &Dense) -> Self {
        Self {
            fan_in: layer.fan_in(),
            fan_out: layer.fan_out(),
            weights: layer.weights.iter().copied().collect(),
            bias: layer.bias.to_vec(),
        }
    }

    fn to_dense(&self) -> Result<Dense> {
        let weights = Array2::from_shape_vec((self.fan_in, self.fan_out), self.weights.clone())
            .map_err(|_| Error::ShapeMismatch {
                what: "checkpoint weights",
                expected: self.fan_in * self.fan_out,
                got: self.weights.len(),
            })?;
        if self.bias.len() != self.fan_out {
            return Err(Error::ShapeMismatch {
                what: "checkpoint bias",
                expected: self.fan_out,
                got: self.bias.len(),
            });
        }
        Ok(Dense {
            weights,
            bias: Array1::from(self.bias.clone()),
        })
    }
}

impl QNetwork {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim(),
            trunk: self.trunk.iter().map(LayerRecord::from_dense).collect(),
            heads: self.heads.iter().map(LayerRecord::from_dense).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let trunk = ckpt.trunk.iter().map(LayerRecord::to_dense).collect::<Result<Vec<_>>>()?;
        let heads = ckpt.heads.iter().map(LayerRecord::to_dense).collect::<Result<Vec<_>>>()?;
        let net = Self::from_layers(trunk, heads)?;
        if net.input_dim() != ckpt.input_dim {
            return Err(Error::ShapeMismatch {
                what: "checkpoint input_dim",
                expected: ckpt.input_dim,
                got: net.input_dim(),
            });
        }
        if !net.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
