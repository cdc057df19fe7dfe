//! JSON checkpoints of trained networks.
//!
//! `serde_json` prints doubles in shortest round-trip form, so a save/load
//! cycle restores every parameter bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{JetNetError, Network, NetworkConfig, ParamVector};
use crate::loss::{DomainSpec, LossKind};
use crate::market::{MarketParams, UtilityFamily};

pub const CANONICAL_LAYER_ORDER: &str =
    "layers input->output; weights[fan_out][fan_in] row-major, then bias[fan_out]";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint layer {layer} has shape {actual:?}, expected {expected:?}")]
    Shape {
        layer: usize,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error(transparent)]
    Network(#[from] JetNetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWeights {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub layer_order: String,
    pub layers: Vec<LayerWeights>,
    pub epoch: usize,
    pub loss_kind: LossKind,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<UtilityFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSpec>,
    /// Wall-clock seconds spent training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_seconds: Option<f64>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, epoch: usize, loss_kind: LossKind, rng_seed: u64) -> Self {
        let layers = (0..net.num_layers())
            .map(|l| {
                let (w, b) = net.layer(l);
                LayerWeights {
                    weights: w.rows().into_iter().map(|row| row.to_vec()).collect(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        Self {
            config: *net.config(),
            layer_order: CANONICAL_LAYER_ORDER.to_string(),
            layers,
            epoch,
            loss_kind,
            rng_seed,
            market: None,
            utility: None,
            domain: None,
            train_seconds: None,
        }
    }

    pub fn to_network(&self) -> Result<Network, CheckpointError> {
        self.config.validate()?;
        let shapes = self.config.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(JetNetError::InvalidConfig(format!(
                "checkpoint has {} layers, config implies {}",
                self.layers.len(),
                shapes.len()
            ))
            .into());
        }
        let mut params = Vec::with_capacity(self.config.param_count());
        for (l, (layer, &(fan_in, fan_out))) in self.layers.iter().zip(&shapes).enumerate() {
            let cols = layer.weights.first().map_or(0, Vec::len);
            let ragged = layer.weights.iter().any(|row| row.len() != cols);
            if layer.weights.len() != fan_out || cols != fan_in || ragged || layer.bias.len() != fan_out {
                return Err(CheckpointError::Shape {
                    layer: l,
                    expected: (fan_out, fan_in),
                    actual: (layer.weights.len(), cols),
                });
            }
            for row in &layer.weights {
                params.extend_from_slice(row);
            }
            params.extend_from_slice(&layer.bias);
        }
        Ok(Network::from_params(self.config, ParamVector(params))?)
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
