//! On-disk container for a trained Q-network.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `COVQNET\n` |
//! | 4 | format version (`u32`) |
//! | 4 | header length `n` (`u32`) |
//! | n | UTF-8 JSON header |
//! | 8 each | network parameters as `f64`, layer by layer, weights then biases |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::causal_mdp::ActionGrid;
use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::qlearn::{FeatureScale, QNetwork, TrainConfig};

pub const MAGIC: &[u8; 8] = b"COVQNET\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    layer_dims: Vec<usize>,
    scale: FeatureScale,
    grid: ActionGrid,
    channel: ChannelConfig,
    p0: f64,
    eps: f64,
    seed: u64,
    train: Option<TrainConfig>,
    parameters: usize,
}

/// A trained network with everything needed to roll it out again.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: QNetwork,
    pub grid: ActionGrid,
    pub channel: ChannelConfig,
    /// Power budget the network was trained for.
    pub p0: f64,
    pub eps: f64,
    pub seed: u64,
    pub train: Option<TrainConfig>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.network.parameters();
        let header = Header {
            layer_dims: self.network.dims(),
            scale: *self.network.scale(),
            grid: self.grid,
            channel: self.channel.clone(),
            p0: self.p0,
            eps: self.eps,
            seed: self.seed,
            train: self.train.clone(),
            parameters: params.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_len =
            u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return corrupt("not a checkpoint file (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return corrupt(format!("unsupported checkpoint version {version}"));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return corrupt("truncated header");
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let raw = &body[header_len..];
        if raw.len() != 8 * header.parameters {
            return corrupt(format!(
                "expected {} parameter bytes, found {}",
                8 * header.parameters,
                raw.len()
            ));
        }
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut network = QNetwork::zeros(&header.layer_dims, header.scale)?;
        if network.num_parameters() != header.parameters {
            return corrupt("parameter count does not match layer dimensions");
        }
        network.set_parameters(&params)?;
        header.grid.validate()?;
        if network.num_actions() != header.grid.levels {
            return corrupt("output layer does not match the action grid");
        }
        header.channel.validate()?;
        Ok(Self {
            network,
            grid: header.grid,
            channel: header.channel,
            p0: header.p0,
            eps: header.eps,
            seed: header.seed,
            train: header.train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
