//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes   "GGDOPT01"
//! header_len u64 LE
//! header     JSON: network config, risk normaliser, schedule, tensor shapes
//! payload    f32 LE, tensors in header order, each column-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Dense, NetworkConfig, RhoNormalizer, ScoreNetwork};
use super::ScheduleSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GGDOPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    network: NetworkConfig,
    normalizer: RhoNormalizer,
    schedule: ScheduleSpec,
    tensors: Vec<TensorEntry>,
}

impl ScoreNetwork {
    pub fn to_bytes(&self, schedule: ScheduleSpec) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            tensors.push(TensorEntry {
                name: format!("layer{i}.weight"),
                shape: vec![l.w.nrows(), l.w.ncols()],
            });
            tensors.push(TensorEntry {
                name: format!("layer{i}.bias"),
                shape: vec![l.b.len()],
            });
        }
        tensors.push(TensorEntry {
            name: "null_token".into(),
            shape: vec![self.null_token.len()],
        });
        let header = serde_json::to_vec(&Header {
            format: 1,
            network: self.config,
            normalizer: self.normalizer,
            schedule,
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for s in self.param_slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; returns the network and the schedule it was trained with.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(Self, ScheduleSpec), String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("missing checkpoint magic".into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + header_len)
            .ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        if header.format != 1 {
            return Err(format!("unsupported format version {}", header.format));
        }
        let cfg = header.network;
        cfg.validate().map_err(|e| e.to_string())?;
        let mut net = ScoreNetwork::init(cfg, header.normalizer, 0).map_err(|e| e.to_string())?;

        let expected: Vec<Vec<usize>> = net
            .layers
            .iter()
            .flat_map(|l: &Dense| [vec![l.w.nrows(), l.w.ncols()], vec![l.b.len()]])
            .chain(std::iter::once(vec![net.null_token.len()]))
            .collect();
        let shapes: Vec<Vec<usize>> = header.tensors.iter().map(|t| t.shape.clone()).collect();
        if shapes != expected {
            return Err("tensor shapes do not match the network config".into());
        }
        let mut payload = &bytes[16 + header_len..];
        let total: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
        if payload.len() != 4 * total {
            return Err(format!("payload has {} bytes, expected {}", payload.len(), 4 * total));
        }
        for slot in net.param_slices_mut() {
            for v in slot.iter_mut() {
                *v = f32::from_le_bytes(payload[..4].try_into().expect("4 bytes"));
                payload = &payload[4..];
            }
        }
        Ok((net, header.schedule))
    }

    pub fn save(&self, path: &Path, schedule: ScheduleSpec) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
        }
        fs::write(path, self.to_bytes(schedule)?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ScheduleSpec)> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|detail| Error::Format {
            path: path.into(),
            detail,
        })
    }
}
