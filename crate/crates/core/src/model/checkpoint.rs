//! Model checkpoints.
//!
//! Same framing as the tensor container, with its own magic: `HFCKPT01`,
//! a u32 little-endian header length, a JSON [`CheckpointHeader`], then every
//! tensor of the manifest in order as row-major little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HyperformerConfig, HyperformerModel, PartitionState};
use crate::container::split_frame;
use crate::hypergraph::IncidenceMatrix;
use crate::numerics::NdArray;
use crate::skeleton::SkeletonGraph;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HFCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config: HyperformerConfig,
    pub skeleton: SkeletonGraph,
    /// Present once the partition is binary (always, unless it is still
    /// being learned).
    pub partition: Option<Vec<usize>>,
    pub tensors: Vec<TensorEntry>,
}

impl HyperformerModel {
    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            seed: self.config.seed,
            config: self.config.clone(),
            skeleton: self.skeleton.clone(),
            partition: match &self.partition {
                PartitionState::Fixed(h) => Some(h.assignment().to_vec()),
                PartitionState::Relaxed { .. } => None,
            },
            tensors: self
                .store
                .iter()
                .map(|(_, name, p)| TensorEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.checkpoint_header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, p) in self.store.iter() {
            for &x in p.value.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    /// Rebuilds the model described by the header and overwrites every
    /// tensor with the stored values.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut payload) = split_frame(bytes, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader = serde_json::from_slice(header)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} is not supported",
                header.format_version
            )));
        }
        let mut model = HyperformerModel::new(header.config.clone(), &header.skeleton)?;
        if model.store.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, model has {}",
                header.tensors.len(),
                model.store.len()
            )));
        }
        for entry in &header.tensors {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {:?}", entry.name)))?;
            if model.store.value(id).shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!("tensor {:?} has the wrong shape", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(Error::Format("checkpoint payload is truncated".into()));
            }
            let (blob, rest) = payload.split_at(4 * n);
            payload = rest;
            let data = blob
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let param = model.store.get_mut(id);
            param.value = NdArray::new(&entry.shape, data)?;
            param.trainable = entry.trainable;
        }
        if !payload.is_empty() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        if let Some(assignment) = header.partition {
            let e = assignment.iter().max().map_or(0, |m| m + 1);
            model.partition = PartitionState::Fixed(IncidenceMatrix::from_assignment(assignment, e)?);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_checkpoint_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}
