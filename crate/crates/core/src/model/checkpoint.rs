//! `FWCK` checkpoint files:
//!
//! ```text
//! "FWCK" | u32 version | u32 manifest length | manifest JSON | tensor blobs
//! ```
//!
//! The manifest holds the model config, free-form metadata and one
//! `(name, dtype, shape, offset)` entry per tensor. All integers and tensor
//! values are little-endian.

use std::collections::HashMap;
use std::path::Path;

use lorafwi_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::net::{InversionNet, Network};
use crate::container::{decode_tensors, encode_tensors, push_json, read_file, write_file, Reader, TensorEntry};
use crate::data::NormalizationStats;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance carried by checkpoints and adapters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    /// Dataset names the weights were last trained on.
    #[serde(default)]
    pub trained_on: Vec<String>,
    #[serde(default)]
    pub method: Option<String>,
    /// Normalization fitted on the pretraining split; reused downstream.
    #[serde(default)]
    pub normalization: Option<NormalizationStats>,
    #[serde(default)]
    pub epochs_completed: Option<usize>,
    #[serde(default)]
    pub optimizer_steps: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Hash of the run settings; a resumed run must present the same one.
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    meta: ArtifactMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint<T> {
    pub model: InversionNet<T>,
    pub meta: ArtifactMeta,
    /// Tensors that are neither parameters nor buffers, in file order.
    pub extra: Vec<(String, Tensor<T>)>,
}

pub fn encode_checkpoint<T: Scalar>(model: &InversionNet<T>, meta: &ArtifactMeta, extra: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor<T>)> = model.parameters().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
    tensors.extend(model.buffers());
    tensors.extend(extra.iter().map(|(n, t)| (n.clone(), *t)));
    let (entries, blob) = encode_tensors(&tensors);
    let manifest = Manifest {
        config: model.config().clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let mut out = Vec::with_capacity(blob.len() + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_json(&mut out, &manifest);
    out.extend_from_slice(&blob);
    out
}

pub fn save_checkpoint<T: Scalar>(model: &InversionNet<T>, meta: &ArtifactMeta, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(model, meta, &[], path)
}

/// Saves with additional named tensors, e.g. optimizer moments.
pub fn save_checkpoint_with<T: Scalar>(
    model: &InversionNet<T>,
    meta: &ArtifactMeta,
    extra: &[(String, &Tensor<T>)],
    path: impl AsRef<Path>,
) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(model, meta, extra))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<LoadedCheckpoint<T>> {
    decode_checkpoint(&read_file(path.as_ref())?, None)
}

/// Loads into the architecture of `expected`. A file written for another
/// architecture fails on the first parameter whose shape differs.
pub fn load_checkpoint_for<T: Scalar>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<LoadedCheckpoint<T>> {
    decode_checkpoint(&read_file(path.as_ref())?, Some(expected))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<LoadedCheckpoint<T>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion {
            what: "checkpoint",
            version,
        });
    }
    let manifest: Manifest = r.json("checkpoint manifest")?;
    let tensors = decode_tensors::<T>(&manifest.tensors, r.rest())?;
    let config = expected.unwrap_or(&manifest.config);
    let mut model = InversionNet::build(config, 0)?;
    let extra = assign(&mut model, tensors)?;
    Ok(LoadedCheckpoint {
        model,
        meta: manifest.meta,
        extra,
    })
}

fn take_into<T: Scalar>(by_name: &mut HashMap<String, Tensor<T>>, name: &str, slot: &mut Tensor<T>) -> Result<()> {
    let t = by_name.remove(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
    if t.shape() != slot.shape() {
        return Err(Error::ParamShape {
            name: name.to_string(),
            expected: slot.shape().to_vec(),
            found: t.shape().to_vec(),
        });
    }
    *slot = t;
    Ok(())
}

/// Moves stored tensors into the model; returns the leftovers in file order.
fn assign<T: Scalar>(model: &mut InversionNet<T>, tensors: Vec<(String, Tensor<T>)>) -> Result<Vec<(String, Tensor<T>)>> {
    let order: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    let mut by_name: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
    if by_name.len() != order.len() {
        return Err(Error::Corrupt("duplicate tensor names in manifest".into()));
    }
    for p in model.parameters_mut() {
        let name = p.name.clone();
        take_into(&mut by_name, &name, &mut p.value)?;
    }
    for (name, buf) in model.buffers_mut() {
        take_into(&mut by_name, &name, buf)?;
    }
    Ok(order
        .into_iter()
        .filter_map(|n| by_name.remove(&n).map(|t| (n, t)))
        .collect())
}
