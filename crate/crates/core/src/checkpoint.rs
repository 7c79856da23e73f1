//! Binary training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TSSANCKP"   magic
//! u32           format version
//! u64           header length in bytes
//! [u8]          JSON header: experiment config, trainer state, tensor directory
//! [f64]         tensor values in directory order
//! [u8; 32]      SHA-256 of everything above
//! ```
//!
//! Tensors are named `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.
//! A file is parsed and verified completely before any state is built, so a
//! failed load leaves nothing half-restored.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tssan_tensor::{AdamConfig, AdamState, Tensor};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{ExperimentConfig, MetricsRecord, PlateauScheduler, Trainer};

pub const MAGIC: &[u8; 8] = b"TSSANCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    epoch: usize,
    history: Vec<MetricsRecord>,
    scheduler: PlateauScheduler,
    adam: AdamMeta,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Serializes the full trainer state to bytes.
pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let store = &trainer.model.store;
    let mut tensors = Vec::new();
    let mut values: Vec<&[f64]> = Vec::new();
    for (id, p) in store.iter() {
        let shape = p.value.shape().to_vec();
        tensors.push(TensorEntry {
            name: format!("param/{}", p.name),
            shape: shape.clone(),
        });
        values.push(p.value.data());
        for (prefix, moments) in [
            ("adam.m", &trainer.adam.first_moment),
            ("adam.v", &trainer.adam.second_moment),
        ] {
            tensors.push(TensorEntry {
                name: format!("{prefix}/{}", p.name),
                shape: shape.clone(),
            });
            values.push(&moments[id.index()]);
        }
    }
    let a = &trainer.adam;
    let header = Header {
        config: trainer.config.clone(),
        epoch: trainer.epoch,
        history: trainer.history.clone(),
        scheduler: trainer.scheduler.clone(),
        adam: AdamMeta {
            beta1: a.config.beta1,
            beta2: a.config.beta2,
            eps: a.config.eps,
            step: a.step,
        },
        rng: RngState {
            seed: trainer.rng.get_seed(),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos(),
        },
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 8 * values.iter().map(|v| v.len()).sum::<usize>() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuilds a trainer from bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    const PREFIX: usize = 8 + 4 + 8;
    if bytes.len() < PREFIX + 32 {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (file is corrupt or truncated)"));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json_end = PREFIX
        .checked_add(json_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[PREFIX..json_end]).map_err(|e| bad(format!("header: {e}")))?;
    let data = &body[json_end..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != total * 8 {
        return Err(bad(format!("expected {} value bytes, found {}", total * 8, data.len())));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.shape.iter().product();
        let v: Vec<f64> = values.by_ref().take(n).collect();
        tensors.push(Tensor::new(t.shape.clone(), v).map_err(|e| bad(format!("{}: {e}", t.name)))?);
    }
    header.config.validate()?;

    // Parameter values are overwritten below; the init stream is irrelevant.
    let mut model = Model::new(header.config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = 3 * model.store.len();
    if header.tensors.len() != expected {
        return Err(bad(format!(
            "checkpoint holds {} tensors, configuration needs {expected}",
            header.tensors.len()
        )));
    }
    let mut first = Vec::with_capacity(model.store.len());
    let mut second = Vec::with_capacity(model.store.len());
    let ids: Vec<_> = model.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.store.get(id).name.clone();
        let shape = model.store.value(id).shape().to_vec();
        for (j, prefix) in ["param", "adam.m", "adam.v"].iter().enumerate() {
            let entry = &header.tensors[3 * k + j];
            if entry.name != format!("{prefix}/{name}") || entry.shape != shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match {prefix}/{name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        let mut it = tensors.drain(..3);
        let value = it.next().expect("three tensors");
        first.push(it.next().expect("three tensors").into_data());
        second.push(it.next().expect("three tensors").into_data());
        drop(it);
        model.store.set_value(id, value)?;
    }
    let adam = AdamState {
        config: AdamConfig {
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
        },
        step: header.adam.step,
        first_moment: first,
        second_moment: second,
    };
    let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(header.rng.word_pos);
    Ok(Trainer {
        config: header.config,
        model,
        adam,
        scheduler: header.scheduler,
        rng,
        epoch: header.epoch,
        history: header.history,
    })
}

/// Writes the checkpoint through a temporary sibling file, then renames it.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(trainer)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
