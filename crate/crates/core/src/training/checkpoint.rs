//! Checkpoint container.
//!
//! Layout: the magic `OMNF`, a little-endian `u32` format version, a `u32`
//! header length, a JSON header, then little-endian `f32` tensor payloads
//! at the offsets listed in the header (relative to the payload start).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::{ModelConfig, TrainConfig};
use super::loops::{Phase, TrainState};
use super::model::Model;
use super::optim::{Adam, Plateau};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OMNF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    phase: Phase,
    epoch: usize,
    scheduler: Plateau,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub state: TrainState,
    pub train_config: TrainConfig,
}

fn named_tensors<'a>(model: &'a Model, adam: &'a Adam) -> Vec<(String, &'a Tensor)> {
    let store = &model.store;
    let mut out: Vec<(String, &Tensor)> = store.ids().map(|id| (store.name(id).to_string(), store.get(id))).collect();
    for id in store.ids() {
        out.push((format!("adam.m/{}", store.name(id)), &adam.m[id.0]));
    }
    for id in store.ids() {
        out.push((format!("adam.v/{}", store.name(id)), &adam.v[id.0]));
    }
    out
}

pub fn encode_checkpoint(model: &Model, state: &TrainState, train_config: &TrainConfig) -> Result<Vec<u8>> {
    let tensors = named_tensors(model, &state.adam);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        let length = t.len() * 4;
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, length });
        offset += length;
    }
    let header = Header {
        model_config: model.config.clone(),
        train_config: train_config.clone(),
        phase: state.phase,
        epoch: state.epoch,
        scheduler: state.scheduler.clone(),
        adam_step: state.adam.step,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState, train_config: &TrainConfig) -> Result<()> {
    let bytes = encode_checkpoint(model, state, train_config)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (expected OMNF magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "header length exceeds file size"))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::format(path, format!("corrupt header: {e}")))?;
    let payload = &bytes[body..];
    let mut model = Model::new(header.model_config.clone(), 0)?;
    let mut adam = Adam::new(&model.store);
    let ids: Vec<_> = model.store.ids().collect();
    let expected = ids.len() * 3;
    if header.tensors.len() != expected {
        return Err(Error::format(path, format!("{} tensors, expected {expected}", header.tensors.len())));
    }
    for (k, entry) in header.tensors.iter().enumerate() {
        let id = ids[k % ids.len()];
        let pname = model.store.name(id).to_string();
        let want = match k / ids.len() {
            0 => pname.clone(),
            1 => format!("adam.m/{pname}"),
            _ => format!("adam.v/{pname}"),
        };
        if entry.name != want {
            return Err(Error::format(path, format!("tensor `{}` where `{want}` was expected", entry.name)));
        }
        let count: usize = entry.shape.iter().product();
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|&e| e <= payload.len() && entry.length == count * 4)
            .ok_or_else(|| Error::format(path, format!("tensor `{}` payload out of bounds", entry.name)))?;
        let data: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let target = match k / ids.len() {
            0 => model.store.get_mut(id),
            1 => &mut adam.m[id.0],
            _ => &mut adam.v[id.0],
        };
        if target.shape() != entry.shape.as_slice() {
            return Err(Error::format(path, format!("tensor `{}` has shape {:?}", entry.name, entry.shape)));
        }
        target.data_mut().copy_from_slice(&data);
    }
    adam.step = header.adam_step;
    let state = TrainState { phase: header.phase, epoch: header.epoch, adam, scheduler: header.scheduler };
    Ok(Checkpoint { model, state, train_config: header.train_config })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and checks that its architecture equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.model.config != expected {
        return Err(Error::ConfigMismatch {
            stored: serde_json::to_string(&ck.model.config)?,
            expected: serde_json::to_string(expected)?,
        });
    }
    Ok(ck)
}
