//! JSON checkpoints holding the configuration, every named tensor with its
//! Adam moments, the step counter and free-form string metadata.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamMoments, ModelConfig, ModelError, ModelState};
use crate::autodiff::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "sumlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    value: Matrix,
    m: Matrix,
    v: Matrix,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

pub fn save(
    state: &ModelState,
    metadata: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    let tensors = state
        .params()
        .iter()
        .map(|(id, name, value)| TensorRecord {
            name: name.to_string(),
            value: value.clone(),
            m: state.moments().m[id].clone(),
            v: state.moments().v[id].clone(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: state.config().clone(),
        step: state.step(),
        metadata: metadata.clone(),
        tensors,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, checking that its tensors match its own configuration.
pub fn load(path: impl AsRef<Path>) -> Result<(ModelState, BTreeMap<String, String>), ModelError> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!("unknown format {:?}", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    file.config
        .validate()
        .map_err(|e| ModelError::Checkpoint(format!("stored configuration is invalid: {e}")))?;
    let mut params = ParamStore::new();
    let mut moments = AdamMoments {
        m: Vec::with_capacity(file.tensors.len()),
        v: Vec::with_capacity(file.tensors.len()),
    };
    for t in file.tensors {
        if t.m.shape() != t.value.shape() || t.v.shape() != t.value.shape() {
            return Err(ModelError::Checkpoint(format!("moment shapes of {} disagree", t.name)));
        }
        if params.id(&t.name).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate tensor {}", t.name)));
        }
        params.add(t.name, t.value);
        moments.m.push(t.m);
        moments.v.push(t.v);
    }
    let state = ModelState::from_parts(file.config, params, Some(moments), file.step)?;
    Ok((state, file.metadata))
}

/// Like [`load`], but fails unless the stored configuration equals `expected`.
pub fn load_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(ModelState, BTreeMap<String, String>), ModelError> {
    let (state, metadata) = load(path)?;
    if state.config() != expected {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint configuration {:?} does not match {:?}",
            state.config(),
            expected
        )));
    }
    Ok((state, metadata))
}
