//! JSON checkpoints: a config header followed by named tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_FORMAT: &str = "fits-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<(String, Mat)>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tensors: model.names.iter().cloned().zip(model.params.iter().cloned()).collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &ck)?;
    w.flush()?;
    Ok(())
}

/// Rebuilds the layout from the stored config and checks every tensor's
/// name and shape against it.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid("checkpoint", format!("unknown format {:?}", ck.format)));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::invalid("checkpoint", format!("unsupported version {}", ck.version)));
    }
    let mut model = Model::new(ck.config)?;
    if ck.tensors.len() != model.params.len() {
        return Err(Error::invalid(
            "checkpoint",
            format!("expected {} tensors, found {}", model.params.len(), ck.tensors.len()),
        ));
    }
    for (i, (name, t)) in ck.tensors.into_iter().enumerate() {
        let want = &model.params[i];
        if name != model.names[i] || t.shape() != want.shape() || t.data.len() != t.rows * t.cols {
            return Err(Error::invalid("checkpoint", format!("tensor {i} ({name}) does not match the config")));
        }
        model.params[i] = t;
    }
    if !model.is_finite() {
        return Err(Error::invalid("checkpoint", "non-finite parameter"));
    }
    Ok(model)
}
