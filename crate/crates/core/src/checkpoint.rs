//! Parameter checkpoints: a directory holding a JSON config plus one `.ntf`
//! tensor per named parameter.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::nn::{AdamState, Parameterized};
use crate::ntf;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.json";

pub fn save_params<M: Parameterized>(dir: &Path, subdir: &str, model: &M) -> Result<()> {
    for (name, tensor) in model.named_params() {
        ntf::write_f32(&dir.join(subdir).join(format!("{name}.ntf")), tensor)?;
    }
    Ok(())
}

/// Loads every parameter of `model` from `dir/subdir`, checking shapes.
pub fn load_params<M: Parameterized>(dir: &Path, subdir: &str, model: &mut M) -> Result<()> {
    for (name, tensor) in model.named_params_mut() {
        let path = dir.join(subdir).join(format!("{name}.ntf"));
        let loaded = ntf::read_f32(&path)?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::format(
                &path,
                format!("expected shape {:?}, found {:?}", tensor.shape(), loaded.shape()),
            ));
        }
        *tensor = loaded;
    }
    Ok(())
}

/// SHA-256 over every parameter's name, shape and little-endian bytes.
pub fn param_hash<M: Parameterized>(model: &M) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in model.named_params() {
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn save_config<C: Serialize>(dir: &Path, config: &C) -> Result<()> {
    fsutil::write_json(&dir.join(CONFIG_FILE), config)
}

pub fn load_config<C: DeserializeOwned>(dir: &Path) -> Result<C> {
    fsutil::read_json(&dir.join(CONFIG_FILE))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OptimizerMeta {
    step: u64,
}

pub fn save_optimizer<M: Parameterized>(dir: &Path, model: &M, state: &AdamState) -> Result<()> {
    fsutil::write_json(&dir.join("optimizer.json"), &OptimizerMeta { step: state.step })?;
    for (((name, _), m), v) in model.named_params().into_iter().zip(&state.first).zip(&state.second) {
        ntf::write_f32(&dir.join("optimizer/m").join(format!("{name}.ntf")), m)?;
        ntf::write_f32(&dir.join("optimizer/v").join(format!("{name}.ntf")), v)?;
    }
    Ok(())
}

pub fn load_optimizer<M: Parameterized>(dir: &Path, model: &M) -> Result<AdamState> {
    let meta: OptimizerMeta = fsutil::read_json(&dir.join("optimizer.json"))?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in model.named_params() {
        for (sub, out) in [("optimizer/m", &mut first), ("optimizer/v", &mut second)] {
            let path = dir.join(sub).join(format!("{name}.ntf"));
            let loaded: Tensor = ntf::read_f32(&path)?;
            if loaded.shape() != t.shape() {
                return Err(Error::format(&path, "optimizer state shape mismatch"));
            }
            out.push(loaded);
        }
    }
    Ok(AdamState {
        step: meta.step,
        first,
        second,
    })
}
