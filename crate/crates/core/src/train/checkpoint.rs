//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/tensors/<name>.mcpp
//! ```
//!
//! Model tensors are stored under their parameter names, AdamW moments of the
//! trainable tensors as `adam.m.<name>` and `adam.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{is_trainable, AdamState, Model, TrainConfig, TrainState};
use crate::data::tensorfile::{decode, encode};
use crate::error::{Error, Result};
use crate::params::ParamMut;
use crate::psm::PsmKind;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: usize,
    pub adam_t: usize,
    pub psm: PsmKind,
    pub config_digest: String,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    let tdir = dir.join("tensors");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::new();
    let mut put = |name: String, dims: &[usize], data: &[f64]| -> Result<()> {
        let file = format!("tensors/{name}.mcpp");
        write_file(&dir.join(&file), &encode(dims, data)?)?;
        entries.push(TensorEntry {
            name,
            dims: dims.to_vec(),
            file,
        });
        Ok(())
    };
    for p in state.model.params() {
        put(p.name.clone(), &p.dims, p.data)?;
    }
    for (prefix, moments) in [("adam.m.", &state.opt.m), ("adam.v.", &state.opt.v)] {
        for p in moments
            .params()
            .into_iter()
            .filter(|p| is_trainable(&p.name))
        {
            put(format!("{prefix}{}", p.name), &p.dims, p.data)?;
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        step: state.step,
        adam_t: state.opt.t,
        psm: state.model.psm.kind(),
        config_digest: state.config.digest(),
        config: state.config.clone(),
        tensors: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&dir.join("manifest.json"), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mp = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &mp,
            format!("unsupported checkpoint version {}", m.version),
        ));
    }
    Ok(m)
}

fn fill(dir: &Path, manifest: &CheckpointManifest, name: &str, target: ParamMut<'_>) -> Result<()> {
    let err = |message: String| Error::Tensor {
        name: name.to_string(),
        message,
    };
    let entry = manifest
        .tensors
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| err("missing from manifest".into()))?;
    let path = dir.join(&entry.file);
    let bytes = std::fs::read(&path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    let t = decode(&bytes, &path).map_err(|e| err(e.to_string()))?;
    if t.dims != target.dims || entry.dims != target.dims {
        return Err(err(format!(
            "dims {:?}, expected {:?}",
            t.dims, target.dims
        )));
    }
    target.data.copy_from_slice(&t.values);
    Ok(())
}

/// Load a checkpoint. With `expected` set, its digest must match the stored
/// one unless `force`, in which case `expected` replaces the stored config.
pub fn load_checkpoint(
    dir: &Path,
    expected: Option<&TrainConfig>,
    force: bool,
) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let stored = manifest.config.digest();
    if stored != manifest.config_digest {
        return Err(Error::DigestMismatch {
            expected: manifest.config_digest.clone(),
            found: stored,
        });
    }
    let mut config = manifest.config.clone();
    if let Some(exp) = expected {
        let want = exp.digest();
        if want != manifest.config_digest {
            if !force {
                return Err(Error::DigestMismatch {
                    expected: want,
                    found: manifest.config_digest.clone(),
                });
            }
            log::warn!(
                "checkpoint config digest {} differs from {}; continuing because of --force",
                manifest.config_digest,
                want
            );
            config = exp.clone();
        }
    }
    if manifest.psm != manifest.config.psm {
        return Err(Error::format(
            dir,
            "manifest PSM variant disagrees with its config",
        ));
    }
    let mut model = Model::init(&manifest.config, 0)?;
    for p in model.params_mut() {
        let name = p.name.clone();
        fill(dir, &manifest, &name, p)?;
    }
    let mut opt = AdamState::new(&model);
    opt.t = manifest.adam_t;
    for (prefix, moments) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
        for p in moments
            .params_mut()
            .into_iter()
            .filter(|p| is_trainable(&p.name))
        {
            let name = format!("{prefix}{}", p.name);
            fill(dir, &manifest, &name, p)?;
        }
    }
    Ok(TrainState {
        config,
        model,
        opt,
        step: manifest.step,
    })
}
