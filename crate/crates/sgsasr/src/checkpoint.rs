//! Checkpoint persistence: a directory holding a text manifest, the model
//! configuration, and NPZ containers for parameters and optimizer moments.
//!
//! Round-trips are bit-exact (`f64` little-endian throughout), so a reloaded
//! model reproduces forward outputs and training trajectories byte for byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{model_config_from_kv, model_config_to_kv, KvConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, TrainState};
use crate::nn::Adam;
use crate::npz;

pub const FORMAT_VERSION: u32 = 1;

fn config_hash(config_text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a checkpoint bundle into `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_text = model_config_to_kv(cfg).serialize();

    let mut manifest = String::new();
    manifest.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
    manifest.push_str(&format!("config_hash = {}\n", config_hash(&config_text)));
    manifest.push_str(&format!("epoch = {}\n", state.epoch));
    manifest.push_str(&format!("step = {}\n", state.step));
    manifest.push_str(&format!("seed = {}\n", state.seed));
    manifest.push_str(&format!("base_lr = {}\n", state.base_lr));
    manifest.push_str(&format!("lr_factor = {}\n", state.lr_factor));
    manifest.push_str(&format!(
        "milestones = {}\n",
        state
            .milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    manifest.push_str(&format!("adam_t = {}\n", state.adam.t));

    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(dir.join("manifest.txt"), e))?;
    std::fs::write(dir.join("config.txt"), &config_text)
        .map_err(|e| Error::io(dir.join("config.txt"), e))?;

    let params: Vec<(&str, &ndarray::ArrayD<f64>)> = state
        .store
        .iter()
        .map(|(n, e)| (n.as_str(), &e.value))
        .collect();
    npz::npz_write(&dir.join("params.npz"), params)?;
    let moments_m: Vec<(&str, &ndarray::ArrayD<f64>)> =
        state.adam.m.iter().map(|(n, v)| (n.as_str(), v)).collect();
    npz::npz_write(&dir.join("adam_m.npz"), moments_m)?;
    let moments_v: Vec<(&str, &ndarray::ArrayD<f64>)> =
        state.adam.v.iter().map(|(n, v)| (n.as_str(), v)).collect();
    npz::npz_write(&dir.join("adam_v.npz"), moments_v)?;
    Ok(())
}

fn manifest_get<'a>(kv: &'a KvConfig, key: &str, dir: &Path) -> Result<&'a str> {
    kv.get(key).ok_or_else(|| {
        Error::Checkpoint(format!("{}: manifest missing '{key}'", dir.display()))
    })
}

/// Load a checkpoint bundle, rebuilding the model structure from its stored
/// configuration and restoring every parameter and optimizer moment.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, TrainState)> {
    let manifest_path = dir.join("manifest.txt");
    let manifest_text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = KvConfig::parse(&manifest_text)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

    let version: u32 = manifest_get(&manifest, "format_version", dir)?
        .parse()
        .map_err(|_| Error::Checkpoint("format_version is not an integer".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }

    let config_path = dir.join("config.txt");
    let config_text =
        std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let expected_hash = manifest_get(&manifest, "config_hash", dir)?;
    let actual_hash = config_hash(&config_text);
    if expected_hash != actual_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: manifest says {expected_hash}, file hashes to {actual_hash}"
        )));
    }
    let cfg = model_config_from_kv(&KvConfig::parse(&config_text)?)?;

    let seed: u64 = manifest_get(&manifest, "seed", dir)?
        .parse()
        .map_err(|_| Error::Checkpoint("seed is not an integer".into()))?;
    let (_, mut store) = build_model(&cfg, seed)?;

    let params = npz::npz_read(&dir.join("params.npz"))?;
    let expected: Vec<String> = store.names().cloned().collect();
    if params.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, model needs {}",
            params.len(),
            expected.len()
        )));
    }
    for name in &expected {
        let arr = params.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint missing parameter '{name}'"))
        })?;
        let entry = store.get_mut(name).unwrap();
        if arr.shape() != entry.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}': shape {:?} does not match model {:?}",
                arr.shape(),
                entry.value.shape()
            )));
        }
        entry.value = arr.clone();
    }

    let mut adam = Adam::new();
    adam.t = manifest_get(&manifest, "adam_t", dir)?
        .parse()
        .map_err(|_| Error::Checkpoint("adam_t is not an integer".into()))?;
    for (name, arr) in npz::npz_read(&dir.join("adam_m.npz"))? {
        adam.m.insert(name, arr);
    }
    for (name, arr) in npz::npz_read(&dir.join("adam_v.npz"))? {
        adam.v.insert(name, arr);
    }

    let state = TrainState {
        store,
        adam,
        epoch: manifest_get(&manifest, "epoch", dir)?
            .parse()
            .map_err(|_| Error::Checkpoint("epoch is not an integer".into()))?,
        step: manifest_get(&manifest, "step", dir)?
            .parse()
            .map_err(|_| Error::Checkpoint("step is not an integer".into()))?,
        base_lr: manifest_get(&manifest, "base_lr", dir)?
            .parse()
            .map_err(|_| Error::Checkpoint("base_lr is not a number".into()))?,
        milestones: manifest_get(&manifest, "milestones", dir)?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad milestone".into()))
            })
            .collect::<Result<_>>()?,
        lr_factor: manifest_get(&manifest, "lr_factor", dir)?
            .parse()
            .map_err(|_| Error::Checkpoint("lr_factor is not a number".into()))?,
        seed,
    };
    Ok((cfg, state))
}

/// Load a checkpoint and reject it unless its configuration matches.
pub fn load_checkpoint_matching(dir: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let (cfg, state) = load_checkpoint(dir)?;
    if &cfg != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint at {} was created with a different model configuration",
            dir.display()
        )));
    }
    Ok(state)
}
