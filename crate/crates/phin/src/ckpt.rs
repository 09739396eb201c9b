//! Checkpoint files: the binary tensor codec plus a JSON sidecar holding the
//! run configuration needed to rebuild the model.

use std::path::{Path, PathBuf};

use phin_core::checkpoint;
use phin_core::config::RunConfig;
use phin_core::model::Model;
use phin_core::ParamStore;

use crate::error::{Error, Result};
use crate::fsio;

/// `<ckpt>.json`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(path: &Path, cfg: &RunConfig, store: &ParamStore<f32>) -> Result<()> {
    let bytes = checkpoint::encode(&checkpoint::named_tensors(store))?;
    fsio::write(path, &bytes)?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fsio::write(&sidecar_path(path), json.as_bytes())
}

pub fn load(path: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let side = sidecar_path(path);
    let cfg: RunConfig = serde_json::from_str(&fsio::read_string(&side)?)
        .map_err(|e| Error::Config(format!("{}: {e}", side.display())))?;
    let (mut store, model) = Model::new(&cfg.model, cfg.mode, cfg.seed).map_err(|e| Error::Config(e.to_string()))?;
    let tensors = checkpoint::decode(&fsio::read(path)?).map_err(|e| Error::from(e).in_file(path))?;
    checkpoint::restore(&mut store, &tensors).map_err(|e| Error::from(e).in_file(path))?;
    Ok((cfg, model, store))
}
