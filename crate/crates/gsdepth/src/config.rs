//! JSON documents: training configs and synthetic scene specs.

use std::path::Path;

use gsdepth_core::synth::SynthSceneSpec;
use gsdepth_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{self, Error, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = error::read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    error::write(path, text.as_bytes())
}

/// Missing fields take their defaults; unknown fields are errors.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_synth_spec(path: &Path) -> Result<SynthSceneSpec> {
    read_json(path)
}
