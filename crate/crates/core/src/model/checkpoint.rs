//! Binary checkpoint: `magic | version u32 | config length u64 | config JSON |
//! parameter count u64 | f64 parameters`, all little-endian, parameters in
//! declaration order. Training state goes to a JSON file beside it.

use std::fs;
use std::path::{Path, PathBuf};

use super::network::{ModelConfig, ModelParams};
use super::train::TrainState;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub state: Option<TrainState>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".state.json");
    PathBuf::from(name)
}

pub fn encode_params(params: &ModelParams) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(params.config())?;
    let mut out = Vec::with_capacity(32 + config.len() + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.param_count() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let chunk = bytes
            .get(pos..pos + n)
            .ok_or_else(|| corrupt("truncated"))?;
        pos += n;
        Ok(chunk)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let config_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let config: ModelConfig =
        serde_json::from_slice(take(config_len)?).map_err(|e| corrupt(&format!("config: {e}")))?;
    let mut params = ModelParams::zeros(&config)?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != params.param_count() {
        return Err(corrupt(&format!(
            "{count} parameters stored, config implies {}",
            params.param_count()
        )));
    }
    let raw = take(8 * count)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    params.set_flat(&values)?;
    Ok(params)
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    state: Option<&TrainState>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_params(params)?).map_err(|e| Error::io(path, e))?;
    if let Some(state) = state {
        let side = sidecar(path);
        fs::write(&side, serde_json::to_vec_pretty(state)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_params(&bytes, path)?;
    let side = sidecar(path);
    let state = if side.exists() {
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        Some(serde_json::from_slice(&raw)?)
    } else {
        None
    };
    Ok(Checkpoint { params, state })
}
