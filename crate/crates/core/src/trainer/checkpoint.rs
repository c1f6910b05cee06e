//! Checkpoint files.
//!
//! Layout: `DOFCKPT1`, a `u64` little-endian header length, a JSON header,
//! then the field parameters and their two Adam moment vectors as
//! little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, PerViewOptics, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::field::RadianceFieldParams;

const MAGIC: &[u8; 8] = b"DOFCKPT1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: usize,
    config: TrainConfig,
    optics: PerViewOptics,
    adam_t: u64,
    param_count: usize,
}

/// Writes `state` to `path` through a temporary file and a rename, so an
/// interrupted write never leaves a truncated checkpoint behind.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let header = Header {
        version: VERSION,
        step: state.step,
        config: state.config.clone(),
        optics: state.optics.clone(),
        adam_t: state.adam.t,
        param_count: state.params.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::parse(path, "header", e))?;
    let mut out = Vec::with_capacity(16 + json.len() + 24 * state.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in state.params.values.iter().chain(&state.adam.m).chain(&state.adam.v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, &out).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::parse(path, "magic", "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::parse(path, "header", "truncated"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::parse(path, "header", e))?;
    if header.version != VERSION {
        return Err(Error::parse(
            path,
            "version",
            format!("unsupported version {}", header.version),
        ));
    }
    header.config.validate()?;
    let n = header.param_count;
    let body = &bytes[16 + len..];
    if body.len() != n * 24 {
        return Err(Error::parse(
            path,
            "parameters",
            format!("expected {} bytes, found {}", n * 24, body.len()),
        ));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = RadianceFieldParams::from_values(header.config.arch, floats[..n].to_vec())?;
    let adam = Adam {
        config: header.config.adam,
        m: floats[n..2 * n].to_vec(),
        v: floats[2 * n..].to_vec(),
        t: header.adam_t,
    };
    Ok(TrainState {
        config: header.config,
        params,
        adam,
        optics: header.optics,
        step: header.step,
    })
}
