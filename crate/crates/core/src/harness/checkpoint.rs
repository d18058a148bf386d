//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "CQMCKPT\0"
//! version  u32
//! count    u32       number of sections
//! table    count x { name: 16 bytes, NUL padded; offset: u64; len: u64 }
//! payload  section bytes at their absolute offsets
//! ```
//!
//! Sections: `config` (canonical key=value text), `config_hash` (hex
//! SHA-256 of `config`), `state` (bincode trainer state) and, optionally,
//! `replay` (bincode replay buffers).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CqmError, Result};

use super::config::RunConfig;
use super::trainer::{new_replay, Trainer, TrainerState};

pub const MAGIC: &[u8; 8] = b"CQMCKPT\0";
pub const VERSION: u32 = 1;
const NAME_LEN: usize = 16;
const ENTRY_LEN: usize = NAME_LEN + 16;
const HEADER_LEN: usize = 16;

fn corrupt(msg: impl Into<String>) -> CqmError {
    CqmError::CorruptCheckpoint(msg.into())
}

/// Assembles named sections into the file layout.
pub fn encode_sections(sections: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let mut offset = (HEADER_LEN + ENTRY_LEN * sections.len()) as u64;
    for (name, data) in sections {
        let mut field = [0u8; NAME_LEN];
        let bytes = name.as_bytes();
        assert!(bytes.len() < NAME_LEN, "section name too long");
        field[..bytes.len()].copy_from_slice(bytes);
        out.extend_from_slice(&field);
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        offset += data.len() as u64;
    }
    for (_, data) in sections {
        out.extend_from_slice(data);
    }
    out
}

/// Splits a file into its named sections, validating the header and bounds.
pub fn decode_sections(bytes: &[u8]) -> Result<Vec<(String, &[u8])>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CqmError::CheckpointVersion { found: version, expected: VERSION });
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let table_end = count
        .checked_mul(ENTRY_LEN)
        .and_then(|t| t.checked_add(HEADER_LEN))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated section table"))?;
    let mut sections = Vec::with_capacity(count);
    for i in 0..count {
        let e = &bytes[HEADER_LEN + i * ENTRY_LEN..HEADER_LEN + (i + 1) * ENTRY_LEN];
        let name_end = e[..NAME_LEN].iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
        let name = std::str::from_utf8(&e[..name_end]).map_err(|_| corrupt("section name is not utf-8"))?;
        let offset = u64::from_le_bytes(e[NAME_LEN..NAME_LEN + 8].try_into().unwrap());
        let len = u64::from_le_bytes(e[NAME_LEN + 8..].try_into().unwrap());
        let start = usize::try_from(offset).map_err(|_| corrupt("offset overflow"))?;
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| start.checked_add(l))
            .filter(|&end| start >= table_end && end <= bytes.len())
            .ok_or_else(|| corrupt(format!("section {name} out of bounds")))?;
        sections.push((name.to_string(), &bytes[start..end]));
    }
    Ok(sections)
}

fn hex_sha256(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes the trainer; the replay buffers are included when `with_buffers`.
pub fn to_bytes(trainer: &Trainer, with_buffers: bool) -> Result<Vec<u8>> {
    let config = trainer.state.config.canonical().into_bytes();
    let hash = hex_sha256(&config).into_bytes();
    let state = bincode::serialize(&trainer.state).map_err(|e| corrupt(e.to_string()))?;
    let mut sections = vec![("config", config), ("config_hash", hash), ("state", state)];
    if with_buffers {
        sections.push(("replay", bincode::serialize(&trainer.replay).map_err(|e| corrupt(e.to_string()))?));
    }
    Ok(encode_sections(&sections))
}

/// Restores a trainer. When `expected` is given its config must match the stored one.
pub fn from_bytes(bytes: &[u8], expected: Option<&RunConfig>) -> Result<Trainer> {
    let sections = decode_sections(bytes)?;
    let find = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, d)| *d);
    let config_bytes = find("config").ok_or_else(|| corrupt("missing config section"))?;
    let hash = find("config_hash").ok_or_else(|| corrupt("missing config_hash section"))?;
    if hex_sha256(config_bytes).as_bytes() != hash {
        return Err(corrupt("config hash does not match config section"));
    }
    let text = std::str::from_utf8(config_bytes).map_err(|_| corrupt("config is not utf-8"))?;
    let stored = RunConfig::parse(text)?;
    if let Some(exp) = expected {
        let diff = stored.diff(exp);
        if !diff.is_empty() {
            return Err(CqmError::ConfigMismatch(diff));
        }
    }
    let state: TrainerState =
        bincode::deserialize(find("state").ok_or_else(|| corrupt("missing state section"))?).map_err(|e| corrupt(e.to_string()))?;
    if state.config != stored {
        return Err(corrupt("state config differs from config section"));
    }
    let replay = match find("replay") {
        Some(d) => bincode::deserialize(d).map_err(|e| corrupt(e.to_string()))?,
        None => new_replay(&state.config, &state.space),
    };
    Trainer::from_parts(state, replay)
}

pub fn save(trainer: &Trainer, path: &Path, with_buffers: bool) -> Result<()> {
    std::fs::write(path, to_bytes(trainer, with_buffers)?)?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&RunConfig>) -> Result<Trainer> {
    from_bytes(&std::fs::read(path)?, expected)
}
