//! Binary policy checkpoints.
//!
//! Layout (little-endian): magic `TFLB`, format version `u32`, then the model
//! config as fixed-order integers (`vocab_size`, `embed_dim`, `hidden_dim`,
//! `context_window` as `u32`, `param_init_scale` as its IEEE-754 bit pattern
//! in a `u64`), the parameter count as `u64`, and the flat `f64` parameters.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{ModelConfig, Policy};

pub const MAGIC: &[u8; 4] = b"TFLB";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 4 + 8 + 8;

pub fn encode(policy: &Policy) -> Vec<u8> {
    let c = policy.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * policy.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [c.vocab_size, c.embed_dim, c.hidden_dim, c.context_window] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.param_init_scale.to_bits().to_le_bytes());
    out.extend_from_slice(&(policy.param_count() as u64).to_le_bytes());
    for p in policy.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Policy> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config = ModelConfig {
        vocab_size: read_u32(bytes, 8) as usize,
        embed_dim: read_u32(bytes, 12) as usize,
        hidden_dim: read_u32(bytes, 16) as usize,
        context_window: read_u32(bytes, 20) as usize,
        param_init_scale: f64::from_bits(read_u64(bytes, 24)),
    };
    config.validate()?;
    let count = read_u64(bytes, 32) as usize;
    if count != config.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match config ({})",
            config.param_count()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * count {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * count,
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Policy::from_params(config, params)
}

pub fn save_checkpoint(policy: &Policy, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(policy))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Policy> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its config equals `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Policy> {
    let policy = load_checkpoint(path)?;
    if policy.config() != expected {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint has {:?}, expected {:?}",
            policy.config(),
            expected
        )));
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn policy() -> Policy {
        let config = ModelConfig {
            vocab_size: 5,
            embed_dim: 2,
            hidden_dim: 3,
            context_window: 2,
            param_init_scale: 0.3,
        };
        Policy::init(config, &mut Rng::new(11)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tflb");
        let p = policy();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let bits: Vec<u64> = p.params().iter().map(|x| x.to_bits()).collect();
        let bits2: Vec<u64> = q.params().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, bits2);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&policy());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&bytes[..10]).is_err());
    }

    #[test]
    fn rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tflb");
        save_checkpoint(&policy(), &path).unwrap();
        assert!(load_checkpoint_for(&path, &ModelConfig::default()).is_err());
        assert!(load_checkpoint_for(&path, policy().config()).is_ok());
    }
}
