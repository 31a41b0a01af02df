//! Binary checkpoint container.
//!
//! ```text
//! "TVSEG1"                       6 bytes
//! json_len                       u64, little-endian
//! UNetConfig as canonical JSON   json_len bytes, UTF-8
//! per layer, declared order:     weights then biases, f64 little-endian
//! ```
//!
//! Loading checks the magic, parses the config, and requires the payload
//! to be exactly the size the config's layer list implies.

use std::fs;
use std::path::Path;

use super::{UNetConfig, UNetParams};
use crate::canonical::to_canonical_json;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TVSEG1";

pub fn write_checkpoint(config: &UNetConfig, params: &UNetParams) -> Result<Vec<u8>> {
    params.check_against(config)?;
    let json = to_canonical_json(config)?;
    let mut out = Vec::with_capacity(14 + json.len() + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for (_, buf) in params.buffers() {
        for v in buf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(UNetConfig, UNetParams)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 14 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("missing TVSEG1 magic".into()));
    }
    let json_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let json_end = 14usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("config length {json_len} overruns the file")))?;
    let json = std::str::from_utf8(&bytes[14..json_end])
        .map_err(|e| bad(format!("config is not UTF-8: {e}")))?;
    let config: UNetConfig =
        serde_json::from_str(json).map_err(|e| bad(format!("config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| bad(format!("embedded config invalid: {e}")))?;

    let payload = &bytes[json_end..];
    let expected = config.param_count() * 8;
    if payload.len() != expected {
        return Err(bad(format!(
            "weight payload is {} bytes, config implies {expected}",
            payload.len()
        )));
    }
    let mut params = UNetParams::zeros(&config);
    let mut chunks = payload.chunks_exact(8);
    for (name, buf) in params.buffers_mut() {
        for v in buf.iter_mut() {
            let c = chunks.next().expect("payload size checked");
            *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(bad(format!("layer {name} holds a non-finite value")));
            }
        }
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &UNetConfig, params: &UNetParams) -> Result<()> {
    let bytes = write_checkpoint(config, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(UNetConfig, UNetParams)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build;

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 2,
            input_size: [4, 4],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny();
        let p = build(&cfg, 5).unwrap();
        let bytes = write_checkpoint(&cfg, &p).unwrap();
        assert_eq!(&bytes[..6], b"TVSEG1");
        let (c2, p2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
    }

    #[test]
    fn truncated_payload_rejected() {
        let cfg = tiny();
        let p = build(&cfg, 5).unwrap();
        let mut bytes = write_checkpoint(&cfg, &p).unwrap();
        bytes.pop();
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(read_checkpoint(b"NOTACHECKPOINT").is_err());
    }
}
