//! Versioned binary weight files with a JSON sidecar.
//!
//! Layout: magic, kind string, parameter records `(name, f32 LE values)`, then
//! a SHA-256 digest of everything before it. Weights are stored bit-exactly so
//! a reloaded model reproduces the saved one's outputs exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, UdError};
use crate::nn::{Module, Param};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UDCKPT01";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn bad(path: &Path, reason: impl Into<String>) -> UdError {
    UdError::Checkpoint { path: path.to_owned(), reason: reason.into() }
}

/// Write weights to `path` and `sidecar` to `<path>.json`.
pub fn save(path: &Path, kind: &str, params: &[&Param], sidecar: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_str(&mut buf, kind);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        put_str(&mut buf, &p.name);
        buf.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    let mut json = serde_json::to_string_pretty(sidecar)?;
    json.push('\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Named weight arrays from a checkpoint of the expected `kind`.
pub fn read_weights(path: &Path, kind: &str) -> Result<Vec<(String, Vec<f32>)>> {
    let data = fs::read(path).map_err(|e| bad(path, format!("cannot read: {e}")))?;
    if data.len() < MAGIC.len() + 32 || &data[..MAGIC.len()] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad(path, "checksum mismatch, file is corrupt"));
    }
    let mut r = Reader { data: body, pos: MAGIC.len() };
    let truncated = || bad(path, "truncated record");
    let found = r.string().ok_or_else(truncated)?;
    if found != kind {
        return Err(bad(path, format!("holds a {found} model, expected {kind}")));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string().ok_or_else(truncated)?;
        let len = r.u64().ok_or_else(truncated)? as usize;
        let bytes = r.take(len.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        out.push((name, values));
    }
    Ok(out)
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| bad(&side, format!("cannot read sidecar: {e}")))?;
    serde_json::from_str(&text).map_err(|e| bad(&side, format!("invalid sidecar: {e}")))
}

/// Copy stored weights into a freshly built module with the same layout.
pub fn load_into(module: &mut impl Module, weights: Vec<(String, Vec<f32>)>, path: &Path) -> Result<()> {
    let mut params = module.params_mut();
    if params.len() != weights.len() {
        return Err(bad(path, format!("{} parameter arrays, model expects {}", weights.len(), params.len())));
    }
    for (p, (name, values)) in params.iter_mut().zip(weights) {
        if p.name != name || p.value.len() != values.len() {
            return Err(bad(path, format!("parameter {name} ({}) does not fit {} ({})", values.len(), p.name, p.len())));
        }
        **p = Param::new(name, values);
    }
    Ok(())
}

/// Hex SHA-256 of arbitrary bytes.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Linear::new("fc", 7, 5, &mut rng);
        save(&path, "test", &a.params(), &serde_json::json!({"format_version": 1})).unwrap();
        let mut b = Linear::new("fc", 7, 5, &mut rng);
        load_into(&mut b, read_weights(&path, "test").unwrap(), &path).unwrap();
        assert_eq!(a.weight.value, b.weight.value);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn corruption_and_kind_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Linear::new("fc", 3, 2, &mut rng);
        save(&path, "test", &a.params(), &1).unwrap();
        assert!(read_weights(&path, "other").is_err());
        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 1;
        fs::write(&path, bytes).unwrap();
        let err = read_weights(&path, "test").unwrap_err().to_string();
        assert!(err.contains("corrupt"), "{err}");
        assert!(read_weights(&dir.path().join("missing"), "test").is_err());
    }
}
