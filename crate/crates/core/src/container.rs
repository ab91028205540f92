//! Binary artifact container shared by checkpoints and sample batches.
//!
//! ```text
//! SIDELAB <kind> v<version>\n
//! {json header, one line}\n
//! <raw little-endian f64 payload>
//! ```
//!
//! The header carries `array_lens` (element count of each payload array)
//! and `checksum`, the SHA-256 of the payload bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope<H> {
    array_lens: Vec<usize>,
    checksum: String,
    #[serde(flatten)]
    header: H,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write `contents` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode<H: Serialize>(kind: &str, header: &H, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(arrays.iter().map(|a| a.len() * 8).sum());
    for a in arrays {
        for v in *a {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let env = Envelope {
        array_lens: arrays.iter().map(|a| a.len()).collect(),
        checksum: sha256_hex(&payload),
        header,
    };
    let mut out = format!("SIDELAB {kind} v{FORMAT_VERSION}\n").into_bytes();
    out.extend_from_slice(serde_json::to_string(&env)?.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(kind: &str, bytes: &[u8], path: &Path) -> Result<(H, Vec<Vec<f64>>)> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().unwrap_or_default();
    let expected = format!("SIDELAB {kind} v{FORMAT_VERSION}");
    if magic != expected.as_bytes() {
        return Err(corrupt(format!(
            "bad magic line {:?}, expected {expected:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let header = lines
        .next()
        .ok_or_else(|| corrupt("missing header".into()))?;
    let payload = lines.next().unwrap_or_default();
    let env: Envelope<H> =
        serde_json::from_slice(header).map_err(|e| corrupt(format!("header: {e}")))?;
    let total: usize = env.array_lens.iter().sum();
    if payload.len() != total * 8 {
        return Err(corrupt(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            total * 8
        )));
    }
    if sha256_hex(payload) != env.checksum {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let arrays = env
        .array_lens
        .iter()
        .map(|&n| values.by_ref().take(n).collect())
        .collect();
    Ok((env.header, arrays))
}

pub fn save<H: Serialize>(path: &Path, kind: &str, header: &H, arrays: &[&[f64]]) -> Result<()> {
    write_atomic(path, &encode(kind, header, arrays)?)
}

pub fn load<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes, path)
}
