//! Versioned binary checkpoints: magic, format version, a JSON architecture
//! descriptor, then the flat float64 parameter vector.
//!
//! ```text
//! magic[4] | u32 version | u32 descriptor_len | descriptor (UTF-8 JSON)
//!          | u64 n_params | n_params × f64 (LE)
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub fn encode<D: Serialize>(magic: &[u8; 4], descriptor: &D, params: &[f64]) -> Result<Vec<u8>> {
    let desc = serde_json::to_vec(descriptor)?;
    let mut out = Vec::with_capacity(20 + desc.len() + params.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<D: DeserializeOwned>(magic: &[u8; 4], bytes: &[u8]) -> Result<(D, Vec<f64>)> {
    let fail = |m: &str| Error::Format(format!("checkpoint: {m}"));
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: (*pos + n) as u64,
                actual: bytes.len() as u64,
            })?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != magic {
        return Err(fail(&format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let dlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let desc: D = serde_json::from_slice(take(&mut pos, dlen)?)
        .map_err(|e| fail(&format!("descriptor: {e}")))?;
    let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let expected = (pos as u64).saturating_add(n.saturating_mul(8));
    if expected != bytes.len() as u64 {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let params = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((desc, params))
}

pub fn save<D: Serialize>(
    path: impl AsRef<Path>,
    magic: &[u8; 4],
    descriptor: &D,
    params: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(magic, descriptor, params)?).map_err(|e| Error::io(path, e))
}

pub fn load<D: DeserializeOwned>(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<(D, Vec<f64>)> {
    let path = path.as_ref();
    decode(magic, &fs::read(path).map_err(|e| Error::io(path, e))?)
}
