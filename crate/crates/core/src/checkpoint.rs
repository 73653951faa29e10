//! Binary checkpoint format with CRC32 integrity.
//!
//! Layout: magic "FANT", format version (u32 LE), then a payload region of
//! tensor count (u32 LE) followed by per-tensor records (name length + UTF-8
//! name, rank, dims, raw f32 LE values), and a trailing CRC32 of the payload
//! region. Save/load roundtrips are bitwise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::optim::ParamSet;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FANT";
const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for b in bytes {
        crc = table[((crc ^ *b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes every tensor of `params` (trainable and buffers) by name.
pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut payload = Vec::new();
    put_u32(&mut payload, params.len() as u32);
    for e in params.iter() {
        let name = e.name.as_bytes();
        put_u32(&mut payload, name.len() as u32);
        payload.extend_from_slice(name);
        let shape = e.tensor.shape();
        put_u32(&mut payload, shape.len() as u32);
        for d in &shape {
            put_u32(&mut payload, *d as u32);
        }
        for v in e.tensor.values().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&payload);
    let mut out = Vec::with_capacity(8 + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&payload);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Raw decoded checkpoint: (name, shape, values) per tensor, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::CheckpointBadVersion(version));
    }
    if bytes.len() < 12 {
        return Err(Error::CheckpointTruncated("missing CRC trailer".into()));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(payload);
    if stored != computed {
        return Err(Error::CheckpointCrc { stored, computed });
    }

    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::Format {
            kind: "checkpoint",
            detail: format!("tensor {i}: name is not UTF-8"),
        })?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor payload")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, shape, values));
    }
    if r.pos != payload.len() {
        return Err(Error::Format {
            kind: "checkpoint",
            detail: format!("{} trailing bytes after last tensor", payload.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

/// Loads a checkpoint into an existing parameter set: every tensor is
/// matched by name and shape; missing or extra tensors are errors.
pub fn load_into(params: &ParamSet, path: &Path) -> Result<()> {
    let decoded = decode(&fs::read(path)?)?;
    if decoded.len() != params.len() {
        return Err(Error::Format {
            kind: "checkpoint",
            detail: format!(
                "tensor count mismatch: file has {}, model expects {}",
                decoded.len(),
                params.len()
            ),
        });
    }
    let by_name: HashMap<&str, (&Vec<usize>, &Vec<f32>)> = decoded
        .iter()
        .map(|(n, s, v)| (n.as_str(), (s, v)))
        .collect();
    for e in params.iter() {
        let (shape, values) = by_name.get(e.name.as_str()).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            detail: format!("missing tensor `{}`", e.name),
        })?;
        if **shape != e.tensor.shape() {
            return Err(Error::ShapeMismatch {
                context: "checkpoint tensor",
                expected: e.tensor.shape(),
                got: (*shape).clone(),
            });
        }
        e.tensor.copy_from(values);
    }
    Ok(())
}
