//! Binary dataset files.
//!
//! Layout (little-endian): magic `DCPD`, u16 version, u32 header length,
//! UTF-8 JSON header, then one record per instance (u16 category, u32 seed,
//! 15 f64 pose values R row-major/t/s, N×3 f32 canonical, N×3 f32 observed),
//! and a trailing CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use super::{Dataset, DatasetHeader, Instance, Pose};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"DCPD";
pub const DATASET_VERSION: u16 = 1;
const WHAT: &str = "dataset";

fn record_len(n: usize) -> usize {
    2 + 4 + 15 * 8 + 2 * n * 3 * 4
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let n = d.header.n;
    let total: usize = d.header.splits.iter().map(|s| s.count).sum();
    if total != d.instances.len() {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("split table lists {total} instances, found {}", d.instances.len()),
        });
    }
    let header = serde_json::to_vec(&d.header)?;
    let mut buf = Vec::with_capacity(10 + header.len() + total * record_len(n) + 4);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for inst in &d.instances {
        if inst.canonical.len() != n || inst.observed.len() != n {
            return Err(Error::Format { what: WHAT, detail: format!("instance {} has wrong point count", inst.seed) });
        }
        buf.extend_from_slice(&(inst.category as u16).to_le_bytes());
        buf.extend_from_slice(&inst.seed.to_le_bytes());
        let p = &inst.pose;
        for v in p.r.iter().flatten().chain(&p.t).chain(&p.s) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for pt in inst.canonical.iter().chain(&inst.observed) {
            for &v in pt {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(d)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let trunc = |detail: String| Error::Truncated { what: WHAT, detail };
    if bytes.len() < 10 {
        if bytes.len() >= 4 && &bytes[..4] != DATASET_MAGIC {
            return Err(Error::BadMagic { what: WHAT, expected: "DCPD".into() });
        }
        return Err(trunc(format!("{} bytes", bytes.len())));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic { what: WHAT, expected: "DCPD".into() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(Error::BadVersion { what: WHAT, found: version as u32, expected: DATASET_VERSION as u32 });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if 10 + hlen + 4 > bytes.len() {
        return Err(trunc(format!("header of {hlen} bytes exceeds file")));
    }
    let header: std::result::Result<DatasetHeader, _> = serde_json::from_slice(&bytes[10..10 + hlen]);
    if let Ok(h) = &header {
        let total: usize = h.splits.iter().map(|s| s.count).sum();
        let expected = 10 + hlen + total * record_len(h.n) + 4;
        if bytes.len() < expected {
            return Err(trunc(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        if bytes.len() > expected {
            return Err(Error::Format { what: WHAT, detail: format!("{} trailing bytes", bytes.len() - expected) });
        }
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { what: WHAT, stored, computed });
    }
    let header = header.map_err(|e| Error::Format { what: WHAT, detail: format!("header: {e}") })?;
    let n = header.n;
    let total: usize = header.splits.iter().map(|s| s.count).sum();
    let mut cur = Cursor { buf: body, pos: 10 + hlen };
    let mut instances = Vec::with_capacity(total);
    for _ in 0..total {
        let category = u16::from_le_bytes(cur.take()) as usize;
        if category >= header.k {
            return Err(Error::Format { what: WHAT, detail: format!("category {category} >= k={}", header.k) });
        }
        let seed = u32::from_le_bytes(cur.take());
        let mut pose_vals = [0.0f64; 15];
        for v in &mut pose_vals {
            *v = f64::from_le_bytes(cur.take());
        }
        let pts = |cur: &mut Cursor| -> Vec<[f64; 3]> {
            (0..n).map(|_| [0; 3].map(|_| f32::from_le_bytes(cur.take()) as f64)).collect()
        };
        let canonical = pts(&mut cur);
        let observed = pts(&mut cur);
        let pose = Pose {
            r: [
                [pose_vals[0], pose_vals[1], pose_vals[2]],
                [pose_vals[3], pose_vals[4], pose_vals[5]],
                [pose_vals[6], pose_vals[7], pose_vals[8]],
            ],
            t: [pose_vals[9], pose_vals[10], pose_vals[11]],
            s: [pose_vals[12], pose_vals[13], pose_vals[14]],
        };
        instances.push(Instance { category, seed, canonical, pose, observed, sigma: header.sigma });
    }
    Ok(Dataset { header, instances })
}
