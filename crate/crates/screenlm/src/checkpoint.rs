//! Named-tensor checkpoint format shared by both model families.
//!
//! Layout: 4-byte magic, u16 version, u32-length-prefixed UTF-8 config
//! snapshot (`key=value` lines), u32 tensor count, then per tensor a
//! u32-length-prefixed name, u8 rank, u32 dims, and the float32 payload.
//! All integers little-endian. Tensors are written in name order, so a
//! save/load/save cycle is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Array, ParamSet};

const VERSION: u16 = 1;

/// Magic for encoder-decoder model checkpoints.
pub const MAGIC_ENCDEC: [u8; 4] = *b"PTPC";
/// Magic for autoregressive model checkpoints.
pub const MAGIC_AR: [u8; 4] = *b"PTPA";

/// A parsed checkpoint: parameters plus the config snapshot it was saved with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub config: BTreeMap<String, String>,
    pub params: ParamSet<f32>,
    pub step: u64,
}

/// Serialize `params` (all rank-2 here) with a config snapshot.
pub fn save(
    path: &Path,
    magic: [u8; 4],
    config: &BTreeMap<String, String>,
    params: &ParamSet<f32>,
    step: u64,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut snapshot = String::new();
    snapshot.push_str(&format!("step={step}\n"));
    for (k, v) in config {
        snapshot.push_str(&format!("{k}={v}\n"));
    }
    out.extend_from_slice(&(snapshot.len() as u32).to_le_bytes());
    out.extend_from_slice(snapshot.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2u8); // rank
        out.extend_from_slice(&(tensor.rows as u32).to_le_bytes());
        out.extend_from_slice(&(tensor.cols as u32).to_le_bytes());
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor { bytes: &bytes, pos: 0 };
    let magic_slice = r.take(4, "magic")?;
    let magic = [magic_slice[0], magic_slice[1], magic_slice[2], magic_slice[3]];
    if magic != MAGIC_ENCDEC && magic != MAGIC_AR {
        return Err(Error::Checkpoint(format!("unknown magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let snap_len = r.u32("config length")? as usize;
    let snapshot = std::str::from_utf8(r.take(snap_len, "config snapshot")?)
        .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?
        .to_string();
    let mut config = BTreeMap::new();
    let mut step = 0u64;
    for line in snapshot.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k == "step" {
                step = v.parse().map_err(|_| Error::Checkpoint(format!("bad step {v:?}")))?;
            } else {
                config.insert(k.to_string(), v.to_string());
            }
        }
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0];
        if rank != 2 {
            return Err(Error::Checkpoint(format!("tensor {name}: unsupported rank {rank}")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows * cols;
        let payload = r.take(n * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&name, Array::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { magic, config, params, step })
}

/// Check loaded parameters against an expected name->shape table; the error
/// names the first offending tensor in name order.
pub fn validate_shapes(params: &ParamSet<f32>, expected: &BTreeMap<String, (usize, usize)>) -> Result<()> {
    for (name, &(rows, cols)) in expected {
        match params.get(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(t) if (t.rows, t.cols) != (rows, cols) => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected {rows}x{cols}, found {}x{}",
                    t.rows, t.cols
                )));
            }
            _ => {}
        }
    }
    for name in params.names() {
        if !expected.contains_key(&name) {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
