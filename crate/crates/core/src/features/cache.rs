//! Binary on-disk container for spectrogram stacks.
//!
//! Layout (little endian): magic `RSPC`, u32 version, u64 config hash,
//! u32 channels/bands/frames, u64 sample count, u64 hop, f64 duration,
//! `frames` f64 frame times, then the f32 values in (C, B, T) order.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::SpectrogramStack;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RSPC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 12 + 8 + 8 + 8;

/// Stable 64-bit digest of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn write_stack(path: &Path, stack: &SpectrogramStack, hash: u64) -> Result<()> {
    let (c, b, t) = stack.values.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + t * 8 + c * b * t * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&hash.to_le_bytes());
    for d in [c, b, t] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(stack.n_samples as u64).to_le_bytes());
    buf.extend_from_slice(&(stack.hop_len as u64).to_le_bytes());
    buf.extend_from_slice(&stack.source_duration_s.to_le_bytes());
    for &ft in &stack.frame_times {
        buf.extend_from_slice(&ft.to_le_bytes());
    }
    for &v in stack.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::path(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::path(path, e))
}

/// Reads a stack, rejecting files written under a different configuration.
pub fn read_stack(path: &Path, expected_hash: u64) -> Result<SpectrogramStack> {
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    let bad = |reason: &str| Error::Container {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a spectrogram container"));
    }
    let mut r = Reader { bytes: &bytes, pos: 4 };
    if r.u32() != VERSION {
        return Err(bad("unsupported container version"));
    }
    if r.u64() != expected_hash {
        return Err(Error::StaleCache(path.to_path_buf()));
    }
    let (c, b, t) = (r.u32() as usize, r.u32() as usize, r.u32() as usize);
    let n_samples = r.u64() as usize;
    let hop_len = r.u64() as usize;
    let source_duration_s = r.f64();
    if bytes.len() != HEADER_LEN + t * 8 + c * b * t * 4 {
        return Err(bad("truncated or oversized payload"));
    }
    let frame_times = (0..t).map(|_| r.f64()).collect();
    let values: Vec<f32> = (0..c * b * t).map(|_| r.f32()).collect();
    let values = Array3::from_shape_vec((c, b, t), values).map_err(|e| bad(&e.to_string()))?;
    Ok(SpectrogramStack {
        values,
        frame_times,
        source_duration_s,
        n_samples,
        hop_len,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}
