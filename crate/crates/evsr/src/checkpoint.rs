//! Binary weight checkpoints.
//!
//! Layout (little-endian): magic `E2SR`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` ndim, `ndim` x `u32`
//! dims and the `f32` payload. The architecture descriptor travels as the
//! tensor [`ARCH_TENSOR`].

use std::fs;
use std::path::Path;

use evsr_core::autograd::Tensor;
use evsr_core::network::{ArchConfig, ModelWeights};

use crate::error::{Error, IoContext, Result};
use crate::io::write_bytes;

pub const MAGIC: &[u8; 4] = b"E2SR";
pub const VERSION: u32 = 1;
pub const ARCH_TENSOR: &str = "__arch__";

/// Named tensors in file order.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = t.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated while reading {what} at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<NamedTensors, String> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic {magic:?}, expected \"E2SR\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("tensor {i}: name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(format!("tensor `{name}`: unsupported ndim {ndim}"));
        }
        let mut shape = [1usize; 4];
        for k in 0..ndim {
            shape[4 - ndim + k] = r.u32("dims")? as usize;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("tensor `{name}`: shape overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or("payload overflow")?, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(shape, data).expect("size checked")));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

/// Checkpoint bytes: the descriptor followed by every weight in layout order.
pub fn encode_weights(weights: &ModelWeights<f32>) -> Vec<u8> {
    let desc = weights.arch().descriptor();
    let mut named = Vec::with_capacity(weights.len() + 1);
    named.push((
        ARCH_TENSOR.to_string(),
        Tensor::from_vec([1, 1, 1, desc.len()], desc).expect("descriptor"),
    ));
    for (name, t) in weights.names().iter().zip(weights.tensors()) {
        named.push((name.clone(), t.clone()));
    }
    encode_tensors(&named)
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights<f32>, String> {
    let mut named = decode_tensors(bytes)?;
    let pos = named
        .iter()
        .position(|(n, _)| n == ARCH_TENSOR)
        .ok_or_else(|| format!("missing `{ARCH_TENSOR}` tensor"))?;
    let (_, desc) = named.remove(pos);
    let arch = ArchConfig::from_descriptor(desc.data()).map_err(|e| e.to_string())?;
    ModelWeights::from_named(arch, named).map_err(|e| e.to_string())
}

pub fn save_weights(path: &Path, weights: &ModelWeights<f32>) -> Result<()> {
    write_bytes(path, &encode_weights(weights))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights<f32>> {
    let bytes = fs::read(path).at(path)?;
    decode_weights(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.into(),
        reason,
    })
}

/// Rejects weights whose architecture differs from `expected`.
pub fn check_arch(expected: &ArchConfig, weights: &ModelWeights<f32>) -> Result<()> {
    if weights.arch() != expected {
        return Err(Error::ArchMismatch {
            expected: Box::new(*expected),
            got: Box::new(*weights.arch()),
        });
    }
    Ok(())
}
