//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! mope-checkpoint 1\n
//! precision <32|64>\n
//! fusion-config <n>\n   followed by n bytes of TOML
//! meta <m>\n            followed by m bytes of free text (may be 0)
//! tensors <count>\n
//! ```
//!
//! then `count` binary entries, all integers little-endian:
//! `u32` name length, name bytes, `u8` frozen flag, `u32` rank,
//! `u64` per dimension, raw little-endian floats of the stated precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel};
use crate::tensor::{Float, Precision, Tensor};

pub const MAGIC: &str = "mope-checkpoint";
pub const VERSION: u32 = 1;

/// What a checkpoint holds besides the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub precision: Precision,
    pub fusion: FusionConfig,
    pub meta: String,
}

pub fn to_bytes<T: Float>(model: &FusionModel<T>, meta: &str) -> Result<Vec<u8>> {
    let fusion = toml::to_string(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(format!("{MAGIC} {VERSION}\nprecision {}\n", T::PRECISION.bits()).as_bytes());
    out.extend_from_slice(format!("fusion-config {}\n", fusion.len()).as_bytes());
    out.extend_from_slice(fusion.as_bytes());
    out.extend_from_slice(format!("meta {}\n", meta.len()).as_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(format!("tensors {}\n", model.store().len()).as_bytes());
    for (_, p) in model.store().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.frozen as u8);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &dim in p.value.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<T: Float>(model: &FusionModel<T>, meta: &str, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let n = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..n]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        self.pos += n + 1;
        Ok(line)
    }

    fn field(&mut self, key: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("expected `{key} <int>`, found `{line}`")))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("text section is not UTF-8".into()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

type Entries = Vec<(String, Vec<usize>, Vec<f64>, bool)>;

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, Entries)> {
    let mut r = Reader { bytes, pos: 0 };
    let first = r.line()?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::Checkpoint("not a mope checkpoint".into()))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let bits = r.field("precision")?;
    let precision = Precision::from_bits(bits as u32)
        .ok_or_else(|| Error::Checkpoint(format!("unsupported precision {bits}")))?;
    let n = r.field("fusion-config")?;
    let fusion: FusionConfig = toml::from_str(r.text(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.field("meta")?;
    let meta = r.text(n)?.to_string();
    let count = r.field("tensors")?;
    let width = precision.bytes();
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.text(len)?.to_string();
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen flag {b} for {name}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(width).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
        let values = raw
            .chunks(width)
            .map(|c| match precision {
                Precision::F32 => f32::read_le(c) as f64,
                Precision::F64 => f64::read_le(c),
            })
            .collect();
        entries.push((name, shape, values, frozen));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok((CheckpointHeader { precision, fusion, meta }, entries))
}

/// Header only, without building a model.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map(|(h, _)| h)
}

/// Rebuilds the model and restores every tensor. Values are converted to
/// `T`; loading at the stored precision is bit-exact.
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<(FusionModel<T>, CheckpointHeader)> {
    let (header, entries) = parse(bytes)?;
    let mut model = FusionModel::<T>::new(&header.fusion).map_err(|e| match e {
        Error::Config(m) => Error::Checkpoint(format!("stored config is invalid: {m}")),
        other => other,
    })?;
    let values = entries
        .into_iter()
        .map(|(name, shape, values, frozen)| {
            let t = Tensor::from_f64(&shape, &values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok((name, t, frozen))
        })
        .collect::<Result<Vec<_>>>()?;
    model.load_values(values)?;
    Ok((model, header))
}

pub fn load<T: Float>(path: &Path) -> Result<(FusionModel<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_foreign_and_future_files() {
        assert!(matches!(parse(b"hello\n"), Err(Error::Checkpoint(_))));
        let err = parse(b"mope-checkpoint 7\n").unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
        assert!(matches!(parse(b"mope-checkpoint 1\nprecision 16\n"), Err(Error::Checkpoint(_))));
    }
}
