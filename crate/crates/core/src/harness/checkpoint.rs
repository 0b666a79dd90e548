//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SMNTCKPT"  u32 version  u64 architecture fingerprint  u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, u64 extents…, f32 values…
//! ```
//!
//! Parameters are stored under their own names; the momentum buffer, when
//! present, follows as entries named `momentum/<parameter>`.

use std::fs;
use std::path::Path;

use crate::arch::Model;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 8] = b"SMNTCKPT";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

fn fail(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes the model's parameters and, if given, the flat momentum buffer.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    momentum: Option<&[T]>,
) -> Result<()> {
    let params: Vec<_> = model.params.iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.fingerprint().to_le_bytes());
    let entries = params.len() * if momentum.is_some() { 2 } else { 1 };
    out.extend_from_slice(&(entries as u32).to_le_bytes());

    let mut write_entry = |name: &str, shape: &[usize], values: &[T]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for p in &params {
        write_entry(&p.name, p.tensor.shape(), p.tensor.data());
    }
    if let Some(m) = momentum {
        if m.len() != model.params.numel() {
            return Err(fail(path, "momentum length differs from parameter count"));
        }
        let mut offset = 0;
        for p in &params {
            let n = p.tensor.numel();
            write_entry(
                &format!("{MOMENTUM_PREFIX}{}", p.name),
                p.tensor.shape(),
                &m[offset..offset + n],
            );
            offset += n;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(fail(self.path, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads a checkpoint into `model`, which must have the same architecture
/// fingerprint. Returns the momentum buffer if one was stored. The model is
/// only modified when the whole file is valid.
pub fn load_checkpoint<T: Scalar>(path: &Path, model: &mut Model<T>) -> Result<Option<Vec<T>>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(fail(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fail(path, format!("version {version}, expected {VERSION}")));
    }
    let fingerprint = r.u64()?;
    if fingerprint != model.fingerprint() {
        return Err(fail(
            path,
            format!(
                "architecture fingerprint {fingerprint:016x} does not match {:016x}",
                model.fingerprint()
            ),
        ));
    }
    let count = r.u32()? as usize;
    let n_params = model.params.len();
    if count != n_params && count != 2 * n_params {
        return Err(fail(path, format!("{count} entries for {n_params} parameters")));
    }
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
        .chain(model.params.iter().map(|p| {
            (
                format!("{MOMENTUM_PREFIX}{}", p.name),
                p.tensor.shape().to_vec(),
            )
        }))
        .take(count)
        .collect();
    let mut values = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?)
            .map_err(|_| fail(path, "entry name is not UTF-8"))?;
        if got != name {
            return Err(fail(path, format!("entry {got:?} where {name:?} was expected")));
        }
        let rank = r.u32()? as usize;
        let mut extents = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            extents.push(r.u64()? as usize);
        }
        if extents != *shape {
            return Err(fail(path, format!("{name} has shape {extents:?}, expected {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        values.push(data);
    }
    if r.pos != bytes.len() {
        return Err(fail(path, "trailing bytes after the last entry"));
    }
    let momentum = (count == 2 * n_params).then(|| values.split_off(n_params).concat());
    for (p, v) in model.params.iter_mut().zip(values) {
        p.tensor.data_mut().copy_from_slice(&v);
    }
    Ok(momentum)
}
