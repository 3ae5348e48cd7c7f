//! Weights file.
//!
//! Layout (little-endian): magic `GCVK`, `u32` version (1), `u32` tensor count,
//! then per tensor: `u16` name length, UTF-8 name, `u8` dtype (0 = f32,
//! 1 = f64), `u8` rank, `rank × u32` extents, row-major payload.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"GCVK";
pub const VERSION: u32 = 1;

/// Serializes every parameter of `module` in visiting order.
pub fn to_bytes<T: Element, M: Module<T>>(module: &M) -> Result<Vec<u8>> {
    let params = module.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(params.len())
            .map_err(|_| Error::Format("too many tensors".into()))?
            .to_le_bytes(),
    );
    for p in params {
        let name = p.name().as_bytes();
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", p.name())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.code());
        let shape = p.value().shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Format(format!("{}: rank too large", p.name())))?);
        for &e in shape {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("{}: extent too large", p.name())))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in p.value().data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn export<T: Element, M: Module<T>>(module: &M, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(module)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// One decoded tensor record.
#[derive(Debug, Clone)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "{}: stored as {}, model uses {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let size = T::DTYPE.size_of();
        let data = self.payload.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(&self.shape, data).map_err(|e| Error::Format(format!("{}: {e}", self.name)))
    }
}

/// Decodes a whole file; rejects bad magic, unknown version, truncation,
/// duplicate names and trailing bytes.
pub fn parse(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic (not a weights file)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r.u16(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("{name}: duplicate tensor name")));
        }
        let code = r.u8(&name)?;
        let dtype =
            DType::from_code(code).ok_or_else(|| Error::Format(format!("{name}: unknown dtype code {code}")))?;
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let bytes_len = numel
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let payload = r.take(bytes_len, &name)?.to_vec();
        records.push(Record {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

/// Loads every parameter of `module` from `bytes`. The file must hold exactly
/// the module's tensors with matching dtype and shape; on any error the module
/// is left untouched.
pub fn from_bytes<T: Element, M: Module<T>>(module: &mut M, bytes: &[u8]) -> Result<()> {
    let records = parse(bytes)?;
    let mut staged: HashMap<String, Tensor<T>> = HashMap::with_capacity(records.len());
    for rec in &records {
        staged.insert(rec.name.clone(), rec.to_tensor()?);
    }
    let mut expected = HashSet::new();
    for p in module.params() {
        let name = p.name();
        expected.insert(name.to_owned());
        match staged.get(name) {
            None => return Err(Error::Format(format!("{name}: missing from weights file"))),
            Some(t) if t.shape() != p.shape() => {
                return Err(Error::Format(format!(
                    "{name}: shape {:?} in file, model expects {:?}",
                    t.shape(),
                    p.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = records.iter().find(|r| !expected.contains(&r.name)) {
        return Err(Error::Format(format!("{}: not a parameter of this model", extra.name)));
    }
    module.visit_mut(&mut |p| {
        let t = staged.remove(p.name()).expect("staged above");
        p.set(t).expect("shape checked above");
    });
    Ok(())
}

pub fn import<T: Element, M: Module<T>>(module: &mut M, path: impl AsRef<Path>) -> Result<()> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    from_bytes(module, &bytes)
}
