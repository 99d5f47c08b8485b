//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     b"ADCK"
//! version   u32
//! meta_len  u32, followed by meta_len bytes of JSON (string → string map)
//! count     u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × prod(dims) }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata, e.g. the serialized model config and blank id.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    encode(&mut buf, ckpt)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub(crate) fn encode(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&ckpt.meta)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, t) in ckpt.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Parse(format!("checkpoint truncated while reading {what}")));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    let mut magic = [0u8; 4];
    r.take(4, "magic")?.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a checkpoint: bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: BTreeMap<String, String> = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Parse(format!("checkpoint metadata: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nl = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nl, "name")?)
            .map_err(|_| Error::Parse("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Parse("shape overflow".into()))?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !r.buf.is_empty() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("enc.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 1e-300, f64::MAX, 0.0]).unwrap());
        params.insert("bias", Tensor::scalar(-0.0));
        let mut meta = BTreeMap::new();
        meta.insert("blank_id".into(), "32".into());
        Checkpoint { meta, params }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut buf = Vec::new();
        encode(&mut buf, &sample()).unwrap();
        let back = decode(&buf).unwrap();
        assert_eq!(back.meta, sample().meta);
        for (name, t) in sample().params.iter() {
            let b = back.params.get(name).unwrap();
            assert_eq!(b.shape(), t.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(b), bits(t));
        }
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let mut buf = Vec::new();
        encode(&mut buf, &sample()).unwrap();
        for cut in [0, 3, 7, 20, buf.len() - 1] {
            assert!(matches!(decode(&buf[..cut]), Err(Error::Parse(_))), "cut at {cut}");
        }
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Parse(m)) if m.contains("version")));
    }
}
