//! Binary parameter files.
//!
//! Layout (little endian): magic `SPLATDNZ`, `u32` version, `u32` array
//! count, then per array `u32` name length, UTF-8 name, `u32` rank, `u32`
//! dims, and the `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPLATDNZ";
pub const VERSION: u32 = 1;

/// One named array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedArray>, String> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "array name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(format!("{name}: rank {rank} is implausible"));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or("array too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    Ok(arrays)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode(store);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_arrays(path: &Path) -> Result<Vec<NamedArray>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Copies stored arrays into `store`; names and shapes must match exactly.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, arrays: &[NamedArray], path: &Path) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::format(
            path,
            format!("{} arrays stored, model has {}", arrays.len(), store.len()),
        ));
    }
    for (p, a) in store.iter_mut().zip(arrays) {
        if p.name != a.name || p.value.shape().as_slice() != a.shape.as_slice() {
            return Err(Error::format(
                path,
                format!("expected {} {:?}, found {} {:?}", p.name, p.value.shape(), a.name, a.shape),
            ));
        }
        p.value = Tensor::from_vec(p.value.shape(), a.data.iter().map(|&v| T::of(v as f64)).collect())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_vec([2, 1, 1, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -1e7]).unwrap());
        s.add("a.bias", Tensor::from_vec([2, 1, 1, 1], vec![0.25, -0.5]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&s, &path).unwrap();
        let arrays = read_arrays(&path).unwrap();
        let mut t = sample();
        t.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 9.0));
        load_into(&mut t, &arrays, &path).unwrap();
        for (a, b) in s.iter().zip(t.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 2;
        assert!(decode(&bad).unwrap_err().contains("version"));
    }
}
