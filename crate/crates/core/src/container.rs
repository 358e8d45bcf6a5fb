//! `MFIT` binary container shared by model, checkpoint, dataset and fit files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "MFIT" | u32 version | u32 array count
//! per array: u32 name length | name bytes (UTF-8) | u8 dtype (1 = f64)
//!            | u32 rank | u64 dims[rank] | f64 payload, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFIT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_indices(&self) -> Result<Vec<usize>> {
        self.data
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 && x < 9.0e15 {
                    Ok(x as usize)
                } else {
                    Err(Error::Format(format!("array `{}` holds non-index value {x}", self.name)))
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub arrays: Vec<Array>,
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}

impl Container {
    pub fn new() -> Self {
        Self { version: VERSION, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(dims.iter().product::<usize>(), data.len(), "dims of `{name}`");
        self.arrays.push(Array { name, dims: dims.to_vec(), data });
    }

    pub fn push_indices(&mut self, name: impl Into<String>, idx: &[usize]) {
        self.push(name, &[idx.len()], idx.iter().map(|&i| i as f64).collect());
    }

    /// Stores a u64 exactly as two 32-bit halves.
    pub fn push_u64(&mut self, name: impl Into<String>, value: u64) {
        self.push(name, &[2], split_u64(value).to_vec());
    }

    /// Stores UTF-8 text one byte per entry.
    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        self.push(name, &[text.len()], text.bytes().map(f64::from).collect());
    }

    pub fn get_text(&self, name: &str) -> Result<String> {
        let a = self.get(name)?;
        let bytes = a
            .data
            .iter()
            .map(|&x| if (0.0..256.0).contains(&x) && x.fract() == 0.0 { Ok(x as u8) } else { Err(()) })
            .collect::<std::result::Result<Vec<u8>, ()>>()
            .map_err(|_| Error::Format(format!("`{name}` is not a text record")))?;
        String::from_utf8(bytes).map_err(|_| Error::Format(format!("`{name}` is not valid UTF-8")))
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let a = self.get(name)?;
        if a.data.len() != 2 {
            return Err(Error::Format(format!("`{name}` is not a u64 record")));
        }
        join_u64(a.data[0], a.data[1])
    }

    /// Fetches an array and checks its dimensions.
    pub fn get_shaped(&self, name: &str, dims: &[usize]) -> Result<&Array> {
        let a = self.get(name)?;
        if a.dims != dims {
            return Err(Error::Format(format!(
                "array `{name}` has dims {:?}, expected {:?}",
                a.dims, dims
            )));
        }
        Ok(a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|a| 32 + a.name.len() + 8 * a.data.len()).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for &d in &a.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = rd.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_owned();
            let dtype = rd.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("unsupported dtype code {dtype} in `{name}`")));
            }
            let rank = rd.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(rd.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("dims overflow in `{name}`")))?;
            let raw = rd.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push(Array { name, dims, data });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { version, arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
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
            None => Err(Error::Format("truncated file".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn split_u64(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

pub fn join_u64(hi: f64, lo: f64) -> Result<u64> {
    let ok = |x: f64| (0.0..4294967296.0).contains(&x) && x.fract() == 0.0;
    if !ok(hi) || !ok(lo) {
        return Err(Error::Format("malformed u64 record".into()));
    }
    Ok(((hi as u64) << 32) | lo as u64)
}
