//! Binary layout, all integers little-endian:
//!
//! ```text
//! "EXVC" | version u32 | count u32
//! per entry, sorted by name:
//!   name_len u16 | name (UTF-8) | dtype u8 (0 = f32, 1 = f16) | ndim u8
//!   | extents u32 * ndim | payload_len u64 | payload
//! ```

use half::f16;

use crate::error::{Error, Result};
use crate::model::ParamMap;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"EXVC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

pub fn encode(tensors: &ParamMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + tensors.values().map(|t| t.numel() * 4 + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::InvalidInput("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidInput(format!("tensor name longer than 65535 bytes: {name:.40}...")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::InvalidInput(format!("`{name}` has too many axes")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match t.dtype() {
            DType::F32 => 0,
            DType::F16 => 1,
        });
        out.push(ndim);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::InvalidInput(format!("`{name}` extent exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        let payload = t.to_le_bytes();
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(self.err(format!("truncated {what}: expected {n} bytes, {available} available")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamMap> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, not an EXVC checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos = 4;
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = ParamMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let entry_start = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Parse { offset: entry_start as u64 + 2, msg: "name is not UTF-8".into() })?
            .to_string();
        if let Some(p) = &prev {
            if *p >= name {
                return Err(Error::Parse {
                    offset: entry_start as u64,
                    msg: format!("entry `{name}` is out of order or duplicated"),
                });
            }
        }
        let dtype_at = r.pos;
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F16,
            other => {
                r.pos = dtype_at;
                return Err(r.err(format!("unknown dtype code {other}")));
            }
        };
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        let len_at = r.pos;
        let payload_len = r.u64("payload length")?;
        let expected = shape
            .iter()
            .try_fold(dtype.width() as u64, |acc, &e| acc.checked_mul(e as u64))
            .ok_or_else(|| Error::Parse { offset: len_at as u64, msg: "extent product overflows".into() })?;
        if payload_len != expected {
            r.pos = len_at;
            return Err(r.err(format!(
                "`{name}`: payload length {payload_len} disagrees with {shape:?} x {} bytes",
                dtype.width()
            )));
        }
        let payload = r.take(payload_len as usize, "payload")?;
        let tensor = match dtype {
            DType::F32 => {
                let v = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect();
                Tensor::new(v, &shape)?
            }
            DType::F16 => {
                let v = payload.chunks_exact(2).map(|b| f16::from_le_bytes(b.try_into().expect("2"))).collect();
                Tensor::new_f16(v, &shape)?
            }
        };
        prev = Some(name.clone());
        out.insert(name, tensor);
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes after last entry", buf.len() - r.pos)));
    }
    Ok(out)
}
