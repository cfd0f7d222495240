//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSNC" | u32 version (1) | u32 count
//! per parameter: u16 name_len | name (UTF-8) | u8 rank | rank × u32 dims | f32 data, row-major
//! ```
//!
//! Values are down-cast to `f32` on write and promoted back to `f64` on read.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{FsanError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSNC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| FsanError::Input(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn err(&self, reason: String) -> FsanError {
        FsanError::Parse {
            path: self.path.to_path_buf(),
            line: None,
            offset: Some(self.pos as u64),
            reason,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: needed {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected FSNC".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| r.err(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.err(e.to_string()))?;
        store.add(name, t);
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes).map_err(|e| FsanError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| FsanError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[2, 2], vec![1.0, -0.5, 0.25, 3.0]).unwrap());
        s.add("b", Tensor::vector(vec![0.1]));
        s
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode_checkpoint(&store()).unwrap();
        assert_eq!(&bytes[0..4], b"FSNC");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        // "w": name len, name, rank 2, dims 2,2, then 4 floats
        assert_eq!(&bytes[12..15], &[1, 0, b'w']);
        assert_eq!(bytes[15], 2);
        assert_eq!(&bytes[16..24], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + (3 + 1 + 8 + 16) + (3 + 1 + 4 + 4));
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let bytes = encode_checkpoint(&store()).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 2], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
        let err = decode_checkpoint(b"NOPE\x01\0\0\0\0\0\0\0", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
