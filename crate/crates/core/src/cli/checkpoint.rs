//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SLAO"            4 bytes
//! version           u32 (1)
//! tensor count      u32
//! per tensor:
//!   name length     u16, then UTF-8 name
//!   rows, cols      u64, u64
//!   data            rows × cols f64, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matlib::Matrix;

pub const MAGIC: &[u8; 4] = b"SLAO";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(tensors: &[(String, Matrix)]) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    let payload: usize = tensors.iter().map(|(n, m)| 2 + n.len() + 16 + 8 * m.data().len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, m) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Corruption(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    if bytes.len() < 4 {
        return Err(Error::Corruption(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for k in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Corruption(format!("tensor {k} name is not UTF-8")))?
            .to_string();
        let rows = r.u64("rows")?;
        let cols = r.u64("cols")?;
        let elems = rows
            .checked_mul(cols)
            .and_then(|e| usize::try_from(e).ok())
            .filter(|&e| e.checked_mul(8).is_some_and(|b| b <= bytes.len() - r.pos))
            .ok_or_else(|| Error::Corruption(format!("tensor {name} claims {rows}x{cols}: length mismatch")))?;
        if rows == 0 || cols == 0 {
            return Err(Error::Corruption(format!("tensor {name} has empty shape {rows}x{cols}")));
        }
        let data: Vec<f64> = r
            .take(elems * 8, "data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Matrix::new(rows as usize, cols as usize, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Matrix)]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matlib::gaussian_matrix;

    fn sample() -> Vec<(String, Matrix)> {
        vec![
            ("a".to_string(), gaussian_matrix(3, 5, 1.0, 1)),
            ("béta".to_string(), Matrix::new(1, 2, vec![f64::MIN_POSITIVE, -0.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_bitwise() {
        let t = sample();
        let back = decode_checkpoint(&encode_checkpoint(&t).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, m1), (n2, m2)) in t.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert!(m1.bitwise_eq(m2));
        }
    }

    #[test]
    fn layout_header() {
        let bytes = encode_checkpoint(&[("x".to_string(), Matrix::identity(1))]).unwrap();
        assert_eq!(&bytes[..4], b"SLAO");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..14], &[1, 0]);
        assert_eq!(bytes[14], b'x');
        assert_eq!(bytes.len(), 15 + 16 + 8);
        assert_eq!(&bytes[31..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 3, 6, 11, 13, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corruption(_))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Corruption(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("nope.ckpt")), Err(Error::Io { .. })));
    }
}
