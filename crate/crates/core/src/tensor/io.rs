//! Binary tensor serialization: magic "TNSR", u32 rank, u64 dims, then the
//! f64 payload, all little-endian. Checkpoints embed tensors in this format.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

/// Reader wrapper that tracks the byte offset for error reporting.
pub struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: at,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset;
        let mut got = [0u8; 4];
        self.read_exact_at(&mut got, "magic")?;
        if &got != magic {
            return Err(Error::Format {
                offset: at,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut CountingReader<R>) -> Result<Tensor> {
    r.expect_magic(TENSOR_MAGIC)?;
    let rank = r.read_u32("tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format {
            offset: r.offset(),
            msg: format!("implausible tensor rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = r.read_u64("tensor dim")? as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: r.offset(),
                msg: "zero tensor dimension".into(),
            });
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.read_f64("tensor payload")?);
    }
    Tensor::from_vec(data, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_exact() {
        let t = Tensor::from_vec(vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.1], &[2, 3])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        let mut r = CountingReader::new(buf.as_slice());
        let back = read_tensor(&mut r).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        let mut r = CountingReader::new(buf.as_slice());
        let err = read_tensor(&mut r).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut r = CountingReader::new(&b"NOPE\x01\x00\x00\x00"[..]);
        assert!(read_tensor(&mut r).is_err());
    }
}
