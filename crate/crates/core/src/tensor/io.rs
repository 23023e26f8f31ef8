//! HMTT tensor dump format.
//!
//! Layout, little-endian throughout: magic `HMTT`, u8 dtype tag (0 = f32,
//! 1 = f64), u32 rank, `rank` u32 extents, then the row-major IEEE-754
//! payload. Roundtrips are byte-exact.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"HMTT";
const MAX_RANK: u32 = 32;

#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => &t.shape,
            AnyTensor::F64(t) => &t.shape,
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 + 1 + 4 + 4 * t.rank() + t.numel() * T::BYTE_WIDTH);
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE_TAG);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in &t.shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in &t.data {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

/// Read one HMTT record from the stream, leaving the cursor just past it.
pub fn read_tensor_any(r: &mut impl Read) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::format(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|e| Error::format(format!("truncated dtype tag: {e}")))?;
    let mut rank_bytes = [0u8; 4];
    r.read_exact(&mut rank_bytes).map_err(|e| Error::format(format!("truncated rank: {e}")))?;
    let rank = u32::from_le_bytes(rank_bytes);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(format!("unreasonable rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut eb = [0u8; 4];
        r.read_exact(&mut eb).map_err(|e| Error::format(format!("truncated extents: {e}")))?;
        let e = u32::from_le_bytes(eb) as usize;
        if e == 0 {
            return Err(Error::format("zero extent".into()));
        }
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::format("extent product overflows".into()))?;
        shape.push(e);
    }
    match tag[0] {
        0 => Ok(AnyTensor::F32(read_payload::<f32>(r, shape, numel)?)),
        1 => Ok(AnyTensor::F64(read_payload::<f64>(r, shape, numel)?)),
        t => Err(Error::format(format!("unknown dtype tag {t}"))),
    }
}

fn read_payload<T: Scalar>(r: &mut impl Read, shape: Vec<usize>, numel: usize) -> Result<Tensor<T>> {
    let mut bytes = vec![0u8; numel * T::BYTE_WIDTH];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(format!("truncated payload: {e}")))?;
    let data: Vec<T> = bytes.chunks_exact(T::BYTE_WIDTH).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(&mut f, t).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = &bytes[..];
    let t = read_tensor_any(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::format(format!(
            "{} trailing bytes after tensor record in {}",
            cursor.len(),
            path.display()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_exact() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0);
        let mut buf1 = Vec::new();
        write_tensor(&mut buf1, &t).unwrap();
        let back = read_tensor_any(&mut &buf1[..]).unwrap().into_f32();
        assert_eq!(back, t.clone().with_requires_grad(false));
        let mut buf2 = Vec::new();
        write_tensor(&mut buf2, &back).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn f64_tag_is_one() {
        let t = Tensor::<f64>::zeros(&[1]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        assert_eq!(buf[4], 1);
        assert!(matches!(read_tensor_any(&mut &buf[..]).unwrap(), AnyTensor::F64(_)));
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x00\x01\x00\x00\x00\x01\x00\x00\x00".to_vec();
        assert!(read_tensor_any(&mut &buf[..]).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::<f32>::zeros(&[4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor_any(&mut &buf[..]).is_err());
    }
}
