//! Tensor dump format used by checkpoints and test fixtures.
//!
//! Little-endian layout: rank (u32), one extent per axis (u32 each), dtype
//! tag (u32, 0 = f32), then the raw row-major data.

use std::io::{Read, Write};

use super::Tensor;
use crate::{Error, Result};

const DTYPE_F32: u32 = 0;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Input(format!("tensor rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let dtype = read_u32(r)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Input(format!("unsupported dtype tag {dtype}")));
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0f32; n];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Tensor::new(shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut rng = Rng::new(9);
        let t = Tensor::uniform(&[3, 4, 2], 2.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut &buf[..]).unwrap();
        assert_eq!(t.shape, back.shape);
        for (a, b) in t.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_dtype() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&7u32.to_le_bytes());
        buf.extend_from_slice(&0f32.to_le_bytes());
        assert!(read_tensor(&mut &buf[..]).is_err());
    }
}
