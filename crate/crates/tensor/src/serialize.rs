//! Named tensor records: UTF-8 name (u32 length prefix), rank (u32), extents
//! (u32 each), then the payload as 32-bit floats. Everything little-endian.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::Float;

pub fn write_named<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&len_u32(bytes.len())?.to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&len_u32(d)?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_named<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| TensorError::Format(format!("name is not UTF-8: {e}")))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(TensorError::Format(format!("{name}: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Float).collect();
    Ok((name, Tensor::new(shape, data)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| TensorError::Format(format!("extent {n} exceeds u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_named(&mut buf, "ab", &t).unwrap();
        let mut expected = vec![2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0];
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
        let (name, back) = read_named(&mut buf.as_slice()).unwrap();
        assert_eq!(name, "ab");
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_record_is_an_error() {
        let t = Tensor::ones(&[3, 3]);
        let mut buf = Vec::new();
        write_named(&mut buf, "w", &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_named(&mut buf.as_slice()).is_err());
    }
}
