//! Tensor wire format: one ASCII header line
//! `shape=d0,d1,...;dtype=f32|f64\n` followed by raw little-endian values.
//! Used for checkpoints and dataset records.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{BufRead, Write};

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "shape={};dtype={}", dims.join(","), T::DTYPE)?;
    let mut buf = Vec::with_capacity(t.len() * T::WIDTH);
    for &v in t.data() {
        buf.extend_from_slice(&T::to_le_bytes_vec(v));
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: BufRead>(r: &mut R) -> Result<Tensor<T>> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header.trim_end();
    let (shape_part, dtype_part) = header
        .split_once(';')
        .ok_or_else(|| Error::Parse(format!("bad tensor header: {header:?}")))?;
    let shape_str = shape_part
        .strip_prefix("shape=")
        .ok_or_else(|| Error::Parse(format!("bad tensor header: {header:?}")))?;
    let dtype = dtype_part
        .strip_prefix("dtype=")
        .ok_or_else(|| Error::Parse(format!("bad tensor header: {header:?}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Parse(format!("dtype {dtype} does not match requested {}", T::DTYPE)));
    }
    let shape: Vec<usize> = shape_str
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("bad dim {s}: {e}"))))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * T::WIDTH];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(T::WIDTH).map(T::from_le_slice).collect();
    Tensor::new(&shape, data)
}

/// Peeks the dtype tag of the next record without consuming typed data.
pub fn read_header<R: BufRead>(r: &mut R) -> Result<(Vec<usize>, String)> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header.trim_end();
    let (shape_part, dtype_part) = header
        .split_once(';')
        .ok_or_else(|| Error::Parse(format!("bad tensor header: {header:?}")))?;
    let shape = shape_part
        .strip_prefix("shape=")
        .ok_or_else(|| Error::Parse(format!("bad tensor header: {header:?}")))?
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("bad dim {s}: {e}"))))
        .collect::<Result<Vec<usize>>>()?;
    let dtype = dtype_part
        .strip_prefix("dtype=")
        .ok_or_else(|| Error::Parse(format!("bad tensor header: {header:?}")))?;
    Ok((shape, dtype.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn roundtrip_f32_and_f64() {
        let t32 = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t32).unwrap();
        assert!(buf.starts_with(b"shape=2,3;dtype=f32\n"));
        let back: Tensor<f32> = read_tensor(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back.shape(), t32.shape());
        assert_eq!(back.data(), t32.data());

        let t64 = Tensor::<f64>::from_fn(&[4], |i| (i as f64).sqrt());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t64).unwrap();
        let back: Tensor<f64> = read_tensor(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back.data(), t64.data());
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let t = Tensor::<f32>::ones(&[2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let r: Result<Tensor<f64>> = read_tensor(&mut Cursor::new(&buf));
        assert!(r.is_err());
    }
}
