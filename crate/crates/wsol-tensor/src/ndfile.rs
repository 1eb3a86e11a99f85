//! Dense-array file format used for checkpoints and intermediate maps.
//!
//! Layout: one ASCII header line, then the raw payload.
//!
//! ```text
//! v1 <dtype> <ndims> <dim0> <dim1> ...\n
//! <row-major little-endian elements>
//! ```
//!
//! `dtype` is `f32` or `f64`. A scalar is written with `ndims = 0`. The
//! payload length must match the product of the dimensions exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{Element, Tensor};

/// Extension conventionally used for these files.
pub const EXTENSION: &str = "nda";

pub fn write<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = format!("v1 {} {}", T::DTYPE, t.ndim());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;
    let mut payload = Vec::with_capacity(t.numel() * T::BYTE_WIDTH);
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut reader)?;
    let mut fields = header.split_ascii_whitespace();
    let version = fields.next().unwrap_or("");
    if version != "v1" {
        return Err(TensorError::FileFormat(format!(
            "unsupported version {version:?} in {}",
            path.display()
        )));
    }
    let dtype = fields
        .next()
        .ok_or_else(|| TensorError::FileFormat("missing dtype".into()))?
        .to_string();
    if dtype != T::DTYPE {
        return Err(TensorError::DtypeMismatch {
            found: dtype,
            requested: T::DTYPE,
        });
    }
    let ndims: usize = parse_field(fields.next(), "ndims")?;
    let mut shape = Vec::with_capacity(ndims);
    for i in 0..ndims {
        shape.push(parse_field(fields.next(), &format!("dim {i}"))?);
    }
    if fields.next().is_some() {
        return Err(TensorError::FileFormat(format!(
            "trailing fields in header of {}",
            path.display()
        )));
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * T::BYTE_WIDTH];
    reader.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(TensorError::FileFormat(format!(
            "payload longer than header promises in {}",
            path.display()
        )));
    }
    let data: Vec<T> = payload
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::read_le)
        .collect();
    Tensor::new(shape, data)
}

fn read_header_line<R: Read>(reader: &mut R) -> Result<String> {
    // Read byte-by-byte so the payload's first byte is not swallowed.
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            return Err(TensorError::FileFormat("missing header newline".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 4096 {
            return Err(TensorError::FileFormat("header too long".into()));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| TensorError::FileFormat("header is not UTF-8".into()))
}

fn parse_field(field: Option<&str>, what: &str) -> Result<usize> {
    field
        .ok_or_else(|| TensorError::FileFormat(format!("missing {what}")))?
        .parse()
        .map_err(|_| TensorError::FileFormat(format!("bad {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.nda");
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-7, 42.0]).unwrap();
        write(&path, &t).unwrap();
        let back = read::<f32>(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn roundtrip_scalar_f64() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.nda");
        let t = Tensor::<f64>::scalar(std::f64::consts::PI);
        write(&path, &t).unwrap();
        let back = read::<f64>(&path).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.nda");
        let t = Tensor::<f32>::zeros(&[4]);
        write(&path, &t).unwrap();
        match read::<f64>(&path) {
            Err(TensorError::DtypeMismatch { found, requested }) => {
                assert_eq!(found, "f32");
                assert_eq!(requested, "f64");
            }
            other => panic!("expected dtype mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.nda");
        let t = Tensor::<f32>::zeros(&[8]);
        write(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read::<f32>(&path).is_err());
    }
}
