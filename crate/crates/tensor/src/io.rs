//! `TNSR v1` blob format: a single ASCII header line
//! `TNSR v1 <dtype> <rank> <dims...>\n` followed by little-endian values.

use std::io::{BufRead, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(TensorError::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: DType) -> Result<()> {
    let mut header = format!("TNSR v1 {} {}", dtype.name(), t.rank());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: BufRead>(mut r: R) -> Result<(Tensor, DType)> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(TensorError::Format("missing header newline".into()));
    }
    let header = std::str::from_utf8(&line[..line.len() - 1])
        .map_err(|_| TensorError::Format("header is not UTF-8".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some("TNSR") || fields.next() != Some("v1") {
        return Err(TensorError::Format(format!("bad magic in header {header:?}")));
    }
    let dtype = DType::parse(fields.next().unwrap_or(""))?;
    let rank: usize = parse_field(fields.next())?;
    let shape = (0..rank)
        .map(|_| parse_field(fields.next()))
        .collect::<Result<Vec<usize>>>()?;
    if fields.next().is_some() {
        return Err(TensorError::Format("trailing header fields".into()));
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut bytes = vec![0u8; n * width];
    r.read_exact(&mut bytes)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }
    let data = match dtype {
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| TensorError::Format(e.to_string()))?;
    Ok((t, dtype))
}

fn parse_field(field: Option<&str>) -> Result<usize> {
    field
        .ok_or_else(|| TensorError::Format("truncated header".into()))?
        .parse()
        .map_err(|_| TensorError::Format("non-integer header field".into()))
}

pub fn save_tensor(path: impl AsRef<std::path::Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<std::path::Path>) -> Result<(Tensor, DType)> {
    let f = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(f))
}
