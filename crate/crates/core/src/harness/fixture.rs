//! Heatmap files: one JSON header line with the shape, then the values as
//! little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Heatmap3D;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

const DTYPE: &str = "f64le";

pub fn heatmap_to_bytes(h: &Heatmap3D) -> Result<Vec<u8>> {
    let header = Header {
        shape: h.tensor().shape().to_vec(),
        dtype: DTYPE.into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for v in h.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn heatmap_from_bytes(bytes: &[u8]) -> Result<Heatmap3D> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Format("heatmap file lacks a header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let body = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if body.len() != n * 8 {
        return Err(Error::Format(format!("header promises {n} values, body holds {} bytes", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Heatmap3D::new(Tensor::new(&header.shape, data)?)
}

pub fn write_heatmap(h: &Heatmap3D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, heatmap_to_bytes(h)?)?;
    Ok(())
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap3D> {
    heatmap_from_bytes(&fs::read(path)?)
}
