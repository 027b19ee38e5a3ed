//! Raw tensor dumps: a little-endian `.bin` payload plus a JSON sidecar
//! `{dtype, shape, layout}`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::imgproc::{ElemType, PixelData, PixelSlice};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub dtype: ElemType,
    pub shape: Vec<usize>,
    pub layout: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn encode_le(data: PixelSlice<'_>) -> Vec<u8> {
    match data {
        PixelSlice::U8(v) => v.to_vec(),
        PixelSlice::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        PixelSlice::Bf16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

pub fn decode_le(dtype: ElemType, bytes: &[u8]) -> io::Result<PixelData> {
    if bytes.len() % dtype.size_bytes() != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "payload length is not a multiple of the element size"));
    }
    Ok(match dtype {
        ElemType::Uint8 => PixelData::U8(bytes.to_vec()),
        ElemType::Float32 => PixelData::F32(
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        ElemType::Bfloat16 => PixelData::Bf16(
            bytes.chunks_exact(2).map(|c| bf16::from_le_bytes([c[0], c[1]])).collect(),
        ),
    })
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn write_tensor(stem: &Path, data: PixelSlice<'_>, shape: &[usize]) -> io::Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("shape {shape:?} holds {expected} elements, data has {}", data.len()),
        ));
    }
    let (bin, json) = paths(stem);
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin, encode_le(data))?;
    let sidecar = TensorSidecar { dtype: data.elem(), shape: shape.to_vec(), layout: "row-major".into() };
    fs::write(&json, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_tensor(stem: &Path) -> io::Result<(TensorSidecar, PixelData)> {
    let (bin, json) = paths(stem);
    let sidecar: TensorSidecar = serde_json::from_slice(&fs::read(json)?)?;
    let data = decode_le(sidecar.dtype, &fs::read(bin)?)?;
    if data.len() != sidecar.shape.iter().product::<usize>() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "sidecar shape does not match payload"));
    }
    Ok((sidecar, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("t0");
        let data = PixelData::F32(vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]);
        write_tensor(&stem, data.as_slice(), &[2, 3]).unwrap();
        let (side, back) = read_tensor(&stem).unwrap();
        assert_eq!(side.dtype, ElemType::Float32);
        assert_eq!(side.shape, vec![2, 3]);
        assert_eq!(side.layout, "row-major");
        assert_eq!(back, data);
        let raw = std::fs::read(stem.with_extension("bin")).unwrap();
        assert_eq!(&raw[4..8], &(-2.5f32).to_le_bytes());
        assert!(write_tensor(&stem, data.as_slice(), &[4, 2]).is_err());
    }
}
