//! External feature-map ingestion: magic `HFMP`, u32 w/h/d (little-endian),
//! then the f32 payload. This is the entry point for spatial feature grids
//! computed outside this system; 10×10×2048 is the documented reference
//! shape.

use std::path::Path;

use hvqa_core::tensor::Tensor;

use crate::{DataError, Result};

pub const MAGIC: [u8; 4] = *b"HFMP";

pub fn feature_map_bytes(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(DataError::Generation(format!(
            "feature map must be [w, h, d], got {shape:?}"
        )));
    }
    let mut out = Vec::with_capacity(16 + map.numel() * 4);
    out.extend_from_slice(&MAGIC);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_feature_map(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, feature_map_bytes(map)?)?;
    Ok(())
}

pub fn feature_map_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 {
        return Err(DataError::format(0, "file shorter than the 16-byte header"));
    }
    if bytes[..4] != MAGIC {
        return Err(DataError::format(0, "bad magic, expected \"HFMP\""));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, d) = (dim(0), dim(1), dim(2));
    let expected = 16 + w * h * d * 4;
    if bytes.len() != expected {
        return Err(DataError::format(
            bytes.len().min(expected),
            format!(
                "payload length mismatch: header {w}×{h}×{d} implies {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![w, h, d], data).map_err(|e| DataError::format(4, e.to_string()))
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    feature_map_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shape_accepted() {
        // keep the payload small but the header at the documented 10×10 grid
        let map = Tensor::zeros(vec![10, 10, 4]);
        let bytes = feature_map_bytes(&map).unwrap();
        let back = feature_map_from_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), &[10, 10, 4]);
    }

    #[test]
    fn round_trip_bit_identical() {
        let data: Vec<f32> = (0..3 * 2 * 5).map(|i| (i as f32).sin()).collect();
        let map = Tensor::new(vec![3, 2, 5], data).unwrap();
        let bytes = feature_map_bytes(&map).unwrap();
        let back = feature_map_from_bytes(&bytes).unwrap();
        assert_eq!(map, back);
        assert_eq!(bytes, feature_map_bytes(&back).unwrap());
    }

    #[test]
    fn payload_mismatch_rejected() {
        let map = Tensor::zeros(vec![2, 2, 2]);
        let mut bytes = feature_map_bytes(&map).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = feature_map_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("length mismatch"));
    }
}
