//! Space-to-depth reduction of encoder patch grids.

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::imgproc::{PixelData, PixelSlice, TilePlan};
use crate::tensor_io;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("reduction factor must be at least 1")]
    ZeroFactor,
    #[error("factor {r} does not divide grid {h}x{w}")]
    Indivisible { h: usize, w: usize, r: usize },
    #[error("patch edge {patch} does not divide tile edge {tile}")]
    Patch { tile: u32, patch: u32 },
    #[error("grid data holds {len} values, expected {h}x{w}x{d}")]
    DataLength { len: usize, h: usize, w: usize, d: usize },
}

/// `h × w` patches of `d` features, row-major with features innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self, ShapeError> {
        if data.len() != h * w * d {
            return Err(ShapeError::DataLength { len: data.len(), h, w, d });
        }
        Ok(Self { h, w, d, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let at = (i * self.w + j) * self.d;
        &self.data[at..at + self.d]
    }

    pub fn write_tensor(&self, stem: &Path) -> io::Result<()> {
        tensor_io::write_tensor(stem, PixelSlice::F32(&self.data), &[self.h, self.w, self.d])
    }

    pub fn read_tensor(stem: &Path) -> io::Result<Self> {
        let (side, data) = tensor_io::read_tensor(stem)?;
        let invalid = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let PixelData::F32(data) = data else {
            return Err(invalid(format!("expected float32 patch grid, got {:?}", side.dtype)));
        };
        let &[h, w, d] = side.shape.as_slice() else {
            return Err(invalid(format!("expected a rank-3 shape, got {:?}", side.shape)));
        };
        Self::new(h, w, d, data).map_err(|e| invalid(e.to_string()))
    }
}

/// Folds each `r × r` block of patches into one token of `d·r²` features.
/// Within a block, patch `(a, b)` lands at channel block `a·r + b`.
pub fn pixel_unshuffle(g: &PatchGrid, r: usize) -> Result<PatchGrid, ShapeError> {
    if r == 0 {
        return Err(ShapeError::ZeroFactor);
    }
    if g.h % r != 0 || g.w % r != 0 {
        return Err(ShapeError::Indivisible { h: g.h, w: g.w, r });
    }
    let (oh, ow) = (g.h / r, g.w / r);
    let mut data = Vec::with_capacity(g.data.len());
    for i in 0..oh {
        for j in 0..ow {
            for a in 0..r {
                let row = (i * r + a) * g.w + j * r;
                data.extend_from_slice(&g.data[row * g.d..(row + r) * g.d]);
            }
        }
    }
    Ok(PatchGrid { h: oh, w: ow, d: g.d * r * r, data })
}

/// Tokens handed to the language model for one image under `plan`.
pub fn visual_token_count(plan: &TilePlan, patch_edge: u32, r: u32) -> Result<usize, ShapeError> {
    let tile = plan.tile_edge;
    if patch_edge == 0 || tile % patch_edge != 0 {
        return Err(ShapeError::Patch { tile, patch: patch_edge });
    }
    let side = (tile / patch_edge) as usize;
    if r == 0 {
        return Err(ShapeError::ZeroFactor);
    }
    if side % r as usize != 0 {
        return Err(ShapeError::Indivisible { h: side, w: side, r: r as usize });
    }
    let per_tile = (side / r as usize).pow(2);
    Ok(plan.image_count() as usize * per_tile)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, d: usize) -> PatchGrid {
        PatchGrid::new(h, w, d, (0..h * w * d).map(|x| x as f32).collect()).unwrap()
    }

    #[test]
    fn identity_at_r1() {
        let g = ramp(3, 5, 2);
        assert_eq!(pixel_unshuffle(&g, 1).unwrap(), g);
    }

    #[test]
    fn two_by_two_layout() {
        let g = PatchGrid::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pixel_unshuffle(&g, 2).unwrap();
        assert_eq!((out.h(), out.w(), out.d()), (1, 1, 4));
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn encoder_grid_to_64_tokens() {
        let g = PatchGrid::new(32, 32, 768, vec![0.0; 32 * 32 * 768]).unwrap();
        let out = pixel_unshuffle(&g, 4).unwrap();
        assert_eq!((out.h(), out.w(), out.d()), (8, 8, 12288));
        assert_eq!(out.tokens(), 64);
    }

    #[test]
    fn shape_errors() {
        assert_eq!(pixel_unshuffle(&ramp(6, 4, 1), 4), Err(ShapeError::Indivisible { h: 6, w: 4, r: 4 }));
        assert_eq!(pixel_unshuffle(&ramp(2, 2, 1), 0), Err(ShapeError::ZeroFactor));
        assert!(PatchGrid::new(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn token_counts() {
        assert_eq!(visual_token_count(&TilePlan::new(1, 1, 512), 16, 4).unwrap(), 64);
        assert_eq!(visual_token_count(&TilePlan::new(1, 1, 448), 14, 2).unwrap(), 256);
        assert_eq!(visual_token_count(&TilePlan::new(2, 1, 448), 14, 2).unwrap(), 768);
        assert!(visual_token_count(&TilePlan::new(1, 1, 448), 15, 2).is_err());
        assert!(visual_token_count(&TilePlan::new(1, 1, 448), 14, 3).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = pixel_unshuffle(&ramp(4, 4, 3), 2).unwrap();
        g.write_tensor(&dir.path().join("grid")).unwrap();
        assert_eq!(PatchGrid::read_tensor(&dir.path().join("grid")).unwrap(), g);
    }
}
