//! Image preprocessing: decode, tile planning, bilinear resampling, tiling
//! and normalization.

mod decode;
mod normalize;
mod plan;
mod preprocess;
mod resize;

pub use decode::{decode_image, encode_jpeg, encode_png, sniff_format, ImageFormat};
pub use normalize::{normalize, normalize_raw, normalize_tiles};
pub use plan::select_tile_plan;
pub use preprocess::{preprocess, Preprocessed, StageTiming};
pub use resize::{resize_bilinear, tile_image, tile_set};

use bytemuck::cast_slice;
use half::bf16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recipe::{Recipe, RecipeSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImgError {
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("encode error: {0}")]
    Encode(String),
    #[error("invalid buffer: {0}")]
    InvalidBuffer(String),
    #[error("invalid preprocess config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    Uint8,
    Float32,
    /// bfloat16: float32 exponent range, 8-bit significand.
    Bfloat16,
}

impl ElemType {
    pub fn size_bytes(self) -> usize {
        match self {
            ElemType::Uint8 => 1,
            ElemType::Bfloat16 => 2,
            ElemType::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PixelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    Bf16(Vec<bf16>),
}

/// Borrowed view of a [`PixelData`] range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelSlice<'a> {
    U8(&'a [u8]),
    F32(&'a [f32]),
    Bf16(&'a [bf16]),
}

impl PixelData {
    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elem(&self) -> ElemType {
        self.as_slice().elem()
    }

    pub fn as_slice(&self) -> PixelSlice<'_> {
        match self {
            PixelData::U8(v) => PixelSlice::U8(v),
            PixelData::F32(v) => PixelSlice::F32(v),
            PixelData::Bf16(v) => PixelSlice::Bf16(v),
        }
    }
}

impl<'a> PixelSlice<'a> {
    pub fn len(&self) -> usize {
        match self {
            PixelSlice::U8(v) => v.len(),
            PixelSlice::F32(v) => v.len(),
            PixelSlice::Bf16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elem(&self) -> ElemType {
        match self {
            PixelSlice::U8(_) => ElemType::Uint8,
            PixelSlice::F32(_) => ElemType::Float32,
            PixelSlice::Bf16(_) => ElemType::Bfloat16,
        }
    }

    pub fn range(&self, start: usize, end: usize) -> PixelSlice<'a> {
        match *self {
            PixelSlice::U8(v) => PixelSlice::U8(&v[start..end]),
            PixelSlice::F32(v) => PixelSlice::F32(&v[start..end]),
            PixelSlice::Bf16(v) => PixelSlice::Bf16(&v[start..end]),
        }
    }

    /// Native-endian bytes, as they would be copied to a device.
    pub fn as_bytes(&self) -> &'a [u8] {
        match *self {
            PixelSlice::U8(v) => v,
            PixelSlice::F32(v) => cast_slice(v),
            PixelSlice::Bf16(v) => cast_slice(v),
        }
    }

    pub fn to_owned(&self) -> PixelData {
        match *self {
            PixelSlice::U8(v) => PixelData::U8(v.to_vec()),
            PixelSlice::F32(v) => PixelData::F32(v.to_vec()),
            PixelSlice::Bf16(v) => PixelData::Bf16(v.to_vec()),
        }
    }

    /// Widens every element to f32.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match *self {
            PixelSlice::U8(v) => v.iter().map(|&x| f32::from(x)).collect(),
            PixelSlice::F32(v) => v.to_vec(),
            PixelSlice::Bf16(v) => v.iter().map(|x| x.to_f32()).collect(),
        }
    }
}

/// A decoded raster, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: PixelData,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: PixelData) -> Result<Self, ImgError> {
        if width == 0 || height == 0 {
            return Err(ImgError::InvalidBuffer(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(ImgError::InvalidBuffer(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImgError::InvalidBuffer(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_u8(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, ImgError> {
        Self::new(width, height, channels, PixelData::U8(data))
    }

    /// Solid-color RGB image.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::from_u8(width, height, 3, data).expect("valid dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn elem(&self) -> ElemType {
        self.data.elem()
    }

    pub fn data(&self) -> &PixelData {
        &self.data
    }

    pub fn into_data(self) -> PixelData {
        self.data
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            PixelData::U8(v) => Some(v),
            _ => None,
        }
    }

    /// `[height, width, channels]`.
    pub fn shape(&self) -> Vec<usize> {
        vec![self.height as usize, self.width as usize, self.channels as usize]
    }

    pub(crate) fn require_u8(&self) -> Result<&[u8], ImgError> {
        self.as_u8().ok_or_else(|| {
            ImgError::InvalidBuffer(format!("expected uint8 pixels, got {:?}", self.elem()))
        })
    }
}

/// The chosen tiling grid for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TilePlan {
    pub rows: u32,
    pub cols: u32,
    pub tile_edge: u32,
    pub include_thumbnail: bool,
    pub resized_width: u32,
    pub resized_height: u32,
}

impl TilePlan {
    pub fn new(rows: u32, cols: u32, tile_edge: u32) -> Self {
        Self {
            rows,
            cols,
            tile_edge,
            include_thumbnail: rows * cols > 1,
            resized_width: cols * tile_edge,
            resized_height: rows * tile_edge,
        }
    }

    pub fn grid_tiles(&self) -> u32 {
        self.rows * self.cols
    }

    /// Encoder inputs: grid tiles plus the thumbnail when present.
    pub fn image_count(&self) -> u32 {
        self.grid_tiles() + u32::from(self.include_thumbnail)
    }
}

/// Tiles produced for one image, either in one allocation or one per tile.
#[derive(Debug, Clone, PartialEq)]
pub enum TileSet {
    /// `count` square tiles stacked vertically in a single buffer.
    Packed { edge: u32, count: usize, buffer: ImageBuffer },
    Split(Vec<ImageBuffer>),
}

impl TileSet {
    pub fn len(&self) -> usize {
        match self {
            TileSet::Packed { count, .. } => *count,
            TileSet::Split(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_contiguous(&self) -> bool {
        matches!(self, TileSet::Packed { .. })
    }

    pub fn edge(&self) -> u32 {
        match self {
            TileSet::Packed { edge, .. } => *edge,
            TileSet::Split(v) => v.first().map_or(0, |t| t.width()),
        }
    }

    pub fn channels(&self) -> u8 {
        match self {
            TileSet::Packed { buffer, .. } => buffer.channels(),
            TileSet::Split(v) => v.first().map_or(3, |t| t.channels()),
        }
    }

    pub fn elem(&self) -> ElemType {
        match self {
            TileSet::Packed { buffer, .. } => buffer.elem(),
            TileSet::Split(v) => v.first().map_or(ElemType::Uint8, |t| t.elem()),
        }
    }

    pub fn tile_elems(&self) -> usize {
        let e = self.edge() as usize;
        e * e * self.channels() as usize
    }

    pub fn tile(&self, i: usize) -> PixelSlice<'_> {
        match self {
            TileSet::Packed { buffer, .. } => {
                let n = self.tile_elems();
                buffer.data().as_slice().range(i * n, (i + 1) * n)
            }
            TileSet::Split(v) => v[i].data().as_slice(),
        }
    }

    /// The whole set as one slice; only available when packed.
    pub fn contiguous(&self) -> Option<PixelSlice<'_>> {
        match self {
            TileSet::Packed { buffer, .. } => Some(buffer.data().as_slice()),
            TileSet::Split(_) => None,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.tile_elems() * self.elem().size_bytes()
    }

    /// Owned per-tile copies in tile order.
    pub fn to_images(&self) -> Vec<ImageBuffer> {
        match self {
            TileSet::Split(v) => v.clone(),
            TileSet::Packed { edge, count, buffer } => (0..*count)
                .map(|i| {
                    ImageBuffer::new(*edge, *edge, buffer.channels(), self.tile(i).to_owned())
                        .expect("tile view has tile geometry")
                })
                .collect(),
        }
    }

    /// All tile elements widened to f32, in tile order.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        (0..self.len()).flat_map(|i| self.tile(i).to_f32_vec()).collect()
    }

    /// `[count, edge, edge, channels]`.
    pub fn shape(&self) -> Vec<usize> {
        let e = self.edge() as usize;
        vec![self.len(), e, e, self.channels() as usize]
    }
}

/// Preprocessing parameters and the image-side recipe toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub tile_edge: u32,
    pub max_tiles: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// ①
    pub fused_transform: bool,
    /// ②
    pub contiguous_tensor_path: bool,
    /// ⑤
    pub decode_once: bool,
    /// ⑥: bfloat16 output instead of float32.
    pub reduced_precision_normalize: bool,
    /// ⑨
    pub simd_decode: bool,
    /// ⑩
    pub skip_pixel_mask: bool,
    /// ⑪
    pub avoid_per_item_split: bool,
    /// ③/⑧: emit uint8 tiles and normalize after the transfer boundary.
    pub defer_normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            tile_edge: 448,
            max_tiles: 12,
            mean: [0.5; 3],
            std: [0.5; 3],
            fused_transform: false,
            contiguous_tensor_path: false,
            decode_once: false,
            reduced_precision_normalize: false,
            simd_decode: false,
            skip_pixel_mask: false,
            avoid_per_item_split: false,
            defer_normalize: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), ImgError> {
        if self.tile_edge == 0 {
            return Err(ImgError::Config("tile_edge must be positive".into()));
        }
        if self.max_tiles == 0 {
            return Err(ImgError::Config("max_tiles must be at least 1".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(ImgError::Config(format!("std must be strictly positive, got {:?}", self.std)));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(ImgError::Config(format!("mean must be finite, got {:?}", self.mean)));
        }
        Ok(())
    }

    pub fn normalize_elem(&self) -> ElemType {
        if self.reduced_precision_normalize {
            ElemType::Bfloat16
        } else {
            ElemType::Float32
        }
    }

    /// Copy of `self` with every toggle set from `recipes`.
    pub fn with_recipes(&self, recipes: RecipeSet) -> Self {
        Self {
            fused_transform: recipes.contains(Recipe::FusedTransform),
            contiguous_tensor_path: recipes.contains(Recipe::ContiguousTensorPath),
            decode_once: recipes.contains(Recipe::DecodeOnce),
            reduced_precision_normalize: recipes.contains(Recipe::ReducedPrecisionNormalize),
            simd_decode: recipes.contains(Recipe::SimdDecode),
            skip_pixel_mask: recipes.contains(Recipe::SkipPixelMask),
            avoid_per_item_split: recipes.contains(Recipe::AvoidPerItemSplit),
            defer_normalize: recipes.contains(Recipe::DeviceNormalize)
                || recipes.contains(Recipe::Uint8Transfer),
            ..self.clone()
        }
    }
}
