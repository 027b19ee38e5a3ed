//! Bounding-box serialization for language-model outputs: `K × K` location
//! tokens and plain-text integer coordinates, plus the dense-captioning
//! evaluator used to compare them.

mod densecap;

pub use densecap::{
    average_precision, caption_similarity, densecap_map, load_jsonl, parse_jsonl, DenseCapThresholds, GroundTruth,
    ImageRecord, Prediction, RegionCaption,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BoxError {
    #[error("coordinate {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: need 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("parse error at position {position}: {reason}")]
    Parse { position: usize, reason: String },
    #[error("location token id {id} outside [{first}, {first} + {bins})")]
    TokenRange { id: u32, first: u32, bins: u32 },
    #[error("invalid location grid: {0}")]
    Grid(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

/// A box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBoxN {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBoxN {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if [x1, y1, x2, y2].into_iter().all(in_unit) && x1 <= x2 && y1 <= y2 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(BoxError::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl TryFrom<[f64; 4]> for BBoxN {
    type Error = BoxError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBoxN::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBoxN> for [f64; 4] {
    fn from(b: BBoxN) -> Self {
        b.coords()
    }
}

/// `min(⌊x·K⌋, K − 1)`.
pub fn quantize_coord(x: f64, bins: u32) -> Result<u32, BoxError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(BoxError::Domain(x));
    }
    Ok(((x * f64::from(bins)).floor() as u32).min(bins - 1))
}

/// Center of bin `i`: `(i + 0.5) / K`.
pub fn dequantize_coord(bin: u32, bins: u32) -> f64 {
    (f64::from(bin) + 0.5) / f64::from(bins)
}

/// Location-token grid: `bins` tokens per axis with consecutive vocab ids
/// starting at `first_id` (`<loc_0>` … `<loc_{K-1}>`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationGridConfig {
    pub bins: u32,
    pub first_id: u32,
}

impl LocationGridConfig {
    pub fn new(bins: u32, first_id: u32) -> Result<Self, BoxError> {
        if bins < 2 {
            return Err(BoxError::Grid(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Self { bins, first_id })
    }

    /// Reads the `<loc_i>` range from a vocab; the ids must be consecutive.
    pub fn from_vocab(vocab: &Vocab) -> Result<Self, BoxError> {
        let first_id = vocab.id("<loc_0>").ok_or_else(|| BoxError::Grid("vocab has no <loc_0>".into()))?;
        let mut bins = 0u32;
        while vocab.id(&format!("<loc_{bins}>")) == Some(first_id + bins) {
            bins += 1;
        }
        Self::new(bins, first_id)
    }

    fn id(&self, bin: u32) -> u32 {
        self.first_id + bin
    }

    fn bin(&self, id: u32) -> Result<u32, BoxError> {
        id.checked_sub(self.first_id)
            .filter(|&b| b < self.bins)
            .ok_or(BoxError::TokenRange { id, first: self.first_id, bins: self.bins })
    }
}

/// Four location ids: row(y1), col(x1), row(y2), col(x2).
pub fn encode_box_loc(b: &BBoxN, cfg: &LocationGridConfig) -> Result<[u32; 4], BoxError> {
    let k = cfg.bins;
    Ok([
        cfg.id(quantize_coord(b.y1, k)?),
        cfg.id(quantize_coord(b.x1, k)?),
        cfg.id(quantize_coord(b.y2, k)?),
        cfg.id(quantize_coord(b.x2, k)?),
    ])
}

/// Inverse of [`encode_box_loc`], returning bin centers.
pub fn decode_box_loc(ids: &[u32; 4], cfg: &LocationGridConfig) -> Result<BBoxN, BoxError> {
    let k = cfg.bins;
    let [r1, c1, r2, c2] = [cfg.bin(ids[0])?, cfg.bin(ids[1])?, cfg.bin(ids[2])?, cfg.bin(ids[3])?];
    BBoxN::new(dequantize_coord(c1, k), dequantize_coord(r1, k), dequantize_coord(c2, k), dequantize_coord(r2, k))
}

/// `<loc_a><loc_b><loc_c><loc_d>`.
pub fn loc_ids_to_text(ids: &[u32; 4], cfg: &LocationGridConfig) -> Result<String, BoxError> {
    let mut s = String::new();
    for &id in ids {
        let _ = write!(s, "<loc_{}>", cfg.bin(id)?);
    }
    Ok(s)
}

pub fn parse_loc_text(text: &str, cfg: &LocationGridConfig) -> Result<[u32; 4], BoxError> {
    let mut out = [0u32; 4];
    let mut pos = 0;
    let bytes = text.as_bytes();
    let skip_ws = |pos: &mut usize| {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
    };
    for slot in out.iter_mut() {
        skip_ws(&mut pos);
        if !text[pos..].starts_with("<loc_") {
            return Err(BoxError::Parse { position: pos, reason: "expected `<loc_`".into() });
        }
        pos += 5;
        let digits_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let bin: u32 = text[digits_start..pos]
            .parse()
            .map_err(|_| BoxError::Parse { position: digits_start, reason: "expected bin index".into() })?;
        if bytes.get(pos) != Some(&b'>') {
            return Err(BoxError::Parse { position: pos, reason: "expected `>`".into() });
        }
        pos += 1;
        if bin >= cfg.bins {
            return Err(BoxError::Parse { position: digits_start, reason: format!("bin {bin} >= {}", cfg.bins) });
        }
        *slot = cfg.id(bin);
    }
    skip_ws(&mut pos);
    if pos != text.len() {
        return Err(BoxError::Parse { position: pos, reason: "trailing input".into() });
    }
    Ok(out)
}

/// `[x1, y1, x2, y2]` with each coordinate rounded to an integer in `[0, scale]`.
pub fn encode_box_text(b: &BBoxN, scale: u32) -> String {
    let s = f64::from(scale);
    let q = |v: f64| (v * s).round() as u64;
    format!("[{}, {}, {}, {}]", q(b.x1), q(b.y1), q(b.x2), q(b.y2))
}

pub fn parse_box_text(text: &str, scale: u32) -> Result<BBoxN, BoxError> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    let err = |position: usize, reason: &str| BoxError::Parse { position, reason: reason.to_owned() };
    let skip_ws = |pos: &mut usize| {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
    };
    let expect = |pos: &mut usize, c: u8| -> Result<(), BoxError> {
        skip_ws(pos);
        if bytes.get(*pos) == Some(&c) {
            *pos += 1;
            Ok(())
        } else {
            Err(err(*pos, &format!("expected `{}`", c as char)))
        }
    };
    expect(&mut pos, b'[')?;
    let mut vals = [0f64; 4];
    for (i, v) in vals.iter_mut().enumerate() {
        if i > 0 {
            expect(&mut pos, b',')?;
        }
        skip_ws(&mut pos);
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let n: u64 = text[start..pos].parse().map_err(|_| err(start, "expected non-negative integer"))?;
        if n > u64::from(scale) {
            return Err(err(start, &format!("coordinate {n} exceeds scale {scale}")));
        }
        *v = n as f64 / f64::from(scale);
    }
    expect(&mut pos, b']')?;
    skip_ws(&mut pos);
    if pos != bytes.len() {
        return Err(err(pos, "trailing input"));
    }
    BBoxN::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| err(0, &e.to_string()))
}

pub fn iou(a: &BBoxN, b: &BBoxN) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        // Two degenerate boxes: identical points/lines overlap fully.
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}
