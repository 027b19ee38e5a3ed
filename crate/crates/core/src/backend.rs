//! Prompt assembly and a deterministic mock inference backend.
//!
//! The mock derives its output from a digest of the prompt ids and the
//! visual features it receives, and reports modeled prefill/decode time
//! from a [`LatencyModel`]. No network is executed.

use std::borrow::Cow;
use std::time::{Duration, Instant};

use half::bf16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imgproc::{normalize_raw, ImgError, PixelData, PreprocessConfig, TilePlan};
use crate::profile::span_scope;
use crate::tokenizer::{ImageSpan, TokenSequence};
use crate::tokenred::{visual_token_count, ShapeError};
use crate::transfer::DType;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("image span {index} holds {found} visual tokens but its tile plan needs {expected}")]
    SpanMismatch { index: usize, found: usize, expected: usize },
    #[error("prompt has {spans} image spans but {plans} tile plans were given")]
    PlanCount { spans: usize, plans: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("deferred normalization failed: {0}")]
    Normalize(#[from] ImgError),
    #[error("visual input of dtype {0:?} is not a pixel tensor")]
    VisualDtype(DType),
    #[error("invalid latency model: {0}")]
    LatencyModel(String),
    #[error("unknown backend {0:?}")]
    Unknown(String),
}

/// Patch size and pixel-unshuffle factor of the vision tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenReduction {
    pub patch_edge: u32,
    pub reduction: u32,
}

impl Default for TokenReduction {
    fn default() -> Self {
        Self { patch_edge: 14, reduction: 2 }
    }
}

impl TokenReduction {
    pub fn tokens_per_tile(&self, tile_edge: u32) -> Result<u32, ShapeError> {
        Ok(visual_token_count(&TilePlan::new(1, 1, tile_edge), self.patch_edge, self.reduction)? as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledSequence {
    pub ids: Vec<u32>,
    pub image_spans: Vec<ImageSpan>,
    pub n_visual: usize,
    pub n_text: usize,
}

/// Checks every image span against its tile plan and returns the
/// sequence the language model consumes.
pub fn assemble(seq: &TokenSequence, plans: &[TilePlan], tr: &TokenReduction) -> Result<AssembledSequence, BackendError> {
    if seq.image_spans.len() != plans.len() {
        return Err(BackendError::PlanCount { spans: seq.image_spans.len(), plans: plans.len() });
    }
    for (index, (span, plan)) in seq.image_spans.iter().zip(plans).enumerate() {
        let expected = visual_token_count(plan, tr.patch_edge, tr.reduction)?;
        if span.len != expected {
            return Err(BackendError::SpanMismatch { index, found: span.len, expected });
        }
    }
    let n_visual = seq.visual_len();
    Ok(AssembledSequence {
        ids: seq.ids.clone(),
        image_spans: seq.image_spans.clone(),
        n_visual,
        n_text: seq.ids.len() - n_visual,
    })
}

/// Synthetic device timings, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub sched_overhead_s: f64,
    pub prefill_per_token_s: f64,
    pub decode_per_token_s: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { sched_overhead_s: 2e-3, prefill_per_token_s: 2e-6, decode_per_token_s: 4e-3 }
    }
}

impl LatencyModel {
    pub const ZERO: LatencyModel = LatencyModel { sched_overhead_s: 0.0, prefill_per_token_s: 0.0, decode_per_token_s: 0.0 };

    pub fn validate(&self) -> Result<(), BackendError> {
        let fields = [self.sched_overhead_s, self.prefill_per_token_s, self.decode_per_token_s];
        if fields.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(BackendError::LatencyModel(format!("all terms must be finite and non-negative, got {self:?}")))
        }
    }

    pub fn prefill(&self, tokens: usize) -> Duration {
        Duration::from_secs_f64(self.sched_overhead_s + self.prefill_per_token_s * tokens as f64)
    }
}

/// A pixel tensor as it sits in device memory.
#[derive(Debug, Clone, Copy)]
pub struct VisualInput<'a> {
    pub dtype: DType,
    pub bytes: &'a [u8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    pub first_token: u32,
    pub modeled: Duration,
    /// Measured time of normalization performed on the device side.
    pub deferred_normalize: Duration,
    state: [u8; 32],
}

impl PrefillOutput {
    pub fn duration(&self) -> Duration {
        self.modeled + self.deferred_normalize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub ids: Vec<u32>,
    pub per_token: Vec<Duration>,
    /// Measured time spent producing the ids.
    pub compute: Duration,
}

impl DecodeOutput {
    pub fn modeled(&self) -> Duration {
        self.per_token.iter().sum()
    }

    pub fn wall(&self) -> Duration {
        self.modeled() + self.compute
    }

    /// Tokens per second over modeled plus measured decode time.
    pub fn throughput(&self) -> f64 {
        let secs = self.wall().as_secs_f64();
        if self.ids.is_empty() || secs == 0.0 {
            0.0
        } else {
            self.ids.len() as f64 / secs
        }
    }
}

/// An inference engine serving one request at a time.
pub trait Backend {
    fn name(&self) -> &str;

    /// Runs the prompt. When `deferred` is set the visual inputs hold raw
    /// pixel values (uint8, or float32 casts of them) that are normalized
    /// here first.
    fn prefill(
        &mut self,
        seq: &AssembledSequence,
        visual: &[VisualInput<'_>],
        deferred: Option<&PreprocessConfig>,
    ) -> Result<PrefillOutput, BackendError>;

    fn decode(&mut self, prefill: &PrefillOutput, n_tokens: usize) -> DecodeOutput;
}

const SAMPLE_STRIDE: usize = 61;

/// Hashes a strided sample of feature values rounded to bfloat16, so that
/// float32 and bfloat16 inputs of the same image agree.
struct FeatureDigest {
    hasher: crc32fast::Hasher,
    index: usize,
}

impl FeatureDigest {
    fn new() -> Self {
        Self { hasher: crc32fast::Hasher::new(), index: 0 }
    }

    fn first_sample(&self, len: usize) -> impl Iterator<Item = usize> {
        let skip = (SAMPLE_STRIDE - self.index % SAMPLE_STRIDE) % SAMPLE_STRIDE;
        (skip..len).step_by(SAMPLE_STRIDE)
    }

    fn push_bits(&mut self, bits: u16) {
        self.hasher.update(&bits.to_le_bytes());
    }

    fn feed_pixels(&mut self, data: &PixelData) {
        let n = data.len();
        let idx: Vec<usize> = self.first_sample(n).collect();
        for i in idx {
            let bits = match data {
                PixelData::F32(v) => bf16::from_f32(v[i]).to_bits(),
                PixelData::Bf16(v) => v[i].to_bits(),
                PixelData::U8(v) => bf16::from_f32(f32::from(v[i])).to_bits(),
            };
            self.push_bits(bits);
        }
        self.index += n;
    }

    fn feed_bytes(&mut self, dtype: DType, bytes: &[u8]) -> Result<(), BackendError> {
        let size = dtype.size_bytes();
        let n = bytes.len() / size;
        let idx: Vec<usize> = self.first_sample(n).collect();
        for i in idx {
            let b = &bytes[i * size..(i + 1) * size];
            let bits = match dtype {
                DType::Float32 => bf16::from_f32(f32::from_ne_bytes([b[0], b[1], b[2], b[3]])).to_bits(),
                DType::Bfloat16 => u16::from_ne_bytes([b[0], b[1]]),
                other => return Err(BackendError::VisualDtype(other)),
            };
            self.push_bits(bits);
        }
        self.index += n;
        Ok(())
    }

    fn finish(self) -> u32 {
        self.hasher.finalize()
    }
}

fn token_from(state: &[u8; 32], vocab_size: u32) -> u32 {
    u32::from_le_bytes([state[0], state[1], state[2], state[3]]) % vocab_size
}

/// Deterministic stand-in for a language model.
#[derive(Debug, Clone)]
pub struct MockBackend {
    latency: LatencyModel,
    vocab_size: u32,
}

impl MockBackend {
    pub fn new(latency: LatencyModel, vocab_size: u32) -> Result<Self, BackendError> {
        latency.validate()?;
        if vocab_size == 0 {
            return Err(BackendError::LatencyModel("vocab size must be positive".into()));
        }
        Ok(Self { latency, vocab_size })
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn prefill(
        &mut self,
        seq: &AssembledSequence,
        visual: &[VisualInput<'_>],
        deferred: Option<&PreprocessConfig>,
    ) -> Result<PrefillOutput, BackendError> {
        let mut digest = FeatureDigest::new();
        let mut deferred_normalize = Duration::ZERO;
        for v in visual {
            match deferred {
                Some(cfg) => {
                    let raw: Cow<'_, [u8]> = match v.dtype {
                        DType::Uint8 => Cow::Borrowed(v.bytes),
                        DType::Float32 => Cow::Owned(
                            v.bytes.chunks_exact(4).map(|b| f32::from_ne_bytes([b[0], b[1], b[2], b[3]]) as u8).collect(),
                        ),
                        other => return Err(BackendError::VisualDtype(other)),
                    };
                    // One tile per pass.
                    let tile = (cfg.tile_edge as usize).pow(2) * 3;
                    for chunk in raw.chunks(tile.max(3)) {
                        let t = Instant::now();
                        let data = {
                            let _g = span_scope("device_normalize");
                            normalize_raw(chunk, 3, cfg)?
                        };
                        deferred_normalize += t.elapsed();
                        digest.feed_pixels(&data);
                    }
                }
                None => digest.feed_bytes(v.dtype, v.bytes)?,
            }
        }
        let mut h = Sha256::new();
        h.update(bytemuck::cast_slice::<u32, u8>(&seq.ids.iter().map(|id| id.to_le()).collect::<Vec<_>>()));
        h.update(digest.finish().to_le_bytes());
        let state: [u8; 32] = h.finalize().into();
        Ok(PrefillOutput {
            first_token: token_from(&state, self.vocab_size),
            modeled: self.latency.prefill(seq.ids.len()),
            deferred_normalize,
            state,
        })
    }

    fn decode(&mut self, prefill: &PrefillOutput, n_tokens: usize) -> DecodeOutput {
        let t = Instant::now();
        let mut ids = Vec::with_capacity(n_tokens);
        let mut state = prefill.state;
        let mut next = prefill.first_token;
        for step in 0..n_tokens {
            ids.push(next);
            let mut h = Sha256::new();
            h.update(state);
            h.update((step as u64).to_le_bytes());
            state = h.finalize().into();
            next = token_from(&state, self.vocab_size);
        }
        let per_token = vec![Duration::from_secs_f64(self.latency.decode_per_token_s); n_tokens];
        DecodeOutput { ids, per_token, compute: t.elapsed() }
    }
}

/// Instantiates a backend by its config name.
pub fn create_backend(name: &str, latency: LatencyModel, vocab_size: u32) -> Result<Box<dyn Backend + Send>, BackendError> {
    match name {
        "mock" => Ok(Box::new(MockBackend::new(latency, vocab_size)?)),
        other => Err(BackendError::Unknown(other.to_owned())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::normalize_raw;
    use crate::tokenizer::{encode_prompt, ChatMessage, ChatPart, Vocab};

    fn request(tiles: u32, tpt: u32) -> TokenSequence {
        let v = Vocab::builtin();
        let msg = ChatMessage::user(vec![ChatPart::Image { tiles }, ChatPart::Text("describe".into())]);
        encode_prompt(&[msg], &v, tpt, true).unwrap()
    }

    #[test]
    fn assembly_counts() {
        let small = TokenReduction { patch_edge: 16, reduction: 4 };
        let a = assemble(&request(1, 64), &[TilePlan::new(1, 1, 512)], &small).unwrap();
        assert_eq!(a.n_visual, 64);
        assert_eq!(a.n_visual + a.n_text, a.ids.len());

        let big = TokenReduction::default();
        let a = assemble(&request(3, 256), &[TilePlan::new(2, 1, 448)], &big).unwrap();
        assert_eq!(a.n_visual, 768);

        let v = Vocab::builtin();
        let text = encode_prompt(&[ChatMessage::user(vec![ChatPart::Text("hi".into())])], &v, 64, true).unwrap();
        let a = assemble(&text, &[], &big).unwrap();
        assert_eq!((a.n_visual, &a.ids), (0, &text.ids));
    }

    #[test]
    fn assembly_mismatch_names_both_values() {
        let err = assemble(&request(1, 64), &[TilePlan::new(1, 1, 448)], &TokenReduction::default()).unwrap_err();
        assert_eq!(err, BackendError::SpanMismatch { index: 0, found: 64, expected: 256 });
        assert!(err.to_string().contains("64") && err.to_string().contains("256"));
        assert!(matches!(
            assemble(&request(1, 64), &[], &TokenReduction::default()),
            Err(BackendError::PlanCount { spans: 1, plans: 0 })
        ));
    }

    #[test]
    fn prefill_model_arithmetic() {
        let seq = AssembledSequence { ids: vec![], image_spans: vec![], n_visual: 0, n_text: 0 };
        let lm = LatencyModel { sched_overhead_s: 5e-3, ..LatencyModel::ZERO };
        let mut b = MockBackend::new(lm, 100).unwrap();
        assert_eq!(b.prefill(&seq, &[], None).unwrap().modeled, Duration::from_millis(5));

        let seq = AssembledSequence { ids: vec![7; 1000], image_spans: vec![], n_visual: 0, n_text: 1000 };
        let lm = LatencyModel { sched_overhead_s: 5e-3, prefill_per_token_s: 1e-6, decode_per_token_s: 0.0 };
        let mut b = MockBackend::new(lm, 100).unwrap();
        let out = b.prefill(&seq, &[], None).unwrap();
        assert!((out.modeled.as_secs_f64() - 6e-3).abs() < 1e-12);
        assert_eq!(b.prefill(&seq, &[], None).unwrap().first_token, out.first_token);
    }

    #[test]
    fn decode_model() {
        let lm = LatencyModel { decode_per_token_s: 2e-3, ..LatencyModel::ZERO };
        let mut b = MockBackend::new(lm, 2462).unwrap();
        let seq = AssembledSequence { ids: vec![1, 2, 3], image_spans: vec![], n_visual: 0, n_text: 3 };
        let p = b.prefill(&seq, &[], None).unwrap();
        assert!(b.decode(&p, 0).ids.is_empty());
        let d = b.decode(&p, 100);
        assert_eq!(d.ids.len(), 100);
        assert_eq!(d.ids[0], p.first_token);
        assert!((100.0 / d.modeled().as_secs_f64() - 500.0).abs() < 1e-9);
        assert_eq!(b.decode(&p, 100).ids, d.ids);
    }

    #[test]
    fn deferred_matches_host_normalization() {
        let raw: Vec<u8> = (0..3 * 4096).map(|i| (i * 7 % 256) as u8).collect();
        let seq = AssembledSequence { ids: vec![9, 9], image_spans: vec![], n_visual: 0, n_text: 2 };
        let mut b = MockBackend::new(LatencyModel::ZERO, 2462).unwrap();
        let f32_cfg = PreprocessConfig::default();
        let bf_cfg = PreprocessConfig { reduced_precision_normalize: true, ..PreprocessConfig::default() };

        let deferred = b.prefill(&seq, &[VisualInput { dtype: DType::Uint8, bytes: &raw }], Some(&f32_cfg)).unwrap();
        for cfg in [&f32_cfg, &bf_cfg] {
            let host = normalize_raw(&raw, 3, cfg).unwrap();
            let bytes = host.as_slice().as_bytes();
            let input = VisualInput { dtype: DType::from(host.as_slice().elem()), bytes };
            assert_eq!(b.prefill(&seq, &[input], None).unwrap().first_token, deferred.first_token);
        }
        let cast: Vec<f32> = raw.iter().map(|&v| f32::from(v)).collect();
        let cast = VisualInput { dtype: DType::Float32, bytes: bytemuck::cast_slice(&cast) };
        assert_eq!(b.prefill(&seq, &[cast], Some(&f32_cfg)).unwrap().first_token, deferred.first_token);
        let split = [
            VisualInput { dtype: DType::Uint8, bytes: &raw[..3000] },
            VisualInput { dtype: DType::Uint8, bytes: &raw[3000..] },
        ];
        assert_eq!(b.prefill(&seq, &split, Some(&f32_cfg)).unwrap().first_token, deferred.first_token);
        let mut other = raw.clone();
        other[0] ^= 0xff;
        let changed = b.prefill(&seq, &[VisualInput { dtype: DType::Uint8, bytes: &other }], Some(&f32_cfg)).unwrap();
        assert_ne!(changed.state, deferred.state);
    }
}
