//! Host staging for host-to-device copies: a fixed arena with aligned
//! regions, packed transfer batches, and a latency/bandwidth cost model.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgproc::{ElemType, PixelSlice};
use crate::profile;

pub const DEFAULT_ALIGNMENT: usize = 64;

/// Element type tag of a staged buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Uint8,
    Bfloat16,
    Float32,
    Int32,
    Int64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::Uint8 => 1,
            DType::Bfloat16 => 2,
            DType::Float32 | DType::Int32 => 4,
            DType::Int64 => 8,
        }
    }
}

impl From<ElemType> for DType {
    fn from(e: ElemType) -> Self {
        match e {
            ElemType::Uint8 => DType::Uint8,
            ElemType::Bfloat16 => DType::Bfloat16,
            ElemType::Float32 => DType::Float32,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransferError {
    #[error("arena full: requested {requested} bytes, {remaining} remaining")]
    ArenaFull { requested: usize, remaining: usize },
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("alignment {0} is not a power of two")]
    Alignment(usize),
    #[error("buffer holds {len} bytes, shape {shape:?} of {dtype:?} needs {expected}")]
    BufferSize { len: usize, shape: Vec<usize>, dtype: DType, expected: usize },
    #[error("invalid cost model: {0}")]
    CostModel(String),
}

/// An aligned byte range inside a [`HostArena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub offset: usize,
    pub len: usize,
}

/// Fixed-capacity bump allocator. Its backing store is allocated once;
/// regions are aligned in absolute address terms.
#[derive(Debug)]
pub struct HostArena {
    buf: Vec<u8>,
    base: usize,
    capacity: usize,
    alignment: usize,
    mark: usize,
    high_water: usize,
    allocations: u64,
}

fn round_up(x: usize, align: usize) -> usize {
    (x + align - 1) & !(align - 1)
}

impl HostArena {
    pub fn new(capacity: usize, alignment: usize) -> Result<Self, TransferError> {
        if !alignment.is_power_of_two() {
            return Err(TransferError::Alignment(alignment));
        }
        let buf = vec![0u8; capacity + alignment];
        let base = buf.as_ptr().align_offset(alignment);
        Ok(Self { buf, base, capacity, alignment, mark: 0, high_water: 0, allocations: 0 })
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self::new(capacity, DEFAULT_ALIGNMENT).expect("default alignment is a power of two")
    }

    pub fn alloc(&mut self, size: usize) -> Result<Region, TransferError> {
        if size == 0 {
            return Err(TransferError::ZeroSize);
        }
        let offset = round_up(self.mark, self.alignment);
        let remaining = self.capacity.saturating_sub(offset);
        if size > remaining {
            return Err(TransferError::ArenaFull { requested: size, remaining });
        }
        self.mark = offset + size;
        self.high_water = self.high_water.max(self.mark);
        self.allocations += 1;
        Ok(Region { offset, len: size })
    }

    pub fn reset(&mut self) {
        self.mark = 0;
    }

    pub fn bytes(&self, r: Region) -> &[u8] {
        &self.buf[self.base + r.offset..self.base + r.offset + r.len]
    }

    pub fn bytes_mut(&mut self, r: Region) -> &mut [u8] {
        &mut self.buf[self.base + r.offset..self.base + r.offset + r.len]
    }

    /// Address of a region's first byte, for alignment checks.
    pub fn address(&self, r: Region) -> usize {
        self.buf[self.base + r.offset..].as_ptr() as usize
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alignment(&self) -> usize {
        self.alignment
    }

    pub fn mark(&self) -> usize {
        self.mark
    }

    pub fn remaining(&self) -> usize {
        self.capacity.saturating_sub(round_up(self.mark, self.alignment))
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn allocations(&self) -> u64 {
        self.allocations
    }
}

/// `∏shape · sizeof(dtype)`.
pub fn payload_bytes(shape: &[usize], dtype: DType) -> usize {
    shape.iter().product::<usize>() * dtype.size_bytes()
}

/// A typed host tensor in native byte order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostBuffer {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl HostBuffer {
    pub fn new(dtype: DType, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self, TransferError> {
        let expected = payload_bytes(&shape, dtype);
        if bytes.len() != expected {
            return Err(TransferError::BufferSize { len: bytes.len(), shape, dtype, expected });
        }
        Ok(Self { dtype, shape, bytes })
    }

    pub fn from_pixels(data: PixelSlice<'_>, shape: Vec<usize>) -> Result<Self, TransferError> {
        Self::new(data.elem().into(), shape, data.as_bytes().to_vec())
    }

    pub fn from_i64(values: &[i64]) -> Self {
        Self { dtype: DType::Int64, shape: vec![values.len()], bytes: bytemuck::cast_slice(values).to_vec() }
    }

    pub fn view(&self) -> BufferView<'_> {
        BufferView { dtype: self.dtype, shape: self.shape.clone(), bytes: &self.bytes }
    }
}

/// Borrowed typed bytes to be staged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferView<'a> {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: &'a [u8],
}

impl<'a> BufferView<'a> {
    pub fn new(dtype: DType, shape: Vec<usize>, bytes: &'a [u8]) -> Result<Self, TransferError> {
        let expected = payload_bytes(&shape, dtype);
        if bytes.len() != expected {
            return Err(TransferError::BufferSize { len: bytes.len(), shape, dtype, expected });
        }
        Ok(Self { dtype, shape, bytes })
    }

    pub fn pixels(data: PixelSlice<'a>, shape: Vec<usize>) -> Result<Self, TransferError> {
        Self::new(data.elem().into(), shape, data.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub offset: usize,
    pub len: usize,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// Buffers laid out back to back at aligned offsets in one arena region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferBatch<'a> {
    pub payload: &'a [u8],
    pub entries: Vec<BatchEntry>,
}

impl TransferBatch<'_> {
    /// Sum of entry lengths, excluding alignment padding.
    pub fn data_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.len).sum()
    }

    pub fn entry_bytes(&self, i: usize) -> &[u8] {
        let e = &self.entries[i];
        &self.payload[e.offset..e.offset + e.len]
    }

    pub fn unpack(&self) -> Vec<HostBuffer> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| HostBuffer { dtype: e.dtype, shape: e.shape.clone(), bytes: self.entry_bytes(i).to_vec() })
            .collect()
    }
}

/// Bytes [`pack`] needs for `buffers`, padding included.
pub fn packed_len(buffers: &[BufferView<'_>], alignment: usize) -> usize {
    let end = buffers.iter().fold(0, |end, b| round_up(end, alignment) + b.bytes.len());
    round_up(end, alignment)
}

/// Copies `buffers` into one region of `arena`.
pub fn pack<'a>(buffers: &[BufferView<'_>], arena: &'a mut HostArena) -> Result<TransferBatch<'a>, TransferError> {
    let align = arena.alignment();
    let mut entries = Vec::with_capacity(buffers.len());
    let mut end = 0;
    for b in buffers {
        let offset = round_up(end, align);
        entries.push(BatchEntry { offset, len: b.bytes.len(), dtype: b.dtype, shape: b.shape.clone() });
        end = offset + b.bytes.len();
    }
    let total = round_up(end, align);
    if total == 0 {
        return Ok(TransferBatch { payload: &[], entries });
    }
    let region = arena.alloc(total)?;
    let dst = arena.bytes_mut(region);
    for (b, e) in buffers.iter().zip(&entries) {
        dst[e.offset..e.offset + e.len].copy_from_slice(b.bytes);
    }
    Ok(TransferBatch { payload: arena.bytes(region), entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub latency_per_copy_s: f64,
    pub bytes_per_second: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), TransferError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.latency_per_copy_s) && ok(self.bytes_per_second) {
            Ok(())
        } else {
            Err(TransferError::CostModel(format!(
                "latency {} s and bandwidth {} B/s must be positive",
                self.latency_per_copy_s, self.bytes_per_second
            )))
        }
    }

    pub fn duration(&self, copies: usize, bytes: usize) -> Duration {
        Duration::from_secs_f64(self.latency_per_copy_s * copies as f64 + bytes as f64 / self.bytes_per_second)
    }
}

/// Cost models for arena-staged and freshly allocated host memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferCosts {
    pub pinned: CostModel,
    pub pageable: CostModel,
}

/// Per-copy latency covers dispatch and synchronization of one copy, not
/// only the DMA setup.
impl Default for TransferCosts {
    fn default() -> Self {
        Self {
            pinned: CostModel { latency_per_copy_s: 150e-6, bytes_per_second: 12e9 },
            pageable: CostModel { latency_per_copy_s: 250e-6, bytes_per_second: 6e9 },
        }
    }
}

impl TransferCosts {
    pub fn validate(&self) -> Result<(), TransferError> {
        self.pinned.validate()?;
        self.pageable.validate()
    }

    pub fn select(&self, pinned: bool) -> &CostModel {
        if pinned {
            &self.pinned
        } else {
            &self.pageable
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Packed,
    Unpacked,
}

/// Simulated device memory that receives copies.
#[derive(Debug, Default)]
pub struct DeviceBuffer {
    bytes: Vec<u8>,
}

impl DeviceBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn entry(&self, e: &BatchEntry) -> &[u8] {
        &self.bytes[e.offset..e.offset + e.len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOutcome {
    pub copies: usize,
    pub bytes: usize,
    pub modeled: Duration,
}

/// Copies the batch into `device` and returns the modeled duration. Packed
/// mode issues one copy for the whole payload, unpacked mode one per entry.
pub fn transfer(batch: &TransferBatch<'_>, cost: &CostModel, mode: TransferMode, device: &mut DeviceBuffer) -> TransferOutcome {
    device.bytes.clear();
    device.bytes.resize(batch.payload.len(), 0);
    let k = batch.entries.len();
    let copies = match mode {
        _ if k == 0 => 0,
        TransferMode::Packed => {
            let _g = profile::span_scope("h2d_copy");
            device.bytes.copy_from_slice(batch.payload);
            1
        }
        TransferMode::Unpacked => {
            for e in &batch.entries {
                let _g = profile::span_scope("h2d_copy");
                device.bytes[e.offset..e.offset + e.len].copy_from_slice(&batch.payload[e.offset..e.offset + e.len]);
            }
            k
        }
    };
    let bytes = batch.data_bytes();
    TransferOutcome { copies, bytes, modeled: cost.duration(copies, bytes) }
}
