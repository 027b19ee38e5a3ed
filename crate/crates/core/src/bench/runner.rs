use std::collections::BTreeMap;
use std::fmt::Display;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::report::{toggle_map, BenchReport, Failure, RequestRow};
use super::{BenchError, HarnessConfig, WorkloadManifest};
use crate::backend::{assemble, create_backend, AssembledSequence, Backend, DecodeOutput, PrefillOutput, TokenReduction, VisualInput};
use crate::imgproc::{preprocess, PixelSlice, PreprocessConfig, Preprocessed, TileSet};
use crate::profile::{self, span_scope, Span};
use crate::recipe::{Recipe, RecipeSet};
use crate::tokenizer::{encode_prompt, ChatMessage, ChatPart, Vocab};
use crate::transfer::{pack, packed_len, transfer, BufferView, DType, DeviceBuffer, HostArena, TransferCosts, TransferMode, TransferOutcome};

/// Stage name and message of a failed request.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFailure {
    pub stage: &'static str,
    pub error: String,
}

fn fail(stage: &'static str) -> impl Fn(&dyn Display) -> StageFailure {
    move |e| StageFailure { stage, error: e.to_string() }
}

/// Loads the configured vocab, or the builtin one.
pub fn load_vocab(cfg: &HarnessConfig) -> Result<Vocab, BenchError> {
    match &cfg.vocab_path {
        Some(p) => Vocab::load(p).map_err(|e| BenchError::Config(format!("vocab {}: {e}", p.display()))),
        None => Ok(Vocab::builtin()),
    }
}

/// Host-side work up to a tokenized, assembled prompt.
#[derive(Clone)]
pub struct FrontEnd {
    pre: PreprocessConfig,
    vocab: Arc<Vocab>,
    tr: TokenReduction,
    tokens_per_tile: u32,
    compact: bool,
}

pub struct FrontOutput {
    pub pre: Preprocessed,
    pub seq: AssembledSequence,
}

impl FrontEnd {
    pub fn new(cfg: &HarnessConfig, vocab: Arc<Vocab>) -> Result<Self, BenchError> {
        cfg.validate()?;
        Ok(Self {
            pre: cfg.preprocess(),
            vocab,
            tr: cfg.token_reduction,
            tokens_per_tile: cfg.token_reduction.tokens_per_tile(cfg.tile_edge).map_err(|e| BenchError::Config(e.to_string()))?,
            compact: cfg.recipes.contains(Recipe::CompactPlaceholders),
        })
    }

    pub fn run(&self, payload: &[u8], prompt: &str) -> Result<FrontOutput, StageFailure> {
        let pre = preprocess(payload, &self.pre).map_err(|e| fail("preprocess")(&e))?;
        let seq = {
            let _g = span_scope("tokenize");
            let msg = ChatMessage::user(vec![
                ChatPart::Image { tiles: pre.plan.image_count() },
                ChatPart::Text(prompt.to_owned()),
            ]);
            let ts = encode_prompt(&[msg], &self.vocab, self.tokens_per_tile, self.compact)
                .map_err(|e| fail("tokenize")(&e))?;
            assemble(&ts, &[pre.plan], &self.tr).map_err(|e| fail("tokenize")(&e))?
        };
        Ok(FrontOutput { pre, seq })
    }
}

/// Staging, transfer and model execution for one request at a time.
pub struct BackEnd {
    pre: PreprocessConfig,
    uint8_transfer: bool,
    pinned: bool,
    mode: TransferMode,
    costs: TransferCosts,
    alignment: usize,
    arena: Option<HostArena>,
    device: DeviceBuffer,
    backend: Box<dyn Backend + Send>,
    decode_tokens: usize,
}

pub struct BackOutput {
    pub transfer: TransferOutcome,
    pub prefill: PrefillOutput,
    pub first_token_at: Instant,
    pub decode: DecodeOutput,
}

fn pixel_views(tiles: &TileSet) -> Vec<(PixelSlice<'_>, Vec<usize>)> {
    let e = tiles.edge() as usize;
    let c = tiles.channels() as usize;
    match tiles.contiguous() {
        Some(all) => vec![(all, tiles.shape())],
        None => (0..tiles.len()).map(|i| (tiles.tile(i), vec![e, e, c])).collect(),
    }
}

impl BackEnd {
    pub fn new(cfg: &HarnessConfig, vocab_size: u32) -> Result<Self, BenchError> {
        cfg.validate()?;
        let pinned = cfg.recipes.contains(Recipe::PinnedMemory);
        let arena = if pinned {
            Some(HostArena::new(cfg.arena_capacity, cfg.alignment).map_err(|e| BenchError::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            pre: cfg.preprocess(),
            uint8_transfer: cfg.recipes.contains(Recipe::Uint8Transfer),
            pinned,
            mode: if cfg.recipes.contains(Recipe::PackTransfers) { TransferMode::Packed } else { TransferMode::Unpacked },
            costs: cfg.transfer,
            alignment: cfg.alignment,
            arena,
            device: DeviceBuffer::new(),
            backend: create_backend(&cfg.backend, cfg.latency, vocab_size).map_err(|e| BenchError::Config(e.to_string()))?,
            decode_tokens: cfg.decode_tokens,
        })
    }

    pub fn run(&mut self, front: &FrontOutput) -> Result<BackOutput, StageFailure> {
        let deferred = self.pre.defer_normalize;
        let pack_span = span_scope("pack");
        let pixels = pixel_views(&front.pre.tiles);
        let casts: Vec<Vec<f32>> = if deferred && !self.uint8_transfer {
            pixels.iter().map(|(p, _)| p.as_bytes().iter().map(|&v| f32::from(v)).collect()).collect()
        } else {
            Vec::new()
        };
        let ids: Vec<i64> = front.seq.ids.iter().map(|&id| i64::from(id)).collect();
        let attention = vec![1i64; ids.len()];

        let mut views = Vec::with_capacity(pixels.len() + 4);
        for (i, (p, shape)) in pixels.iter().enumerate() {
            let v = match casts.get(i) {
                Some(c) => BufferView::new(DType::Float32, shape.clone(), bytemuck::cast_slice(c)),
                None => BufferView::pixels(*p, shape.clone()),
            };
            views.push(v.map_err(|e| fail("pack")(&e))?);
        }
        let n_pixel = views.len();
        if let Some(masks) = &front.pre.masks {
            let e = front.pre.tiles.edge() as usize;
            for m in masks {
                views.push(BufferView { dtype: DType::Uint8, shape: vec![e, e], bytes: m });
            }
        }
        views.push(BufferView { dtype: DType::Int64, shape: vec![ids.len()], bytes: bytemuck::cast_slice(&ids) });
        views.push(BufferView { dtype: DType::Int64, shape: vec![attention.len()], bytes: bytemuck::cast_slice(&attention) });

        let mut fresh;
        let arena = match self.arena.as_mut() {
            Some(a) => {
                a.reset();
                a
            }
            None => {
                fresh = HostArena::new(packed_len(&views, self.alignment), self.alignment).map_err(|e| fail("pack")(&e))?;
                &mut fresh
            }
        };
        let batch = pack(&views, arena).map_err(|e| fail("pack")(&e))?;
        drop(pack_span);

        let outcome = {
            let _g = span_scope("transfer");
            transfer(&batch, self.costs.select(self.pinned), self.mode, &mut self.device)
        };

        let prefill = {
            let _g = span_scope("prefill");
            let visual: Vec<VisualInput<'_>> = batch.entries[..n_pixel]
                .iter()
                .map(|e| VisualInput { dtype: e.dtype, bytes: self.device.entry(e) })
                .collect();
            self.backend
                .prefill(&front.seq, &visual, deferred.then_some(&self.pre))
                .map_err(|e| fail("prefill")(&e))?
        };
        let first_token_at = Instant::now();
        let decode = {
            let _g = span_scope("generate");
            self.backend.decode(&prefill, self.decode_tokens)
        };
        Ok(BackOutput { transfer: outcome, prefill, first_token_at, decode })
    }
}

const MS: f64 = 1e6;

fn ns_ms(ns: u64) -> f64 {
    ns as f64 / MS
}

fn dur_ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Builds the report row. TTFT is the sum of the host stage spans plus the
/// modeled transfer and prefill time and the measured device-side
/// normalization.
fn make_row(index: usize, image: String, front: &FrontOutput, back: &BackOutput, spans: &[Span], started: Option<Instant>) -> RequestRow {
    let span_ms = |name: &str| ns_ms(profile::total_named_ns(spans, name));
    let mut stages = BTreeMap::new();
    for name in ["preprocess", "tokenize", "pack", "transfer", "device_normalize", "generate"] {
        stages.insert(name.to_owned(), span_ms(name));
    }
    for st in &front.pre.stages {
        stages.insert(format!("preprocess.{}", st.stage), ns_ms(st.ns));
    }
    let transfer_modeled = dur_ms(back.transfer.modeled);
    let prefill_ms = dur_ms(back.prefill.modeled) + stages["device_normalize"];
    stages.insert("transfer_modeled".into(), transfer_modeled);
    stages.insert("prefill".into(), prefill_ms);

    let ttft = stages["preprocess"] + stages["tokenize"] + stages["pack"] + stages["transfer"] + transfer_modeled + prefill_ms;
    let decode_ms = stages["generate"] + dur_ms(back.decode.modeled());
    let n = back.decode.ids.len();
    let wall_ttft = started.map(|t0| dur_ms(back.first_token_at - t0) + transfer_modeled + dur_ms(back.prefill.modeled));
    RequestRow {
        index,
        image,
        ttft_ms: ttft,
        e2e_ms: ttft + decode_ms,
        decode_throughput: if n == 0 || decode_ms == 0.0 { 0.0 } else { n as f64 / (decode_ms / 1e3) },
        wall_ttft_ms: wall_ttft,
        stages_ms: stages,
        tiles: front.pre.plan.image_count(),
        prompt_tokens: front.seq.ids.len(),
        visual_tokens: front.seq.n_visual,
        copies: back.transfer.copies,
        transfer_bytes: back.transfer.bytes,
        output_ids: back.decode.ids.clone(),
    }
}

/// Row or failure of one request.
enum Outcome {
    Done(RequestRow),
    Failed(Failure),
}

fn image_name(m: &WorkloadManifest, i: usize) -> String {
    m.record(i).image_path.display().to_string()
}

fn read_payload(m: &WorkloadManifest, i: usize) -> Result<Vec<u8>, StageFailure> {
    std::fs::read(&m.record(i).image_path).map_err(|e| fail("read")(&e))
}

fn failure(i: usize, image: String, f: StageFailure) -> Outcome {
    Outcome::Failed(Failure { index: i, image, stage: f.stage.into(), error: f.error })
}

/// One request on the calling thread.
fn run_sequential(front: &FrontEnd, back: &mut BackEnd, m: &WorkloadManifest, i: usize) -> (Outcome, Vec<Span>) {
    let image = image_name(m, i);
    let payload = match read_payload(m, i) {
        Ok(p) => p,
        Err(f) => return (failure(i, image, f), Vec::new()),
    };
    let prompt = &m.record(i).prompt;
    let (result, spans) = profile::capture(|| {
        let t0 = Instant::now();
        let f = front.run(&payload, prompt)?;
        let b = back.run(&f)?;
        Ok::<_, StageFailure>((f, b, t0))
    });
    let spans = match spans {
        Ok(s) => s,
        Err(e) => return (failure(i, image, StageFailure { stage: "profile", error: e.to_string() }), Vec::new()),
    };
    match result {
        Ok((f, b, t0)) => (Outcome::Done(make_row(i, image, &f, &b, &spans, Some(t0))), spans),
        Err(e) => (failure(i, image, e), spans),
    }
}

struct Collector {
    warmup: usize,
    rows: Vec<RequestRow>,
    failures: Vec<Failure>,
    spans: Vec<Span>,
}

impl Collector {
    fn new(warmup: usize) -> Self {
        Self { warmup, rows: Vec::new(), failures: Vec::new(), spans: Vec::new() }
    }

    fn push(&mut self, i: usize, outcome: Outcome, spans: Vec<Span>) {
        if i < self.warmup {
            return;
        }
        match outcome {
            Outcome::Done(mut row) => {
                row.index = i - self.warmup;
                self.rows.push(row);
            }
            Outcome::Failed(mut f) => {
                f.index = i - self.warmup;
                self.failures.push(f);
            }
        }
        profile::append_spans(&mut self.spans, spans);
    }
}

fn rung_label(added: RecipeSet) -> String {
    if added.is_empty() {
        return "Baseline".into();
    }
    let labels: Vec<&str> = added.iter().map(|r| r.label()).collect();
    format!("+ {added} {}", labels.join(", "))
}

fn new_report(label: String, cfg: &HarnessConfig, m: &WorkloadManifest, c: Collector, wall: Duration, started: u64) -> (BenchReport, Vec<Span>) {
    let mut r = BenchReport {
        label,
        recipes: cfg.recipes.iter().map(|r| r.name().to_owned()).collect(),
        toggles: toggle_map(cfg.recipes),
        corpus_id: m.corpus_id.clone(),
        config_hash: cfg.hash(),
        backend: cfg.backend.clone(),
        pipelined: cfg.pipelined,
        warmup: m.warmup,
        started_unix_s: started,
        wall_clock_ms: dur_ms(wall),
        rows: c.rows,
        failures: c.failures,
        aggregates: None,
        stage_medians_ms: BTreeMap::new(),
    };
    r.finalize();
    (r, c.spans)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs the manifest under `cfg` and also returns the spans of every
/// measured request.
pub fn run_workload_with_spans(m: &WorkloadManifest, cfg: &HarnessConfig) -> Result<(BenchReport, Vec<Span>), BenchError> {
    let vocab = Arc::new(load_vocab(cfg)?);
    let front = FrontEnd::new(cfg, vocab.clone())?;
    let mut back = BackEnd::new(cfg, vocab.len() as u32)?;
    let started = unix_now();
    let t = Instant::now();
    let mut c = Collector::new(m.warmup);
    if cfg.pipelined {
        run_pipelined(&front, &mut back, m, &mut c);
    } else {
        for i in 0..m.total() {
            let (o, s) = run_sequential(&front, &mut back, m, i);
            c.push(i, o, s);
        }
    }
    let label = if cfg.recipes.is_empty() { "Baseline".to_owned() } else { format!("Recipes {}", cfg.recipes) };
    Ok(new_report(label, cfg, m, c, t.elapsed(), started))
}

pub fn run_workload(m: &WorkloadManifest, cfg: &HarnessConfig) -> Result<BenchReport, BenchError> {
    Ok(run_workload_with_spans(m, cfg)?.0)
}

/// Front end on a worker thread, handing requests over a queue of
/// capacity one so preprocessing of the next request overlaps the rest of
/// the current one.
fn run_pipelined(front: &FrontEnd, back: &mut BackEnd, m: &WorkloadManifest, c: &mut Collector) {
    type Item = (usize, String, Result<FrontOutput, StageFailure>, Vec<Span>);
    let (tx, rx) = sync_channel::<Item>(1);
    thread::scope(|scope| {
        let producer = front.clone();
        scope.spawn(move || {
            for i in 0..m.total() {
                let image = image_name(m, i);
                let (result, spans) = match read_payload(m, i) {
                    Ok(payload) => {
                        let (r, s) = profile::capture(|| producer.run(&payload, &m.record(i).prompt));
                        (r, s.unwrap_or_default())
                    }
                    Err(f) => (Err(f), Vec::new()),
                };
                if tx.send((i, image, result, spans)).is_err() {
                    return;
                }
            }
        });
        for (i, image, result, mut spans) in rx {
            let outcome = match result {
                Err(f) => failure(i, image, f),
                Ok(f) => {
                    let (b, back_spans) = profile::capture(|| back.run(&f));
                    profile::append_spans(&mut spans, back_spans.unwrap_or_default());
                    match b {
                        Ok(b) => Outcome::Done(make_row(i, image, &f, &b, &spans, None)),
                        Err(e) => failure(i, image, e),
                    }
                }
            };
            c.push(i, outcome, spans);
        }
    });
}

/// Applies `rungs` cumulatively on top of an all-off baseline and returns
/// one report per rung, baseline first. Requests are interleaved across
/// rungs, rotating the order per request, so slow drift on the machine
/// affects every rung alike.
pub fn run_ladder(m: &WorkloadManifest, base: &HarnessConfig, rungs: &[RecipeSet]) -> Result<Vec<BenchReport>, BenchError> {
    let vocab = Arc::new(load_vocab(base)?);
    let mut configs = vec![(RecipeSet::NONE, base.with_recipes(RecipeSet::NONE))];
    let mut acc = RecipeSet::NONE;
    for &r in rungs {
        acc = acc.union(r);
        configs.push((r, base.with_recipes(acc)));
    }
    let mut stations = Vec::with_capacity(configs.len());
    for (_, cfg) in &configs {
        stations.push((FrontEnd::new(cfg, vocab.clone())?, BackEnd::new(cfg, vocab.len() as u32)?));
    }
    let mut collectors: Vec<Collector> = configs.iter().map(|_| Collector::new(m.warmup)).collect();
    let started = unix_now();
    let t = Instant::now();
    let k = configs.len();
    for i in 0..m.total() {
        for step in 0..k {
            let j = (i + step) % k;
            let (front, back) = &mut stations[j];
            let (o, s) = run_sequential(front, back, m, i);
            collectors[j].push(i, o, s);
        }
    }
    let wall = t.elapsed();
    Ok(configs
        .iter()
        .zip(collectors)
        .map(|((added, cfg), c)| {
            let cfg = HarnessConfig { pipelined: false, ..cfg.clone() };
            new_report(rung_label(*added), &cfg, m, c, wall, started).0
        })
        .collect())
}
