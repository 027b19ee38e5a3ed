//! In-process span instrumentation and folded-stack export.
//!
//! A [`Profiler`] is installed per thread. Library code opens spans through
//! [`span_scope`]; when no profiler is installed the guard is inert, so
//! instrumented code pays one thread-local lookup and nothing else.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A closed span. `parent` indexes into the same span list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub name: String,
    pub parent: Option<usize>,
    pub start_ns: u64,
    pub duration_ns: u64,
}

impl Span {
    pub fn end_ns(&self) -> u64 {
        self.start_ns + self.duration_ns
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("unbalanced span close: closing `{closing}` while `{innermost}` is innermost")]
    Unbalanced { closing: String, innermost: String },
    #[error("span #{0} is not open")]
    NotOpen(usize),
    #[error("spans still open at finish: {0:?}")]
    StillOpen(Vec<String>),
}

/// Handle returned by [`Profiler::enter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanId(usize);

#[derive(Debug)]
pub struct Profiler {
    origin: Instant,
    spans: Vec<Span>,
    open: Vec<usize>,
    errors: Vec<ProfileError>,
}

impl Default for Profiler {
    fn default() -> Self {
        Self::new()
    }
}

impl Profiler {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            spans: Vec::new(),
            open: Vec::new(),
            errors: Vec::new(),
        }
    }

    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    pub fn enter(&mut self, name: &str) -> SpanId {
        let id = self.spans.len();
        let start_ns = self.now_ns();
        self.spans.push(Span {
            name: name.to_owned(),
            parent: self.open.last().copied(),
            start_ns,
            duration_ns: 0,
        });
        self.open.push(id);
        SpanId(id)
    }

    /// Closes `id`. Closing anything but the innermost open span is an error;
    /// the span is still closed so the record stays usable.
    pub fn exit(&mut self, id: SpanId) -> Result<(), ProfileError> {
        let now = self.now_ns();
        let Some(pos) = self.open.iter().rposition(|&i| i == id.0) else {
            return Err(ProfileError::NotOpen(id.0));
        };
        let result = if pos + 1 == self.open.len() {
            Ok(())
        } else {
            let innermost = self.spans[*self.open.last().unwrap()].name.clone();
            Err(ProfileError::Unbalanced {
                closing: self.spans[id.0].name.clone(),
                innermost,
            })
        };
        self.open.remove(pos);
        let span = &mut self.spans[id.0];
        span.duration_ns = now.saturating_sub(span.start_ns);
        result
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn errors(&self) -> &[ProfileError] {
        &self.errors
    }

    /// Consumes the profiler. Fails if any span is open or any guard was
    /// dropped out of order.
    pub fn finish(self) -> Result<Vec<Span>, ProfileError> {
        if let Some(err) = self.errors.into_iter().next() {
            return Err(err);
        }
        if !self.open.is_empty() {
            let names = self
                .open
                .iter()
                .map(|&i| self.spans[i].name.clone())
                .collect();
            return Err(ProfileError::StillOpen(names));
        }
        Ok(self.spans)
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Profiler>> = const { RefCell::new(None) };
}

/// Installs `profiler` on the current thread, returning the previous one.
pub fn install(profiler: Profiler) -> Option<Profiler> {
    ACTIVE.with(|a| a.borrow_mut().replace(profiler))
}

pub fn uninstall() -> Option<Profiler> {
    ACTIVE.with(|a| a.borrow_mut().take())
}

pub fn is_enabled() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

/// RAII guard for a span on the thread's installed profiler.
#[must_use = "the span closes when the guard is dropped"]
pub struct SpanGuard {
    id: Option<SpanId>,
}

impl SpanGuard {
    pub fn is_recording(&self) -> bool {
        self.id.is_some()
    }
}

impl Drop for SpanGuard {
    fn drop(&mut self) {
        if let Some(id) = self.id.take() {
            ACTIVE.with(|a| {
                if let Some(p) = a.borrow_mut().as_mut() {
                    if let Err(e) = p.exit(id) {
                        p.errors.push(e);
                    }
                }
            });
        }
    }
}

pub fn span_scope(name: &str) -> SpanGuard {
    let id = ACTIVE.with(|a| a.borrow_mut().as_mut().map(|p| p.enter(name)));
    SpanGuard { id }
}

/// Runs `f` under a span and also returns its wall time, whether or not a
/// profiler is installed.
pub fn timed<T>(name: &str, f: impl FnOnce() -> T) -> (T, Duration) {
    let _guard = span_scope(name);
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

/// Runs `f` with a fresh profiler installed and returns its output with the
/// recorded spans. Any previously installed profiler is restored afterwards.
pub fn capture<T>(f: impl FnOnce() -> T) -> (T, Result<Vec<Span>, ProfileError>) {
    let prev = install(Profiler::new());
    let out = f();
    let profiler = uninstall().expect("profiler removed during capture");
    if let Some(p) = prev {
        install(p);
    }
    (out, profiler.finish())
}

pub fn count_named(spans: &[Span], name: &str) -> usize {
    spans.iter().filter(|s| s.name == name).count()
}

pub fn total_named_ns(spans: &[Span], name: &str) -> u64 {
    spans
        .iter()
        .filter(|s| s.name == name)
        .map(|s| s.duration_ns)
        .sum()
}

/// Appends spans recorded by another profiler, re-indexing parents.
pub fn append_spans(dst: &mut Vec<Span>, src: Vec<Span>) {
    let base = dst.len();
    dst.extend(src.into_iter().map(|mut s| {
        s.parent = s.parent.map(|p| p + base);
        s
    }));
}

fn stack_path(spans: &[Span], mut idx: usize) -> String {
    let mut names = vec![spans[idx].name.as_str()];
    while let Some(p) = spans[idx].parent {
        names.push(spans[p].name.as_str());
        idx = p;
    }
    names.reverse();
    names.join(";")
}

/// Folded-stack text: one `root;child;leaf <self-ns>` line per distinct
/// stack, sorted lexicographically. Self time is duration minus the
/// durations of direct children, so the lines under a root sum to the root's
/// duration.
pub fn export_folded(spans: &[Span]) -> String {
    let mut child_total = vec![0u64; spans.len()];
    for s in spans {
        if let Some(p) = s.parent {
            child_total[p] += s.duration_ns;
        }
    }
    let mut folded: BTreeMap<String, u64> = BTreeMap::new();
    for (i, s) in spans.iter().enumerate() {
        let self_ns = s.duration_ns.saturating_sub(child_total[i]);
        *folded.entry(stack_path(spans, i)).or_default() += self_ns;
    }
    let mut out = String::new();
    for (stack, ns) in folded {
        let _ = writeln!(out, "{stack} {ns}");
    }
    out
}

/// Parses folded text back into `(stack, value)` pairs.
pub fn parse_folded(text: &str) -> Vec<(String, u64)> {
    text.lines()
        .filter_map(|line| {
            let (stack, value) = line.rsplit_once(' ')?;
            Some((stack.to_owned(), value.parse().ok()?))
        })
        .collect()
}

/// Mean cost of one enter/exit pair on this machine, measured over `iters`
/// after an equal-length warm-up.
pub fn measure_span_overhead(iters: u32) -> Duration {
    let (elapsed, _) = capture(|| {
        for _ in 0..iters {
            let _g = span_scope("warmup");
        }
        let start = Instant::now();
        for _ in 0..iters {
            let _g = span_scope("overhead");
        }
        start.elapsed()
    });
    elapsed / iters.max(1)
}
