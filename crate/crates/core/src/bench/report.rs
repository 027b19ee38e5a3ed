use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::recipe::{RecipeSet, ALL_RECIPES};

/// Timings of one measured request, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub index: usize,
    pub image: String,
    pub ttft_ms: f64,
    pub e2e_ms: f64,
    pub decode_throughput: f64,
    /// Wall time from request start to first token plus modeled device
    /// time; only recorded for sequential runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ttft_ms: Option<f64>,
    pub stages_ms: BTreeMap<String, f64>,
    pub tiles: u32,
    pub prompt_tokens: usize,
    pub visual_tokens: usize,
    pub copies: usize,
    pub transfer_bytes: usize,
    pub output_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub index: usize,
    pub image: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted values.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Summary {
            mean: mean.clamp(sorted[0], sorted[sorted.len() - 1]),
            p50: nearest_rank(&sorted, 0.50),
            p95: nearest_rank(&sorted, 0.95),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub ttft_ms: Summary,
    pub e2e_ms: Summary,
    pub decode_throughput: Summary,
    pub preprocess_ms: Summary,
}

impl Aggregates {
    pub fn from_rows(rows: &[RequestRow]) -> Option<Aggregates> {
        let col = |f: &dyn Fn(&RequestRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
        Some(Aggregates {
            ttft_ms: col(&|r| r.ttft_ms)?,
            e2e_ms: col(&|r| r.e2e_ms)?,
            decode_throughput: col(&|r| r.decode_throughput)?,
            preprocess_ms: col(&|r| r.stages_ms.get("preprocess").copied().unwrap_or(0.0))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub recipes: Vec<String>,
    pub toggles: BTreeMap<String, bool>,
    pub corpus_id: String,
    pub config_hash: String,
    pub backend: String,
    pub pipelined: bool,
    pub warmup: usize,
    /// Seconds since the Unix epoch when the run started.
    pub started_unix_s: u64,
    pub wall_clock_ms: f64,
    pub rows: Vec<RequestRow>,
    pub failures: Vec<Failure>,
    pub aggregates: Option<Aggregates>,
    /// Median of each stage across measured requests.
    pub stage_medians_ms: BTreeMap<String, f64>,
}

pub fn toggle_map(set: RecipeSet) -> BTreeMap<String, bool> {
    ALL_RECIPES.iter().map(|&r| (format!("{:02}_{}", r.number(), r.name()), set.contains(r))).collect()
}

fn stage_medians(rows: &[RequestRow]) -> BTreeMap<String, f64> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        for (k, &v) in &r.stages_ms {
            cols.entry(k.clone()).or_default().push(v);
        }
    }
    cols.into_iter().filter_map(|(k, v)| Some((k, Summary::of(&v)?.p50))).collect()
}

impl BenchReport {
    /// Fills the derived fields from `rows`.
    pub fn finalize(&mut self) {
        self.aggregates = Aggregates::from_rows(&self.rows);
        self.stage_medians_ms = stage_medians(&self.rows);
    }

    /// True when the stored aggregates equal a fresh recomputation.
    pub fn aggregates_consistent(&self) -> bool {
        self.aggregates == Aggregates::from_rows(&self.rows) && self.stage_medians_ms == stage_medians(&self.rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "### {}\n", self.label);
        let _ = writeln!(
            s,
            "corpus `{}` · config `{}` · {} measured, {} failed, {} warmup\n",
            self.corpus_id,
            self.config_hash,
            self.rows.len(),
            self.failures.len(),
            self.warmup
        );
        if let Some(a) = &self.aggregates {
            s.push_str("| Metric | Mean | P50 | P95 |\n|---|---:|---:|---:|\n");
            for (name, m) in [
                ("TTFT (ms)", a.ttft_ms),
                ("E2E Latency (ms)", a.e2e_ms),
                ("Throughput (tokens/s)", a.decode_throughput),
                ("Preprocess (ms)", a.preprocess_ms),
            ] {
                let _ = writeln!(s, "| {name} | {:.1} | {:.1} | {:.1} |", m.mean, m.p50, m.p95);
            }
        }
        if !self.stage_medians_ms.is_empty() {
            s.push_str("\n| Stage | Median (ms) |\n|---|---:|\n");
            for (k, v) in &self.stage_medians_ms {
                let _ = writeln!(s, "| {k} | {v:.3} |");
            }
        }
        s
    }
}

/// Relative change as a whole percentage with a true minus sign.
pub fn format_delta(base: f64, value: f64) -> String {
    if base == 0.0 {
        return "n/a".into();
    }
    let pct = ((value - base) / base * 100.0).round() as i64;
    match pct {
        0 => "0%".into(),
        p if p < 0 => format!("\u{2212}{}%", -p),
        p => format!("+{p}%"),
    }
}

/// Incremental table: one row per rung with the median TTFT change against
/// the first rung.
pub fn ladder_markdown(reports: &[BenchReport]) -> String {
    let mut s = String::from(
        "| Optimization | TTFT (ms) | Δ TTFT | Throughput (tokens/s) | E2E Latency (ms) | Preprocess (ms) |\n\
         |---|---:|---:|---:|---:|---:|\n",
    );
    let base = reports.first().and_then(|r| r.aggregates.as_ref()).map(|a| a.ttft_ms.p50);
    for r in reports {
        let Some(a) = &r.aggregates else {
            let _ = writeln!(s, "| {} | – | – | – | – | – |", r.label);
            continue;
        };
        let delta = base.map_or_else(|| "–".to_owned(), |b| format_delta(b, a.ttft_ms.p50));
        let _ = writeln!(
            s,
            "| {} | {:.1} | {} | {:.1} | {:.1} | {:.1} |",
            r.label, a.ttft_ms.p50, delta, a.decode_throughput.p50, a.e2e_ms.p50, a.preprocess_ms.p50
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(ttft: f64, e2e: f64) -> RequestRow {
        RequestRow {
            index: 0,
            image: "x".into(),
            ttft_ms: ttft,
            e2e_ms: e2e,
            decode_throughput: 100.0,
            wall_ttft_ms: None,
            stages_ms: BTreeMap::from([("preprocess".to_owned(), ttft / 2.0)]),
            tiles: 1,
            prompt_tokens: 10,
            visual_tokens: 0,
            copies: 1,
            transfer_bytes: 0,
            output_ids: vec![],
        }
    }

    pub(crate) fn report(label: &str, rows: Vec<RequestRow>) -> BenchReport {
        let mut r = BenchReport {
            label: label.into(),
            recipes: vec![],
            toggles: toggle_map(RecipeSet::NONE),
            corpus_id: "fixture".into(),
            config_hash: "0".into(),
            backend: "mock".into(),
            pipelined: false,
            warmup: 0,
            started_unix_s: 0,
            wall_clock_ms: 0.0,
            rows,
            failures: vec![],
            aggregates: None,
            stage_medians_ms: BTreeMap::new(),
        };
        r.finalize();
        r
    }

    #[test]
    fn nearest_rank_percentiles() {
        let s = Summary::of(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.p50, s.p95, s.min, s.max, s.mean), (3.0, 5.0, 1.0, 5.0, 3.0));
        let s = Summary::of(&(1..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!((s.p50, s.p95), (50.0, 95.0));
        assert!(Summary::of(&[]).is_none());
        let s = Summary::of(&[0.1; 7]).unwrap();
        assert!(s.mean >= s.min && s.mean <= s.max);
    }

    #[test]
    fn fixture_delta_rendering() {
        assert_eq!(format_delta(124.0, 57.7), "\u{2212}53%");
        assert_eq!(format_delta(344.7, 22.8), "\u{2212}93%");
        assert_eq!(format_delta(10.0, 10.0), "0%");
        assert_eq!(format_delta(10.0, 12.0), "+20%");
        let md = ladder_markdown(&[report("Baseline", vec![row(124.0, 200.0)]), report("+ ⑤", vec![row(57.7, 90.0)])]);
        assert!(md.contains("| + ⑤ | 57.7 | −53% |"), "{md}");
    }

    #[test]
    fn aggregates_recompute_exactly() {
        let r = report("x", vec![row(3.3, 4.0), row(1.1, 9.0), row(2.2, 2.2)]);
        assert!(r.aggregates_consistent());
        let back: BenchReport = serde_json::from_str(&r.to_json()).unwrap();
        assert!(back.aggregates_consistent());
        assert_eq!(back, r);
        assert!(r.to_markdown().contains("TTFT (ms)"));
    }
}
