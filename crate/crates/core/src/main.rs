use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vlmfp::bench::{self, BenchError, HarnessConfig, WorkloadManifest};
use vlmfp::boxcodec::{
    decode_box_loc, densecap_map, encode_box_loc, encode_box_text, load_jsonl, loc_ids_to_text, parse_box_text,
    parse_loc_text, average_precision, BBoxN, DenseCapThresholds, LocationGridConfig,
};
use vlmfp::corpus::{generate_corpus, CorpusSpec};
use vlmfp::imgproc::preprocess;
use vlmfp::profile::export_folded;
use vlmfp::recipe::{parse_ladder, reference_ladder};
use vlmfp::tensor_io::write_tensor;

#[derive(Parser)]
#[command(name = "vlmfp", version, about = "VLM front-end pipeline toolkit and latency harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Benchmark runs.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Preprocess one image and optionally dump the tensors.
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        dump_tensors: Option<PathBuf>,
    },
    /// Convert boxes between normalized coordinates and token formats.
    Boxcodec {
        #[arg(value_enum)]
        direction: Direction,
        #[arg(long, value_enum)]
        format: BoxFormat,
        /// `x1,y1,x2,y2` to encode, or the token text to decode.
        input: String,
        /// Grid size for `loc`; defaults to the vocab's location tokens.
        #[arg(long)]
        bins: Option<u32>,
        /// Integer range for `text`.
        #[arg(long, default_value_t = 1000)]
        scale: u32,
    },
    /// Dense captioning mAP of predictions against ground truth (JSONL).
    EvalDensecap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run a workload and write folded stacks.
    Profile {
        #[arg(long, value_name = "FILE")]
        folded: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the synthetic reference corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = CorpusSpec::default().count)]
        count: usize,
        #[arg(long, default_value_t = CorpusSpec::default().seed)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// One configuration over the manifest.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cumulative recipe ladder.
    Ladder {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated rungs, e.g. `⑤,⑨,①②`.
        #[arg(long)]
        recipes: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Encode,
    Decode,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoxFormat {
    Loc,
    Text,
}

fn data(e: impl std::fmt::Display) -> BenchError {
    BenchError::Data(e.to_string())
}

fn config(e: impl std::fmt::Display) -> BenchError {
    BenchError::Config(e.to_string())
}

fn write(path: &Path, text: &str) -> Result<(), BenchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn load(run: &RunArgs) -> Result<(HarnessConfig, WorkloadManifest), BenchError> {
    let cfg = HarnessConfig::load(run.config.as_deref())?;
    let m = WorkloadManifest::load(&run.manifest, cfg.warmup, cfg.requests)?;
    Ok((cfg, m))
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

fn parse_coords(s: &str) -> Result<BBoxN, BenchError> {
    let parts: Vec<f64> = s
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| data(format!("box {s:?}: {e}")))?;
    let [x1, y1, x2, y2] = parts[..] else {
        return Err(data(format!("box {s:?}: expected 4 numbers")));
    };
    BBoxN::new(x1, y1, x2, y2).map_err(data)
}

fn grid(bins: Option<u32>) -> Result<LocationGridConfig, BenchError> {
    match bins {
        Some(k) => LocationGridConfig::new(k, 0).map_err(config),
        None => LocationGridConfig::from_vocab(&vlmfp::tokenizer::Vocab::builtin()).map_err(config),
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.cmd {
        Cmd::Bench(BenchCmd::Run { run, out }) => {
            let (cfg, m) = load(&run)?;
            let report = bench::run_workload(&m, &cfg)?;
            if let Some(out) = out {
                write(&out, &report.to_json())?;
            }
            print!("{}", report.to_markdown());
        }
        Cmd::Bench(BenchCmd::Ladder { run, recipes, out }) => {
            let (cfg, m) = load(&run)?;
            let rungs = match recipes {
                Some(r) => parse_ladder(&r).map_err(config)?,
                None => reference_ladder(),
            };
            let reports = bench::run_ladder(&m, &cfg, &rungs)?;
            for (i, r) in reports.iter().enumerate() {
                write(&out.join(format!("{i:02}_{}.json", slug(&r.label))), &r.to_json())?;
            }
            let md = bench::ladder_markdown(&reports);
            write(&out.join("ladder.md"), &md)?;
            print!("{md}");
        }
        Cmd::Preprocess { image, config: cfg_path, dump_tensors } => {
            let cfg = HarnessConfig::load(cfg_path.as_deref())?;
            let bytes = fs::read(&image).map_err(|e| data(format!("{}: {e}", image.display())))?;
            let pre = preprocess(&bytes, &cfg.preprocess()).map_err(data)?;
            if let Some(dir) = dump_tensors {
                fs::create_dir_all(&dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
                let tiles = &pre.tiles;
                let e = tiles.edge() as usize;
                let c = tiles.channels() as usize;
                for i in 0..tiles.len() {
                    write_tensor(&dir.join(format!("tile_{i:02}")), tiles.tile(i), &[e, e, c]).map_err(data)?;
                }
                for (i, m) in pre.masks.iter().flatten().enumerate() {
                    write_tensor(&dir.join(format!("mask_{i:02}")), vlmfp::imgproc::PixelSlice::U8(m), &[e, e])
                        .map_err(data)?;
                }
            }
            let stages: BTreeMap<&str, f64> = pre.stages.iter().map(|s| (s.stage.as_str(), s.ns as f64 / 1e6)).collect();
            let summary = json!({
                "source": [pre.source_width, pre.source_height],
                "plan": pre.plan,
                "tiles": pre.tiles.len(),
                "dtype": pre.tiles.elem(),
                "stages_ms": stages,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Cmd::Boxcodec { direction, format, input, bins, scale } => {
            let out = match (direction, format) {
                (Direction::Encode, BoxFormat::Loc) => {
                    let g = grid(bins)?;
                    loc_ids_to_text(&encode_box_loc(&parse_coords(&input)?, &g).map_err(data)?, &g).map_err(data)?
                }
                (Direction::Encode, BoxFormat::Text) => encode_box_text(&parse_coords(&input)?, scale),
                (Direction::Decode, BoxFormat::Loc) => {
                    let g = grid(bins)?;
                    let b = decode_box_loc(&parse_loc_text(&input, &g).map_err(data)?, &g).map_err(data)?;
                    serde_json::to_string(&b).expect("box serializes")
                }
                (Direction::Decode, BoxFormat::Text) => {
                    serde_json::to_string(&parse_box_text(&input, scale).map_err(data)?).expect("box serializes")
                }
            };
            println!("{out}");
        }
        Cmd::EvalDensecap { pred, gt } => {
            let mut preds = Vec::new();
            for r in load_jsonl(&pred).map_err(data)? {
                preds.extend(r.predictions().map_err(data)?);
            }
            let mut gts = Vec::new();
            for r in load_jsonl(&gt).map_err(data)? {
                gts.extend(r.ground_truths().map_err(data)?);
            }
            let th = DenseCapThresholds::default();
            let map = densecap_map(&preds, &gts, &th).map_err(data)?;
            let mut grid = Vec::new();
            for &t in &th.iou {
                for &s in &th.sim {
                    grid.push(json!({"iou": t, "sim": s, "ap": average_precision(&preds, &gts, t, s).map_err(data)?}));
                }
            }
            let out = json!({"map": map, "predictions": preds.len(), "ground_truth": gts.len(), "ap": grid});
            println!("{}", serde_json::to_string_pretty(&out).expect("result serializes"));
        }
        Cmd::Profile { folded, run } => {
            let (cfg, m) = load(&run)?;
            let (report, spans) = bench::run_workload_with_spans(&m, &cfg)?;
            write(&folded, &export_folded(&spans))?;
            print!("{}", report.to_markdown());
        }
        Cmd::GenCorpus { out, count, seed } => {
            let spec = CorpusSpec { count, seed, ..CorpusSpec::default() };
            let manifest = generate_corpus(&out, &spec)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vlmfp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
