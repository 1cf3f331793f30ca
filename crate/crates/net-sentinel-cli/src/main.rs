//! Command-line front end for the net-sentinel pipeline. Every subcommand
//! is a thin wrapper over a library function; state between commands lives
//! in the tensor cache directory (`--cache` or `NET_SENTINEL_CACHE`).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use net_sentinel::cache::resolve_cache_dir;
use net_sentinel::detect::{DetectorKind, Level};
use net_sentinel::packet::SchemaKind;
use net_sentinel::pipeline::{self, PreprocessConfig};
use net_sentinel::synth::{self, Scenario, SynthConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "net-sentinel", version, about = "Self-supervised anomaly detection for ICS network traffic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dissect packet captures into the windowed tensor cache
    Preprocess(PreprocessArgs),
    /// Train the sequence model on cached traffic
    Train(TrainArgs),
    /// Encode cached windows into edge/node/global feature rows
    Extract(ExtractArgs),
    /// Fit anomaly detectors on extracted features
    FitDetectors(FitArgs),
    /// Score cached features and write a verdict stream
    Detect(DetectArgs),
    /// Summarize verdicts into rates, drill-down tables, and a 2-D projection
    Report(ReportArgs),
    /// Generate a deterministic synthetic substation capture
    Synth(SynthArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input capture files (repeatable)
    #[arg(long = "pcap", required = true, num_args = 1..)]
    pcaps: Vec<PathBuf>,
    /// Feature schema: tcp or byte
    #[arg(long, default_value = "tcp")]
    schema: SchemaKind,
    /// Window length in seconds
    #[arg(long, default_value_t = 30.0)]
    window: f64,
    /// Window stride in seconds
    #[arg(long, default_value_t = 30.0)]
    stride: f64,
    /// Worker threads (output is identical for any value)
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Cache directory (falls back to NET_SENTINEL_CACHE)
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cache: Option<PathBuf>,
    /// JSON training config; omitted fields use defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed for init, batching, and dropout
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the model checkpoint
    #[arg(long, default_value = "model.nsck")]
    model_out: PathBuf,
    /// Train even when the cache contains attack-labeled windows
    #[arg(long)]
    allow_mixed: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Model checkpoint to encode with
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Aggregation levels to fit, comma separated
    #[arg(long, value_delimiter = ',', default_value = "global,node,edge")]
    levels: Vec<Level>,
    /// Detector family: lof, ocsvm, or ae
    #[arg(long, default_value = "lof")]
    detector: DetectorKind,
    /// Calibration false-positive budget (defaults per detector)
    #[arg(long)]
    target_fpr: Option<f64>,
    /// Directory for the detector checkpoints
    #[arg(long, default_value = "detectors")]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Directory holding <level>.nsck detector checkpoints
    #[arg(long)]
    detectors: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "global,node,edge")]
    levels: Vec<Level>,
    /// Output verdict CSV
    #[arg(long, default_value = "verdicts.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Verdict CSV produced by `detect`
    #[arg(long)]
    verdicts: PathBuf,
    /// Ground-truth label sidecars, repeatable; either PATH (capture id
    /// inferred from the file name) or CAPTURE=PATH
    #[arg(long = "labels")]
    labels: Vec<String>,
    /// Cache directory; enables the 2-D projection CSV
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory for report.json and the CSV tables
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// normal, flood, scan, failed_auth, or setting_change
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem or .pcap path; a labels sidecar is written next to it
    #[arg(long)]
    out: PathBuf,
    /// Capture duration in seconds
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
    /// Attack onset in seconds from capture start
    #[arg(long, default_value_t = 60.0)]
    attack_start: f64,
    /// Attack duration in seconds
    #[arg(long, default_value_t = 120.0)]
    attack_duration: f64,
}

/// `CAPTURE=PATH` or a bare sidecar path like `flood_0.labels.json`,
/// whose capture id is the stem without the `.labels` suffix.
fn parse_labels_arg(arg: &str) -> Result<(String, PathBuf)> {
    if let Some((capture, path)) = arg.split_once('=') {
        if capture.is_empty() {
            bail!("empty capture id in --labels {arg}");
        }
        return Ok((capture.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(arg);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("cannot infer a capture id from --labels {arg}"))?;
    let capture = stem.strip_suffix(".labels").unwrap_or(stem);
    Ok((capture.to_string(), path))
}

fn cache_dir(cli: Option<PathBuf>) -> Result<PathBuf> {
    Ok(resolve_cache_dir(cli)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(args) => {
            let dir = cache_dir(args.cache)?;
            let cfg = PreprocessConfig {
                schema: args.schema,
                window_len: args.window,
                stride: args.stride,
                workers: args.workers.max(1),
            };
            let reports = pipeline::preprocess(&args.pcaps, &dir, &cfg)?;
            for r in reports {
                if r.skipped {
                    println!("{}: already cached ({} windows, {} rows)", r.id, r.windows, r.rows);
                } else {
                    println!("{}: cached {} windows, {} packet rows", r.id, r.windows, r.rows);
                }
            }
            println!("cache: {}", dir.display());
        }
        Command::Train(args) => {
            let dir = cache_dir(args.cache)?;
            let config = pipeline::load_train_config(args.config.as_deref())?;
            let outcome =
                pipeline::train_model(&dir, &args.model_out, &config, args.seed, args.allow_mixed)?;
            println!(
                "trained on {} sequences for {} epochs",
                outcome.sequences,
                outcome.loss_history.len()
            );
            if let (Some(first), Some(last)) =
                (outcome.loss_history.first(), outcome.loss_history.last())
            {
                println!("loss: {first:.6} -> {last:.6}");
            }
            println!("model: {}", outcome.model_path.display());
            println!("loss history: {}", outcome.history_path.display());
        }
        Command::Extract(args) => {
            let dir = cache_dir(args.cache)?;
            let outcome = pipeline::extract_features(&dir, &args.model)?;
            println!(
                "model {}: {} windows across {} captures ({} newly written)",
                outcome.model_id, outcome.windows, outcome.captures, outcome.newly_written
            );
        }
        Command::FitDetectors(args) => {
            let dir = cache_dir(args.cache)?;
            let reports = pipeline::fit_detectors(
                &dir,
                &args.out,
                args.detector,
                &args.levels,
                args.target_fpr,
            )?;
            for r in reports {
                println!(
                    "{} {}: {} train rows, {} calibration rows, threshold {:.6} -> {}",
                    r.kind,
                    r.level,
                    r.train_rows,
                    r.calib_rows,
                    r.threshold,
                    r.path.display()
                );
            }
        }
        Command::Detect(args) => {
            let dir = cache_dir(args.cache)?;
            let outcome = pipeline::detect(&dir, &args.detectors, &args.levels, &args.out)?;
            println!(
                "{} verdicts ({} anomalies) -> {}",
                outcome.records,
                outcome.anomalies,
                outcome.verdicts_path.display()
            );
        }
        Command::Report(args) => {
            let labels = args
                .labels
                .iter()
                .map(|s| parse_labels_arg(s))
                .collect::<Result<Vec<_>>>()?;
            // the cache is optional here: without one the projection is skipped
            let cache = match args.cache {
                Some(dir) => Some(dir),
                None => resolve_cache_dir(None).ok(),
            };
            let bundle =
                pipeline::report(&args.verdicts, &labels, cache.as_deref(), &args.out)?;
            if bundle.labeled {
                let pct = |v: Option<f64>| {
                    v.map(|f| format!("{:.2}%", f * 100.0)).unwrap_or_else(|| "n/a".into())
                };
                println!("false positive rate (train captures): {}", pct(bundle.fpr_train));
                println!("false positive rate (attack captures): {}", pct(bundle.fpr_test));
                println!("attack detection rate: {}", pct(bundle.adr_overall));
                for (scenario, rate) in &bundle.adr_per_scenario {
                    println!("  {scenario}: {:.2}%", rate * 100.0);
                }
            } else {
                println!("no labels given; rates omitted");
            }
            println!("{} verdicts summarized -> {}", bundle.records, args.out.display());
        }
        Command::Synth(args) => {
            let mut cfg = SynthConfig::new(args.scenario, args.seed);
            cfg.duration_s = args.duration;
            cfg.attack_start_s = args.attack_start;
            cfg.attack_duration_s = args.attack_duration;
            let output = synth::generate(&cfg);
            let stem: PathBuf = if args.out.extension().is_some_and(|e| e == "pcap") {
                args.out.with_extension("")
            } else {
                args.out.clone()
            };
            let (pcap_path, labels_path) = synth::write_capture(&stem, &output)?;
            println!(
                "{}: {} frames -> {}",
                args.scenario,
                output.frames.len(),
                pcap_path.display()
            );
            println!("labels: {}", labels_path.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
