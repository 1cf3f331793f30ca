//! End-to-end orchestration: preprocessing into the tensor cache, model
//! training, feature extraction, detector fitting, detection, and
//! reporting. Each stage is a plain function so the CLI stays thin and
//! tests can drive the whole path in-process.

use crate::aggregate;
use crate::cache::{
    capture_id_for, CacheError, CaptureWindows, EdgeBlock, FeatureIndex, FeatureSet, FeatureWindow,
    TensorCache, WindowBlock,
};
use crate::checkpoint::{self, CheckpointError};
use crate::detect::{
    fit_detector, DetectorError, DetectorKind, DetectorOptions, FittedDetector, Level,
};
use crate::eval::{self, LabeledVerdict, NORMAL_SCENARIO};
use crate::graph;
use crate::packet::{PacketVector, Schema, SchemaKind};
use crate::pcap::{self, PcapError};
use crate::synth::{labels_path_for, CaptureLabels};
use crate::transformer::{
    self, EncodeError, LossSpec, TrainError, TrainSettings, TransformerConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(
        "capture {capture} window {window} is labeled {scenario}; \
         training expects normal traffic (pass --allow-mixed to override)"
    )]
    MixedLabels { capture: String, window: usize, scenario: String },
    #[error("labels for capture {capture} do not line up with the cache: {reason}")]
    LabelMismatch { capture: String, reason: String },
    #[error("model feature width {model} does not match cache feature width {cache}")]
    SchemaWidthMismatch { model: usize, cache: usize },
    #[error("no detector checkpoint for level {0}; fit it first")]
    MissingDetector(Level),
    #[error("cache has no extracted features; run extract first")]
    NoFeatures,
    #[error("verdict file malformed: {0}")]
    BadVerdicts(String),
    #[error("two inputs map to the same capture id {0}")]
    DuplicateCapture(String),
}

// ---- preprocessing ----------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct PreprocessConfig {
    pub schema: SchemaKind,
    pub window_len: f64,
    pub stride: f64,
    pub workers: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { schema: SchemaKind::Tcp, window_len: 30.0, stride: 30.0, workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureReport {
    pub id: String,
    pub windows: usize,
    pub rows: u64,
    /// True when the manifest already held this capture and nothing was
    /// recomputed.
    pub skipped: bool,
}

struct WindowDraft {
    index: usize,
    start: f64,
    end: f64,
    packets: usize,
    self_pairs: usize,
    nodes: Vec<String>,
    /// (lower endpoint, upper endpoint, encoded rows)
    edges: Vec<(String, String, Vec<PacketVector>)>,
}

fn read_labels_sidecar(pcap_path: &Path) -> Result<Option<CaptureLabels>, PipelineError> {
    let path = labels_path_for(pcap_path);
    if !path.exists() {
        return Ok(None);
    }
    let labels: CaptureLabels = serde_json::from_reader(std::fs::File::open(&path)?)?;
    Ok(Some(labels))
}

/// Run the staged preproceessing over each capture: windowing, per-window
/// graph dissection, feature encoding. Windows are processed in parallel
/// and committed in index order, so the cache bytes do not depend on the
/// worker count. Captures already complete in the cache are skipped.
pub fn preprocess(
    pcaps: &[PathBuf],
    cache_dir: &Path,
    cfg: &PreprocessConfig,
) -> Result<Vec<CaptureReport>, PipelineError> {
    assert!(cfg.workers >= 1, "worker_count must be >= 1");
    let mut cache = TensorCache::create_or_open(cache_dir, cfg.schema, cfg.window_len, cfg.stride)?;
    let schema = cache.schema();

    let mut seen = BTreeSet::new();
    for path in pcaps {
        let id = capture_id_for(path);
        if !seen.insert(id.clone()) {
            return Err(PipelineError::DuplicateCapture(id));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Io(std::io::Error::other(e)))?;

    let mut reports = Vec::with_capacity(pcaps.len());
    for path in pcaps {
        let id = capture_id_for(path);
        if cache.has_complete_capture(&id) {
            let entry = &cache.manifest.captures[&id];
            reports.push(CaptureReport {
                id,
                windows: entry.windows,
                rows: entry.rows,
                skipped: true,
            });
            continue;
        }

        let capture = pcap::read_pcap(path)?;
        let labels = read_labels_sidecar(path)?;
        let packets: Vec<Arc<_>> = capture.packets.into_iter().map(Arc::new).collect();
        let start_time = packets.first().map(|p| p.timestamp).unwrap_or(0.0);
        let windows = graph::roll_windows(&packets, cfg.window_len, cfg.stride);

        // stages 2+3 fan out per window; the commit below restores order
        let drafts: Vec<WindowDraft> = pool.install(|| {
            windows
                .par_iter()
                .map(|w| {
                    let g = graph::build_graph_capped(w, usize::MAX);
                    let edges = g
                        .edges
                        .iter()
                        .map(|(key, seq)| {
                            (key.0.to_string(), key.1.to_string(), aggregate::edge_rows(seq, &schema))
                        })
                        .collect();
                    WindowDraft {
                        index: w.window_index,
                        start: w.start_time,
                        end: w.end_time,
                        packets: w.packets.len(),
                        self_pairs: g.self_pairs_dropped,
                        nodes: g.nodes.iter().map(ToString::to_string).collect(),
                        edges,
                    }
                })
                .collect()
        });

        let scenarios: Option<Vec<String>> = match &labels {
            None => None,
            Some(l) => {
                if l.window_seconds != cfg.window_len || l.stride_seconds != cfg.stride {
                    return Err(PipelineError::LabelMismatch {
                        capture: id,
                        reason: format!(
                            "labels use window={}/stride={}, cache uses {}/{}",
                            l.window_seconds, l.stride_seconds, cfg.window_len, cfg.stride
                        ),
                    });
                }
                if l.windows.len() != drafts.len() {
                    return Err(PipelineError::LabelMismatch {
                        capture: id,
                        reason: format!(
                            "labels cover {} windows, capture yields {}",
                            l.windows.len(),
                            drafts.len()
                        ),
                    });
                }
                Some(l.windows.clone())
            }
        };

        // single committer: assign row offsets in window-index order
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut blocks = Vec::with_capacity(drafts.len());
        for d in drafts {
            let mut edge_blocks = Vec::with_capacity(d.edges.len());
            for (a, b, erows) in d.edges {
                let offset = rows.len() as u64;
                let n = erows.len() as u32;
                rows.extend(erows.into_iter().map(|pv| pv.values));
                edge_blocks.push(EdgeBlock { a, b, row_offset: offset, rows: n });
            }
            blocks.push(WindowBlock {
                index: d.index,
                start: d.start,
                end: d.end,
                scenario: scenarios.as_ref().map(|s| s[d.index].clone()),
                packets: d.packets,
                self_pairs: d.self_pairs,
                nodes: d.nodes,
                edges: edge_blocks,
            });
        }
        let n_windows = blocks.len();
        let n_rows = rows.len() as u64;
        let windows_file =
            CaptureWindows { capture: id.clone(), start_time, windows: blocks };
        cache.begin_capture(&id)?;
        cache.commit_capture(
            &id,
            &path.display().to_string(),
            &windows_file,
            &rows,
            labels.is_some(),
        )?;
        reports.push(CaptureReport { id, windows: n_windows, rows: n_rows, skipped: false });
    }
    Ok(reports)
}

// ---- cached-sequence assembly ------------------------------------------

fn delta_column(schema: &Schema) -> usize {
    let offsets = schema.channel_offsets();
    schema
        .channels
        .iter()
        .zip(&offsets)
        .find(|(c, _)| c.name == "delta time")
        .map(|(_, &o)| o)
        .expect("schema has a delta time channel")
}

/// Rebuild an edge's model input from cached rows: keep the most recent
/// `max_seq_len` rows and zero the first kept row's inter-packet gap,
/// matching how live aggregation trims long edges.
fn sequence_from_rows(
    rows: &[Vec<f64>],
    max_seq_len: usize,
    delta_col: usize,
) -> Vec<PacketVector> {
    let keep = rows.len().min(max_seq_len);
    let skip = rows.len() - keep;
    let mut seq: Vec<PacketVector> = rows[skip..]
        .iter()
        .map(|v| PacketVector { values: v.clone(), mask: true })
        .collect();
    if skip > 0 {
        if let Some(first) = seq.first_mut() {
            first.values[delta_col] = 0.0;
        }
    }
    seq
}

// ---- training ----------------------------------------------------------

/// On-disk training configuration (JSON). Every field has a default, so
/// `{}` is a valid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    pub model: TransformerConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            model: TransformerConfig::default(),
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainFileConfig, PipelineError> {
    match path {
        None => Ok(TrainFileConfig::default()),
        Some(p) => Ok(serde_json::from_reader(std::fs::File::open(p)?)?),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub history_path: PathBuf,
    pub loss_history: Vec<f64>,
    pub sequences: usize,
}

/// Train the sequence model on every cached edge sequence of length >= 2.
/// Refuses attack-labeled windows unless `allow_mixed` is set.
pub fn train_model(
    cache_dir: &Path,
    model_out: &Path,
    file_config: &TrainFileConfig,
    seed: u64,
    allow_mixed: bool,
) -> Result<TrainOutcome, PipelineError> {
    let cache = TensorCache::open(cache_dir)?;
    let schema = cache.schema();
    let delta_col = delta_column(&schema);
    let max_seq = file_config.model.max_seq_len;

    let mut dataset: Vec<(Vec<PacketVector>, Vec<PacketVector>)> = Vec::new();
    let ids: Vec<String> = cache.manifest.captures.keys().cloned().collect();
    for id in &ids {
        let wf = cache.read_windows(id)?;
        let rows = cache.read_rows(id)?;
        for wb in &wf.windows {
            if let Some(s) = &wb.scenario {
                if s != NORMAL_SCENARIO && !allow_mixed {
                    return Err(PipelineError::MixedLabels {
                        capture: id.clone(),
                        window: wb.index,
                        scenario: s.clone(),
                    });
                }
            }
            for e in &wb.edges {
                let span =
                    &rows[e.row_offset as usize..e.row_offset as usize + e.rows as usize];
                let seq = sequence_from_rows(span, max_seq, delta_col);
                if seq.len() >= 2 {
                    let (observed, future) =
                        graph::split_sequence(&seq).expect("length checked");
                    dataset.push((observed, future));
                }
            }
        }
    }

    let spec = LossSpec::from_schema(&schema);
    let settings = TrainSettings {
        learning_rate: file_config.learning_rate,
        batch_size: file_config.batch_size,
        epochs: file_config.epochs,
        seed,
    };
    let n_sequences = dataset.len();
    let (params, history) =
        transformer::train(&dataset, file_config.model, settings, &spec, schema.total_width())?;
    checkpoint::save_model(model_out, &params)?;
    let history_path = model_out.with_extension("loss.json");
    serde_json::to_writer_pretty(std::fs::File::create(&history_path)?, &history)?;
    Ok(TrainOutcome {
        model_path: model_out.to_path_buf(),
        history_path,
        loss_history: history,
        sequences: n_sequences,
    })
}

// ---- feature extraction -------------------------------------------------

/// Short content digest of a checkpoint file, used to version feature
/// blocks in the cache.
pub fn model_id_for(path: &Path) -> Result<String, PipelineError> {
    let digest = Sha256::digest(std::fs::read(path)?);
    let mut hex = String::with_capacity(12);
    for byte in &digest[..6] {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

#[derive(Clone, Debug)]
pub struct ExtractOutcome {
    pub model_id: String,
    pub captures: usize,
    pub windows: usize,
    /// Captures whose feature blocks were newly written (the rest already
    /// existed byte-identically).
    pub newly_written: usize,
}

struct WindowFeatDraft {
    index: usize,
    scenario: Option<String>,
    global: Vec<f64>,
    nodes: BTreeMap<String, Vec<f64>>,
    edges: BTreeMap<String, Vec<f64>>,
}

/// Encode every cached edge sequence and aggregate per window: edge
/// features are summed latent rows, node features sum incident edges,
/// the global feature sums all edges.
pub fn extract_features(
    cache_dir: &Path,
    model_path: &Path,
) -> Result<ExtractOutcome, PipelineError> {
    let mut cache = TensorCache::open(cache_dir)?;
    let params = checkpoint::load_model(model_path)?;
    if params.feature_width != cache.manifest.feature_width {
        return Err(PipelineError::SchemaWidthMismatch {
            model: params.feature_width,
            cache: cache.manifest.feature_width,
        });
    }
    let model_id = model_id_for(model_path)?;
    let schema = cache.schema();
    let delta_col = delta_column(&schema);
    let d = params.config.d_z;
    let max_seq = params.config.max_seq_len;

    let ids: Vec<String> = cache.manifest.captures.keys().cloned().collect();
    let mut windows_total = 0;
    let mut newly_written = 0;
    for id in &ids {
        let wf = cache.read_windows(id)?;
        let rows = cache.read_rows(id)?;

        let drafts: Vec<Result<WindowFeatDraft, EncodeError>> = wf
            .windows
            .par_iter()
            .map(|wb| {
                let mut edges: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for e in &wb.edges {
                    let span =
                        &rows[e.row_offset as usize..e.row_offset as usize + e.rows as usize];
                    let seq = sequence_from_rows(span, max_seq, delta_col);
                    if seq.is_empty() {
                        continue;
                    }
                    let enc = params.encode(&seq)?;
                    edges.insert(format!("{}|{}", e.a, e.b), aggregate::sum_unmasked(&enc));
                }
                let mut nodes: BTreeMap<String, Vec<f64>> =
                    wb.nodes.iter().map(|n| (n.clone(), vec![0.0; d])).collect();
                let mut global = vec![0.0; d];
                for (key, feat) in &edges {
                    for endpoint in key.split('|') {
                        if let Some(acc) = nodes.get_mut(endpoint) {
                            for (a, v) in acc.iter_mut().zip(feat) {
                                *a += v;
                            }
                        }
                    }
                    for (a, v) in global.iter_mut().zip(feat) {
                        *a += v;
                    }
                }
                Ok(WindowFeatDraft {
                    index: wb.index,
                    scenario: wb.scenario.clone(),
                    global,
                    nodes,
                    edges,
                })
            })
            .collect();

        let mut feat_rows: Vec<Vec<f64>> = Vec::new();
        let mut feat_windows = Vec::with_capacity(drafts.len());
        for draft in drafts {
            let draft = draft?;
            let global_row = feat_rows.len() as u64;
            feat_rows.push(draft.global);
            let mut node_rows = BTreeMap::new();
            for (name, row) in draft.nodes {
                node_rows.insert(name, feat_rows.len() as u64);
                feat_rows.push(row);
            }
            let mut edge_rows = BTreeMap::new();
            for (name, row) in draft.edges {
                edge_rows.insert(name, feat_rows.len() as u64);
                feat_rows.push(row);
            }
            feat_windows.push(FeatureWindow {
                index: draft.index,
                scenario: draft.scenario,
                global_row,
                node_rows,
                edge_rows,
            });
            windows_total += 1;
        }
        let set = FeatureSet {
            index: FeatureIndex { model_id: model_id.clone(), width: d, windows: feat_windows },
            rows: feat_rows,
        };
        if cache.write_features(id, &set)? {
            newly_written += 1;
        }
    }
    Ok(ExtractOutcome { model_id, captures: ids.len(), windows: windows_total, newly_written })
}

// ---- detector fitting ----------------------------------------------------

#[derive(Clone, Debug)]
pub struct FitReport {
    pub level: Level,
    pub kind: DetectorKind,
    pub train_rows: usize,
    pub calib_rows: usize,
    pub threshold: f64,
    pub path: PathBuf,
}

/// Gather feature rows per level from windows labeled normal (or
/// unlabeled), preserving capture and window order.
fn normal_rows_by_level(
    cache: &TensorCache,
    model_id: &str,
) -> Result<BTreeMap<Level, Vec<Vec<f64>>>, PipelineError> {
    let mut by_level: BTreeMap<Level, Vec<Vec<f64>>> = BTreeMap::new();
    for level in [Level::Global, Level::Node, Level::Edge] {
        by_level.insert(level, Vec::new());
    }
    for id in cache.manifest.captures.keys() {
        let fs = cache.read_features(id, model_id)?;
        for fw in &fs.index.windows {
            if fw.scenario.as_deref().is_some_and(|s| s != NORMAL_SCENARIO) {
                continue;
            }
            by_level.get_mut(&Level::Global).unwrap().push(fs.rows[fw.global_row as usize].clone());
            for &r in fw.node_rows.values() {
                by_level.get_mut(&Level::Node).unwrap().push(fs.rows[r as usize].clone());
            }
            for &r in fw.edge_rows.values() {
                by_level.get_mut(&Level::Edge).unwrap().push(fs.rows[r as usize].clone());
            }
        }
    }
    Ok(by_level)
}

/// Fit one detector per level on the cache's normal windows, calibrating
/// each threshold on the most recent quarter of the rows.
pub fn fit_detectors(
    cache_dir: &Path,
    out_dir: &Path,
    kind: DetectorKind,
    levels: &[Level],
    target_fpr: Option<f64>,
) -> Result<Vec<FitReport>, PipelineError> {
    let cache = TensorCache::open(cache_dir)?;
    let model_id = cache.manifest.features_model.clone().ok_or(PipelineError::NoFeatures)?;
    let by_level = normal_rows_by_level(&cache, &model_id)?;

    std::fs::create_dir_all(out_dir)?;
    let mut reports = Vec::with_capacity(levels.len());
    for &level in levels {
        let rows = &by_level[&level];
        let split = rows.len() * 3 / 4;
        let (train, calib) = rows.split_at(split);
        let mut opts = DetectorOptions::for_kind(kind);
        if let Some(f) = target_fpr {
            opts.target_fpr = f;
        }
        let det = fit_detector(kind, train, calib, &opts)?;
        let path = out_dir.join(format!("{level}.nsck"));
        checkpoint::save_detector(&path, &det)?;
        reports.push(FitReport {
            level,
            kind,
            train_rows: train.len(),
            calib_rows: calib.len(),
            threshold: det.threshold,
            path,
        });
    }
    Ok(reports)
}

// ---- detection ------------------------------------------------------------

pub const VERDICT_HEADER: &str = "capture,window,level,entity,score,verdict";

#[derive(Clone, Debug, PartialEq)]
pub struct VerdictRecord {
    pub capture: String,
    pub window: usize,
    pub level: Level,
    pub entity: String,
    pub score: f64,
    pub anomalous: bool,
}

#[derive(Clone, Debug)]
pub struct DetectOutcome {
    pub verdicts_path: PathBuf,
    pub records: usize,
    pub anomalies: usize,
}

/// Score every cached feature row with the fitted detectors and write the
/// verdict stream, sorted by (capture, window, level, entity).
pub fn detect(
    cache_dir: &Path,
    detectors_dir: &Path,
    levels: &[Level],
    out_path: &Path,
) -> Result<DetectOutcome, PipelineError> {
    let cache = TensorCache::open(cache_dir)?;
    let model_id = cache.manifest.features_model.clone().ok_or(PipelineError::NoFeatures)?;

    let mut sorted_levels: Vec<Level> = levels.to_vec();
    sorted_levels.sort();
    sorted_levels.dedup();
    let mut detectors: BTreeMap<Level, FittedDetector> = BTreeMap::new();
    for &level in &sorted_levels {
        let path = detectors_dir.join(format!("{level}.nsck"));
        if !path.exists() {
            return Err(PipelineError::MissingDetector(level));
        }
        detectors.insert(level, checkpoint::load_detector(&path)?);
    }

    let mut out = String::from(VERDICT_HEADER);
    out.push('\n');
    let mut records = 0usize;
    let mut anomalies = 0usize;
    for id in cache.manifest.captures.keys() {
        let fs = cache.read_features(id, &model_id)?;
        for fw in &fs.index.windows {
            for (&level, det) in &detectors {
                let entities: Vec<(&str, u64)> = match level {
                    Level::Global => vec![("global", fw.global_row)],
                    Level::Node =>
                        fw.node_rows.iter().map(|(n, &r)| (n.as_str(), r)).collect(),
                    Level::Edge =>
                        fw.edge_rows.iter().map(|(n, &r)| (n.as_str(), r)).collect(),
                };
                for (entity, row_ix) in entities {
                    let score = det.score(&fs.rows[row_ix as usize])?;
                    let flagged = det.is_anomalous(score);
                    records += 1;
                    anomalies += flagged as usize;
                    out.push_str(&format!(
                        "{id},{},{level},{entity},{score},{}\n",
                        fw.index,
                        if flagged { "anomaly" } else { "normal" }
                    ));
                }
            }
        }
    }
    std::fs::write(out_path, out)?;
    Ok(DetectOutcome { verdicts_path: out_path.to_path_buf(), records, anomalies })
}

pub fn parse_verdicts(path: &Path) -> Result<Vec<VerdictRecord>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == VERDICT_HEADER => {}
        other => {
            return Err(PipelineError::BadVerdicts(format!(
                "unexpected header {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(PipelineError::BadVerdicts(format!(
                "line {}: expected 6 fields, got {}",
                no + 2,
                fields.len()
            )));
        }
        let parse = |what: &str, e: String| PipelineError::BadVerdicts(format!(
            "line {}: bad {what}: {e}", no + 2
        ));
        records.push(VerdictRecord {
            capture: fields[0].to_string(),
            window: fields[1].parse().map_err(|e: std::num::ParseIntError| {
                parse("window", e.to_string())
            })?,
            level: fields[2]
                .parse()
                .map_err(|e: crate::detect::UnknownLevel| parse("level", e.to_string()))?,
            entity: fields[3].to_string(),
            score: fields[4].parse().map_err(|e: std::num::ParseFloatError| {
                parse("score", e.to_string())
            })?,
            anomalous: match fields[5] {
                "anomaly" => true,
                "normal" => false,
                other => return Err(parse("verdict", format!("{other:?}"))),
            },
        });
    }
    Ok(records)
}

// ---- reporting -------------------------------------------------------------

pub const UNLABELED_SCENARIO: &str = "unlabeled";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportBundle {
    pub labeled: bool,
    pub fpr_train: Option<f64>,
    pub fpr_test: Option<f64>,
    pub adr_overall: Option<f64>,
    pub adr_per_scenario: BTreeMap<String, f64>,
    /// scenario -> entity -> anomaly count, for nodes and edges.
    pub node_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub edge_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub records: usize,
}

fn counts_csv(counts: &BTreeMap<String, BTreeMap<String, usize>>) -> String {
    let mut out = String::from("scenario,entity,count\n");
    for (scenario, entities) in counts {
        for (entity, count) in entities {
            out.push_str(&format!("{scenario},{entity},{count}\n"));
        }
    }
    out
}

/// Join verdicts with ground-truth labels (when given), compute rates and
/// drill-down tables, and write the bundle under `out_dir`: report.json,
/// node_counts.csv, edge_counts.csv, and projection.csv when a cache is
/// available for the global feature rows.
pub fn report(
    verdicts_path: &Path,
    labels: &[(String, PathBuf)],
    cache_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<ReportBundle, PipelineError> {
    let records = parse_verdicts(verdicts_path)?;
    let mut label_map: BTreeMap<String, CaptureLabels> = BTreeMap::new();
    for (capture, path) in labels {
        let l: CaptureLabels = serde_json::from_reader(std::fs::File::open(path)?)?;
        label_map.insert(capture.clone(), l);
    }
    let labeled = !label_map.is_empty();

    let scenario_of = |capture: &str, window: usize| -> String {
        label_map
            .get(capture)
            .and_then(|l| l.windows.get(window))
            .cloned()
            .unwrap_or_else(|| UNLABELED_SCENARIO.to_string())
    };
    let annotated: Vec<(String, LabeledVerdict)> = records
        .iter()
        .map(|r| {
            (
                r.capture.clone(),
                LabeledVerdict {
                    window_index: r.window,
                    level: r.level,
                    entity: r.entity.clone(),
                    score: r.score,
                    anomalous: r.anomalous,
                    scenario: scenario_of(&r.capture, r.window),
                },
            )
        })
        .collect();
    let items: Vec<LabeledVerdict> = annotated.iter().map(|(_, v)| v.clone()).collect();

    let (fpr_train, fpr_test, adr_overall, adr_per_scenario) = if labeled {
        let is_normal_capture = |capture: &str| {
            label_map.get(capture).map(|l| l.scenario == NORMAL_SCENARIO).unwrap_or(false)
        };
        let globals: Vec<&LabeledVerdict> = annotated
            .iter()
            .filter(|(_, v)| v.level == Level::Global)
            .map(|(_, v)| v)
            .collect();
        let fpr_train = eval::flagged_fraction(
            annotated
                .iter()
                .filter(|(c, v)| v.level == Level::Global && is_normal_capture(c))
                .map(|(_, v)| v),
        );
        let fpr_test = eval::flagged_fraction(
            annotated
                .iter()
                .filter(|(c, v)| {
                    v.level == Level::Global
                        && !is_normal_capture(c)
                        && v.scenario == NORMAL_SCENARIO
                })
                .map(|(_, v)| v),
        );
        let adr = eval::flagged_fraction(
            globals.iter().copied().filter(|v| {
                v.scenario != NORMAL_SCENARIO && v.scenario != UNLABELED_SCENARIO
            }),
        );
        let global_items: Vec<LabeledVerdict> = globals.into_iter().cloned().collect();
        let (_, _, per_scenario) = eval::detection_rates(&global_items);
        (Some(fpr_train), Some(fpr_test), Some(adr), per_scenario)
    } else {
        (None, None, None, BTreeMap::new())
    };

    let node_counts = eval::entity_counts(&items, Level::Node);
    let edge_counts = eval::entity_counts(&items, Level::Edge);

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("node_counts.csv"), counts_csv(&node_counts))?;
    std::fs::write(out_dir.join("edge_counts.csv"), counts_csv(&edge_counts))?;

    if let Some(dir) = cache_dir {
        let cache = TensorCache::open(dir)?;
        let model_id =
            cache.manifest.features_model.clone().ok_or(PipelineError::NoFeatures)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut meta: Vec<(usize, String)> = Vec::new();
        for id in cache.manifest.captures.keys() {
            let fs = cache.read_features(id, &model_id)?;
            for fw in &fs.index.windows {
                rows.push(fs.rows[fw.global_row as usize].clone());
                let scenario = if label_map.contains_key(id) {
                    scenario_of(id, fw.index)
                } else {
                    fw.scenario.clone().unwrap_or_else(|| UNLABELED_SCENARIO.to_string())
                };
                meta.push((fw.index, scenario));
            }
        }
        let (points, _fallback) = eval::project_rows(&rows);
        let csv_rows: Vec<(usize, f64, f64, String)> = meta
            .into_iter()
            .zip(points)
            .map(|((ix, scenario), (x, y))| (ix, x, y, scenario))
            .collect();
        std::fs::write(out_dir.join("projection.csv"), eval::projection_csv(&csv_rows))?;
    }

    let bundle = ReportBundle {
        labeled,
        fpr_train,
        fpr_test,
        adr_overall,
        adr_per_scenario,
        node_counts,
        edge_counts,
        records: records.len(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(out_dir.join("report.json"))?, &bundle)?;
    Ok(bundle)
}
