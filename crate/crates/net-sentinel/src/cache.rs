//! On-disk tensor cache filled by preprocessing and read by every later
//! stage.
//!
//! Layout under the cache root:
//!
//! ```text
//! manifest.json                 schema, windowing, capture registry
//! partial.marker                present while a capture is being written
//! <capture>/windows.json        per-window metadata incl. row spans
//! <capture>/packets.bin         f32 LE rows, width = schema width
//! <capture>/features_<id>.json  feature index for model <id>
//! <capture>/features_<id>.bin   f32 LE feature rows
//! ```
//!
//! Blocks are immutable once a capture is complete: re-extraction with a
//! different model writes new `features_<id>` blocks instead of touching
//! existing ones.

use crate::packet::{Schema, SchemaKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARTIAL_MARKER: &str = "partial.marker";
pub const CACHE_ENV: &str = "NET_SENTINEL_CACHE";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cache metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no cache manifest under {0}")]
    Missing(PathBuf),
    #[error("no cache directory given (pass --cache or set {CACHE_ENV})")]
    Unspecified,
    #[error("cache is partially written (capture {0}); rerun preprocess to repair it")]
    Partial(String),
    #[error("cache was built with schema {found}, requested {want}")]
    SchemaMismatch { want: String, found: String },
    #[error(
        "cache windowing is window={found_window} stride={found_stride}, \
         requested window={window} stride={stride}"
    )]
    WindowingMismatch { window: f64, stride: f64, found_window: f64, found_stride: f64 },
    #[error("capture {0} is already complete in this cache")]
    CaptureExists(String),
    #[error("cache has no capture {0}")]
    UnknownCapture(String),
    #[error("no features for model {model} on capture {capture}; run extract first")]
    MissingFeatures { capture: String, model: String },
    #[error("corrupt cache: {0}")]
    Corrupt(String),
}

/// Pick the cache directory: explicit flag wins, then the environment.
pub fn resolve_cache_dir(cli: Option<PathBuf>) -> Result<PathBuf, CacheError> {
    resolve_cache_dir_from(cli, std::env::var_os(CACHE_ENV))
}

fn resolve_cache_dir_from(
    cli: Option<PathBuf>,
    env: Option<OsString>,
) -> Result<PathBuf, CacheError> {
    cli.or_else(|| env.filter(|v| !v.is_empty()).map(PathBuf::from))
        .ok_or(CacheError::Unspecified)
}

/// Identifier a capture file gets inside the cache: its sanitized stem.
pub fn capture_id_for(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("capture");
    let id: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if id.is_empty() {
        "capture".into()
    } else {
        id
    }
}

/// Stable digest of a schema's full channel layout.
pub fn schema_hash(schema: &Schema) -> String {
    let canonical = serde_json::to_vec(schema).expect("schema serializes");
    let digest = Sha256::digest(&canonical);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCapture {
    /// Original capture path, informational only.
    pub source: String,
    pub complete: bool,
    pub windows: usize,
    pub rows: u64,
    /// Whether a ground-truth sidecar accompanied the capture.
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub schema_kind: SchemaKind,
    pub schema_hash: String,
    pub feature_width: usize,
    pub window_len: f64,
    pub stride: f64,
    pub captures: BTreeMap<String, ManifestCapture>,
    /// Model id of the most recent feature extraction.
    pub features_model: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeBlock {
    /// Canonical (lower, upper) endpoint addresses.
    pub a: String,
    pub b: String,
    pub row_offset: u64,
    pub rows: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowBlock {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// Ground-truth scenario when the capture came with labels.
    pub scenario: Option<String>,
    /// Dissected packets that fell in the window.
    pub packets: usize,
    /// Self-addressed packets dropped during graph building.
    pub self_pairs: usize,
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureWindows {
    pub capture: String,
    pub start_time: f64,
    pub windows: Vec<WindowBlock>,
}

/// Feature row index for one capture under one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub index: usize,
    pub scenario: Option<String>,
    pub global_row: u64,
    pub node_rows: BTreeMap<String, u64>,
    pub edge_rows: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub model_id: String,
    pub width: usize,
    pub windows: Vec<FeatureWindow>,
}

/// A capture's features, with rows resolved back to vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub index: FeatureIndex,
    pub rows: Vec<Vec<f64>>,
}

pub struct TensorCache {
    dir: PathBuf,
    pub manifest: Manifest,
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CacheError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CacheError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn rows_to_f32_bytes(rows: &[Vec<f64>], width: usize) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(rows.len() * width * 4);
    for row in rows {
        assert_eq!(row.len(), width, "row width mismatch");
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn f32_bytes_to_rows(bytes: &[u8], width: usize) -> Result<Vec<Vec<f64>>, CacheError> {
    if width == 0 || bytes.len() % (width * 4) != 0 {
        return Err(CacheError::Corrupt(format!(
            "row block of {} bytes is not a multiple of row width {}",
            bytes.len(),
            width * 4
        )));
    }
    let n = bytes.len() / (width * 4);
    let mut rows = Vec::with_capacity(n);
    let mut vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for _ in 0..n {
        rows.push(vals.by_ref().take(width).collect());
    }
    Ok(rows)
}

impl TensorCache {
    /// Open an existing cache or initialize an empty one, enforcing that
    /// schema and windowing match what the cache was built with.
    pub fn create_or_open(
        dir: &Path,
        schema_kind: SchemaKind,
        window_len: f64,
        stride: f64,
    ) -> Result<TensorCache, CacheError> {
        assert!(window_len > 0.0 && stride > 0.0);
        let schema = Schema::new(schema_kind);
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let manifest: Manifest = read_json(&manifest_path)?;
            if manifest.schema_hash != schema_hash(&schema) {
                return Err(CacheError::SchemaMismatch {
                    want: schema_kind.to_string(),
                    found: manifest.schema_kind.to_string(),
                });
            }
            if manifest.window_len != window_len || manifest.stride != stride {
                return Err(CacheError::WindowingMismatch {
                    window: window_len,
                    stride,
                    found_window: manifest.window_len,
                    found_stride: manifest.stride,
                });
            }
            return Ok(TensorCache { dir: dir.to_path_buf(), manifest });
        }
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: CACHE_VERSION,
            schema_kind,
            schema_hash: schema_hash(&schema),
            feature_width: schema.total_width(),
            window_len,
            stride,
            captures: BTreeMap::new(),
            features_model: None,
        };
        let cache = TensorCache { dir: dir.to_path_buf(), manifest };
        cache.flush_manifest()?;
        Ok(cache)
    }

    /// Open a cache for reading. Refuses partial caches.
    pub fn open(dir: &Path) -> Result<TensorCache, CacheError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(CacheError::Missing(dir.to_path_buf()));
        }
        let manifest: Manifest = read_json(&manifest_path)?;
        let marker = dir.join(PARTIAL_MARKER);
        if marker.exists() {
            let capture = std::fs::read_to_string(&marker).unwrap_or_default();
            return Err(CacheError::Partial(capture.trim().to_string()));
        }
        if let Some((id, _)) = manifest.captures.iter().find(|(_, c)| !c.complete) {
            return Err(CacheError::Partial(id.clone()));
        }
        Ok(TensorCache { dir: dir.to_path_buf(), manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.manifest.schema_kind)
    }

    fn flush_manifest(&self) -> Result<(), CacheError> {
        write_json_atomic(&self.dir.join(MANIFEST_FILE), &self.manifest)
    }

    fn capture_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    pub fn has_complete_capture(&self, id: &str) -> bool {
        self.manifest.captures.get(id).map(|c| c.complete).unwrap_or(false)
    }

    /// Drop the partial-write marker before streaming a capture's blocks.
    pub fn begin_capture(&mut self, id: &str) -> Result<(), CacheError> {
        if self.has_complete_capture(id) {
            return Err(CacheError::CaptureExists(id.to_string()));
        }
        std::fs::write(self.dir.join(PARTIAL_MARKER), id)?;
        std::fs::create_dir_all(self.capture_dir(id))?;
        Ok(())
    }

    /// Write a capture's blocks and register it as complete.
    pub fn commit_capture(
        &mut self,
        id: &str,
        source: &str,
        windows: &CaptureWindows,
        rows: &[Vec<f64>],
        labeled: bool,
    ) -> Result<(), CacheError> {
        if self.has_complete_capture(id) {
            return Err(CacheError::CaptureExists(id.to_string()));
        }
        let dir = self.capture_dir(id);
        std::fs::create_dir_all(&dir)?;
        let bytes = rows_to_f32_bytes(rows, self.manifest.feature_width);
        std::fs::write(dir.join("packets.bin"), bytes)?;
        write_json_atomic(&dir.join("windows.json"), windows)?;
        self.manifest.captures.insert(
            id.to_string(),
            ManifestCapture {
                source: source.to_string(),
                complete: true,
                windows: windows.windows.len(),
                rows: rows.len() as u64,
                labeled,
            },
        );
        self.flush_manifest()?;
        let marker = self.dir.join(PARTIAL_MARKER);
        if marker.exists() {
            std::fs::remove_file(marker)?;
        }
        Ok(())
    }

    pub fn read_windows(&self, id: &str) -> Result<CaptureWindows, CacheError> {
        if !self.manifest.captures.contains_key(id) {
            return Err(CacheError::UnknownCapture(id.to_string()));
        }
        read_json(&self.capture_dir(id).join("windows.json"))
    }

    /// All packet-vector rows of a capture, in file order.
    pub fn read_rows(&self, id: &str) -> Result<Vec<Vec<f64>>, CacheError> {
        if !self.manifest.captures.contains_key(id) {
            return Err(CacheError::UnknownCapture(id.to_string()));
        }
        let mut bytes = Vec::new();
        File::open(self.capture_dir(id).join("packets.bin"))?.read_to_end(&mut bytes)?;
        f32_bytes_to_rows(&bytes, self.manifest.feature_width)
    }

    /// Persist extracted features for one capture under one model id.
    /// Existing blocks are never rewritten: a second extraction with the
    /// same model must produce identical bytes, anything else errors.
    /// Returns true when new blocks were written.
    pub fn write_features(
        &mut self,
        id: &str,
        features: &FeatureSet,
    ) -> Result<bool, CacheError> {
        if !self.manifest.captures.contains_key(id) {
            return Err(CacheError::UnknownCapture(id.to_string()));
        }
        let dir = self.capture_dir(id);
        let model_id = &features.index.model_id;
        let json_path = dir.join(format!("features_{model_id}.json"));
        let bin_path = dir.join(format!("features_{model_id}.bin"));
        let bytes = rows_to_f32_bytes(&features.rows, features.index.width);
        let wrote = if json_path.exists() && bin_path.exists() {
            let existing: FeatureIndex = read_json(&json_path)?;
            let existing_bytes = std::fs::read(&bin_path)?;
            if existing != features.index || existing_bytes != bytes {
                return Err(CacheError::Corrupt(format!(
                    "feature block {model_id} for capture {id} differs from a re-extraction"
                )));
            }
            false
        } else {
            std::fs::write(&bin_path, &bytes)?;
            write_json_atomic(&json_path, &features.index)?;
            true
        };
        if self.manifest.features_model.as_deref() != Some(model_id) {
            self.manifest.features_model = Some(model_id.clone());
            self.flush_manifest()?;
        }
        Ok(wrote)
    }

    pub fn read_features(&self, id: &str, model_id: &str) -> Result<FeatureSet, CacheError> {
        if !self.manifest.captures.contains_key(id) {
            return Err(CacheError::UnknownCapture(id.to_string()));
        }
        let dir = self.capture_dir(id);
        let json_path = dir.join(format!("features_{model_id}.json"));
        if !json_path.exists() {
            return Err(CacheError::MissingFeatures {
                capture: id.to_string(),
                model: model_id.to_string(),
            });
        }
        let index: FeatureIndex = read_json(&json_path)?;
        let bytes = std::fs::read(dir.join(format!("features_{model_id}.bin")))?;
        let rows = f32_bytes_to_rows(&bytes, index.width)?;
        Ok(FeatureSet { index, rows })
    }
}
