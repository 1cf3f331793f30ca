//! Binary checkpoint container for trained state.
//!
//! Layout: 4-byte magic "NSCK", u32 LE format version, u64 LE metadata
//! length, JSON metadata, then the raw f64 LE payload of every array in
//! metadata order. One format serves both the sequence model and fitted
//! detectors; the `kind` field in the metadata tells them apart.

use crate::autodiff::Mat;
use crate::detect::{
    AeModel, DetectorKind, DetectorModel, FittedDetector, LofModel, OcsvmModel, Standardizer,
};
use crate::transformer::{ModelParams, TransformerConfig};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"NSCK";
pub const VERSION: u32 = 1;

/// Upper bound on the metadata blob; a longer length means a corrupt or
/// hostile file, not a real checkpoint.
const MAX_JSON_LEN: u64 = 64 * 1024 * 1024;
const MAX_ARRAY_ELEMS: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {found}, expected a {expected}")]
    WrongKind { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: TransformerConfig,
    feature_width: usize,
    arrays: Vec<ArrayMeta>,
}

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    kind: String,
    detector: DetectorKind,
    threshold: f64,
    target_fpr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    arrays: Vec<ArrayMeta>,
}

fn write_container<M: Serialize>(
    path: &Path,
    meta: &M,
    arrays: &[&Mat],
) -> Result<(), CheckpointError> {
    let json = serde_json::to_vec(meta)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for m in arrays {
        for v in m.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct RawContainer {
    kind: String,
    json: Vec<u8>,
    arrays: Vec<(String, Mat)>,
}

fn read_container(path: &Path) -> Result<RawContainer, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let json_len = u64::from_le_bytes(b8);
    if json_len > MAX_JSON_LEN {
        return Err(CheckpointError::Corrupt(format!(
            "metadata length {json_len} exceeds limit"
        )));
    }
    let mut json = vec![0u8; json_len as usize];
    r.read_exact(&mut json)
        .map_err(|_| CheckpointError::Corrupt("metadata truncated".into()))?;

    let value: serde_json::Value = serde_json::from_slice(&json)?;
    let kind = value
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CheckpointError::Corrupt("metadata lacks kind".into()))?
        .to_string();
    let metas: Vec<ArrayMeta> = serde_json::from_value(
        value
            .get("arrays")
            .cloned()
            .ok_or_else(|| CheckpointError::Corrupt("metadata lacks arrays".into()))?,
    )?;

    let mut arrays = Vec::with_capacity(metas.len());
    for am in metas {
        let n = am
            .rows
            .checked_mul(am.cols)
            .filter(|&n| n <= MAX_ARRAY_ELEMS)
            .ok_or_else(|| CheckpointError::Corrupt(format!("array {} too large", am.name)))?;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|_| CheckpointError::Corrupt(format!("array {} truncated", am.name)))?;
        let data: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push((am.name, Mat::from_vec(am.rows, am.cols, data)));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after arrays".into()));
    }
    Ok(RawContainer { kind, json, arrays })
}

fn array_metas(named: &[(String, &Mat)]) -> Vec<ArrayMeta> {
    named
        .iter()
        .map(|(n, m)| ArrayMeta { name: n.clone(), rows: m.rows(), cols: m.cols() })
        .collect()
}

// ---- sequence model ---------------------------------------------------

pub fn save_model(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    let named = params.named_params();
    let meta = ModelMeta {
        kind: "model".into(),
        config: params.config,
        feature_width: params.feature_width,
        arrays: array_metas(&named),
    };
    let mats: Vec<&Mat> = named.iter().map(|(_, m)| *m).collect();
    write_container(path, &meta, &mats)
}

pub fn load_model(path: &Path) -> Result<ModelParams, CheckpointError> {
    let raw = read_container(path)?;
    if raw.kind != "model" {
        return Err(CheckpointError::WrongKind { expected: "model".into(), found: raw.kind });
    }
    let meta: ModelMeta = serde_json::from_slice(&raw.json)?;
    meta.config
        .validate()
        .map_err(|e| CheckpointError::Corrupt(format!("invalid model config: {e}")))?;
    if meta.feature_width == 0 {
        return Err(CheckpointError::Corrupt("zero feature width".into()));
    }

    let mut params = ModelParams::init(meta.config, meta.feature_width, 0);
    let expected: Vec<String> = params.named_params().iter().map(|(n, _)| n.clone()).collect();
    if expected.len() != raw.arrays.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} tensors, file holds {}",
            expected.len(),
            raw.arrays.len()
        )));
    }
    let slots = params.params_mut();
    for ((slot, (name, loaded)), want) in slots.into_iter().zip(raw.arrays).zip(&expected) {
        if &name != want {
            return Err(CheckpointError::Corrupt(format!(
                "tensor order mismatch: found {name}, expected {want}"
            )));
        }
        if slot.rows() != loaded.rows() || slot.cols() != loaded.cols() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {name}: shape {}x{} does not match config's {}x{}",
                loaded.rows(),
                loaded.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        *slot = loaded;
    }
    Ok(params)
}

// ---- fitted detectors -------------------------------------------------

fn row_mat(v: &[f64]) -> Mat {
    Mat::from_vec(1, v.len(), v.to_vec())
}

fn points_mat(points: &[Vec<f64>]) -> Mat {
    Mat::from_rows(points)
}

fn mat_points(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn save_detector(path: &Path, det: &FittedDetector) -> Result<(), CheckpointError> {
    let mut named: Vec<(String, Mat)> = vec![
        ("standardizer.mean".into(), row_mat(&det.standardizer.mean)),
        ("standardizer.std".into(), row_mat(&det.standardizer.std)),
    ];
    let (k, gamma, nu, rho) = match &det.model {
        DetectorModel::Lof(m) => {
            named.push(("points".into(), points_mat(m.points())));
            named.push(("k_distance".into(), row_mat(m.k_distances())));
            named.push(("lrd".into(), row_mat(m.lrds())));
            (Some(m.k()), None, None, None)
        }
        DetectorModel::Ocsvm(m) => {
            named.push(("support".into(), points_mat(m.support())));
            named.push(("alpha".into(), row_mat(m.alphas())));
            (None, Some(m.gamma()), Some(m.nu()), Some(m.rho()))
        }
        DetectorModel::Ae(m) => {
            for (i, w) in m.weights().iter().enumerate() {
                named.push((format!("w{i}"), w.clone()));
            }
            for (i, b) in m.biases().iter().enumerate() {
                named.push((format!("b{i}"), b.clone()));
            }
            (None, None, None, None)
        }
    };
    let refs: Vec<(String, &Mat)> = named.iter().map(|(n, m)| (n.clone(), m)).collect();
    let meta = DetectorMeta {
        kind: "detector".into(),
        detector: det.kind(),
        threshold: det.threshold,
        target_fpr: det.target_fpr,
        k,
        gamma,
        nu,
        rho,
        arrays: array_metas(&refs),
    };
    let mats: Vec<&Mat> = named.iter().map(|(_, m)| m).collect();
    write_container(path, &meta, &mats)
}

pub fn load_detector(path: &Path) -> Result<FittedDetector, CheckpointError> {
    let raw = read_container(path)?;
    if raw.kind != "detector" {
        return Err(CheckpointError::WrongKind { expected: "detector".into(), found: raw.kind });
    }
    let meta: DetectorMeta = serde_json::from_slice(&raw.json)?;

    let take = |name: &str| -> Result<&Mat, CheckpointError> {
        raw.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing array {name}")))
    };
    let mean = take("standardizer.mean")?.data().to_vec();
    let std = take("standardizer.std")?.data().to_vec();
    if mean.len() != std.len() {
        return Err(CheckpointError::Corrupt("standardizer length mismatch".into()));
    }

    let model = match meta.detector {
        DetectorKind::Lof => {
            let k = meta.k.ok_or_else(|| CheckpointError::Corrupt("missing k".into()))?;
            let points = mat_points(take("points")?);
            let k_distance = take("k_distance")?.data().to_vec();
            let lrd = take("lrd")?.data().to_vec();
            if points.len() != k_distance.len() || points.len() != lrd.len() {
                return Err(CheckpointError::Corrupt("neighbor table length mismatch".into()));
            }
            DetectorModel::Lof(LofModel::from_parts(k, points, k_distance, lrd))
        }
        DetectorKind::Ocsvm => {
            let gamma =
                meta.gamma.ok_or_else(|| CheckpointError::Corrupt("missing gamma".into()))?;
            let nu = meta.nu.ok_or_else(|| CheckpointError::Corrupt("missing nu".into()))?;
            let rho = meta.rho.ok_or_else(|| CheckpointError::Corrupt("missing rho".into()))?;
            let support = mat_points(take("support")?);
            let alpha = take("alpha")?.data().to_vec();
            if support.len() != alpha.len() {
                return Err(CheckpointError::Corrupt("support/alpha length mismatch".into()));
            }
            DetectorModel::Ocsvm(OcsvmModel::from_parts(gamma, nu, rho, support, alpha))
        }
        DetectorKind::Ae => {
            let mut weights = Vec::with_capacity(4);
            let mut biases = Vec::with_capacity(4);
            for i in 0..4 {
                weights.push(take(&format!("w{i}"))?.clone());
                biases.push(take(&format!("b{i}"))?.clone());
            }
            for i in 0..4 {
                if biases[i].rows() != 1 || biases[i].cols() != weights[i].cols() {
                    return Err(CheckpointError::Corrupt(format!("layer {i} shape mismatch")));
                }
                if i > 0 && weights[i].rows() != weights[i - 1].cols() {
                    return Err(CheckpointError::Corrupt(format!("layer {i} shape mismatch")));
                }
            }
            DetectorModel::Ae(AeModel::from_parts(weights, biases))
        }
    };
    Ok(FittedDetector {
        standardizer: Standardizer { mean, std },
        model,
        threshold: meta.threshold,
        target_fpr: meta.target_fpr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{fit_detector, DetectorOptions};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> ModelParams {
        let config = TransformerConfig {
            d_z: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            ff_width: 12,
            max_seq_len: 16,
            dropout_rate: 0.0,
        };
        ModelParams::init(config, 10, 3)
    }

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nsck");
        let params = small_params();
        save_model(&path, &params).unwrap();
        let loaded = load_model(&path).unwrap();

        assert_eq!(loaded.config, params.config);
        assert_eq!(loaded.feature_width, params.feature_width);
        let a = params.named_params();
        let b = loaded.named_params();
        assert_eq!(a.len(), b.len());
        for ((na, ma), (nb, mb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ma.data(), mb.data(), "tensor {na} differs");
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.nsck");
        let p2 = dir.path().join("b.nsck");
        let params = small_params();
        save_model(&p1, &params).unwrap();
        save_model(&p2, &params).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn detector_round_trips_preserve_scores() {
        let dir = tempfile::tempdir().unwrap();
        let train = gaussian_rows(60, 4, 1);
        let calib = gaussian_rows(30, 4, 2);
        let queries = gaussian_rows(10, 4, 3);
        for kind in [DetectorKind::Lof, DetectorKind::Ocsvm, DetectorKind::Ae] {
            let mut opts = DetectorOptions::for_kind(kind);
            opts.ae.epochs = 5;
            let det = fit_detector(kind, &train, &calib, &opts).unwrap();
            let path = dir.path().join(format!("{kind}.nsck"));
            save_detector(&path, &det).unwrap();
            let loaded = load_detector(&path).unwrap();

            assert_eq!(loaded.kind(), kind);
            assert_eq!(loaded.threshold, det.threshold);
            assert_eq!(loaded.target_fpr, det.target_fpr);
            for q in &queries {
                let a = det.score(q).unwrap();
                let b = loaded.score(q).unwrap();
                assert_eq!(a, b, "{kind} score changed across save/load");
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nsck");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_model(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_unsupported_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.nsck");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nsck");
        save_model(&path, &small_params()).unwrap();
        match load_detector(&path) {
            Err(CheckpointError::WrongKind { expected, found }) => {
                assert_eq!(expected, "detector");
                assert_eq!(found, "model");
            }
            other => panic!("expected WrongKind, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nsck");
        save_model(&path, &small_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_model(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn rejects_trailing_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nsck");
        save_model(&path, &small_params()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0xAB);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn loaded_model_encodes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nsck");
        let params = small_params();
        save_model(&path, &params).unwrap();
        let loaded = load_model(&path).unwrap();

        let rows: Vec<Vec<f64>> = (0..5)
            .map(|r| (0..10).map(|c| ((r * 10 + c) as f64 * 0.37).sin()).collect())
            .collect();
        let seq: Vec<crate::packet::PacketVector> = rows
            .into_iter()
            .map(|values| crate::packet::PacketVector { values, mask: true })
            .collect();
        let a = params.encode(&seq).unwrap();
        let b = loaded.encode(&seq).unwrap();
        assert_eq!(a.z.data(), b.z.data());
    }
}
