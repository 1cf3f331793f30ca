//! Anomaly detectors over aggregated window features.
//!
//! All detectors share the same shape: standardize with statistics from
//! normal training rows, produce a score where higher means more anomalous,
//! and compare against a threshold calibrated to an empirical false positive
//! rate on held-out normal scores. Calibration uses strict exceedance
//! (`score > threshold` flags an anomaly), which guarantees the realized
//! rate on the calibration set never exceeds the target.

pub mod ae;
pub mod lof;
pub mod ocsvm;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub use ae::{AeModel, AeOptions};
pub use lof::LofModel;
pub use ocsvm::OcsvmModel;

/// Aggregation level a detector operates on. Orders global < node < edge.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Global,
    Node,
    Edge,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::Global => "global",
            Level::Node => "node",
            Level::Edge => "edge",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown level {0:?} (expected global, node or edge)")]
pub struct UnknownLevel(String);

impl FromStr for Level {
    type Err = UnknownLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Level::Global),
            "node" => Ok(Level::Node),
            "edge" => Ok(Level::Edge),
            other => Err(UnknownLevel(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Lof,
    Ocsvm,
    Ae,
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DetectorKind::Lof => "lof",
            DetectorKind::Ocsvm => "ocsvm",
            DetectorKind::Ae => "ae",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown detector {0:?} (expected lof, ocsvm or ae)")]
pub struct UnknownDetector(String);

impl FromStr for DetectorKind {
    type Err = UnknownDetector;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lof" => Ok(DetectorKind::Lof),
            "ocsvm" => Ok(DetectorKind::Ocsvm),
            "ae" => Ok(DetectorKind::Ae),
            other => Err(UnknownDetector(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("need at least {need} training rows, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("target fpr must be in (0, 0.5), got {0}")]
    InvalidTargetFpr(f64),
    #[error("no calibration scores")]
    EmptyCalibration,
    #[error("feature width mismatch: detector expects {expect}, got {got}")]
    DimensionMismatch { expect: usize, got: usize },
    #[error("nu must be in (0, 1], got {0}")]
    InvalidNu(f64),
    #[error("solver did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("training produced non-finite values")]
    NonFinite,
}

/// Per-dimension affine map to zero mean, unit variance. The deviation
/// floor keeps constant dimensions from dividing by zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-9;

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Standardizer, DetectorError> {
        if rows.is_empty() {
            return Err(DetectorError::TooFewPoints { need: 1, got: 0 });
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Threshold at the empirical (1 - target_fpr) quantile: the largest value
/// such that at most `floor(target_fpr * n)` calibration scores strictly
/// exceed it.
pub fn calibrate_threshold(scores: &[f64], target_fpr: f64) -> Result<f64, DetectorError> {
    if !(target_fpr > 0.0 && target_fpr < 0.5) {
        return Err(DetectorError::InvalidTargetFpr(target_fpr));
    }
    if scores.is_empty() {
        return Err(DetectorError::EmptyCalibration);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let allowed = (target_fpr * n as f64).floor() as usize;
    Ok(sorted[n - 1 - allowed])
}

/// A fitted model of any kind.
#[derive(Clone, Debug)]
pub enum DetectorModel {
    Lof(LofModel),
    Ocsvm(OcsvmModel),
    Ae(AeModel),
}

impl DetectorModel {
    pub fn kind(&self) -> DetectorKind {
        match self {
            DetectorModel::Lof(_) => DetectorKind::Lof,
            DetectorModel::Ocsvm(_) => DetectorKind::Ocsvm,
            DetectorModel::Ae(_) => DetectorKind::Ae,
        }
    }

    /// Score a standardized row; higher means more anomalous.
    pub fn score_standardized(&self, row: &[f64]) -> f64 {
        match self {
            DetectorModel::Lof(m) => m.score(row),
            DetectorModel::Ocsvm(m) => m.score(row),
            DetectorModel::Ae(m) => m.score(row),
        }
    }
}

/// Knobs for fitting; the defaults depend on the detector kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorOptions {
    pub lof_k: usize,
    pub nu: f64,
    pub target_fpr: f64,
    pub ae: AeOptions,
}

impl DetectorOptions {
    pub fn for_kind(kind: DetectorKind) -> DetectorOptions {
        DetectorOptions {
            lof_k: 20,
            nu: 0.1,
            // reconstruction scores have a heavier tail, so the feed-forward
            // detector calibrates tighter by default
            target_fpr: match kind {
                DetectorKind::Ae => 0.01,
                _ => 0.1,
            },
            ae: AeOptions::default(),
        }
    }
}

/// A fitted detector plus its standardizer and calibrated threshold.
#[derive(Clone, Debug)]
pub struct FittedDetector {
    pub standardizer: Standardizer,
    pub model: DetectorModel,
    pub threshold: f64,
    pub target_fpr: f64,
}

impl FittedDetector {
    pub fn kind(&self) -> DetectorKind {
        self.model.kind()
    }

    pub fn score(&self, row: &[f64]) -> Result<f64, DetectorError> {
        if row.len() != self.standardizer.dim() {
            return Err(DetectorError::DimensionMismatch {
                expect: self.standardizer.dim(),
                got: row.len(),
            });
        }
        Ok(self.model.score_standardized(&self.standardizer.transform(row)))
    }

    /// Strict exceedance: only scores above the threshold are anomalies.
    pub fn is_anomalous(&self, score: f64) -> bool {
        score > self.threshold
    }
}

/// Fit a detector on normal training rows and calibrate its threshold on
/// held-out normal calibration rows.
pub fn fit_detector(
    kind: DetectorKind,
    train: &[Vec<f64>],
    calib: &[Vec<f64>],
    opts: &DetectorOptions,
) -> Result<FittedDetector, DetectorError> {
    if !(opts.target_fpr > 0.0 && opts.target_fpr < 0.5) {
        return Err(DetectorError::InvalidTargetFpr(opts.target_fpr));
    }
    let standardizer = Standardizer::fit(train)?;
    let strain = standardizer.transform_all(train);
    let model = match kind {
        DetectorKind::Lof => DetectorModel::Lof(LofModel::fit(&strain, opts.lof_k)?),
        DetectorKind::Ocsvm => {
            let gamma = ocsvm::gamma_scale(&strain);
            DetectorModel::Ocsvm(OcsvmModel::fit(&strain, opts.nu, gamma)?)
        }
        DetectorKind::Ae => DetectorModel::Ae(AeModel::fit(&strain, &opts.ae)?),
    };
    let scores: Vec<f64> = calib
        .iter()
        .map(|r| model.score_standardized(&standardizer.transform(r)))
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DetectorError::NonFinite);
    }
    let threshold = calibrate_threshold(&scores, opts.target_fpr)?;
    Ok(FittedDetector { standardizer, model, threshold, target_fpr: opts.target_fpr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
        // sum of uniforms approximates a normal well enough here
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let s: f64 = (0..12).map(|_| rng.random_range(-0.5..0.5)).sum();
                        s * spread
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn standardizer_stats() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 10.0], vec![5.0, 10.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.mean, vec![3.0, 10.0]);
        // population std of {1,3,5} is sqrt(8/3); constant dim floors
        assert!((s.std[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.std[1], STD_FLOOR);
        let t = s.transform(&[5.0, 10.0]);
        assert!((t[0] - 2.0 / (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(t[1], 0.0);
    }

    #[test]
    fn threshold_quantile_examples() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let t = calibrate_threshold(&scores, 0.1).unwrap();
        assert_eq!(t, 90.0);
        let above = scores.iter().filter(|&&s| s > t).count();
        assert_eq!(above, 10);

        let ten: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(calibrate_threshold(&ten, 0.25).unwrap(), 8.0);
        // very small targets flag nothing
        assert_eq!(calibrate_threshold(&ten, 0.05).unwrap(), 10.0);
    }

    #[test]
    fn threshold_rejects_bad_targets() {
        let scores = vec![1.0, 2.0];
        assert!(matches!(
            calibrate_threshold(&scores, 0.0),
            Err(DetectorError::InvalidTargetFpr(_))
        ));
        assert!(matches!(
            calibrate_threshold(&scores, 0.5),
            Err(DetectorError::InvalidTargetFpr(_))
        ));
        assert!(matches!(
            calibrate_threshold(&scores, -0.1),
            Err(DetectorError::InvalidTargetFpr(_))
        ));
        assert!(calibrate_threshold(&scores, 0.49).is_ok());
        assert!(matches!(calibrate_threshold(&[], 0.1), Err(DetectorError::EmptyCalibration)));
    }

    #[test]
    fn threshold_monotone_and_guaranteed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..137).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut last = f64::INFINITY;
        for pct in 1..50 {
            let f = pct as f64 / 100.0;
            let t = calibrate_threshold(&scores, f).unwrap();
            assert!(t <= last, "threshold must not increase with target fpr");
            last = t;
            let realized =
                scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64;
            assert!(realized <= f + 1e-12, "target {f} realized {realized}");
        }
    }

    #[test]
    fn level_and_kind_parsing() {
        assert_eq!("global".parse::<Level>().unwrap(), Level::Global);
        assert_eq!("edge".parse::<Level>().unwrap(), Level::Edge);
        assert!("Global".parse::<Level>().is_err());
        assert!(Level::Global < Level::Node && Level::Node < Level::Edge);
        assert_eq!("lof".parse::<DetectorKind>().unwrap(), DetectorKind::Lof);
        assert_eq!("ae".parse::<DetectorKind>().unwrap(), DetectorKind::Ae);
        assert!("svm".parse::<DetectorKind>().is_err());
        assert_eq!(Level::Node.to_string(), "node");
        assert_eq!(DetectorKind::Ocsvm.to_string(), "ocsvm");
    }

    #[test]
    fn fitted_detector_flags_outlier_not_inlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let train = gaussian_cloud(&mut rng, 80, 3, 1.0);
        let calib = gaussian_cloud(&mut rng, 40, 3, 1.0);
        for kind in [DetectorKind::Lof, DetectorKind::Ocsvm, DetectorKind::Ae] {
            let opts = DetectorOptions::for_kind(kind);
            let det = fit_detector(kind, &train, &calib, &opts).unwrap();
            let inlier = vec![0.05, -0.02, 0.1];
            let outlier = vec![25.0, -30.0, 40.0];
            let si = det.score(&inlier).unwrap();
            let so = det.score(&outlier).unwrap();
            assert!(so > si, "{kind}: outlier {so} <= inlier {si}");
            assert!(det.is_anomalous(so), "{kind}: outlier not flagged");
            assert!(!det.is_anomalous(det.threshold), "threshold itself must not flag");
        }
    }

    #[test]
    fn calibration_set_fpr_within_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let train = gaussian_cloud(&mut rng, 60, 2, 1.0);
        let calib = gaussian_cloud(&mut rng, 50, 2, 1.0);
        for kind in [DetectorKind::Lof, DetectorKind::Ocsvm, DetectorKind::Ae] {
            let opts = DetectorOptions::for_kind(kind);
            let det = fit_detector(kind, &train, &calib, &opts).unwrap();
            let flagged = calib
                .iter()
                .filter(|r| det.is_anomalous(det.score(r).unwrap()))
                .count();
            let realized = flagged as f64 / calib.len() as f64;
            assert!(
                realized <= opts.target_fpr + 1e-12,
                "{kind}: realized {realized} target {}",
                opts.target_fpr
            );
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let train = gaussian_cloud(&mut rng, 30, 2, 1.0);
        let det = fit_detector(
            DetectorKind::Lof,
            &train,
            &train,
            &DetectorOptions::for_kind(DetectorKind::Lof),
        )
        .unwrap();
        assert!(matches!(
            det.score(&[1.0, 2.0, 3.0]),
            Err(DetectorError::DimensionMismatch { expect: 2, got: 3 })
        ));
    }
}
