//! Evaluation helpers: detection rates, cross-validation folds, per-entity
//! anomaly counts and a 2-component PCA projection for visual inspection.

use crate::autodiff::Mat;
use crate::detect::Level;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// One detector verdict joined with its ground-truth scenario label.
/// `scenario` is "normal" for benign windows, otherwise the attack name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledVerdict {
    pub window_index: usize,
    pub level: Level,
    pub entity: String,
    pub score: f64,
    pub anomalous: bool,
    pub scenario: String,
}

pub const NORMAL_SCENARIO: &str = "normal";

/// Summary of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr_train: f64,
    pub fpr_test: f64,
    pub adr_overall: f64,
    pub adr_per_scenario: BTreeMap<String, f64>,
    pub per_node_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub per_edge_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub fold_count: usize,
}

/// Fraction of verdicts flagged anomalous. Empty input rates as 0.
pub fn flagged_fraction<'a>(items: impl IntoIterator<Item = &'a LabeledVerdict>) -> f64 {
    let mut total = 0usize;
    let mut flagged = 0usize;
    for v in items {
        total += 1;
        flagged += v.anomalous as usize;
    }
    if total == 0 {
        0.0
    } else {
        flagged as f64 / total as f64
    }
}

/// Pooled false positive rate over normal windows and detection rate over
/// attack windows, plus the per-scenario detection rates.
pub fn detection_rates(items: &[LabeledVerdict]) -> (f64, f64, BTreeMap<String, f64>) {
    let fpr = flagged_fraction(items.iter().filter(|v| v.scenario == NORMAL_SCENARIO));
    let adr = flagged_fraction(items.iter().filter(|v| v.scenario != NORMAL_SCENARIO));
    let mut scenarios: BTreeMap<String, f64> = BTreeMap::new();
    let names: std::collections::BTreeSet<&str> = items
        .iter()
        .filter(|v| v.scenario != NORMAL_SCENARIO)
        .map(|v| v.scenario.as_str())
        .collect();
    for name in names {
        let rate = flagged_fraction(items.iter().filter(|v| v.scenario == name));
        scenarios.insert(name.to_string(), rate);
    }
    (fpr, adr, scenarios)
}

/// Flagged-verdict counts per entity, grouped by attack scenario, at one
/// aggregation level.
pub fn entity_counts(
    items: &[LabeledVerdict],
    level: Level,
) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for v in items {
        if v.level != level || !v.anomalous || v.scenario == NORMAL_SCENARIO {
            continue;
        }
        *out.entry(v.scenario.clone()).or_default().entry(v.entity.clone()).or_default() += 1;
    }
    out
}

/// True when at most `k - 1` entities have a strictly greater count, i.e.
/// the entity ranks in the top `k` with ties counted favorably.
pub fn is_top_k(counts: &BTreeMap<String, usize>, entity: &str, k: usize) -> bool {
    let Some(&own) = counts.get(entity) else {
        return false;
    };
    counts.values().filter(|&&c| c > own).count() < k
}

/// Contiguous k-fold split of `n` items: fold boundaries at i*n/k. The
/// seed is accepted for interface stability but unused; folds on a time
/// series must stay contiguous to be meaningful.
pub fn contiguous_kfold(n: usize, k: usize, _seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    assert!(k >= 2, "need at least 2 folds");
    assert!(n >= k, "need at least one item per fold");
    (0..k)
        .map(|f| {
            let start = f * n / k;
            let end = (f + 1) * n / k;
            let test: Vec<usize> = (start..end).collect();
            let train: Vec<usize> = (0..start).chain(end..n).collect();
            (train, test)
        })
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum PcaError {
    #[error("covariance is degenerate (no variance to project)")]
    DegenerateCovariance,
    #[error("need at least 2 rows and 2 dimensions, got {rows} x {dims}")]
    TooSmall { rows: usize, dims: usize },
}

/// Top-2 principal components fitted to feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
pub fn jacobi_eigen(sym: &Mat) -> (Vec<f64>, Mat) {
    let n = sym.rows();
    assert_eq!(n, sym.cols(), "matrix must be square");
    let mut a = sym.clone();
    let mut v = Mat::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let norm: f64 = sym.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.at(p, q) * a.at(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a.at(i, p);
                    let aiq = a.at(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for i in 0..n {
                    let api = a.at(p, i);
                    let aqi = a.at(q, i);
                    a.set(p, i, c * api - s * aqi);
                    a.set(q, i, s * api + c * aqi);
                }
                for i in 0..n {
                    let vip = v.at(i, p);
                    let viq = v.at(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a.at(i, i)).collect();
    (eigenvalues, v)
}

/// Fit the top-2 PCA of rows (sample covariance). The dominant loading of
/// each component is made positive so signs are reproducible.
pub fn pca_top2(rows: &[Vec<f64>]) -> Result<Pca2, PcaError> {
    let n = rows.len();
    let d = if n == 0 { 0 } else { rows[0].len() };
    if n < 2 || d < 2 {
        return Err(PcaError::TooSmall { rows: n, dims: d });
    }
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Mat::zeros(d, d);
    for row in rows {
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                let v = cov.at(i, j) + centered[i] * centered[j];
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
    }
    for x in cov.data_mut() {
        *x /= (n - 1) as f64;
    }
    let (eigenvalues, vectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    if eigenvalues[order[0]] <= 1e-12 {
        return Err(PcaError::DegenerateCovariance);
    }
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    for &ix in order.iter().take(2) {
        let mut comp: Vec<f64> = (0..d).map(|r| vectors.at(r, ix)).collect();
        let dominant = comp
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.abs().total_cmp(&b.abs()).then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .expect("non-empty component");
        if comp[dominant] < 0.0 {
            for x in comp.iter_mut() {
                *x = -*x;
            }
        }
        components.push(comp);
    }
    let c1 = components.pop().expect("two components");
    let c0 = components.pop().expect("two components");
    Ok(Pca2 {
        mean,
        components: [c0, c1],
        eigenvalues: [eigenvalues[order[0]], eigenvalues[order[1]]],
    })
}

impl Pca2 {
    pub fn project(&self, row: &[f64]) -> (f64, f64) {
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let dot = |comp: &[f64]| comp.iter().zip(&centered).map(|(c, x)| c * x).sum::<f64>();
        (dot(&self.components[0]), dot(&self.components[1]))
    }
}

/// Project rows to 2D, falling back to the first two raw coordinates when
/// the covariance is degenerate. Returns the points and whether the
/// fallback was used.
pub fn project_rows(rows: &[Vec<f64>]) -> (Vec<(f64, f64)>, bool) {
    match pca_top2(rows) {
        Ok(p) => (rows.iter().map(|r| p.project(r)).collect(), false),
        Err(_) => (
            rows.iter()
                .map(|r| {
                    let x = r.first().copied().unwrap_or(0.0);
                    let y = r.get(1).copied().unwrap_or(0.0);
                    (x, y)
                })
                .collect(),
            true,
        ),
    }
}

/// CSV for the 2D projection, one row per window.
pub fn projection_csv(rows: &[(usize, f64, f64, String)]) -> String {
    let mut out = String::from("window_index,x,y,scenario\n");
    for (ix, x, y, scenario) in rows {
        out.push_str(&format!("{ix},{x},{y},{scenario}\n"));
    }
    out
}
