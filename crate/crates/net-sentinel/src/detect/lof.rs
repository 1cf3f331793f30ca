//! Local outlier factor in novelty mode: densities are estimated once from
//! the training set, queries are scored against them without refitting.

use super::DetectorError;

/// Floor for k-distances and reachability means; keeps densities finite
/// when duplicate points collapse distances to zero.
pub const DIST_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LofModel {
    k: usize,
    points: Vec<Vec<f64>>,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices of the `k` nearest candidates to `row`, ties broken by index.
fn k_nearest(row: &[f64], points: &[Vec<f64>], skip: Option<usize>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| Some(i) != skip).collect();
    order.sort_by(|&a, &b| {
        dist(row, &points[a]).total_cmp(&dist(row, &points[b])).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

impl LofModel {
    /// Fit on standardized rows. `k` is clamped to `n - 1`.
    pub fn fit(points: &[Vec<f64>], k: usize) -> Result<LofModel, DetectorError> {
        let n = points.len();
        if n < 2 {
            return Err(DetectorError::TooFewPoints { need: 2, got: n });
        }
        let k_eff = k.max(1).min(n - 1);
        let neighbors: Vec<Vec<usize>> =
            (0..n).map(|i| k_nearest(&points[i], points, Some(i), k_eff)).collect();
        let k_distance: Vec<f64> = (0..n)
            .map(|i| {
                let last = *neighbors[i].last().expect("k >= 1");
                dist(&points[i], &points[last]).max(DIST_FLOOR)
            })
            .collect();
        let lrd: Vec<f64> = (0..n)
            .map(|i| {
                let mean_reach = neighbors[i]
                    .iter()
                    .map(|&j| dist(&points[i], &points[j]).max(k_distance[j]))
                    .sum::<f64>()
                    / k_eff as f64;
                1.0 / mean_reach.max(DIST_FLOOR)
            })
            .collect();
        Ok(LofModel { k: k_eff, points: points.to_vec(), k_distance, lrd })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn k_distances(&self) -> &[f64] {
        &self.k_distance
    }

    pub fn lrds(&self) -> &[f64] {
        &self.lrd
    }

    /// Rebuild from persisted parts (see the checkpoint container).
    pub fn from_parts(
        k: usize,
        points: Vec<Vec<f64>>,
        k_distance: Vec<f64>,
        lrd: Vec<f64>,
    ) -> LofModel {
        assert_eq!(points.len(), k_distance.len());
        assert_eq!(points.len(), lrd.len());
        LofModel { k, points, k_distance, lrd }
    }

    /// LOF of a query against the training density: mean neighbor density
    /// over the query's own. Around 1 for inliers, larger for outliers.
    pub fn score(&self, row: &[f64]) -> f64 {
        let k = self.k.min(self.points.len());
        let neigh = k_nearest(row, &self.points, None, k);
        let mean_reach = neigh
            .iter()
            .map(|&j| dist(row, &self.points[j]).max(self.k_distance[j]))
            .sum::<f64>()
            / k as f64;
        let lrd_q = 1.0 / mean_reach.max(DIST_FLOOR);
        let mean_lrd = neigh.iter().map(|&j| self.lrd[j]).sum::<f64>() / k as f64;
        mean_lrd / lrd_q
    }
}
