//! One-class SVM with an RBF kernel, trained by sequential minimal
//! optimization on the maximal violating pair.
//!
//! Dual problem: minimize 1/2 a'Ka subject to 0 <= a_i <= 1/(nu*n) and
//! sum(a) = 1. The anomaly score of x is rho - sum_i a_i k(x_i, x), so
//! positive scores lie outside the learned boundary.

use super::DetectorError;

#[derive(Clone, Debug)]
pub struct OcsvmModel {
    gamma: f64,
    nu: f64,
    rho: f64,
    support: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * sq).exp()
}

/// Default kernel width: 1 / (d * pooled feature variance).
pub fn gamma_scale(points: &[Vec<f64>]) -> f64 {
    assert!(!points.is_empty(), "gamma_scale on empty set");
    let d = points[0].len().max(1);
    let all: Vec<f64> = points.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    1.0 / (d as f64 * var.max(1e-12))
}

const DEFAULT_TOL: f64 = 1e-10;

impl OcsvmModel {
    pub fn fit(points: &[Vec<f64>], nu: f64, gamma: f64) -> Result<OcsvmModel, DetectorError> {
        let max_iter = (points.len() * 2000).max(200_000);
        Self::fit_with(points, nu, gamma, DEFAULT_TOL, max_iter)
    }

    pub fn fit_with(
        points: &[Vec<f64>],
        nu: f64,
        gamma: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<OcsvmModel, DetectorError> {
        let n = points.len();
        if n < 2 {
            return Err(DetectorError::TooFewPoints { need: 2, got: n });
        }
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(DetectorError::InvalidNu(nu));
        }
        let c = 1.0 / (nu * n as f64);
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rbf(gamma, &points[i], &points[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let mut alpha = vec![1.0 / n as f64; n];
        // g = K alpha, maintained incrementally
        let mut g: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| k[i * n + j] * alpha[j]).sum())
            .collect();
        let eps = c * 1e-12;
        let mut converged = false;
        for _ in 0..max_iter {
            // maximal violating pair: raise the smallest gradient with
            // headroom, lower the largest gradient with mass
            let mut up: Option<usize> = None;
            let mut dn: Option<usize> = None;
            for i in 0..n {
                if alpha[i] < c - eps && up.is_none_or(|u| g[i] < g[u]) {
                    up = Some(i);
                }
                if alpha[i] > eps && dn.is_none_or(|d| g[i] > g[d]) {
                    dn = Some(i);
                }
            }
            let (Some(i), Some(j)) = (up, dn) else {
                converged = true;
                break;
            };
            if g[j] - g[i] <= tol || i == j {
                converged = true;
                break;
            }
            let eta = k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j];
            let step_unc = if eta > 1e-15 { (g[j] - g[i]) / eta } else { f64::INFINITY };
            let step = step_unc.min(c - alpha[i]).min(alpha[j]);
            if step <= 0.0 {
                converged = true;
                break;
            }
            alpha[i] += step;
            alpha[j] -= step;
            for t in 0..n {
                g[t] += step * (k[t * n + i] - k[t * n + j]);
            }
        }
        if !converged {
            return Err(DetectorError::NoConvergence(max_iter));
        }

        let sv_eps = c * 1e-8;
        let free: Vec<usize> =
            (0..n).filter(|&i| alpha[i] > sv_eps && alpha[i] < c - sv_eps).collect();
        let rho = if !free.is_empty() {
            free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
        } else {
            let lower = (0..n)
                .filter(|&i| alpha[i] >= c - sv_eps)
                .map(|i| g[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let upper = (0..n)
                .filter(|&i| alpha[i] <= sv_eps)
                .map(|i| g[i])
                .fold(f64::INFINITY, f64::min);
            match (lower.is_finite(), upper.is_finite()) {
                (true, true) => 0.5 * (lower + upper),
                (true, false) => lower,
                _ => upper,
            }
        };

        let mut support = Vec::new();
        let mut sv_alpha = Vec::new();
        for i in 0..n {
            if alpha[i] > 1e-12 {
                support.push(points[i].clone());
                sv_alpha.push(alpha[i]);
            }
        }
        Ok(OcsvmModel { gamma, nu, rho, support, alpha: sv_alpha })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn from_parts(
        gamma: f64,
        nu: f64,
        rho: f64,
        support: Vec<Vec<f64>>,
        alpha: Vec<f64>,
    ) -> OcsvmModel {
        assert_eq!(support.len(), alpha.len());
        OcsvmModel { gamma, nu, rho, support, alpha }
    }

    /// Signed distance inside the boundary (positive = inlier region).
    pub fn decision(&self, row: &[f64]) -> f64 {
        let s: f64 =
            self.support.iter().zip(&self.alpha).map(|(sv, a)| a * rbf(self.gamma, sv, row)).sum();
        s - self.rho
    }

    /// Anomaly score: rho - sum_i a_i k(x_i, x). Higher is more anomalous.
    pub fn score(&self, row: &[f64]) -> f64 {
        -self.decision(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| (0..12).map(|_| rng.random_range(-0.5..0.5)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Solve A x = b by Gaussian elimination with partial pivoting.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[piv][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = b[row];
            for k in row + 1..n {
                acc -= a[row][k] * x[k];
            }
            x[row] = acc / a[row][row];
        }
        Some(x)
    }

    /// Exhaustive active-set reference for the dual on a handful of points:
    /// try every assignment of each variable to {0, C, free}, solve the
    /// stationarity system for the free ones, keep KKT-feasible solutions,
    /// return the one with lowest objective.
    fn reference_qp(points: &[Vec<f64>], nu: f64, gamma: f64) -> (Vec<f64>, f64, f64) {
        let n = points.len();
        let c = 1.0 / (nu * n as f64);
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = rbf(gamma, &points[i], &points[j]);
            }
        }
        let objective = |alpha: &[f64]| -> f64 {
            let mut o = 0.0;
            for i in 0..n {
                for j in 0..n {
                    o += 0.5 * alpha[i] * k[i][j] * alpha[j];
                }
            }
            o
        };
        let mut best: Option<(Vec<f64>, f64, f64)> = None;
        // ternary counter over assignments: 0 -> zero, 1 -> at C, 2 -> free
        let mut assign = vec![0u8; n];
        loop {
            let zero: Vec<usize> = (0..n).filter(|&i| assign[i] == 0).collect();
            let at_c: Vec<usize> = (0..n).filter(|&i| assign[i] == 1).collect();
            let free: Vec<usize> = (0..n).filter(|&i| assign[i] == 2).collect();
            let mass_c = c * at_c.len() as f64;
            let candidate: Option<(Vec<f64>, f64)> = if free.is_empty() {
                if (mass_c - 1.0).abs() < 1e-9 {
                    let mut alpha = vec![0.0; n];
                    for &i in &at_c {
                        alpha[i] = c;
                    }
                    // rho is only bracketed here; take the bracket midpoint
                    let g: Vec<f64> =
                        (0..n).map(|i| (0..n).map(|j| k[i][j] * alpha[j]).sum()).collect();
                    let lo = at_c.iter().map(|&i| g[i]).fold(f64::NEG_INFINITY, f64::max);
                    let hi = zero.iter().map(|&i| g[i]).fold(f64::INFINITY, f64::min);
                    let rho = if hi.is_finite() { 0.5 * (lo + hi) } else { lo };
                    Some((alpha, rho))
                } else {
                    None
                }
            } else {
                let s = free.len();
                let mut a = vec![vec![0.0; s + 1]; s + 1];
                let mut b = vec![0.0; s + 1];
                for (r, &i) in free.iter().enumerate() {
                    for (cix, &j) in free.iter().enumerate() {
                        a[r][cix] = k[i][j];
                    }
                    a[r][s] = -1.0; // -rho
                    b[r] = -c * at_c.iter().map(|&j| k[i][j]).sum::<f64>();
                }
                for (cix, _) in free.iter().enumerate() {
                    a[s][cix] = 1.0;
                }
                b[s] = 1.0 - mass_c;
                solve(a, b).map(|sol| {
                    let mut alpha = vec![0.0; n];
                    for (ix, &i) in free.iter().enumerate() {
                        alpha[i] = sol[ix];
                    }
                    for &i in &at_c {
                        alpha[i] = c;
                    }
                    (alpha, sol[s])
                })
            };
            if let Some((alpha, rho)) = candidate {
                let feasible = alpha.iter().all(|&a| (-1e-9..=c + 1e-9).contains(&a));
                if feasible {
                    let g: Vec<f64> =
                        (0..n).map(|i| (0..n).map(|j| k[i][j] * alpha[j]).sum()).collect();
                    let kkt = zero.iter().all(|&i| g[i] >= rho - 1e-7)
                        && at_c.iter().all(|&i| g[i] <= rho + 1e-7);
                    if kkt {
                        let obj = objective(&alpha);
                        if best.as_ref().is_none_or(|(_, _, bo)| obj < *bo) {
                            best = Some((alpha, rho, obj));
                        }
                    }
                }
            }
            // increment ternary counter
            let mut pos = 0;
            loop {
                if pos == n {
                    return best.expect("no KKT-feasible configuration found");
                }
                if assign[pos] < 2 {
                    assign[pos] += 1;
                    break;
                }
                assign[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn matches_reference_on_eight_points() {
        for (seed_offset, nu) in [(0u64, 0.5), (1, 0.4), (2, 0.75)] {
            let mut r = ChaCha8Rng::seed_from_u64(41 + seed_offset);
            let points: Vec<Vec<f64>> =
                (0..8).map(|_| (0..2).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
            let gamma = 0.7;
            let (ref_alpha, ref_rho, ref_obj) = reference_qp(&points, nu, gamma);
            let model = OcsvmModel::fit(&points, nu, gamma).unwrap();
            // reassemble full alpha vector from the support set
            let mut got_alpha = vec![0.0; points.len()];
            for (sv, &a) in model.support().iter().zip(model.alphas()) {
                let ix = points.iter().position(|p| p == sv).unwrap();
                got_alpha[ix] = a;
            }
            let mut got_obj = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    got_obj +=
                        0.5 * got_alpha[i] * got_alpha[j] * rbf(gamma, &points[i], &points[j]);
                }
            }
            for i in 0..8 {
                assert!(
                    (got_alpha[i] - ref_alpha[i]).abs() < 1e-4,
                    "nu={nu} alpha[{i}]: {} vs {}",
                    got_alpha[i],
                    ref_alpha[i]
                );
            }
            assert!((got_obj - ref_obj).abs() < 1e-4, "objective {got_obj} vs {ref_obj}");
            assert!((model.rho() - ref_rho).abs() < 1e-4, "rho {} vs {ref_rho}", model.rho());
        }
    }

    #[test]
    fn nu_property_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let points = cloud(&mut rng, 60, 2);
        for nu in [0.1, 0.3] {
            let gamma = gamma_scale(&points);
            let model = OcsvmModel::fit(&points, nu, gamma).unwrap();
            let n = points.len() as f64;
            let sv_frac = model.support().len() as f64 / n;
            assert!(sv_frac >= nu - 1e-9, "nu={nu}: support fraction {sv_frac}");
            let outliers =
                points.iter().filter(|p| model.decision(p) < -1e-7).count() as f64 / n;
            assert!(outliers <= nu + 1e-9, "nu={nu}: outlier fraction {outliers}");
        }
    }

    #[test]
    fn far_points_score_higher() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let points = cloud(&mut rng, 50, 3);
        let model = OcsvmModel::fit(&points, 0.1, gamma_scale(&points)).unwrap();
        let near = model.score(&[0.1, 0.0, -0.1]);
        let far = model.score(&[50.0, 50.0, 50.0]);
        assert!(far > near);
        // far outside everything the kernel sum vanishes, so score -> rho
        assert!((far - model.rho()).abs() < 1e-6);
    }

    #[test]
    fn deterministic_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let points = cloud(&mut rng, 30, 2);
        let a = OcsvmModel::fit(&points, 0.2, 0.5).unwrap();
        let b = OcsvmModel::fit(&points, 0.2, 0.5).unwrap();
        assert_eq!(a.alphas(), b.alphas());
        assert_eq!(a.rho(), b.rho());
    }

    #[test]
    fn no_convergence_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let points = cloud(&mut rng, 40, 2);
        let err = OcsvmModel::fit_with(&points, 0.1, 1.0, 1e-12, 3).unwrap_err();
        assert!(matches!(err, DetectorError::NoConvergence(3)));
    }

    #[test]
    fn parameter_validation() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            OcsvmModel::fit(&points, 0.0, 1.0),
            Err(DetectorError::InvalidNu(_))
        ));
        assert!(matches!(
            OcsvmModel::fit(&points, 1.5, 1.0),
            Err(DetectorError::InvalidNu(_))
        ));
        assert!(matches!(
            OcsvmModel::fit(&points[..1], 0.5, 1.0),
            Err(DetectorError::TooFewPoints { .. })
        ));
        // nu = 1 pins every alpha at the bound and is immediately optimal
        assert!(OcsvmModel::fit(&points, 1.0, 1.0).is_ok());
    }

    #[test]
    fn gamma_scale_matches_pooled_variance() {
        let points = vec![vec![0.0, 2.0], vec![2.0, 4.0]];
        // entries {0,2,2,4}: mean 2, var 2; d=2 -> gamma = 1/4
        assert!((gamma_scale(&points) - 0.25).abs() < 1e-12);
    }
}
