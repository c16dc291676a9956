//! Principal component analysis by SVD of the row-centered data matrix,
//! computed with one-sided Jacobi rotations.
//!
//! The data matrix `A` is `p × N`: one column per sample, one row per output
//! feature. Components are the left singular vectors, so scores live in the
//! space of the retained `p*` components.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Default cumulative explained-variance threshold.
pub const DEFAULT_EVR_THRESHOLD: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// All `min(p, N)` components, row `i` is component `i`.
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub p: usize,
    /// Number of components used by [`PcaModel::transform`].
    pub p_star: usize,
    pub n_samples: usize,
    pub degenerate: bool,
}

impl PcaModel {
    /// Fits on a `p × N` matrix given as `p` rows of length `N`.
    pub fn fit(a: &DMatrix<f64>) -> Result<Self> {
        let (p, n) = a.shape();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("PCA needs N >= 2 samples, got {n}")));
        }
        if p == 0 {
            return Err(Error::InvalidArgument("PCA needs at least one feature".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite entry in PCA data".into()));
        }
        let mean: Vec<f64> = (0..p).map(|i| a.row(i).sum() / n as f64).collect();
        let mut centered = a.clone();
        for (i, m) in mean.iter().enumerate() {
            centered.row_mut(i).add_scalar_mut(-m);
        }
        let (sv, u) = left_singular_vectors(&centered)?;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
        order.truncate(p.min(n));
        let singular_values: Vec<f64> = order.iter().map(|&i| sv[i]).collect();
        let components: Vec<Vec<f64>> = order
            .iter()
            .map(|&i| {
                let mut c: Vec<f64> = u.column(i).iter().copied().collect();
                if let Some(first) = c.iter().find(|v| v.abs() > 1e-12) {
                    if *first < 0.0 {
                        c.iter_mut().for_each(|v| *v = -*v);
                    }
                }
                c
            })
            .collect();
        let total: f64 = singular_values.iter().map(|s| s * s).sum();
        let scale = singular_values.first().copied().unwrap_or(0.0);
        let degenerate = !(scale > 1e-12 * (1.0 + a.amax()) * (p.max(n) as f64).sqrt());
        let explained_variance_ratio = if degenerate {
            vec![0.0; singular_values.len()]
        } else {
            singular_values.iter().map(|s| s * s / total).collect()
        };
        let k = singular_values.len();
        Ok(Self {
            mean,
            components,
            singular_values,
            explained_variance_ratio,
            p,
            p_star: k,
            n_samples: n,
            degenerate,
        })
    }

    /// Fits on samples given row-wise (`N × p`), the layout of a training set.
    pub fn fit_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        let p = samples.first().map_or(0, Vec::len);
        if samples.iter().any(|s| s.len() != p) {
            return Err(Error::Validation("ragged PCA samples".into()));
        }
        Self::fit(&DMatrix::from_fn(p, n, |i, j| samples[j][i]))
    }

    /// Smallest `p*` whose cumulative explained variance reaches `threshold`.
    pub fn select_components(&self, threshold: f64) -> Result<usize> {
        select_components(&self.explained_variance_ratio, self.degenerate, threshold)
    }

    /// Returns a copy that keeps the first `p_star` components.
    pub fn truncated(&self, p_star: usize) -> Result<Self> {
        if p_star == 0 || p_star > self.components.len() {
            return Err(Error::InvalidArgument(format!(
                "p* must be in 1..={}, got {p_star}",
                self.components.len()
            )));
        }
        Ok(Self {
            p_star,
            ..self.clone()
        })
    }

    pub fn transform(&self, a: &[f64]) -> Result<Vec<f64>> {
        check_len("PCA transform input", self.p, a.len())?;
        Ok(self.components[..self.p_star]
            .iter()
            .map(|c| c.iter().zip(a).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    pub fn inverse_transform(&self, scores: &[f64]) -> Result<Vec<f64>> {
        check_len("PCA scores", self.p_star, scores.len())?;
        let mut out = self.mean.clone();
        for (c, s) in self.components.iter().zip(scores) {
            out.iter_mut().zip(c).for_each(|(o, c)| *o += s * c);
        }
        Ok(out)
    }

    /// `P*ᵀ` as a `p × p*` matrix; maps score-space vectors to output space.
    pub fn loading_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p_star, |i, j| self.components[j][i])
    }

    /// Mean squared reconstruction error per sample implied by the dropped
    /// singular values: `Σ_{i>p*} λᵢ² / N`.
    pub fn truncation_residual(&self) -> f64 {
        self.singular_values[self.p_star..].iter().map(|s| s * s).sum::<f64>() / self.n_samples as f64
    }

    pub fn scores_matrix(&self, samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        samples.iter().map(|s| self.transform(s)).collect()
    }
}

const MAX_SWEEPS: usize = 80;

/// Singular values and left singular vectors (columns of the returned
/// `p × p` matrix) of a `p × N` matrix. Rotates pairs of columns of `Aᵀ`
/// until they are mutually orthogonal; the accumulated rotation is `U`.
/// Accurate for rank-deficient input, which centered data always is.
fn left_singular_vectors(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (p, n) = a.shape();
    let mut m = a.transpose();
    let mut u = DMatrix::<f64>::identity(p, p);
    let tol = f64::EPSILON * n as f64;
    // columns this small are numerically zero; rotating them only churns noise
    let negligible = (f64::EPSILON * a.norm()).powi(2);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (m.column(i), m.column(j));
                    (ci.norm_squared(), cj.norm_squared(), ci.dot(&cj))
                };
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut m, i, j, c, s);
                rotate(&mut u, i, j, c, s);
            }
        }
        if !rotated {
            let sv = (0..p).map(|i| m.column(i).norm()).collect();
            return Ok((sv, u));
        }
    }
    Err(Error::Numerical(format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")))
}

fn rotate(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * x - s * y;
        m[(r, j)] = s * x + c * y;
    }
}

/// Cumulative-sum rule on explicit ratios.
pub fn select_components(ratios: &[f64], degenerate: bool, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0, 1], got {threshold}")));
    }
    if degenerate || ratios.is_empty() {
        return Err(Error::Degenerate("PCA model has no variance".into()));
    }
    let mut cum = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        // cumulative sums of ratios that add to 1 can land a few ulps short
        if cum >= threshold - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(ratios.len())
}

/// `components · v` for a dense vector.
#[cfg(test)]
fn project(model: &PcaModel, v: &nalgebra::DVector<f64>) -> Vec<f64> {
    model.components[..model.p_star]
        .iter()
        .map(|c| c.iter().zip(v.iter()).map(|(a, b)| a * b).sum())
        .collect()
}
