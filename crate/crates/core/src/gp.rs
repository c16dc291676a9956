//! Zero-mean Gaussian-process regression.
//!
//! Kernels are stationary functions of the scaled distance
//! `ρ = sqrt(Σ (Δᵢ / lᵢ)²)`, with one lengthscale per input dimension (ARD)
//! or a single shared one. Hyperparameters `(σ, l)` are fitted by maximizing
//! the log marginal likelihood with multi-start quasi-Newton search in log
//! space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::optim::{minimize_box, Options};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Jitter ladder, relative to `σ²`.
const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    PowerExponential,
    Rbf,
    Matern,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "power_exponential" | "powexp" => Ok(Self::PowerExponential),
            "rbf" | "gaussian" => Ok(Self::Rbf),
            "matern" | "matern52" => Ok(Self::Matern),
            _ => Err(Error::InvalidArgument(format!("unknown kernel family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub amplitude: f64,
    /// One entry (isotropic) or one per input dimension.
    pub lengthscales: Vec<f64>,
    /// Power-exponential exponent `r ∈ (0, 2]`; ignored by other families.
    pub exponent: f64,
    /// Matérn smoothness, 1.5 or 2.5; ignored by other families.
    pub nu: f64,
}

impl Kernel {
    pub fn rbf(amplitude: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::Rbf,
            amplitude,
            lengthscales,
            exponent: 2.0,
            nu: 2.5,
        }
    }

    pub fn matern(nu: f64, amplitude: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::Matern,
            nu,
            ..Self::rbf(amplitude, lengthscales)
        }
    }

    pub fn power_exponential(exponent: f64, amplitude: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::PowerExponential,
            exponent,
            ..Self::rbf(amplitude, lengthscales)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidArgument("kernel amplitude must be positive".into()));
        }
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidArgument("kernel lengthscales must be positive".into()));
        }
        match self.family {
            KernelFamily::PowerExponential if !(self.exponent > 0.0 && self.exponent <= 2.0) => {
                Err(Error::InvalidArgument(format!("exponent r must be in (0, 2], got {}", self.exponent)))
            }
            KernelFamily::Matern if self.nu != 1.5 && self.nu != 2.5 => {
                Err(Error::Unsupported(format!("Matérn smoothness {} (only 1.5 and 2.5)", self.nu)))
            }
            _ => Ok(()),
        }
    }

    fn lengthscale(&self, i: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[i]
        }
    }

    /// Squared scaled distance.
    fn rho2(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .enumerate()
            .map(|(i, (a, b))| ((a - b) / self.lengthscale(i)).powi(2))
            .sum()
    }

    fn from_rho2(&self, r2: f64) -> f64 {
        let s2 = self.amplitude * self.amplitude;
        match self.family {
            KernelFamily::Rbf => s2 * (-0.5 * r2).exp(),
            KernelFamily::PowerExponential => s2 * (-0.5 * r2.powf(0.5 * self.exponent)).exp(),
            KernelFamily::Matern => {
                let r = r2.sqrt();
                if self.nu == 1.5 {
                    let a = 3f64.sqrt() * r;
                    s2 * (1.0 + a) * (-a).exp()
                } else {
                    let a = 5f64.sqrt() * r;
                    s2 * (1.0 + a + a * a / 3.0) * (-a).exp()
                }
            }
        }
    }

    /// `∂k/∂ρ² · 2`: multiplying by `-Δᵢ²/lᵢ²` gives `∂k/∂ log lᵢ`.
    fn dk_drho2_times2(&self, r2: f64) -> f64 {
        let s2 = self.amplitude * self.amplitude;
        match self.family {
            KernelFamily::Rbf => -s2 * (-0.5 * r2).exp(),
            KernelFamily::PowerExponential => {
                if r2 == 0.0 {
                    return 0.0;
                }
                let h = 0.5 * self.exponent;
                -s2 * (-0.5 * r2.powf(h)).exp() * h * r2.powf(h - 1.0)
            }
            KernelFamily::Matern => {
                let r = r2.sqrt();
                if self.nu == 1.5 {
                    let a = 3f64.sqrt() * r;
                    -3.0 * s2 * (-a).exp()
                } else {
                    let a = 5f64.sqrt() * r;
                    -(5.0 / 3.0) * s2 * (1.0 + a) * (-a).exp()
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.from_rho2(self.rho2(x, y))
    }

    pub fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    pub fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j]))
    }

    #[cfg(test)]
    fn log_params(&self) -> Vec<f64> {
        std::iter::once(self.amplitude.ln())
            .chain(self.lengthscales.iter().map(|l| l.ln()))
            .collect()
    }

    fn with_log_params(&self, p: &[f64]) -> Self {
        Self {
            amplitude: p[0].exp(),
            lengthscales: p[1..].iter().map(|v| v.exp()).collect(),
            ..self.clone()
        }
    }
}

/// Settings for [`GpModel::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpFitConfig {
    pub family: KernelFamily,
    /// Power-exponential exponent (held fixed during fitting).
    pub exponent: f64,
    pub nu: f64,
    /// One lengthscale per input dimension.
    pub ard: bool,
    /// Random restarts in addition to the default starting point.
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        Self {
            family: KernelFamily::Rbf,
            exponent: 2.0,
            nu: 2.5,
            ard: true,
            restarts: 10,
            seed: 0,
            max_iter: 200,
        }
    }
}

impl GpFitConfig {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

/// A fitted zero-mean GP.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GpModelData", into = "GpModelData")]
pub struct GpModel {
    pub kernel: Kernel,
    pub training_inputs: Vec<Vec<f64>>,
    pub training_targets: Vec<f64>,
    /// Absolute jitter added to the Gram diagonal.
    pub jitter: f64,
    factor: Factor,
}

#[derive(Serialize, Deserialize)]
struct GpModelData {
    kernel: Kernel,
    training_inputs: Vec<Vec<f64>>,
    training_targets: Vec<f64>,
    jitter: f64,
}

impl From<GpModel> for GpModelData {
    fn from(m: GpModel) -> Self {
        Self {
            kernel: m.kernel,
            training_inputs: m.training_inputs,
            training_targets: m.training_targets,
            jitter: m.jitter,
        }
    }
}

impl TryFrom<GpModelData> for GpModel {
    type Error = Error;

    fn try_from(d: GpModelData) -> Result<Self> {
        GpModel::with_jitter(d.kernel, d.training_inputs, d.training_targets, d.jitter)
    }
}

fn factorize(kernel: &Kernel, x: &[Vec<f64>], y: &[f64], rel: &[f64]) -> Option<Factor> {
    let base = kernel.gram(x);
    let s2 = kernel.amplitude * kernel.amplitude;
    for &r in rel {
        let jitter = r * s2;
        let mut k = base.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = k.cholesky() {
            let alpha = chol.solve(&DVector::from_column_slice(y));
            if alpha.iter().all(|v| v.is_finite()) {
                return Some(Factor { chol, alpha, jitter });
            }
        }
    }
    None
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("GP needs at least one training point".into()));
    }
    check_len("GP targets", x.len(), y.len())?;
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("GP inputs must be non-empty rows of equal length".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite GP training data".into()));
    }
    Ok(d)
}

/// Collapses repeated input rows, averaging their targets.
fn dedup(x: &[Vec<f64>], y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<(usize, f64, usize)> = Vec::new();
    for &i in &order {
        match keep.last_mut() {
            Some((first, sum, count)) if x[*first] == x[i] => {
                *sum += y[i];
                *count += 1;
            }
            _ => keep.push((i, y[i], 1)),
        }
    }
    if keep.len() == x.len() {
        return (x.to_vec(), y.to_vec());
    }
    log::warn!("collapsed {} duplicate GP training rows", x.len() - keep.len());
    keep.sort_by_key(|k| k.0);
    keep.into_iter().map(|(i, s, c)| (x[i].clone(), s / c as f64)).unzip()
}

impl GpModel {
    /// Conditions `kernel` on the data, escalating jitter until the Gram
    /// matrix factorizes.
    pub fn new(kernel: Kernel, inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        Self::build(kernel, inputs, targets, &JITTER_LADDER)
    }

    /// Conditions with a fixed absolute jitter.
    pub fn with_jitter(kernel: Kernel, inputs: Vec<Vec<f64>>, targets: Vec<f64>, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(Error::InvalidArgument("jitter must be >= 0".into()));
        }
        let rel = jitter / (kernel.amplitude * kernel.amplitude);
        Self::build(kernel, inputs, targets, &[rel])
    }

    fn build(kernel: Kernel, inputs: Vec<Vec<f64>>, targets: Vec<f64>, ladder: &[f64]) -> Result<Self> {
        kernel.validate()?;
        let d = check_inputs(&inputs, &targets)?;
        if kernel.lengthscales.len() != 1 {
            check_len("kernel lengthscales", d, kernel.lengthscales.len())?;
        }
        let factor = factorize(&kernel, &inputs, &targets, ladder)
            .ok_or_else(|| Error::Numerical("GP Gram matrix not positive definite at maximum jitter".into()))?;
        Ok(Self {
            jitter: factor.jitter,
            kernel,
            training_inputs: inputs,
            training_targets: targets,
            factor,
        })
    }

    /// Maximizes the log marginal likelihood over `1 + restarts` starts.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], config: &GpFitConfig) -> Result<Self> {
        let d = check_inputs(inputs, targets)?;
        if inputs.len() < 2 {
            return Err(Error::InvalidArgument("GP fitting needs N >= 2".into()));
        }
        let (x, y) = dedup(inputs, targets);
        let n_len = if config.ard { d } else { 1 };
        let template = Kernel {
            family: config.family,
            amplitude: 1.0,
            lengthscales: vec![1.0; n_len],
            exponent: config.exponent,
            nu: config.nu,
        };
        template.validate()?;

        let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
        let y_scale = if rms > 0.0 { rms } else { 1.0 };
        let ranges: Vec<f64> = (0..d)
            .map(|j| {
                let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
                if hi > lo { hi - lo } else { 1.0 }
            })
            .collect();
        let range_of = |i: usize| if config.ard { ranges[i] } else { ranges.iter().copied().fold(0.0, f64::max) };
        let mut lo = vec![(1e-5 * y_scale).ln()];
        let mut hi = vec![(1e5 * y_scale).ln()];
        for i in 0..n_len {
            lo.push((1e-3 * range_of(i)).ln());
            hi.push((1e3 * range_of(i)).ln());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut starts = vec![std::iter::once(y_scale.ln())
            .chain((0..n_len).map(|i| (0.5 * range_of(i)).ln()))
            .collect::<Vec<f64>>()];
        for _ in 0..config.restarts {
            let mut s = vec![y_scale.ln() + rng.random_range(-2.3..2.3)];
            for i in 0..n_len {
                s.push(range_of(i).ln() + rng.random_range(-3.0..1.6));
            }
            starts.push(s);
        }

        let objective = |p: &[f64]| -> Option<(f64, Vec<f64>)> {
            let k = template.with_log_params(p);
            let (lml, grad) = lml_and_grad(&k, &x, &y).ok()?;
            Some((-lml, grad.into_iter().map(|g| -g).collect()))
        };
        let opts = Options {
            max_iter: config.max_iter,
            gtol: 1e-5,
            ftol: 1e-10,
            max_step: 2.0,
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (r, s) in starts.iter().enumerate() {
            match minimize_box(objective, s, &lo, &hi, opts) {
                Some(m) => {
                    log::debug!("GP restart {r}: -LML {:.6} after {} iterations", m.f, m.iterations);
                    if best.as_ref().map_or(true, |(f, _)| m.f < *f) {
                        best = Some((m.f, m.x));
                    }
                }
                None => log::debug!("GP restart {r}: start point not evaluable"),
            }
        }
        let (_, p) = best.ok_or_else(|| Error::Numerical("no GP restart produced a finite likelihood".into()))?;
        Self::new(template.with_log_params(&p), x, y)
    }

    pub fn input_dim(&self) -> usize {
        self.training_inputs[0].len()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = DVector::from_column_slice(&self.training_targets);
        let n = y.len() as f64;
        let logdet: f64 = self.factor.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * y.dot(&self.factor.alpha) - logdet - 0.5 * n * LN_2PI
    }

    /// Lower Cholesky factor of `K + jitter·I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.factor.chol.l()
    }

    /// `K(X, X)⁻¹ f`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.factor.alpha
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_len("GP prediction input", self.input_dim(), x.len())
    }

    /// Posterior mean at one point.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self
            .training_inputs
            .iter()
            .zip(self.factor.alpha.iter())
            .map(|(xi, a)| self.kernel.eval(x, xi) * a)
            .sum())
    }

    /// Posterior mean and covariance at `xs`.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        for x in xs {
            self.check_point(x)?;
        }
        let ks = self.kernel.cross(&self.training_inputs, xs);
        let mean = ks.transpose() * &self.factor.alpha;
        let mut v = ks;
        self.factor.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let mut cov = self.kernel.gram(xs) - v.transpose() * v;
        for i in 0..cov.nrows() {
            for j in 0..i {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        Ok((mean.as_slice().to_vec(), cov))
    }

    /// Posterior mean and variance at one point.
    pub fn predict_point(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (m, c) = self.predict(&[x.to_vec()])?;
        Ok((m[0], c[(0, 0)].max(0.0)))
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `(log σ, log l₁, …)` at the kernel's current hyperparameters.
pub fn lml_and_grad(kernel: &Kernel, x: &[Vec<f64>], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let f = factorize(kernel, x, y, &JITTER_LADDER).ok_or_else(|| Error::Numerical("Gram matrix not factorizable".into()))?;
    let n = x.len();
    let yv = DVector::from_column_slice(y);
    let logdet: f64 = f.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * yv.dot(&f.alpha) - logdet - 0.5 * n as f64 * LN_2PI;
    let kinv = f.chol.inverse();
    let a = &f.alpha;
    let n_len = kernel.lengthscales.len();
    let mut grad = vec![0.0; 1 + n_len];
    // W = ααᵀ − K⁻¹; dLML/dp = ½ Σ W ∘ ∂K
    let mut diff = vec![0.0; n_len];
    for i in 0..n {
        for j in 0..=i {
            let w = a[i] * a[j] - kinv[(i, j)];
            let mult = if i == j { 0.5 } else { 1.0 };
            let r2 = kernel.rho2(&x[i], &x[j]);
            let k = kernel.from_rho2(r2) + if i == j { f.jitter } else { 0.0 };
            grad[0] += mult * w * 2.0 * k;
            if i == j {
                continue;
            }
            let dk = kernel.dk_drho2_times2(r2);
            diff.iter_mut().for_each(|v| *v = 0.0);
            for (m, (p, q)) in x[i].iter().zip(&x[j]).enumerate() {
                let l = kernel.lengthscale(m);
                let t = ((p - q) / l).powi(2);
                if n_len == 1 {
                    diff[0] += t;
                } else {
                    diff[m] = t;
                }
            }
            for (g, t) in grad[1..].iter_mut().zip(&diff) {
                *g += w * (-dk * t);
            }
        }
    }
    Ok((lml, grad))
}
