//! Posterior targets for calibrating simulator parameters against measured
//! transients, plus the tools around them: hyper-parameter summaries,
//! iterative range extension and train/test validation.
//!
//! Two target families are provided. The single-level target shares one
//! parameter vector θ across its groups (one group is the usual per-case
//! calibration; several give the pooled variant). The hierarchical target
//! gives every group its own `θ_i ~ N(μ, σ)` per parameter, with hyperpriors
//! on `μ` and `σ`, and samples `(μ, σ, θ_1..θ_G)` jointly.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covest::{CovMode, CovarianceModel};
use crate::data::{Split, TransientCase};
use crate::error::{check_len, Error, Result};
use crate::optim::{minimize_box, Options};
use crate::sampler::{diagnose, quantile, sample, NutsConfig, PosteriorChain, TargetDensity, Transform};
use crate::surrogate::{build_surrogate, Backend, Surrogate, SurrogateSettings};
use crate::synthsim::{CaseSpec, Simulator};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// R̂ above this blocks [`summarize_hyper`] unless overridden.
pub const RHAT_LIMIT: f64 = 1.05;

/// Prior law of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum Prior {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::Uniform { low, high } if low.is_finite() && high.is_finite() && low < high => Ok(()),
            Prior::Normal { mean, sd } if mean.is_finite() && sd > 0.0 && sd.is_finite() => Ok(()),
            p => Err(Error::InvalidArgument(format!("invalid prior {p:?}"))),
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { low, high } => {
                if x >= low && x <= high {
                    -(high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Normal { mean, sd } => normal_logpdf(x, mean, sd),
        }
    }

    /// Derivative of [`Prior::log_density`] inside the support.
    pub fn dlog_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { .. } => 0.0,
            Prior::Normal { mean, sd } => -(x - mean) / (sd * sd),
        }
    }

    pub fn transform(&self) -> Transform {
        match *self {
            Prior::Uniform { low, high } => Transform::Interval { lower: low, upper: high },
            Prior::Normal { .. } => Transform::Identity,
        }
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Prior::Uniform { low, high } => Some((low, high)),
            Prior::Normal { .. } => None,
        }
    }
}

fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * u * u
}

/// Independent per-parameter priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub names: Vec<String>,
    pub laws: Vec<Prior>,
}

impl PriorSpec {
    pub fn new(names: Vec<String>, laws: Vec<Prior>) -> Result<Self> {
        let p = Self { names, laws };
        p.validate()?;
        Ok(p)
    }

    /// `Unif(low, high)` for every parameter, named `P1..Pd`.
    pub fn uniform(d: usize, low: f64, high: f64) -> Result<Self> {
        Self::from_bounds(&vec![(low, high); d])
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            crate::data::ParameterVector::default_names(bounds.len()),
            bounds.iter().map(|&(low, high)| Prior::Uniform { low, high }).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.laws.is_empty() {
            return Err(Error::InvalidArgument("prior has no parameters".into()));
        }
        check_len("prior names", self.laws.len(), self.names.len())?;
        self.laws.iter().try_for_each(Prior::validate)
    }

    pub fn dim(&self) -> usize {
        self.laws.len()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.laws.iter().zip(theta).map(|(p, x)| p.log_density(*x)).sum()
    }

    pub fn transforms(&self) -> Vec<Transform> {
        self.laws.iter().map(Prior::transform).collect()
    }

    /// Bounds of every parameter; errors if any prior is unbounded.
    pub fn bounds(&self) -> Result<Vec<(f64, f64)>> {
        self.laws
            .iter()
            .zip(&self.names)
            .map(|(p, n)| p.bounds().ok_or_else(|| Error::InvalidArgument(format!("prior of {n} is not uniform"))))
            .collect()
    }
}

/// Hyperpriors of a per-parameter hierarchy `θ_ij ~ N(μ_j, σ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub names: Vec<String>,
    pub mean: Vec<Prior>,
    /// Must be uniform with a nonnegative lower bound.
    pub sd: Vec<Prior>,
}

impl HyperPrior {
    /// `μ_j ~ Unif(0, 5)`, `σ_j ~ Unif(0, 1)`.
    pub fn standard(d: usize) -> Self {
        Self {
            names: crate::data::ParameterVector::default_names(d),
            mean: vec![Prior::Uniform { low: 0.0, high: 5.0 }; d],
            sd: vec![Prior::Uniform { low: 0.0, high: 1.0 }; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.names.len();
        if d == 0 {
            return Err(Error::InvalidArgument("hyperprior has no parameters".into()));
        }
        check_len("hyperprior means", d, self.mean.len())?;
        check_len("hyperprior sds", d, self.sd.len())?;
        self.mean.iter().chain(&self.sd).try_for_each(Prior::validate)?;
        for (p, n) in self.sd.iter().zip(&self.names) {
            match p {
                Prior::Uniform { low, .. } if *low >= 0.0 => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "hyper-sd prior of {n} must be uniform on a subset of (0, inf)"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }
}

/// One calibration group: observations, their covariance and a surrogate.
#[derive(Debug, Clone)]
struct Group {
    id: String,
    surrogate: Arc<Surrogate>,
    obs: Vec<f64>,
    cov: CovarianceModel,
}

impl Group {
    fn new(surrogate: Arc<Surrogate>, case: &TransientCase, mode: CovMode, d: usize) -> Result<Self> {
        check_len("surrogate input dimension", d, surrogate.input_dim)?;
        check_len("surrogate output vs case", case.dim(), surrogate.output_dim)?;
        let cov = case
            .covariance
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("case {} has no observation covariance", case.id)))?;
        let cov = if cov.mode() == mode { cov.clone() } else { cov.with_mode(mode)? };
        Ok(Self {
            id: case.id.clone(),
            surrogate,
            obs: case.flattened.clone(),
            cov,
        })
    }

    fn residual(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let pred = self.surrogate.predict(theta)?;
        Ok(self.obs.iter().zip(&pred).map(|(y, p)| y - p).collect())
    }

    fn loglik(&self, theta: &[f64]) -> f64 {
        self.loglik_parts(theta).map(|(ll, _)| ll).unwrap_or(f64::NEG_INFINITY)
    }

    /// Log-likelihood and `Σ⁻¹ r`.
    fn loglik_parts(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let r = self.residual(theta)?;
        let (q, w) = self.cov.quad_form(&r)?;
        let k = r.len() as f64;
        Ok((-0.5 * (k * LN_2PI + self.cov.log_det() + q), w))
    }

    /// Log-likelihood and its gradient `Jᵀ Σ⁻¹ r`.
    fn loglik_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ll, w) = self.loglik_parts(theta)?;
        Ok((ll, self.surrogate.vjp(theta, &w)?))
    }
}

/// Posterior over one θ shared by all groups.
#[derive(Debug, Clone)]
pub struct SingleLevelTarget {
    groups: Vec<Group>,
    priors: PriorSpec,
    transforms: Vec<Transform>,
}

/// Single-case posterior `N(y; s(θ), Σ)·p(θ)`. `Diagonal` mode keeps only
/// the diagonal of the case covariance.
pub fn build_single_level_target(
    surrogate: Arc<Surrogate>,
    case: &TransientCase,
    mode: CovMode,
    priors: &PriorSpec,
) -> Result<SingleLevelTarget> {
    build_pooled_target(&[(surrogate, case)], mode, priors)
}

/// One θ shared across several cases (complete pooling).
pub fn build_pooled_target(groups: &[(Arc<Surrogate>, &TransientCase)], mode: CovMode, priors: &PriorSpec) -> Result<SingleLevelTarget> {
    priors.validate()?;
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no calibration cases".into()));
    }
    let groups = groups
        .iter()
        .map(|(s, c)| Group::new(s.clone(), c, mode, priors.dim()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SingleLevelTarget {
        groups,
        transforms: priors.transforms(),
        priors: priors.clone(),
    })
}

impl SingleLevelTarget {
    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.id.clone()).collect()
    }

    /// Log posterior (up to a constant) at constrained θ, without the
    /// transform Jacobian. `-∞` outside the prior support.
    pub fn log_posterior(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.priors.dim() {
            return f64::NEG_INFINITY;
        }
        let lp = self.priors.log_density(theta);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp + self.groups.iter().map(|g| g.loglik(theta)).sum::<f64>()
    }
}

impl TargetDensity for SingleLevelTarget {
    fn dim(&self) -> usize {
        self.priors.dim()
    }

    fn names(&self) -> Vec<String> {
        self.priors.names.clone()
    }

    fn transforms(&self) -> Vec<Transform> {
        self.transforms.clone()
    }

    fn logp(&self, z: &[f64]) -> f64 {
        if z.len() != self.dim() {
            return f64::NEG_INFINITY;
        }
        let theta = self.constrain(z);
        let jac: f64 = self.transforms.iter().zip(z).map(|(t, v)| t.log_jacobian(*v)).sum();
        let lp = self.log_posterior(&theta) + jac;
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    fn logp_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len("target point", self.dim(), z.len())?;
        let theta = self.constrain(z);
        let mut lp = self.priors.log_density(&theta);
        if !lp.is_finite() {
            return Ok((f64::NEG_INFINITY, vec![0.0; z.len()]));
        }
        let mut g: Vec<f64> = self.priors.laws.iter().zip(&theta).map(|(p, x)| p.dlog_density(*x)).collect();
        for group in &self.groups {
            let (ll, gl) = group.loglik_grad(&theta)?;
            lp += ll;
            g.iter_mut().zip(&gl).for_each(|(a, b)| *a += b);
        }
        for (i, t) in self.transforms.iter().enumerate() {
            lp += t.log_jacobian(z[i]);
            g[i] = g[i] * t.dconstrain(z[i]) + t.dlog_jacobian(z[i]);
        }
        Ok((lp, g))
    }

    fn has_gradient(&self) -> bool {
        self.groups.iter().all(|g| g.surrogate.has_gradient())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `θ_ij = μ_j + σ_j·η_ij` with `η_ij ~ N(0, 1)` sampled.
    NonCentered,
    /// `θ_ij` sampled directly.
    Centered,
}

/// Hyper-means, hyper-sds and per-group parameters at one draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalParams {
    pub hyper_mean: Vec<f64>,
    pub hyper_sd: Vec<f64>,
    pub per_group: Vec<Vec<f64>>,
}

/// Joint posterior over `(μ, σ, θ_1..θ_G)`.
///
/// Unconstrained layout is `[μ (d) | σ (d) | η or θ (G·d)]`; on the
/// constrained scale (draws, names) the last block is always θ, named
/// `theta[<case>][<param>]`.
#[derive(Debug, Clone)]
pub struct HierarchicalTarget {
    groups: Vec<Group>,
    hyper: HyperPrior,
    parameterization: Parameterization,
    mean_t: Vec<Transform>,
    sd_t: Vec<Transform>,
}

pub fn build_hierarchical_target(
    groups: &[(Arc<Surrogate>, &TransientCase)],
    mode: CovMode,
    hyper: &HyperPrior,
) -> Result<HierarchicalTarget> {
    hyper.validate()?;
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a hierarchical model needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    let groups = groups
        .iter()
        .map(|(s, c)| Group::new(s.clone(), c, mode, hyper.dim()))
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<&str> = groups.iter().map(|g| g.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("hierarchical groups need distinct case ids".into()));
    }
    Ok(HierarchicalTarget {
        groups,
        mean_t: hyper.mean.iter().map(Prior::transform).collect(),
        sd_t: hyper.sd.iter().map(Prior::transform).collect(),
        hyper: hyper.clone(),
        parameterization: Parameterization::NonCentered,
    })
}

impl HierarchicalTarget {
    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_params(&self) -> usize {
        self.hyper.dim()
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.id.clone()).collect()
    }

    pub fn hyper(&self) -> &HyperPrior {
        &self.hyper
    }

    /// Splits a constrained-scale draw.
    pub fn split_draw(&self, x: &[f64]) -> Result<HierarchicalParams> {
        check_len("hierarchical draw", self.dim(), x.len())?;
        let d = self.n_params();
        Ok(HierarchicalParams {
            hyper_mean: x[..d].to_vec(),
            hyper_sd: x[d..2 * d].to_vec(),
            per_group: x[2 * d..].chunks(d).map(<[f64]>::to_vec).collect(),
        })
    }

    /// Log density and gradient on the unconstrained scale.
    fn evaluate(&self, z: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let d = self.n_params();
        check_len("target point", self.dim(), z.len())?;
        let mu: Vec<f64> = self.mean_t.iter().zip(&z[..d]).map(|(t, v)| t.constrain(*v)).collect();
        let sigma: Vec<f64> = self.sd_t.iter().zip(&z[d..2 * d]).map(|(t, v)| t.constrain(*v)).collect();
        let mut grad = vec![0.0; z.len()];
        let mut lp = 0.0;
        for j in 0..d {
            let (pm, ps) = (self.hyper.mean[j], self.hyper.sd[j]);
            lp += pm.log_density(mu[j]) + ps.log_density(sigma[j]);
            grad[j] = pm.dlog_density(mu[j]);
            grad[d + j] = ps.dlog_density(sigma[j]);
        }
        if !lp.is_finite() || sigma.iter().any(|s| !(*s > 0.0)) {
            return Ok((f64::NEG_INFINITY, vec![0.0; z.len()]));
        }
        for (i, group) in self.groups.iter().enumerate() {
            let block = &z[2 * d + i * d..2 * d + (i + 1) * d];
            let theta: Vec<f64> = match self.parameterization {
                Parameterization::NonCentered => (0..d).map(|j| mu[j] + sigma[j] * block[j]).collect(),
                Parameterization::Centered => block.to_vec(),
            };
            let (ll, g_theta) = if with_grad {
                group.loglik_grad(&theta)?
            } else {
                (group.loglik(&theta), Vec::new())
            };
            lp += ll;
            for j in 0..d {
                let k = 2 * d + i * d + j;
                match self.parameterization {
                    Parameterization::NonCentered => {
                        let eta = block[j];
                        lp += -0.5 * LN_2PI - 0.5 * eta * eta;
                        if with_grad {
                            grad[k] = -eta + g_theta[j] * sigma[j];
                            grad[j] += g_theta[j];
                            grad[d + j] += g_theta[j] * eta;
                        }
                    }
                    Parameterization::Centered => {
                        let u = (theta[j] - mu[j]) / sigma[j];
                        lp += normal_logpdf(theta[j], mu[j], sigma[j]);
                        if with_grad {
                            grad[k] = -u / sigma[j] + g_theta[j];
                            grad[j] += u / sigma[j];
                            grad[d + j] += (u * u - 1.0) / sigma[j];
                        }
                    }
                }
            }
        }
        for j in 0..d {
            let (tm, ts) = (self.mean_t[j], self.sd_t[j]);
            lp += tm.log_jacobian(z[j]) + ts.log_jacobian(z[d + j]);
            grad[j] = grad[j] * tm.dconstrain(z[j]) + tm.dlog_jacobian(z[j]);
            grad[d + j] = grad[d + j] * ts.dconstrain(z[d + j]) + ts.dlog_jacobian(z[d + j]);
        }
        if lp.is_nan() {
            lp = f64::NEG_INFINITY;
        }
        Ok((lp, grad))
    }
}

impl TargetDensity for HierarchicalTarget {
    fn dim(&self) -> usize {
        self.n_params() * (2 + self.groups.len())
    }

    fn names(&self) -> Vec<String> {
        let p = &self.hyper.names;
        p.iter()
            .map(|n| format!("mu[{n}]"))
            .chain(p.iter().map(|n| format!("sigma[{n}]")))
            .chain(self.groups.iter().flat_map(|g| p.iter().map(move |n| format!("theta[{}][{n}]", g.id))))
            .collect()
    }

    fn transforms(&self) -> Vec<Transform> {
        let mut t = self.mean_t.clone();
        t.extend(&self.sd_t);
        t.extend(vec![Transform::Identity; self.groups.len() * self.n_params()]);
        t
    }

    fn logp(&self, z: &[f64]) -> f64 {
        self.evaluate(z, false).map(|(lp, _)| lp).unwrap_or(f64::NEG_INFINITY)
    }

    fn logp_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluate(z, true)
    }

    fn has_gradient(&self) -> bool {
        self.groups.iter().all(|g| g.surrogate.has_gradient())
    }

    fn constrain(&self, z: &[f64]) -> Vec<f64> {
        let d = self.n_params();
        let mut x: Vec<f64> = self.transforms().iter().zip(z).map(|(t, v)| t.constrain(*v)).collect();
        if self.parameterization == Parameterization::NonCentered {
            for i in 0..self.groups.len() {
                for j in 0..d {
                    let k = 2 * d + i * d + j;
                    x[k] = x[j] + x[d + j] * z[k];
                }
            }
        }
        x
    }

    fn unconstrain(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("constrained point", self.dim(), x.len())?;
        let d = self.n_params();
        let mut z = self.transforms().iter().zip(x).map(|(t, v)| t.unconstrain(*v)).collect::<Result<Vec<f64>>>()?;
        if self.parameterization == Parameterization::NonCentered {
            for i in 0..self.groups.len() {
                for j in 0..d {
                    let k = 2 * d + i * d + j;
                    z[k] = (x[k] - x[j]) / x[d + j];
                }
            }
        }
        Ok(z)
    }
}

/// Maximizes the target's log density from the constrained point `start`;
/// returns the mode on the constrained scale.
pub fn find_mode<T: TargetDensity + ?Sized>(target: &T, start: &[f64]) -> Result<Vec<f64>> {
    if !target.has_gradient() {
        return Err(Error::Unsupported("mode search needs gradients".into()));
    }
    let z0 = target.unconstrain(start)?;
    let n = z0.len();
    let f = |z: &[f64]| {
        target
            .logp_grad(z)
            .ok()
            .filter(|(lp, _)| lp.is_finite())
            .map(|(lp, g)| (-lp, g.iter().map(|v| -v).collect()))
    };
    let opts = Options { max_iter: 500, ..Options::default() };
    let m = minimize_box(f, &z0, &vec![-30.0; n], &vec![30.0; n], opts)
        .ok_or_else(|| Error::Numerical("log density is not finite at the starting point".into()))?;
    Ok(target.constrain(&m.x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalLaw {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParameterSummary {
    pub name: String,
    /// Posterior mean of μ.
    pub mu_mean: f64,
    /// Posterior mean of σ.
    pub sigma_mean: f64,
    pub mu_interval: (f64, f64),
    pub sigma_interval: (f64, f64),
    pub mu_mcse: Option<f64>,
    pub sigma_mcse: Option<f64>,
    pub mu_rhat: Option<f64>,
    pub sigma_rhat: Option<f64>,
    /// `N(mean μ, mean σ)`, the updated law for forward propagation.
    pub predictive: NormalLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSummary {
    pub parameters: Vec<HyperParameterSummary>,
    /// True when the R̂ check was skipped or failed and overridden.
    pub unchecked: bool,
}

impl HyperSummary {
    pub fn predictive(&self) -> Vec<NormalLaw> {
        self.parameters.iter().map(|p| p.predictive).collect()
    }
}

/// Mean that does not depend on the order of `x`.
fn ordered_mean(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Posterior means of the hyper-parameters of a hierarchical run and the
/// resulting predictive normal per parameter. Fails when any `mu[..]` or
/// `sigma[..]` R̂ is at least [`RHAT_LIMIT`] (or cannot be computed) unless
/// `allow_unconverged`.
pub fn summarize_hyper(chains: &[PosteriorChain], allow_unconverged: bool) -> Result<HyperSummary> {
    let diag = diagnose(chains)?;
    let names = &chains[0].names;
    let params: Vec<String> = names
        .iter()
        .filter_map(|n| n.strip_prefix("mu[").and_then(|s| s.strip_suffix(']')).map(str::to_string))
        .collect();
    if params.is_empty() {
        return Err(Error::Validation("chains contain no mu[..] columns".into()));
    }
    let mut unchecked = false;
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let (mu_name, sd_name) = (format!("mu[{p}]"), format!("sigma[{p}]"));
        let col = |name: &str| -> Result<(usize, Vec<f64>)> {
            let j = chains[0]
                .index_of(name)
                .ok_or_else(|| Error::Validation(format!("chains lack column {name}")))?;
            Ok((j, chains.iter().flat_map(|c| c.column(j)).collect()))
        };
        let (jm, mu) = col(&mu_name)?;
        let (js, sd) = col(&sd_name)?;
        for j in [jm, js] {
            let s = &diag.parameters[j];
            let ok = match s.rhat {
                Some(r) => r < RHAT_LIMIT,
                // Constant within chains: converged only if the chains agree.
                None if chains.len() >= 2 => {
                    let first = chains[0].draws[0][j];
                    chains.iter().all(|c| c.draws.iter().all(|d| d[j] == first))
                }
                None => false,
            };
            if !ok {
                if !allow_unconverged {
                    return Err(Error::Diagnostics(format!(
                        "{} has R-hat {:?} (limit {RHAT_LIMIT}); pass the override to summarize anyway",
                        s.name, s.rhat
                    )));
                }
                unchecked = true;
            }
        }
        let (mu_mean, sigma_mean) = (ordered_mean(&mu), ordered_mean(&sd));
        out.push(HyperParameterSummary {
            name: p,
            mu_mean,
            sigma_mean,
            mu_interval: (quantile(&mu, 0.025), quantile(&mu, 0.975)),
            sigma_interval: (quantile(&sd, 0.025), quantile(&sd, 0.975)),
            mu_mcse: diag.parameters[jm].mcse,
            sigma_mcse: diag.parameters[js].mcse,
            mu_rhat: diag.parameters[jm].rhat,
            sigma_rhat: diag.parameters[js].rhat,
            predictive: NormalLaw { mean: mu_mean, sd: sigma_mean },
        });
    }
    Ok(HyperSummary { parameters: out, unchecked })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    /// Extension rounds allowed after the first posterior.
    pub max_rounds: usize,
    /// Fraction of draws near a bound that triggers an extension.
    pub mass_threshold: f64,
    /// "Near" means within this fraction of the current width.
    pub edge_fraction: f64,
    /// A triggered bound moves outward by this fraction of the width.
    pub extension: f64,
    /// Lower bounds never move below this.
    pub lower_floor: Option<f64>,
    pub training_size: usize,
    pub backend: Backend,
    pub surrogate: SurrogateSettings,
    pub sampler: NutsConfig,
    pub cov_mode: CovMode,
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            mass_threshold: 0.1,
            edge_fraction: 0.05,
            extension: 0.5,
            lower_floor: Some(0.0),
            training_size: 200,
            backend: Backend::Mlp,
            surrogate: SurrogateSettings::default(),
            sampler: NutsConfig::default(),
            cov_mode: CovMode::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "message", rename_all = "lowercase")]
pub enum ResampleStatus {
    Converged,
    Warning(String),
}

#[derive(Debug, Clone)]
pub struct ResampleResult {
    pub chains: Vec<PosteriorChain>,
    /// Bounds used in each round; the last entry produced `chains`.
    pub bounds_history: Vec<Vec<(f64, f64)>>,
    pub status: ResampleStatus,
    pub surrogate: Surrogate,
}

impl ResampleResult {
    pub fn final_bounds(&self) -> &[(f64, f64)] {
        self.bounds_history.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rounds(&self) -> usize {
        self.bounds_history.len()
    }
}

/// Fraction of draws of each parameter within `edge_fraction·width` of the
/// (lower, upper) bound.
pub fn edge_mass(chains: &[PosteriorChain], bounds: &[(f64, f64)], edge_fraction: f64) -> Vec<(f64, f64)> {
    bounds
        .iter()
        .enumerate()
        .map(|(j, &(lo, hi))| {
            let band = edge_fraction * (hi - lo);
            let x: Vec<f64> = chains.iter().flat_map(|c| c.column(j)).collect();
            let n = x.len() as f64;
            (
                x.iter().filter(|v| **v <= lo + band).count() as f64 / n,
                x.iter().filter(|v| **v >= hi - band).count() as f64 / n,
            )
        })
        .collect()
}

/// Repeats [surrogate training on the current bounds → posterior sampling]
/// and widens any bound that holds too much posterior mass, until the
/// posterior is interior or `max_rounds` extensions have been used.
pub fn iterative_resample<S: Simulator + ?Sized>(
    sim: &S,
    spec: &CaseSpec,
    case: &TransientCase,
    priors: &PriorSpec,
    config: &ResampleConfig,
) -> Result<ResampleResult> {
    priors.validate()?;
    if !(config.mass_threshold > 0.0 && config.mass_threshold < 1.0) {
        return Err(Error::InvalidArgument("mass_threshold must be in (0, 1)".into()));
    }
    let mut bounds = priors.bounds()?;
    let mut history = Vec::new();
    let mut round = 0;
    loop {
        history.push(bounds.clone());
        let settings = SurrogateSettings { bounds: bounds.clone(), ..config.surrogate.clone() };
        let seed = config.seed.wrapping_add(round as u64);
        let surrogate = build_surrogate(sim, spec, config.backend, config.training_size, &settings, seed)?;
        let round_priors = PriorSpec::new(priors.names.clone(), bounds.iter().map(|&(low, high)| Prior::Uniform { low, high }).collect())?;
        let target = build_single_level_target(Arc::new(surrogate.clone()), case, config.cov_mode, &round_priors)?;
        let sampler = NutsConfig { seed: config.sampler.seed.wrapping_add(round as u64), ..config.sampler.clone() };
        let chains = sample(&target, &sampler)?;
        let mass = edge_mass(&chains, &bounds, config.edge_fraction);
        let mut next = bounds.clone();
        let mut flagged = Vec::new();
        for (j, (&(lo, hi), &(m_lo, m_hi))) in bounds.iter().zip(&mass).enumerate() {
            let w = hi - lo;
            if m_lo > config.mass_threshold {
                flagged.push(format!("{} lower", priors.names[j]));
                let floor = config.lower_floor.unwrap_or(f64::NEG_INFINITY);
                next[j].0 = (lo - config.extension * w).max(floor);
            }
            if m_hi > config.mass_threshold {
                flagged.push(format!("{} upper", priors.names[j]));
                next[j].1 = hi + config.extension * w;
            }
        }
        let done = |status| {
            Ok(ResampleResult {
                chains: chains.clone(),
                bounds_history: history.clone(),
                status,
                surrogate: surrogate.clone(),
            })
        };
        if flagged.is_empty() {
            return done(ResampleStatus::Converged);
        }
        if round >= config.max_rounds {
            return done(ResampleStatus::Warning(format!(
                "posterior mass still at bounds after {} extension round(s): {}",
                config.max_rounds,
                flagged.join(", ")
            )));
        }
        if next == bounds {
            return done(ResampleStatus::Warning(format!(
                "posterior mass at bounds that cannot be extended: {}",
                flagged.join(", ")
            )));
        }
        log::info!("round {round}: extending bounds for {}", flagged.join(", "));
        bounds = next;
        round += 1;
    }
}

/// Where calibrated parameters come from in [`validate_posterior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaSource {
    Point { theta: Vec<f64> },
    /// Independent normals per parameter, truncated to `θ ≥ 0`.
    PredictiveNormal { laws: Vec<NormalLaw> },
    Draws { draws: Vec<Vec<f64>> },
}

impl ThetaSource {
    /// Parameter vectors to evaluate: the point itself, `n` predictive draws,
    /// or at most `n` evenly spaced posterior draws.
    pub fn thetas(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        match self {
            ThetaSource::Point { theta } => Ok(vec![theta.clone()]),
            ThetaSource::PredictiveNormal { laws } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dists = laws
                    .iter()
                    .map(|l| Normal::new(l.mean, l.sd).map_err(|e| Error::InvalidArgument(format!("predictive law {l:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok((0..n.max(1))
                    .map(|_| {
                        dists
                            .iter()
                            .map(|d| {
                                let lo = d.cdf(0.0);
                                let u = lo + (1.0 - lo) * rng.random::<f64>();
                                d.inverse_cdf(u.clamp(lo, 1.0 - 1e-16)).max(0.0)
                            })
                            .collect()
                    })
                    .collect())
            }
            ThetaSource::Draws { draws } => {
                if draws.is_empty() {
                    return Err(Error::InvalidArgument("no posterior draws".into()));
                }
                let n = n.clamp(1, draws.len());
                Ok((0..n).map(|i| draws[i * draws.len() / n].clone()).collect())
            }
        }
    }
}

/// Anything that predicts a case's flattened output at θ.
pub trait ForwardModel: Sync {
    fn predict(&self, case_id: &str, theta: &[f64]) -> Result<Vec<f64>>;
}

pub struct SimulatorForward<'a, S: ?Sized> {
    pub simulator: &'a S,
    pub specs: Vec<CaseSpec>,
}

impl<S: Simulator + ?Sized> ForwardModel for SimulatorForward<'_, S> {
    fn predict(&self, case_id: &str, theta: &[f64]) -> Result<Vec<f64>> {
        let spec = self
            .specs
            .iter()
            .find(|s| s.id == case_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no case spec for {case_id}")))?;
        self.simulator.simulate_flat(theta, spec)
    }
}

/// Per-case surrogates keyed by case id.
pub struct SurrogateForward {
    pub surrogates: BTreeMap<String, Arc<Surrogate>>,
}

impl ForwardModel for SurrogateForward {
    fn predict(&self, case_id: &str, theta: &[f64]) -> Result<Vec<f64>> {
        self.surrogates
            .get(case_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no surrogate for {case_id}")))?
            .predict(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub mae: f64,
    pub rmse: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
}

impl ErrorStats {
    pub fn from_errors(e: &[f64]) -> Self {
        let n = e.len();
        let nf = n as f64;
        let mean = e.iter().sum::<f64>() / nf;
        let sd = if n > 1 {
            (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            n,
            mean,
            sd,
            mae: e.iter().map(|v| v.abs()).sum::<f64>() / nf,
            rmse: (e.iter().map(|v| v * v).sum::<f64>() / nf).sqrt(),
            q05: quantile(e, 0.05),
            median: quantile(e, 0.5),
            q95: quantile(e, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseValidation {
    pub case_id: String,
    pub split: Split,
    pub posterior: ErrorStats,
    pub prior: Option<ErrorStats>,
    /// Observation minus the mean prediction over the evaluated θ values.
    pub mean_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitValidation {
    pub split: Split,
    pub posterior: ErrorStats,
    pub prior: Option<ErrorStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cases: Vec<CaseValidation>,
    /// Only splits that contain cases.
    pub splits: Vec<SplitValidation>,
}

impl ValidationReport {
    pub fn split(&self, split: Split) -> Option<&SplitValidation> {
        self.splits.iter().find(|s| s.split == split)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scope", "id", "split", "source", "n", "mean", "sd", "mae", "rmse", "q05", "median", "q95"])?;
        let split_name = |s: Split| match s {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut row = |scope: &str, id: &str, split: Split, source: &str, s: &ErrorStats| {
            let nums = [s.mean, s.sd, s.mae, s.rmse, s.q05, s.median, s.q95];
            let mut r = vec![scope.to_string(), id.to_string(), split_name(split).into(), source.into(), s.n.to_string()];
            r.extend(nums.iter().map(|v| v.to_string()));
            w.write_record(&r)
        };
        for c in &self.cases {
            row("case", &c.case_id, c.split, "posterior", &c.posterior)?;
            if let Some(p) = &c.prior {
                row("case", &c.case_id, c.split, "prior", p)?;
            }
        }
        for s in &self.splits {
            row("split", split_name(s.split), s.split, "posterior", &s.posterior)?;
            if let Some(p) = &s.prior {
                row("split", split_name(s.split), s.split, "prior", p)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn case_errors(case: &TransientCase, thetas: &[Vec<f64>], forward: &dyn ForwardModel) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = case.dim();
    let mut all = Vec::with_capacity(k * thetas.len());
    let mut mean_pred = vec![0.0; k];
    for t in thetas {
        let pred = forward.predict(&case.id, t)?;
        check_len("forward prediction", k, pred.len())?;
        for (i, (y, p)) in case.flattened.iter().zip(&pred).enumerate() {
            all.push(y - p);
            mean_pred[i] += p / thetas.len() as f64;
        }
    }
    let mean_errors = case.flattened.iter().zip(&mean_pred).map(|(y, p)| y - p).collect();
    Ok((all, mean_errors))
}

/// Error distributions (observation minus prediction) per case and per
/// split, for θ from `source` and optionally from `prior` for comparison.
/// Distributional sources use up to `n_draws` parameter vectors.
pub fn validate_posterior(
    source: &ThetaSource,
    prior: Option<&ThetaSource>,
    cases: &[(TransientCase, Split)],
    forward: &dyn ForwardModel,
    n_draws: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let post = source.thetas(n_draws, seed)?;
    let prior_thetas = prior.map(|p| p.thetas(n_draws, seed ^ 0x5eed)).transpose()?;
    let mut out = Vec::with_capacity(cases.len());
    let mut pooled: BTreeMap<Split, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (case, split) in cases {
        let (errors, mean_errors) = case_errors(case, &post, forward)?;
        let entry = pooled.entry(*split).or_default();
        entry.0.extend(&errors);
        let prior_stats = match &prior_thetas {
            Some(pt) => {
                let (pe, _) = case_errors(case, pt, forward)?;
                entry.1.extend(&pe);
                Some(ErrorStats::from_errors(&pe))
            }
            None => None,
        };
        out.push(CaseValidation {
            case_id: case.id.clone(),
            split: *split,
            posterior: ErrorStats::from_errors(&errors),
            prior: prior_stats,
            mean_errors,
        });
    }
    let splits = pooled
        .into_iter()
        .map(|(split, (e, pe))| SplitValidation {
            split,
            posterior: ErrorStats::from_errors(&e),
            prior: (!pe.is_empty()).then(|| ErrorStats::from_errors(&pe)),
        })
        .collect();
    Ok(ValidationReport { cases: out, splits })
}
