//! Markov chain Monte Carlo over [`TargetDensity`] implementations.
//!
//! The main engine is the No-U-Turn sampler with multinomial trajectory
//! sampling, the generalized U-turn criterion, dual-averaging step-size
//! adaptation and windowed diagonal mass-matrix adaptation. Targets without
//! gradients use adaptive random-walk Metropolis instead. Chains run in
//! parallel, each with its own ChaCha stream derived from the master seed.
//!
//! Sampling happens in unconstrained space; draws are reported on the
//! constrained scale.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Map between a parameter's support and the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// `(lower, ∞)` via `x = lower + exp(z)`.
    LowerBounded { lower: f64 },
    /// `(lower, upper)` via `x = lower + (upper − lower)·logistic(z)`.
    Interval { lower: f64, upper: f64 },
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Identity => Ok(()),
            Transform::LowerBounded { lower } if lower.is_finite() => Ok(()),
            Transform::Interval { lower, upper } if lower.is_finite() && upper.is_finite() && lower < upper => Ok(()),
            t => Err(Error::InvalidArgument(format!("invalid transform {t:?}"))),
        }
    }

    pub fn constrain(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => z,
            Transform::LowerBounded { lower } => lower + z.exp(),
            Transform::Interval { lower, upper } => {
                let x = lower + (upper - lower) * logistic(z);
                // Saturated logistic can round onto the bound.
                x.clamp(lower, upper)
            }
        }
    }

    /// Inverse of [`Transform::constrain`]; errors outside the open support.
    pub fn unconstrain(&self, x: f64) -> Result<f64> {
        let outside = || Err(Error::InvalidArgument(format!("{x} is outside the support of {self:?}")));
        match *self {
            Transform::Identity => Ok(x),
            Transform::LowerBounded { lower } => {
                if x > lower {
                    Ok((x - lower).ln())
                } else {
                    outside()
                }
            }
            Transform::Interval { lower, upper } => {
                if x > lower && x < upper {
                    let u = (x - lower) / (upper - lower);
                    Ok(u.ln() - (-u).ln_1p())
                } else {
                    outside()
                }
            }
        }
    }

    /// `log |dx/dz|`.
    pub fn log_jacobian(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::LowerBounded { .. } => z,
            Transform::Interval { lower, upper } => (upper - lower).ln() - softplus(-z) - softplus(z),
        }
    }

    /// `dx/dz`.
    pub fn dconstrain(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => 1.0,
            Transform::LowerBounded { .. } => z.exp(),
            Transform::Interval { lower, upper } => {
                let s = logistic(z);
                (upper - lower) * s * (1.0 - s)
            }
        }
    }

    /// `d log|dx/dz| / dz`.
    pub fn dlog_jacobian(&self, z: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::LowerBounded { .. } => 1.0,
            Transform::Interval { .. } => 1.0 - 2.0 * logistic(z),
        }
    }
}

/// A log density on the unconstrained scale.
///
/// `logp` includes the log-Jacobian of [`TargetDensity::transforms`] and
/// returns `-∞` where the density vanishes. Implementations must be safe for
/// concurrent read-only evaluation.
pub trait TargetDensity: Sync {
    fn dim(&self) -> usize;

    fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{}", i + 1)).collect()
    }

    fn transforms(&self) -> Vec<Transform> {
        vec![Transform::Identity; self.dim()]
    }

    fn logp(&self, z: &[f64]) -> f64;

    /// Value and gradient; [`Error::Unsupported`] for gradient-free targets.
    fn logp_grad(&self, _z: &[f64]) -> Result<(f64, Vec<f64>)> {
        Err(Error::Unsupported("this target has no gradient".into()))
    }

    fn has_gradient(&self) -> bool {
        false
    }

    fn grad_logp(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.logp_grad(z).map(|(_, g)| g)
    }

    fn constrain(&self, z: &[f64]) -> Vec<f64> {
        self.transforms().iter().zip(z).map(|(t, v)| t.constrain(*v)).collect()
    }

    fn unconstrain(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("constrained point", self.dim(), x.len())?;
        self.transforms().iter().zip(x).map(|(t, v)| t.unconstrain(*v)).collect()
    }
}

/// Largest relative error between `logp_grad` and central finite
/// differences of `logp` at `z`, with relative error
/// `|a − b| / max(|a|, |b|, 1)`.
pub fn gradient_error<T: TargetDensity + ?Sized>(target: &T, z: &[f64], h: f64) -> Result<f64> {
    let (_, g) = target.logp_grad(z)?;
    check_len("gradient", z.len(), g.len())?;
    let mut worst: f64 = 0.0;
    let mut zp = z.to_vec();
    for i in 0..z.len() {
        zp[i] = z[i] + h;
        let fp = target.logp(&zp);
        zp[i] = z[i] - h;
        let fm = target.logp(&zp);
        zp[i] = z[i];
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1.0));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NutsConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    /// Half-width of the uniform initialization box in unconstrained space.
    pub init_radius: f64,
    /// Starting point (constrained scale) for every chain, instead of random.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            seed: 0,
            max_tree_depth: 10,
            target_accept: 0.8,
            init_radius: 2.0,
            init: None,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("sampler config: {m}")));
        if self.chains == 0 || self.draws == 0 {
            return bad("chains and draws must be positive");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must be in (0, 1)");
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 30 {
            return bad("max_tree_depth must be in 1..=30");
        }
        if !(self.init_radius > 0.0 && self.init_radius.is_finite()) {
            return bad("init_radius must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub names: Vec<String>,
    /// Post-warmup draws on the constrained scale, `draws × dim`.
    pub draws: Vec<Vec<f64>>,
    /// Unconstrained log density (Jacobian included) at each draw.
    pub logp: Vec<f64>,
    pub warmup: usize,
    pub seed: u64,
    pub chain: usize,
    /// `"nuts"` or `"rwm"`.
    pub sampler: String,
    /// Post-warmup divergent transitions.
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    /// Adapted inverse mass matrix diagonal (proposal scales for RWM).
    pub mass_diag: Vec<f64>,
    pub mean_accept: f64,
    /// Post-warmup transitions that hit the maximum tree depth.
    pub max_depth_hits: usize,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

struct Hamiltonian<'a, T: ?Sized> {
    target: &'a T,
    minv: Vec<f64>,
}

impl<T: TargetDensity + ?Sized> Hamiltonian<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.minv).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn energy(&self, pt: &Point) -> f64 {
        -pt.logp + self.kinetic(&pt.p)
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.minv).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.minv
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                z / m.sqrt()
            })
            .collect()
    }

    fn evaluate(&self, q: &[f64]) -> (f64, Vec<f64>) {
        match self.target.logp_grad(q) {
            Ok((lp, g)) if lp.is_finite() && g.iter().all(|v| v.is_finite()) => (lp, g),
            _ => (f64::NEG_INFINITY, vec![0.0; q.len()]),
        }
    }

    fn leapfrog(&self, pt: &mut Point, eps: f64) {
        for (p, g) in pt.p.iter_mut().zip(&pt.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in pt.q.iter_mut().zip(&pt.p).zip(&self.minv) {
            *q += eps * m * p;
        }
        let (lp, g) = self.evaluate(&pt.q);
        pt.logp = lp;
        pt.grad = g;
        for (p, g) in pt.p.iter_mut().zip(&pt.grad) {
            *p += 0.5 * eps * g;
        }
    }
}

const MAX_ENERGY_ERROR: f64 = 1000.0;

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Generalized no-U-turn criterion for a trajectory with summed momentum
/// `rho` and end-point velocities `v_a`, `v_b`.
fn no_u_turn(v_a: &[f64], v_b: &[f64], rho: &[f64]) -> bool {
    dot(v_a, rho) > 0.0 && dot(v_b, rho) > 0.0
}

/// Momentum and velocity at one end of a subtree.
#[derive(Clone)]
struct Edge {
    p: Vec<f64>,
    v: Vec<f64>,
}

struct Subtree {
    log_weight: f64,
    rho: Vec<f64>,
    /// End nearest the starting point, in build order.
    first: Edge,
    last: Edge,
    proposal: Point,
}

#[derive(Default)]
struct TreeStats {
    n_leapfrog: usize,
    sum_accept: f64,
    divergent: bool,
}

impl<T: TargetDensity + ?Sized> Hamiltonian<'_, T> {
    /// Builds a subtree of `2^depth` leapfrog steps from `edge`, leaving
    /// `edge` at the new outermost state. `None` marks a divergence or an
    /// internal U-turn.
    fn build_tree<R: Rng>(
        &self,
        depth: usize,
        edge: &mut Point,
        eps: f64,
        h0: f64,
        rng: &mut R,
        stats: &mut TreeStats,
    ) -> Option<Subtree> {
        if depth == 0 {
            self.leapfrog(edge, eps);
            stats.n_leapfrog += 1;
            let mut h = self.energy(edge);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - h0 > MAX_ENERGY_ERROR {
                stats.divergent = true;
            }
            stats.sum_accept += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            if stats.divergent {
                return None;
            }
            let e = Edge {
                p: edge.p.clone(),
                v: self.velocity(&edge.p),
            };
            return Some(Subtree {
                log_weight: h0 - h,
                rho: edge.p.clone(),
                first: e.clone(),
                last: e,
                proposal: edge.clone(),
            });
        }
        let left = self.build_tree(depth - 1, edge, eps, h0, rng, stats)?;
        let right = self.build_tree(depth - 1, edge, eps, h0, rng, stats)?;
        let log_weight = log_sum_exp(left.log_weight, right.log_weight);
        let take_right = rng.random::<f64>() < (right.log_weight - log_weight).exp();
        let proposal = if take_right { right.proposal } else { left.proposal };
        let rho = add(&left.rho, &right.rho);
        let persist = no_u_turn(&left.first.v, &right.last.v, &rho)
            && no_u_turn(&left.first.v, &right.first.v, &add(&left.rho, &right.first.p))
            && no_u_turn(&left.last.v, &right.last.v, &add(&right.rho, &left.last.p));
        if !persist {
            return None;
        }
        Some(Subtree {
            log_weight,
            rho,
            first: left.first,
            last: right.last,
            proposal,
        })
    }

    /// One NUTS transition from `q`.
    fn transition<R: Rng>(&self, current: &Point, eps: f64, max_depth: usize, rng: &mut R) -> Transition {
        let mut start = current.clone();
        start.p = self.sample_momentum(rng);
        let h0 = self.energy(&start);
        let v0 = self.velocity(&start.p);
        let mut fwd = start.clone();
        let mut bck = start.clone();
        // Outer edges of the whole trajectory.
        let mut fwd_edge = Edge { p: start.p.clone(), v: v0.clone() };
        let mut bck_edge = Edge { p: start.p.clone(), v: v0 };
        let mut rho = start.p.clone();
        let mut sample = start.clone();
        let mut log_weight = 0.0;
        let mut stats = TreeStats::default();
        let mut depth = 0;
        while depth < max_depth {
            let forward = rng.random::<f64>() < 0.5;
            let (edge, eps_dir) = if forward { (&mut fwd, eps) } else { (&mut bck, -eps) };
            let Some(sub) = self.build_tree(depth, edge, eps_dir, h0, rng, &mut stats) else {
                break;
            };
            depth += 1;
            if sub.log_weight > log_weight || rng.random::<f64>() < (sub.log_weight - log_weight).exp() {
                sample = sub.proposal.clone();
            }
            log_weight = log_sum_exp(log_weight, sub.log_weight);
            // `near`/`far` are the old trajectory's edges adjacent to and
            // opposite the new subtree.
            let (near, far) = if forward { (&fwd_edge, &bck_edge) } else { (&bck_edge, &fwd_edge) };
            let total = add(&rho, &sub.rho);
            let persist = no_u_turn(&far.v, &sub.last.v, &total)
                && no_u_turn(&far.v, &sub.first.v, &add(&rho, &sub.first.p))
                && no_u_turn(&near.v, &sub.last.v, &add(&sub.rho, &near.p));
            rho = total;
            if forward {
                fwd_edge = sub.last;
            } else {
                bck_edge = sub.last;
            }
            if !persist {
                break;
            }
        }
        let accept = if stats.n_leapfrog > 0 { stats.sum_accept / stats.n_leapfrog as f64 } else { 0.0 };
        Transition {
            point: sample,
            accept,
            divergent: stats.divergent,
            depth,
        }
    }
}

struct Transition {
    point: Point,
    accept: f64,
    divergent: bool,
    depth: usize,
}

/// Nesterov dual averaging of `log ε` toward a target acceptance statistic.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    target: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            target,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: an initial fast phase, slow windows of doubling length
/// for the metric, and a terminal fast phase.
#[derive(Debug, Clone)]
struct Windows {
    warmup: usize,
    init: usize,
    term: usize,
    /// Iteration indices at which a slow window closes.
    ends: Vec<usize>,
}

impl Windows {
    fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        if warmup < 20 {
            return Self { warmup, init: warmup, term: 0, ends: Vec::new() };
        }
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let slow_end = warmup - term;
        let mut ends = Vec::new();
        let mut start = init;
        let mut size = base;
        while start < slow_end {
            let mut end = start + size;
            if end + 2 * size > slow_end {
                end = slow_end;
            }
            ends.push(end);
            start = end;
            size *= 2;
        }
        Self { warmup, init, term, ends }
    }

    fn in_slow(&self, it: usize) -> bool {
        it >= self.init && it < self.warmup - self.term && !self.ends.is_empty()
    }

    fn closes_window(&self, it: usize) -> bool {
        self.ends.contains(&(it + 1))
    }
}

/// Welford running mean and variance per coordinate.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Variance shrunk toward `1e-3` with weight `5 / (n + 5)`.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn initial_point<T: TargetDensity + ?Sized, R: Rng>(
    target: &T,
    init: Option<&[f64]>,
    radius: f64,
    gradient: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let dim = target.dim();
    let eval = |q: &[f64]| -> Option<(f64, Vec<f64>)> {
        if gradient {
            target
                .logp_grad(q)
                .ok()
                .filter(|(lp, g)| lp.is_finite() && g.iter().all(|v| v.is_finite()))
        } else {
            let lp = target.logp(q);
            lp.is_finite().then(|| (lp, vec![0.0; dim]))
        }
    };
    if let Some(x) = init {
        let q = target.unconstrain(x)?;
        let (lp, g) = eval(&q).ok_or_else(|| Error::Sampling("log density is not finite at the supplied initial point".into()))?;
        return Ok((q, lp, g));
    }
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-radius..radius)).collect();
        if let Some((lp, g)) = eval(&q) {
            return Ok((q, lp, g));
        }
    }
    Err(Error::Sampling(format!(
        "no finite initial point found in 100 uniform draws on (-{radius}, {radius})^{dim}"
    )))
}

/// Heuristic initial step size: doubles or halves `eps` until the one-step
/// acceptance ratio crosses 0.8.
fn find_step_size<T: TargetDensity + ?Sized, R: Rng>(ham: &Hamiltonian<'_, T>, q: &Point, eps: f64, rng: &mut R) -> f64 {
    let threshold = 0.8f64.ln();
    let mut eps = eps;
    let try_step = |eps: f64, rng: &mut R| {
        let mut pt = q.clone();
        pt.p = ham.sample_momentum(rng);
        let h0 = ham.energy(&pt);
        ham.leapfrog(&mut pt, eps);
        let dh = h0 - ham.energy(&pt);
        if dh.is_nan() {
            f64::NEG_INFINITY
        } else {
            dh
        }
    };
    let direction = if try_step(eps, rng) > threshold { 1.0 } else { -1.0 };
    for _ in 0..100 {
        eps *= 2f64.powf(direction);
        let dh = try_step(eps, rng);
        if (direction > 0.0 && dh <= threshold) || (direction < 0.0 && dh >= threshold) {
            break;
        }
        if !(1e-12..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-12, 1e7)
}

fn run_nuts_chain<T: TargetDensity + ?Sized>(target: &T, cfg: &NutsConfig, chain: usize) -> Result<PosteriorChain> {
    let dim = target.dim();
    let mut rng = chain_rng(cfg.seed, chain);
    let (q, logp, grad) = initial_point(target, cfg.init.as_deref(), cfg.init_radius, true, &mut rng)?;
    let mut ham = Hamiltonian { target, minv: vec![1.0; dim] };
    let mut current = Point { q, p: vec![0.0; dim], logp, grad };
    let mut eps = find_step_size(&ham, &current, 1.0, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let windows = Windows::new(cfg.warmup);
    let mut welford = Welford::new(dim);
    let mut warmup_divergences = 0;
    for it in 0..cfg.warmup {
        let tr = ham.transition(&current, eps, cfg.max_tree_depth, &mut rng);
        current = tr.point;
        warmup_divergences += tr.divergent as usize;
        eps = da.update(tr.accept);
        if windows.in_slow(it) {
            welford.push(&current.q);
            if windows.closes_window(it) {
                ham.minv = welford.regularized_variance();
                welford = Welford::new(dim);
                eps = find_step_size(&ham, &current, eps, &mut rng);
                da = DualAveraging::new(eps, cfg.target_accept);
            }
        }
    }
    if cfg.warmup > 0 {
        if warmup_divergences == cfg.warmup {
            return Err(Error::Sampling(format!(
                "chain {chain}: all {} warmup transitions diverged (final step size {eps:.3e})",
                cfg.warmup
            )));
        }
        eps = da.final_step();
    }
    let mut draws = Vec::with_capacity(cfg.draws);
    let mut lps = Vec::with_capacity(cfg.draws);
    let (mut divergences, mut accept_sum, mut max_depth_hits) = (0, 0.0, 0);
    for _ in 0..cfg.draws {
        let tr = ham.transition(&current, eps, cfg.max_tree_depth, &mut rng);
        current = tr.point;
        divergences += tr.divergent as usize;
        accept_sum += tr.accept;
        max_depth_hits += (tr.depth >= cfg.max_tree_depth) as usize;
        draws.push(target.constrain(&current.q));
        lps.push(current.logp);
    }
    Ok(PosteriorChain {
        names: target.names(),
        draws,
        logp: lps,
        warmup: cfg.warmup,
        seed: cfg.seed,
        chain,
        sampler: "nuts".into(),
        divergences,
        warmup_divergences,
        step_size: eps,
        mass_diag: ham.minv,
        mean_accept: accept_sum / cfg.draws as f64,
        max_depth_hits,
    })
}

/// Runs `config.chains` independent NUTS chains in parallel.
pub fn nuts_sample<T: TargetDensity + ?Sized>(target: &T, config: &NutsConfig) -> Result<Vec<PosteriorChain>> {
    config.validate()?;
    if !target.has_gradient() {
        return Err(Error::Unsupported("NUTS needs a target with gradients; use random-walk Metropolis".into()));
    }
    check_target(target)?;
    (0..config.chains).into_par_iter().map(|c| run_nuts_chain(target, config, c)).collect()
}

fn check_target<T: TargetDensity + ?Sized>(target: &T) -> Result<()> {
    if target.dim() == 0 {
        return Err(Error::InvalidArgument("target has zero dimensions".into()));
    }
    check_len("target names", target.dim(), target.names().len())?;
    let transforms = target.transforms();
    check_len("target transforms", target.dim(), transforms.len())?;
    transforms.iter().try_for_each(Transform::validate)
}

/// Adaptive random-walk Metropolis for gradient-free targets. Proposals are
/// Gaussian with per-coordinate scales `s·sqrt(var)`; during warmup `s` is
/// tuned toward `target_accept` and `var` follows the NUTS window schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwmConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    /// Keep every `thin`-th post-warmup state.
    pub thin: usize,
    pub init_radius: f64,
    #[serde(default)]
    pub init: Option<Vec<f64>>,
}

impl Default for RwmConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 2000,
            draws: 1000,
            seed: 0,
            target_accept: 0.234,
            thin: 5,
            init_radius: 2.0,
            init: None,
        }
    }
}

impl From<&NutsConfig> for RwmConfig {
    fn from(c: &NutsConfig) -> Self {
        Self {
            chains: c.chains,
            warmup: c.warmup,
            draws: c.draws,
            seed: c.seed,
            init_radius: c.init_radius,
            init: c.init.clone(),
            ..Self::default()
        }
    }
}

fn run_rwm_chain<T: TargetDensity + ?Sized>(target: &T, cfg: &RwmConfig, chain: usize) -> Result<PosteriorChain> {
    let dim = target.dim();
    let mut rng = chain_rng(cfg.seed, chain);
    let (mut q, mut lp, _) = initial_point(target, cfg.init.as_deref(), cfg.init_radius, false, &mut rng)?;
    let mut var = vec![1.0; dim];
    let mut log_scale = (2.38 / (dim as f64).sqrt()).ln();
    let windows = Windows::new(cfg.warmup);
    let mut welford = Welford::new(dim);
    let step = |q: &mut Vec<f64>, lp: &mut f64, scale: f64, var: &[f64], rng: &mut ChaCha8Rng| -> f64 {
        let prop: Vec<f64> = q
            .iter()
            .zip(var)
            .map(|(x, v)| {
                let z: f64 = rng.sample(StandardNormal);
                x + scale * v.sqrt() * z
            })
            .collect();
        let lpp = target.logp(&prop);
        let a = if lpp.is_finite() { (lpp - *lp).exp().min(1.0) } else { 0.0 };
        if rng.random::<f64>() < a {
            *q = prop;
            *lp = lpp;
        }
        a
    };
    for it in 0..cfg.warmup {
        let a = step(&mut q, &mut lp, log_scale.exp(), &var, &mut rng);
        log_scale += (a - cfg.target_accept) / ((it + 1) as f64).powf(0.6);
        if windows.in_slow(it) {
            welford.push(&q);
            if windows.closes_window(it) {
                var = welford.regularized_variance();
                welford = Welford::new(dim);
            }
        }
    }
    let thin = cfg.thin.max(1);
    let mut draws = Vec::with_capacity(cfg.draws);
    let mut lps = Vec::with_capacity(cfg.draws);
    let mut accept_sum = 0.0;
    for _ in 0..cfg.draws {
        for _ in 0..thin {
            accept_sum += step(&mut q, &mut lp, log_scale.exp(), &var, &mut rng);
        }
        draws.push(target.constrain(&q));
        lps.push(lp);
    }
    Ok(PosteriorChain {
        names: target.names(),
        draws,
        logp: lps,
        warmup: cfg.warmup,
        seed: cfg.seed,
        chain,
        sampler: "rwm".into(),
        divergences: 0,
        warmup_divergences: 0,
        step_size: log_scale.exp(),
        mass_diag: var,
        mean_accept: accept_sum / (cfg.draws * thin) as f64,
        max_depth_hits: 0,
    })
}

pub fn rwm_sample<T: TargetDensity + ?Sized>(target: &T, config: &RwmConfig) -> Result<Vec<PosteriorChain>> {
    if config.chains == 0 || config.draws == 0 {
        return Err(Error::InvalidArgument("sampler config: chains and draws must be positive".into()));
    }
    if !(config.target_accept > 0.0 && config.target_accept < 1.0) {
        return Err(Error::InvalidArgument("sampler config: target_accept must be in (0, 1)".into()));
    }
    check_target(target)?;
    (0..config.chains).into_par_iter().map(|c| run_rwm_chain(target, config, c)).collect()
}

/// NUTS when the target has gradients, random-walk Metropolis otherwise.
pub fn sample<T: TargetDensity + ?Sized>(target: &T, config: &NutsConfig) -> Result<Vec<PosteriorChain>> {
    if target.has_gradient() {
        nuts_sample(target, config)
    } else {
        log::info!("target has no gradient; falling back to random-walk Metropolis");
        rwm_sample(target, &RwmConfig::from(config))
    }
}

fn check_draws(chains: &[Vec<f64>], min_chains: usize) -> Result<usize> {
    if chains.len() < min_chains {
        return Err(Error::Diagnostics(format!("need at least {min_chains} chains, got {}", chains.len())));
    }
    let n = chains[0].len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostics("chains need equal lengths of at least 4 draws".into()));
    }
    Ok(n)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split-R̂ of one scalar quantity. `None` when the within-chain variance is
/// zero (degenerate).
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<Option<f64>> {
    let n = check_draws(chains, 2)?;
    let half = n / 2;
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[n - half..]]).collect();
    let m = halves.len() as f64;
    let h = half as f64;
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let w = halves.iter().map(|c| sample_var(c)).sum::<f64>() / m;
    let b = h * sample_var(&means);
    if !(w > 0.0) || !w.is_finite() {
        return Ok(None);
    }
    let var_plus = (h - 1.0) / h * w + b / h;
    Ok(Some((var_plus / w).sqrt()))
}

fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..n)
        .map(|lag| d[..n - lag].iter().zip(&d[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Effective sample size of one scalar quantity across chains, using
/// Geyer's initial monotone positive sequence. `None` when the pooled
/// variance is zero.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<Option<f64>> {
    let n = check_draws(chains, 1)?;
    let m = chains.len();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chain_means);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return Ok(None);
    }
    let mean_acov = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
    rho[1] = odd;
    let mut t = 1;
    while t + 2 < n.saturating_sub(4) && even + odd > 0.0 {
        even = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
        odd = 1.0 - (mean_var - mean_acov(t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..=max_t.min(n - 1)].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Ok(Some(total / tau))
}

fn columns(chains: &[PosteriorChain], j: usize) -> Vec<Vec<f64>> {
    chains.iter().map(|c| c.column(j)).collect()
}

fn check_chains(chains: &[PosteriorChain]) -> Result<usize> {
    let first = chains.first().ok_or_else(|| Error::Diagnostics("no chains".into()))?;
    if chains.iter().any(|c| c.names != first.names) {
        return Err(Error::Diagnostics("chains disagree on parameter names".into()));
    }
    Ok(first.dim())
}

/// Split-R̂ per parameter; `NaN` marks a degenerate (constant) parameter.
pub fn rhat(chains: &[PosteriorChain]) -> Result<Vec<f64>> {
    let dim = check_chains(chains)?;
    (0..dim).map(|j| Ok(split_rhat(&columns(chains, j))?.unwrap_or(f64::NAN))).collect()
}

/// Effective sample size per parameter; `NaN` marks a degenerate parameter.
pub fn ess(chains: &[PosteriorChain]) -> Result<Vec<f64>> {
    let dim = check_chains(chains)?;
    (0..dim)
        .map(|j| Ok(effective_sample_size(&columns(chains, j))?.unwrap_or(f64::NAN)))
        .collect()
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    /// `None` when degenerate.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
    /// `sd / sqrt(ess)`.
    pub mcse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub parameters: Vec<ParameterSummary>,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub divergences: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub mean_accept: Vec<f64>,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    /// Parameters whose R̂ or ESS was degenerate.
    pub degenerate: Vec<String>,
}

impl ChainDiagnostics {
    pub fn parameter(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn converged(&self, rhat_limit: f64) -> bool {
        self.parameters.iter().all(|p| p.rhat.map_or(true, |r| r < rhat_limit))
    }
}

/// Posterior summaries and convergence diagnostics. A single chain gets
/// summaries and ESS but no R̂.
pub fn diagnose(chains: &[PosteriorChain]) -> Result<ChainDiagnostics> {
    let dim = check_chains(chains)?;
    let mut parameters = Vec::with_capacity(dim);
    let mut degenerate = Vec::new();
    for j in 0..dim {
        let cols = columns(chains, j);
        let pooled: Vec<f64> = cols.iter().flatten().copied().collect();
        let name = chains[0].names[j].clone();
        let r = if chains.len() >= 2 { split_rhat(&cols)? } else { None };
        let e = effective_sample_size(&cols)?;
        let sd = sample_var(&pooled).sqrt();
        if e.is_none() || (chains.len() >= 2 && r.is_none()) {
            degenerate.push(name.clone());
        }
        parameters.push(ParameterSummary {
            name,
            mean: mean(&pooled),
            sd,
            q025: quantile(&pooled, 0.025),
            median: quantile(&pooled, 0.5),
            q975: quantile(&pooled, 0.975),
            rhat: r,
            ess: e,
            mcse: e.map(|e| sd / e.sqrt()),
        });
    }
    let max_rhat = parameters.iter().filter_map(|p| p.rhat).reduce(f64::max);
    let min_ess = parameters.iter().filter_map(|p| p.ess).reduce(f64::min);
    Ok(ChainDiagnostics {
        parameters,
        chains: chains.len(),
        draws_per_chain: chains[0].len(),
        divergences: chains.iter().map(|c| c.divergences).collect(),
        step_sizes: chains.iter().map(|c| c.step_size).collect(),
        mean_accept: chains.iter().map(|c| c.mean_accept).collect(),
        max_rhat,
        min_ess,
        degenerate,
    })
}

/// Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Writes all chains as one CSV: `chain,draw,lp,<names…>`.
pub fn write_chains_csv<W: Write>(chains: &[PosteriorChain], writer: W) -> Result<()> {
    check_chains(chains)?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["chain".to_string(), "draw".into(), "lp".into()];
    header.extend(chains[0].names.iter().cloned());
    w.write_record(&header)?;
    for c in chains {
        for (i, (d, lp)) in c.draws.iter().zip(&c.logp).enumerate() {
            let mut row = vec![c.chain.to_string(), i.to_string(), lp.to_string()];
            row.extend(d.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads chains written by [`write_chains_csv`]. Sampler metadata not stored
/// in the CSV is left at neutral values.
pub fn read_chains_csv<R: Read>(reader: R) -> Result<Vec<PosteriorChain>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[0] != "chain" || header[1] != "draw" || header[2] != "lp" {
        return Err(Error::Validation("chain CSV must start with columns chain,draw,lp".into()));
    }
    let names = header[3..].to_vec();
    let mut chains: Vec<PosteriorChain> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Validation(format!("chain CSV value `{s}`: {e}")));
        let chain: usize = rec[0].trim().parse().map_err(|e| Error::Validation(format!("chain index `{}`: {e}", &rec[0])))?;
        let lp = parse(&rec[2])?;
        let draw = rec.iter().skip(3).map(parse).collect::<Result<Vec<f64>>>()?;
        check_len("chain CSV row", names.len(), draw.len())?;
        let pos = match chains.iter().position(|c| c.chain == chain) {
            Some(p) => p,
            None => {
                chains.push(PosteriorChain {
                    names: names.clone(),
                    draws: Vec::new(),
                    logp: Vec::new(),
                    warmup: 0,
                    seed: 0,
                    chain,
                    sampler: "unknown".into(),
                    divergences: 0,
                    warmup_divergences: 0,
                    step_size: f64::NAN,
                    mass_diag: Vec::new(),
                    mean_accept: f64::NAN,
                    max_depth_hits: 0,
                });
                chains.len() - 1
            }
        };
        chains[pos].draws.push(draw);
        chains[pos].logp.push(lp);
    }
    if chains.is_empty() {
        return Err(Error::Validation("chain CSV has no draws".into()));
    }
    Ok(chains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Gaussian with dense precision, identity transforms.
    struct Gaussian {
        mean: Vec<f64>,
        prec: Vec<Vec<f64>>,
    }

    impl Gaussian {
        fn correlated(rho: f64) -> Self {
            let det = 1.0 - rho * rho;
            Self {
                mean: vec![0.0, 0.0],
                prec: vec![vec![1.0 / det, -rho / det], vec![-rho / det, 1.0 / det]],
            }
        }

        fn standard(dim: usize) -> Self {
            Self {
                mean: vec![0.0; dim],
                prec: (0..dim).map(|i| (0..dim).map(|j| (i == j) as u8 as f64).collect()).collect(),
            }
        }
    }

    impl TargetDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn logp(&self, z: &[f64]) -> f64 {
            self.logp_grad(z).unwrap().0
        }
        fn logp_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            let d: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            let pd: Vec<f64> = self.prec.iter().map(|row| dot(row, &d)).collect();
            Ok((-0.5 * dot(&d, &pd), pd.iter().map(|v| -v).collect()))
        }
        fn has_gradient(&self) -> bool {
            true
        }
    }

    /// `Unif(lo, hi)` on the constrained scale.
    struct Uniform {
        t: Transform,
    }

    impl TargetDensity for Uniform {
        fn dim(&self) -> usize {
            1
        }
        fn transforms(&self) -> Vec<Transform> {
            vec![self.t]
        }
        fn logp(&self, z: &[f64]) -> f64 {
            self.t.log_jacobian(z[0])
        }
        fn logp_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.logp(z), vec![self.t.dlog_jacobian(z[0])]))
        }
        fn has_gradient(&self) -> bool {
            true
        }
    }

    fn cfg(chains: usize, warmup: usize, draws: usize, seed: u64) -> NutsConfig {
        NutsConfig { chains, warmup, draws, seed, ..NutsConfig::default() }
    }

    fn normal_cdf(x: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        Normal::standard().cdf(x)
    }

    #[test]
    fn transforms_round_trip() {
        let ts = [
            Transform::Identity,
            Transform::LowerBounded { lower: -1.0 },
            Transform::Interval { lower: 0.0, upper: 5.0 },
        ];
        for t in ts {
            for z in [-3.0, -0.5, 0.0, 0.7, 4.0] {
                let x = t.constrain(z);
                assert!((t.unconstrain(x).unwrap() - z).abs() < 1e-10, "{t:?} {z}");
                let h = 1e-6;
                let fd = (t.constrain(z + h) - t.constrain(z - h)) / (2.0 * h);
                assert!((fd - t.dconstrain(z)).abs() < 1e-6 * fd.abs().max(1.0));
                assert!((t.dconstrain(z).ln() - t.log_jacobian(z)).abs() < 1e-9);
                let fd = (t.log_jacobian(z + h) - t.log_jacobian(z - h)) / (2.0 * h);
                assert!((fd - t.dlog_jacobian(z)).abs() < 1e-6);
            }
        }
        assert!(Transform::Interval { lower: 0.0, upper: 5.0 }.unconstrain(5.0).is_err());
        assert!(Transform::LowerBounded { lower: 0.0 }.unconstrain(0.0).is_err());
        assert!(Transform::Interval { lower: 1.0, upper: 1.0 }.validate().is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let chains = nuts_sample(&Gaussian::standard(1), &cfg(4, 1000, 1000, 11)).unwrap();
        let d = diagnose(&chains).unwrap();
        let p = &d.parameters[0];
        assert!(p.mean.abs() < 3.0 * p.mcse.unwrap(), "mean {} mcse {:?}", p.mean, p.mcse);
        assert!((p.sd * p.sd - 1.0).abs() < 0.1, "var {}", p.sd * p.sd);
        assert!(d.divergences.iter().all(|&n| n == 0));
    }

    #[test]
    fn correlated_gaussian_correlation() {
        let chains = nuts_sample(&Gaussian::correlated(0.9), &cfg(4, 1000, 1000, 3)).unwrap();
        let x: Vec<f64> = chains.iter().flat_map(|c| c.column(0)).collect();
        let y: Vec<f64> = chains.iter().flat_map(|c| c.column(1)).collect();
        let (mx, my) = (mean(&x), mean(&y));
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0);
        let r = cov / (sample_var(&x) * sample_var(&y)).sqrt();
        assert!((r - 0.9).abs() < 0.05, "correlation {r}");
        assert!(rhat(&chains).unwrap().iter().all(|r| *r < 1.01));
    }

    #[test]
    fn normal_normal_conjugate() {
        // y_i ~ N(μ, 1), μ ~ N(0, 10²): posterior N(m, s²) in closed form.
        struct Conjugate {
            y: Vec<f64>,
        }
        impl TargetDensity for Conjugate {
            fn dim(&self) -> usize {
                1
            }
            fn logp(&self, z: &[f64]) -> f64 {
                self.logp_grad(z).unwrap().0
            }
            fn logp_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
                let mu = z[0];
                let lp = -0.5 * self.y.iter().map(|y| (y - mu).powi(2)).sum::<f64>() - 0.5 * mu * mu / 100.0;
                let g = self.y.iter().map(|y| y - mu).sum::<f64>() - mu / 100.0;
                Ok((lp, vec![g]))
            }
            fn has_gradient(&self) -> bool {
                true
            }
        }
        let y = vec![2.1, 1.4, 3.3, 2.8, 1.9, 2.2, 2.6, 1.7];
        let n = y.len() as f64;
        let prec = n + 0.01;
        let m = y.iter().sum::<f64>() / prec;
        let s = prec.recip().sqrt();
        let chains = nuts_sample(&Conjugate { y }, &cfg(4, 500, 1000, 5)).unwrap();
        let p = diagnose(&chains).unwrap().parameters[0].clone();
        let mcse = p.mcse.unwrap();
        assert!((p.mean - m).abs() < 3.0 * mcse, "mean {} vs {m}", p.mean);
        // The MCSE of the sd estimate is roughly sd/sqrt(2·ESS).
        assert!((p.sd - s).abs() < 3.0 * s / (2.0 * p.ess.unwrap()).sqrt(), "sd {} vs {s}", p.sd);
    }

    #[test]
    fn ks_smoke_test_standard_normal() {
        let chains = nuts_sample(&Gaussian::standard(1), &cfg(4, 500, 1000, 17)).unwrap();
        let x: Vec<f64> = chains.iter().flat_map(|c| c.column(0)).collect();
        let ks = ks_statistic(&x, normal_cdf);
        assert!(ks < ks_critical_1pct(x.len()), "KS {ks}");
    }

    #[test]
    fn bounded_draws_stay_in_bounds() {
        let t = Transform::Interval { lower: 0.0, upper: 1.0 };
        let chains = nuts_sample(&Uniform { t }, &cfg(2, 300, 500, 2)).unwrap();
        for c in &chains {
            assert!(c.draws.iter().all(|d| d[0] >= 0.0 && d[0] <= 1.0));
        }
        let x: Vec<f64> = chains.iter().flat_map(|c| c.column(0)).collect();
        assert!((mean(&x) - 0.5).abs() < 0.05);
    }

    #[test]
    fn fixed_seed_reproduces_chains() {
        let c = cfg(2, 100, 100, 9);
        let a = nuts_sample(&Gaussian::correlated(0.5), &c).unwrap();
        let b = nuts_sample(&Gaussian::correlated(0.5), &c).unwrap();
        assert_eq!(a, b);
        let other = nuts_sample(&Gaussian::correlated(0.5), &NutsConfig { seed: 10, ..c }).unwrap();
        assert_ne!(a[0].draws, other[0].draws);
        assert_ne!(a[0].draws, a[1].draws);
    }

    #[test]
    fn all_divergent_warmup_is_an_error() {
        struct Cliff;
        impl TargetDensity for Cliff {
            fn dim(&self) -> usize {
                1
            }
            fn logp(&self, _z: &[f64]) -> f64 {
                0.0
            }
            fn logp_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
                // Finite only at the starting point.
                if z[0] == 0.0 {
                    Ok((0.0, vec![0.0]))
                } else {
                    Ok((f64::NEG_INFINITY, vec![0.0]))
                }
            }
            fn has_gradient(&self) -> bool {
                true
            }
        }
        let c = NutsConfig { init: Some(vec![0.0]), ..cfg(1, 50, 10, 0) };
        assert!(matches!(nuts_sample(&Cliff, &c), Err(Error::Sampling(_))));
    }

    #[test]
    fn gradient_free_target_requires_rwm() {
        struct NoGrad;
        impl TargetDensity for NoGrad {
            fn dim(&self) -> usize {
                2
            }
            fn logp(&self, z: &[f64]) -> f64 {
                -0.5 * dot(z, z)
            }
        }
        assert!(matches!(nuts_sample(&NoGrad, &NutsConfig::default()), Err(Error::Unsupported(_))));
        let chains = sample(&NoGrad, &cfg(4, 1000, 1000, 1)).unwrap();
        assert!(chains.iter().all(|c| c.sampler == "rwm"));
        let d = diagnose(&chains).unwrap();
        for p in &d.parameters {
            assert!(p.mean.abs() < 4.0 * p.mcse.unwrap(), "{p:?}");
            assert!((p.sd - 1.0).abs() < 0.15, "{p:?}");
        }
        assert!(d.max_rhat.unwrap() < 1.05);
    }

    #[test]
    fn rhat_of_iid_chains_is_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..2000).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let r = split_rhat(&chains).unwrap().unwrap();
        assert!((0.99..=1.01).contains(&r), "{r}");
        let e = effective_sample_size(&chains).unwrap().unwrap();
        assert!((e / 8000.0 - 1.0).abs() < 0.2, "{e}");
    }

    #[test]
    fn rhat_flags_offset_and_constant_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..500).map(|_| 10.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        assert!(split_rhat(&[a, b]).unwrap().unwrap() > 1.1);
        let c = vec![vec![3.0; 100], vec![3.0; 100]];
        assert_eq!(split_rhat(&c).unwrap(), None);
        assert_eq!(effective_sample_size(&c).unwrap(), None);
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0, 4.0]]).is_err());
        assert!(split_rhat(&[vec![1.0; 3], vec![1.0; 3]]).is_err());
    }

    #[test]
    fn ess_of_ar1_matches_theory() {
        let rho: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - rho * rho).sqrt();
                (0..5000)
                    .map(|_| {
                        x = rho * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let e = effective_sample_size(&chains).unwrap().unwrap();
        let expected = 20000.0 * (1.0 - rho) / (1.0 + rho);
        assert!((e / expected - 1.0).abs() < 0.3, "{e} vs {expected}");
    }

    #[test]
    fn chains_csv_round_trip() {
        let chains = nuts_sample(&Gaussian::standard(2), &cfg(2, 50, 20, 4)).unwrap();
        let mut buf = Vec::new();
        write_chains_csv(&chains, &mut buf).unwrap();
        let back = read_chains_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in chains.iter().zip(&back) {
            assert_eq!(a.draws, b.draws);
            assert_eq!(a.logp, b.logp);
            assert_eq!(a.names, b.names);
        }
        let json = serde_json::to_string(&diagnose(&chains).unwrap()).unwrap();
        let _: ChainDiagnostics = serde_json::from_str(&json).unwrap();
    }

    #[test]
    fn window_schedule_covers_slow_phase() {
        let w = Windows::new(1000);
        assert_eq!((w.init, w.term), (75, 50));
        assert_eq!(w.ends, vec![100, 150, 250, 450, 950]);
        let w = Windows::new(100);
        assert_eq!(*w.ends.last().unwrap(), 90);
        assert!(Windows::new(10).ends.is_empty());
    }

    proptest! {
        #[test]
        fn gaussian_gradient_matches_finite_differences(z in proptest::collection::vec(-3.0f64..3.0, 2)) {
            let g = Gaussian::correlated(0.7);
            prop_assert!(gradient_error(&g, &z, 1e-5).unwrap() < 1e-4);
        }

        #[test]
        fn quantile_is_monotone(mut x in proptest::collection::vec(-10.0f64..10.0, 1..40), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(quantile(&x, lo) <= quantile(&x, hi));
            x.sort_by(f64::total_cmp);
            prop_assert_eq!(quantile(&x, 0.0), x[0]);
            prop_assert_eq!(quantile(&x, 1.0), *x.last().unwrap());
        }
    }

    #[test]
    fn rng_streams_differ_per_chain() {
        let a: f64 = chain_rng(1, 0).random();
        let b: f64 = chain_rng(1, 1).random();
        assert_ne!(a, b);
    }
}
