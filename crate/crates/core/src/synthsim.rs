//! Deterministic synthetic transient simulator with known ground truth.
//!
//! Four boundary-condition channels (pressure, flow, power, inlet
//! temperature) are combined into a scalar drive signal, passed through a
//! first-order lag, and mapped to three void-fraction-like outputs by a
//! per-location logistic curve. The four physical model parameters act as:
//!
//! * `θ1` gain: scales how strongly the lagged drive moves the outputs;
//! * `θ2` lag: the lag time constant is `τ0·(0.9 + 0.1·θ2)`;
//! * `θ3` offset: shifts every output's pre-saturation level;
//! * `θ4` slope: a drift that grows linearly over the transient.
//!
//! `θ = (1, 1, 1, 1)` gives the nominal curve. Outputs always lie in `(0, 1)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Split, TimeSeriesGrid, TransientCase};
use crate::error::{check_len, Error, Result};

/// Number of physical model parameters the synthetic simulator accepts.
pub const N_PARAMS: usize = 4;

const GAIN: f64 = 1.0;
const OFFSET: f64 = 0.15;
const SLOPE: f64 = 0.15;
/// Drive weights per channel, applied to the relative change from the base value.
const DRIVE_WEIGHTS: [f64; 4] = [-0.5, -1.0, 1.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcChannel {
    Pressure,
    Flow,
    Power,
    InletTemperature,
}

impl BcChannel {
    pub const ALL: [BcChannel; 4] = [
        BcChannel::Pressure,
        BcChannel::Flow,
        BcChannel::Power,
        BcChannel::InletTemperature,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BcChannel::Pressure => "pressure",
            BcChannel::Flow => "flow",
            BcChannel::Power => "power",
            BcChannel::InletTemperature => "inlet_temperature",
        }
    }
}

/// Smooth ramp from `base` to `base + delta` between `start` and `end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampProfile {
    pub base: f64,
    pub delta: f64,
    pub start: f64,
    pub end: f64,
}

impl RampProfile {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            delta: 0.0,
            start: 0.0,
            end: 1.0,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let u = ((t - self.start) / (self.end - self.start)).clamp(0.0, 1.0);
        self.base + self.delta * u * u * (3.0 - 2.0 * u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransientKind {
    #[serde(rename = "FR")]
    FlowReduction,
    #[serde(rename = "PI")]
    PowerIncrease,
    #[serde(rename = "TI")]
    TemperatureIncrease,
}

impl TransientKind {
    pub const ALL: [TransientKind; 3] = [
        TransientKind::FlowReduction,
        TransientKind::PowerIncrease,
        TransientKind::TemperatureIncrease,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TransientKind::FlowReduction => "FR",
            TransientKind::PowerIncrease => "PI",
            TransientKind::TemperatureIncrease => "TI",
        }
    }
}

/// Additive, time-localized bump in the "experimental" data that no
/// parameter setting can reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub form: String,
    pub magnitude: f64,
    pub center: f64,
    pub width: f64,
}

impl Discrepancy {
    pub fn bump(magnitude: f64, center: f64, width: f64) -> Self {
        Self {
            form: "bump".into(),
            magnitude,
            center,
            width,
        }
    }

    fn value(&self, t: f64) -> f64 {
        let z = (t - self.center) / self.width;
        self.magnitude * (-0.5 * z * z).exp()
    }
}

/// Everything needed to simulate one synthetic transient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: String,
    pub assembly: String,
    pub transient: TransientKind,
    pub n_times: usize,
    pub dt: f64,
    /// One profile per [`BcChannel`], in channel order.
    pub profiles: Vec<RampProfile>,
    pub location_names: Vec<String>,
    pub location_gains: Vec<f64>,
    pub location_offsets: Vec<f64>,
    /// Nominal lag time constant `τ0` in seconds.
    pub lag_time: f64,
    #[serde(default)]
    pub discrepancy: Option<Discrepancy>,
    #[serde(default)]
    pub split: Option<Split>,
}

impl CaseSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("case spec {}: {m}", self.id)));
        if self.n_times < 10 {
            return fail(format!("T = {} < 10", self.n_times));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail("dt must be positive".into());
        }
        if self.profiles.len() != BcChannel::ALL.len() {
            return fail("exactly four boundary-condition profiles are required".into());
        }
        for p in &self.profiles {
            if ![p.base, p.delta, p.start, p.end].iter().all(|v| v.is_finite()) || !(p.end > p.start) {
                return fail("invalid ramp profile".into());
            }
            if p.base == 0.0 {
                return fail("profile base must be nonzero".into());
            }
        }
        let l = self.location_names.len();
        if l == 0 || self.location_gains.len() != l || self.location_offsets.len() != l {
            return fail("location names, gains and offsets must have equal nonzero length".into());
        }
        if !self.location_gains.iter().chain(&self.location_offsets).all(|v| v.is_finite()) {
            return fail("non-finite location parameters".into());
        }
        if !(self.lag_time > 0.0 && self.lag_time.is_finite()) {
            return fail("lag time must be positive".into());
        }
        if let Some(d) = &self.discrepancy {
            if d.form != "bump" || !(d.width > 0.0) || !d.magnitude.is_finite() || !d.center.is_finite() {
                return fail("discrepancy must be a bump with positive width".into());
            }
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_times).map(|i| i as f64 * self.dt).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.n_times * self.location_names.len()
    }

    fn channel_names() -> Vec<String> {
        BcChannel::ALL.iter().map(|c| c.name().to_string()).collect()
    }

    /// Boundary-condition series generated from the nominal profiles.
    pub fn nominal_bc(&self) -> Result<TimeSeriesGrid> {
        self.validate()?;
        let times = self.times();
        let values = self
            .profiles
            .iter()
            .map(|p| times.iter().map(|&t| p.value(t)).collect())
            .collect();
        TimeSeriesGrid::new(times, Self::channel_names(), values)
    }

    /// One random realization of the boundary conditions under `uncertainty`.
    pub fn perturbed_bc(&self, uncertainty: &[BcUncertainty], rng: &mut impl Rng) -> Result<TimeSeriesGrid> {
        self.validate()?;
        let times = self.times();
        let mut values = Vec::with_capacity(BcChannel::ALL.len());
        for channel in BcChannel::ALL {
            let mut profile = self.profiles[channel.index()].clone();
            let mut pointwise = vec![0.0; times.len()];
            for u in uncertainty.iter().filter(|u| u.channel == channel) {
                let z: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                profile.base *= 1.0 + u.level_sd * z[0];
                profile.delta *= 1.0 + u.delta_sd * z[1];
                let shift = u.timing_sd * z[2];
                profile.start += shift;
                profile.end += shift;
                let innov = (1.0 - u.pointwise_rho * u.pointwise_rho).max(0.0).sqrt();
                let mut e = 0.0;
                for (t, slot) in pointwise.iter_mut().enumerate() {
                    let n: f64 = StandardNormal.sample(rng);
                    e = if t == 0 { n } else { u.pointwise_rho * e + innov * n };
                    *slot += u.pointwise_sd * e;
                }
            }
            values.push(
                times
                    .iter()
                    .zip(&pointwise)
                    .map(|(&t, e)| profile.value(t) * (1.0 + e))
                    .collect(),
            );
        }
        TimeSeriesGrid::new(times, Self::channel_names(), values)
    }

    /// Times over which the ramps are active, widened by three nominal lag
    /// constants so the lagged response is included.
    pub fn transition_window(&self) -> (f64, f64) {
        let active = self.profiles.iter().filter(|p| p.delta != 0.0);
        let start = active.clone().map(|p| p.start).fold(f64::INFINITY, f64::min);
        let end = active.map(|p| p.end).fold(f64::NEG_INFINITY, f64::max);
        if start.is_finite() && end.is_finite() {
            (start, end + 3.0 * self.lag_time)
        } else {
            (0.0, 0.0)
        }
    }

    /// Flattened indices of observations inside the transition window.
    pub fn transition_indices(&self) -> Vec<usize> {
        let (a, b) = self.transition_window();
        let times = self.times();
        let t = times.len();
        (0..self.location_names.len())
            .flat_map(|l| {
                times
                    .iter()
                    .enumerate()
                    .filter(move |(_, &x)| x >= a && x <= b)
                    .map(move |(i, _)| l * t + i)
            })
            .collect()
    }

    /// Range of the nominal drive signal; bounds how fast outputs can move.
    pub fn drive_range(&self) -> Result<f64> {
        let bc = self.nominal_bc()?;
        let d = drive(self, &bc);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(hi - lo)
    }

    /// Upper bound on `|y(t+1) - y(t)|` under nominal boundary conditions.
    pub fn max_step_change(&self, theta: &[f64]) -> Result<f64> {
        let gmax = self.location_gains.iter().map(|g| g.abs()).fold(0.0, f64::max);
        let span = self.dt * (self.n_times - 1) as f64;
        Ok(0.25 * (GAIN * gmax * theta[0].abs() * self.drive_range()? + SLOPE * (theta[3] - 1.0).abs() * self.dt / span))
    }
}

/// Perturbation law for one boundary-condition channel. All standard
/// deviations are relative except `timing_sd` (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcUncertainty {
    pub channel: BcChannel,
    #[serde(default)]
    pub level_sd: f64,
    #[serde(default)]
    pub delta_sd: f64,
    #[serde(default)]
    pub timing_sd: f64,
    #[serde(default)]
    pub pointwise_sd: f64,
    #[serde(default)]
    pub pointwise_rho: f64,
}

impl BcUncertainty {
    pub fn none(channel: BcChannel) -> Self {
        Self {
            channel,
            level_sd: 0.0,
            delta_sd: 0.0,
            timing_sd: 0.0,
            pointwise_sd: 0.0,
            pointwise_rho: 0.0,
        }
    }

    /// Same serially correlated relative noise on every channel.
    pub fn pointwise_all(sd: f64, rho: f64) -> Vec<Self> {
        BcChannel::ALL
            .iter()
            .map(|&c| Self {
                pointwise_sd: sd,
                pointwise_rho: rho,
                ..Self::none(c)
            })
            .collect()
    }
}

/// A deterministic map from parameters and boundary conditions to outputs.
pub trait Simulator: Sync {
    fn simulate_with_bc(&self, theta: &[f64], spec: &CaseSpec, bc: &TimeSeriesGrid) -> Result<TimeSeriesGrid>;

    fn simulate(&self, theta: &[f64], spec: &CaseSpec) -> Result<TimeSeriesGrid> {
        let bc = spec.nominal_bc()?;
        self.simulate_with_bc(theta, spec, &bc)
    }

    fn simulate_flat(&self, theta: &[f64], spec: &CaseSpec) -> Result<Vec<f64>> {
        self.simulate(theta, spec)?.flatten()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticSimulator;

fn drive(spec: &CaseSpec, bc: &TimeSeriesGrid) -> Vec<f64> {
    (0..bc.n_times())
        .map(|t| {
            BcChannel::ALL
                .iter()
                .map(|c| {
                    let i = c.index();
                    DRIVE_WEIGHTS[i] * (bc.values[i][t] / spec.profiles[i].base - 1.0)
                })
                .sum()
        })
        .collect()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Simulator for SyntheticSimulator {
    fn simulate_with_bc(&self, theta: &[f64], spec: &CaseSpec, bc: &TimeSeriesGrid) -> Result<TimeSeriesGrid> {
        check_len("simulator parameters", N_PARAMS, theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("simulator parameters must be finite".into()));
        }
        spec.validate()?;
        let times = spec.times();
        if bc.n_locations() != BcChannel::ALL.len() || bc.times != times {
            return Err(Error::Validation(format!(
                "boundary conditions for {} do not match the case time grid",
                spec.id
            )));
        }
        let d = drive(spec, bc);
        let tau = spec.lag_time * (0.9 + 0.1 * theta[1].max(0.0));
        let mut lagged = Vec::with_capacity(d.len());
        let mut x = d[0];
        lagged.push(x);
        for t in 1..d.len() {
            let alpha = 1.0 - (-(times[t] - times[t - 1]) / tau).exp();
            x += alpha * (d[t] - x);
            lagged.push(x);
        }
        let t0 = times[0];
        let span = times[times.len() - 1] - t0;
        let values = spec
            .location_gains
            .iter()
            .zip(&spec.location_offsets)
            .map(|(&gain, &offset)| {
                times
                    .iter()
                    .zip(&lagged)
                    .map(|(&t, &x)| {
                        let z = offset
                            + OFFSET * (theta[2] - 1.0)
                            + GAIN * gain * theta[0] * x
                            + SLOPE * (theta[3] - 1.0) * (t - t0) / span;
                        logistic(z)
                    })
                    .collect()
            })
            .collect();
        TimeSeriesGrid::new(times, spec.location_names.clone(), values)
    }
}

/// Noise-free "experimental" truth: simulator output plus the case's
/// discrepancy, if any.
pub fn truth<S: Simulator + ?Sized>(sim: &S, spec: &CaseSpec, theta: &[f64]) -> Result<TimeSeriesGrid> {
    let mut grid = sim.simulate(theta, spec)?;
    if let Some(d) = &spec.discrepancy {
        for row in grid.values.iter_mut() {
            for (v, &t) in row.iter_mut().zip(&grid.times) {
                *v += d.value(t);
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    Iid { sd: f64 },
    /// Stationary AR(1) per location with marginal standard deviation `sd`.
    Ar1 { rho: f64, sd: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Iid { sd } if sd >= 0.0 && sd.is_finite() => Ok(()),
            NoiseModel::Ar1 { rho, sd } if sd >= 0.0 && sd.is_finite() && rho.abs() < 1.0 => Ok(()),
            _ => Err(Error::InvalidArgument(format!("invalid noise law {self:?}"))),
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            NoiseModel::Iid { sd } | NoiseModel::Ar1 { sd, .. } => sd,
        }
    }

    /// Covariance of the flattened (location-major) noise vector.
    pub fn covariance(&self, n_locations: usize, n_times: usize) -> nalgebra::DMatrix<f64> {
        let (rho, sd) = match *self {
            NoiseModel::Iid { sd } => (0.0, sd),
            NoiseModel::Ar1 { rho, sd } => (rho, sd),
        };
        let k = n_locations * n_times;
        nalgebra::DMatrix::from_fn(k, k, |i, j| {
            if i / n_times != j / n_times {
                return 0.0;
            }
            let lag = (i % n_times).abs_diff(j % n_times) as i32;
            sd * sd * if lag == 0 { 1.0 } else { rho.powi(lag) }
        })
    }

    fn sample_series(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let (rho, sd) = match *self {
            NoiseModel::Iid { sd } => (0.0, sd),
            NoiseModel::Ar1 { rho, sd } => (rho, sd),
        };
        let innov = (1.0 - rho * rho).sqrt();
        let mut e = 0.0;
        (0..n)
            .map(|t| {
                let z: f64 = StandardNormal.sample(rng);
                e = if t == 0 { z } else { rho * e + innov * z };
                sd * e
            })
            .collect()
    }
}

/// Truth at `theta_star` plus additive observation noise.
pub fn synthesize_observations<S: Simulator + ?Sized>(
    sim: &S,
    spec: &CaseSpec,
    theta_star: &[f64],
    noise: NoiseModel,
    seed: u64,
) -> Result<TransientCase> {
    noise.validate()?;
    let mut grid = truth(sim, spec, theta_star)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for row in grid.values.iter_mut() {
        let e = noise.sample_series(row.len(), &mut rng);
        row.iter_mut().zip(e).for_each(|(v, e)| *v += e);
    }
    TransientCase::new(spec.id.clone(), spec.nominal_bc()?, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SuiteVariant {
    /// Every case shares `theta`.
    Homogeneous { theta: Vec<f64> },
    /// Per-case parameters drawn from `N(mu, sigma)` (truncated at `min_value`).
    Heterogeneous { mu: Vec<f64>, sigma: Vec<f64> },
}

impl SuiteVariant {
    pub fn default_heterogeneous() -> Self {
        SuiteVariant::Heterogeneous {
            mu: vec![1.4, 0.8, 1.2, 0.8],
            sigma: vec![0.15, 0.15, 0.1, 0.15],
        }
    }
}

/// Nine synthetic transients (3 assemblies × 3 transient types) with truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub seed: u64,
    pub variant: SuiteVariant,
    pub cases: Vec<CaseSpec>,
    /// Generating parameters, one vector per case.
    pub truths: Vec<Vec<f64>>,
}

impl BenchmarkSuite {
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        self.cases
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn case(&self, id: &str) -> Option<(&CaseSpec, &[f64])> {
        self.cases
            .iter()
            .position(|c| c.id == id)
            .map(|i| (&self.cases[i], self.truths[i].as_slice()))
    }

    pub fn inject_discrepancy(&mut self, id: &str, discrepancy: Discrepancy) -> Result<()> {
        let case = self
            .cases
            .iter_mut()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("no case `{id}` in suite")))?;
        case.discrepancy = Some(discrepancy);
        Ok(())
    }
}

/// Training cases, mirroring a 5/4 calibration/validation split.
pub const TRAIN_CASES: [&str; 5] = ["A-FR", "A-PI", "B-FR", "B-TI", "C-FR"];

struct Assembly {
    name: &'static str,
    gains: [f64; 3],
    offsets: [f64; 3],
    magnitude: f64,
}

const ASSEMBLIES: [Assembly; 3] = [
    Assembly {
        name: "A",
        gains: [0.7, 1.0, 1.3],
        offsets: [-2.2, -1.4, -0.7],
        magnitude: 0.8,
    },
    Assembly {
        name: "B",
        gains: [0.8, 1.1, 1.4],
        offsets: [-2.0, -1.2, -0.5],
        magnitude: 1.0,
    },
    Assembly {
        name: "C",
        gains: [0.6, 0.9, 1.2],
        offsets: [-1.8, -1.0, -0.4],
        magnitude: 1.2,
    },
];

/// Builds one case spec for an assembly/transient pair.
pub fn case_spec(assembly: &str, transient: TransientKind) -> Result<CaseSpec> {
    let a = ASSEMBLIES
        .iter()
        .find(|a| a.name == assembly)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown assembly `{assembly}`")))?;
    let mut profiles: Vec<RampProfile> = (0..4).map(|_| RampProfile::constant(1.0)).collect();
    let (channel, delta, start, end) = match transient {
        TransientKind::FlowReduction => (BcChannel::Flow, -0.4, 50.0, 90.0),
        TransientKind::PowerIncrease => (BcChannel::Power, 0.4, 60.0, 100.0),
        TransientKind::TemperatureIncrease => (BcChannel::InletTemperature, 0.1, 40.0, 110.0),
    };
    profiles[channel.index()] = RampProfile {
        base: 1.0,
        delta: delta * a.magnitude,
        start,
        end,
    };
    let id = format!("{}-{}", a.name, transient.code());
    let split = if TRAIN_CASES.contains(&id.as_str()) { Split::Train } else { Split::Test };
    Ok(CaseSpec {
        id,
        assembly: a.name.to_string(),
        transient,
        n_times: 40,
        dt: 5.0,
        profiles,
        location_names: vec!["lower".into(), "middle".into(), "upper".into()],
        location_gains: a.gains.to_vec(),
        location_offsets: a.offsets.to_vec(),
        lag_time: 15.0,
        discrepancy: None,
        split: Some(split),
    })
}

/// Nine cases with ground truth; heterogeneous truths are reproducible from
/// `seed`.
pub fn make_benchmark_suite(seed: u64, variant: SuiteVariant) -> Result<BenchmarkSuite> {
    let mut cases = Vec::with_capacity(9);
    for a in &ASSEMBLIES {
        for kind in TransientKind::ALL {
            cases.push(case_spec(a.name, kind)?);
        }
    }
    let truths = match &variant {
        SuiteVariant::Homogeneous { theta } => {
            check_len("homogeneous truth", N_PARAMS, theta.len())?;
            vec![theta.clone(); cases.len()]
        }
        SuiteVariant::Heterogeneous { mu, sigma } => {
            check_len("population mean", N_PARAMS, mu.len())?;
            check_len("population sd", N_PARAMS, sigma.len())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            cases
                .iter()
                .map(|_| {
                    mu.iter()
                        .zip(sigma)
                        .map(|(&m, &s)| loop {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            let v = m + s * z;
                            if v > 0.05 {
                                break v;
                            }
                        })
                        .collect()
                })
                .collect()
        }
    };
    Ok(BenchmarkSuite {
        seed,
        variant,
        cases,
        truths,
    })
}
