//! Pipeline stages. Each reads its inputs from the output root, writes its
//! artifacts there and records a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hbiuq::calib::{
    build_hierarchical_target, build_pooled_target, build_single_level_target, summarize_hyper, validate_posterior,
    ForwardModel, HyperSummary, SimulatorForward, SurrogateForward, ThetaSource, ValidationReport, RHAT_LIMIT,
};
use hbiuq::covest::{estimate_cov, propagate_bc_uncertainty, regularize_cov, CovSidecar};
use hbiuq::data::{ParameterVector, Split, TimeSeriesGrid, TrainingSet, TransientCase};
use hbiuq::doe::{lhs_sample, uniform_sample, DesignMatrix};
use hbiuq::sampler::{diagnose, read_chains_csv, sample, write_chains_csv, ChainDiagnostics, PosteriorChain};
use hbiuq::surrogate::{holdout_mae, simulate_design, train_gp_pca, train_mlp, Backend, Surrogate};
use hbiuq::synthsim::{make_benchmark_suite, synthesize_observations, BenchmarkSuite, Simulator, SyntheticSimulator};
use hbiuq::{CovarianceModel, Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::{sha256_hex, Layout, Manifest, Recorder};
use crate::config::{ForwardKind, ModelKind, RunConfig, Stage};

/// Config plus output root for one invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub layout: Layout,
    config_hash: String,
}

impl Context {
    pub fn new(cfg: RunConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.check()?;
        let mut hashed = cfg.clone();
        hashed.out_dir = None;
        let config_hash = sha256_hex(&serde_json::to_vec(&hashed)?);
        Ok(Self { cfg, layout: Layout::new(root), config_hash })
    }

    fn recorder(&self, command: &str) -> Recorder {
        Recorder::new(&self.layout, command)
    }

    fn finish(&self, rec: Recorder, seed: u64) -> Result<Manifest> {
        rec.finish(&self.config_hash, seed)
    }

    fn simulator(&self) -> SyntheticSimulator {
        SyntheticSimulator
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes an LHS design to `output` (default `<root>/design.csv`).
pub fn doe(ctx: &Context, n: Option<usize>, bounds: Option<Vec<(f64, f64)>>, seed: Option<u64>, output: Option<&Path>) -> Result<Manifest> {
    let mut rec = ctx.recorder("doe");
    let n = n.unwrap_or(ctx.cfg.doe.n);
    let bounds = bounds.unwrap_or_else(|| ctx.cfg.doe.bounds.clone());
    let seed = seed.unwrap_or_else(|| ctx.cfg.stage_seed(Stage::Doe));
    let design = lhs_sample(n, &bounds, seed)?;
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.design());
    let names = ParameterVector::default_names(bounds.len());
    let bytes = csv_bytes(|b| design.write_csv(b, &names))?;
    rec.write(&path, &bytes)?;
    ctx.finish(rec, seed)
}

fn read_suite(rec: &mut Recorder) -> Result<BenchmarkSuite> {
    let path = rec.layout.suite();
    rec.read_json(&path, "simulate")
}

fn read_design(rec: &mut Recorder) -> Result<Vec<Vec<f64>>> {
    let path = rec.layout.design();
    let bytes = rec.read(&path, "doe")?;
    Ok(DesignMatrix::read_csv(bytes.as_slice())?.1)
}

/// Builds the case suite, its observations, and simulator runs over the
/// design for every case.
pub fn simulate(ctx: &Context) -> Result<Manifest> {
    let mut rec = ctx.recorder("simulate");
    let seed = ctx.cfg.stage_seed(Stage::Simulate);
    let sim = ctx.simulator();
    let mut suite = make_benchmark_suite(seed, ctx.cfg.suite.variant.clone())?;
    for (id, d) in &ctx.cfg.suite.discrepancies {
        suite.inject_discrepancy(id, d.clone())?;
    }
    let design = read_design(&mut rec)?;
    let settings = ctx.cfg.surrogate_settings();
    let val_design = uniform_sample(settings.validation_size.max(settings.bounds.len() + 1), &settings.bounds, seed ^ 0x5eed)?;
    for (i, (spec, truth)) in suite.cases.iter().zip(&suite.truths).enumerate() {
        let obs = match &ctx.cfg.suite.observations_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.csv", spec.id));
                let bytes = rec.read(&path, "an external measurement export")?;
                TransientCase::new(spec.id.clone(), spec.nominal_bc()?, TimeSeriesGrid::read_csv(bytes.as_slice())?)?
            }
            None => synthesize_observations(&sim, spec, truth, ctx.cfg.suite.noise, seed.wrapping_add(i as u64))?,
        };
        for w in obs.warnings() {
            rec.warn(format!("case {}: {w}", spec.id));
        }
        check_case_shape(&obs, spec.output_dim())?;
        rec.write(&ctx.layout.observations(&spec.id), &csv_bytes(|b| obs.measurements.write_csv(b))?)?;
        rec.write(&ctx.layout.boundary_conditions(&spec.id), &csv_bytes(|b| obs.boundary_conditions.write_csv(b))?)?;
        let training = simulate_design(&sim, spec, &design)?;
        rec.write(&ctx.layout.training(&spec.id), &csv_bytes(|b| training.write_csv(b))?)?;
        let validation = simulate_design(&sim, spec, &val_design.points)?;
        rec.write(&ctx.layout.training_validation(&spec.id), &csv_bytes(|b| validation.write_csv(b))?)?;
    }
    rec.write_json(&ctx.layout.suite(), &suite)?;
    ctx.finish(rec, seed)
}

fn check_case_shape(case: &TransientCase, k: usize) -> Result<()> {
    if case.dim() != k {
        return Err(Error::Validation(format!(
            "case {}: {} observations, simulator produces {k}",
            case.id,
            case.dim()
        )));
    }
    Ok(())
}

fn read_training(rec: &mut Recorder, path: &Path, id: &str) -> Result<TrainingSet> {
    let bytes = rec.read(path, "simulate")?;
    TrainingSet::read_csv(bytes.as_slice(), id)
}

/// Trains one surrogate per case.
pub fn train_surrogate(ctx: &Context) -> Result<Manifest> {
    let mut rec = ctx.recorder("train-surrogate");
    let seed = ctx.cfg.stage_seed(Stage::Surrogate);
    let suite = read_suite(&mut rec)?;
    let settings = ctx.cfg.surrogate_settings();
    for spec in &suite.cases {
        let training = read_training(&mut rec, &ctx.layout.training(&spec.id), &spec.id)?;
        let surrogate = match ctx.cfg.surrogate.backend {
            Backend::GpPca => {
                let gp = hbiuq::gp::GpFitConfig { seed, ..settings.gp.clone() };
                train_gp_pca(&training, settings.evr_threshold, &gp)?
            }
            Backend::Mlp => {
                let validation = read_training(&mut rec, &ctx.layout.training_validation(&spec.id), &spec.id)?;
                let mlp = hbiuq::nn::TrainConfig { seed, ..settings.mlp.clone() };
                train_mlp(&training, &validation, &settings.mlp_hidden, &mlp)?.0
            }
        };
        let surrogate = Surrogate { case_id: spec.id.clone(), ..surrogate };
        rec.write_json(&ctx.layout.surrogate(&spec.id), &surrogate)?;
    }
    ctx.finish(rec, seed)
}

/// Held-out accuracy of every trained surrogate.
pub fn validate_surrogate(ctx: &Context) -> Result<Manifest> {
    let mut rec = ctx.recorder("validate-surrogate");
    let seed = ctx.cfg.stage_seed(Stage::Surrogate) ^ 0x7e57;
    let suite = read_suite(&mut rec)?;
    let sim = ctx.simulator();
    let test = uniform_sample(ctx.cfg.surrogate.test_size, &ctx.cfg.doe.bounds, seed)?;
    let mut rows = vec![vec![
        "case".to_string(),
        "backend".into(),
        "n_test".into(),
        "mae".into(),
        "rmse".into(),
        "max_abs".into(),
        "output_range".into(),
        "relative_mae".into(),
    ]];
    for spec in &suite.cases {
        let s: Surrogate = rec.read_json(&ctx.layout.surrogate(&spec.id), "train-surrogate")?;
        let set = simulate_design(&sim, spec, &test.points)?;
        let mae = holdout_mae(&s, &set)?;
        let (mut sq, mut max_abs, mut lo, mut hi) = (0.0, 0.0f64, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in set.inputs.iter().zip(&set.outputs) {
            for (p, t) in s.predict(x)?.iter().zip(y) {
                sq += (p - t) * (p - t);
                max_abs = max_abs.max((p - t).abs());
                lo = lo.min(*t);
                hi = hi.max(*t);
            }
        }
        let rmse = (sq / (set.len() * set.output_dim()) as f64).sqrt();
        rows.push(vec![
            spec.id.clone(),
            s.backend().name().into(),
            set.len().to_string(),
            mae.to_string(),
            rmse.to_string(),
            max_abs.to_string(),
            (hi - lo).to_string(),
            (mae / (hi - lo)).to_string(),
        ]);
    }
    rec.write(&ctx.layout.surrogate_validation(), &write_rows(&rows)?)?;
    ctx.finish(rec, seed)
}

fn write_rows(rows: &[Vec<String>]) -> Result<Vec<u8>> {
    csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Observation covariance per case from a boundary-condition ensemble,
/// plus the observation-noise covariance when configured.
pub fn estimate_covariance(ctx: &Context) -> Result<Manifest> {
    let mut rec = ctx.recorder("estimate-cov");
    let seed = ctx.cfg.stage_seed(Stage::Covariance);
    let suite = read_suite(&mut rec)?;
    let sim = ctx.simulator();
    let c = &ctx.cfg.covariance;
    for (i, spec) in suite.cases.iter().enumerate() {
        let ens = propagate_bc_uncertainty(&sim, spec, &c.bc_uncertainty, c.members, &c.theta, seed.wrapping_add(i as u64))?;
        if ens.members.len() < c.members {
            rec.warn(format!("case {}: {} of {} ensemble members survived", spec.id, ens.members.len(), c.members));
        }
        let mut sigma = estimate_cov(&ens);
        if c.include_noise {
            sigma += ctx.cfg.suite.noise.covariance(spec.location_names.len(), spec.n_times);
        }
        let nugget = c.nugget.unwrap_or_else(|| ens.default_nugget());
        let mut model = regularize_cov(&sigma, nugget)?;
        model.case_id = Some(spec.id.clone());
        if model.clipped() {
            rec.warn(format!("case {}: covariance eigenvalues clipped", spec.id));
        }
        rec.write(&ctx.layout.covariance(&spec.id), &csv_bytes(|b| model.write_csv(b))?)?;
        rec.write_json(&ctx.layout.covariance_sidecar(&spec.id), &model.sidecar())?;
    }
    ctx.finish(rec, seed)
}

fn load_case(rec: &mut Recorder, id: &str) -> Result<TransientCase> {
    let layout = rec.layout.clone();
    let meas = TimeSeriesGrid::read_csv(rec.read(&layout.observations(id), "simulate")?.as_slice())?;
    let bc = TimeSeriesGrid::read_csv(rec.read(&layout.boundary_conditions(id), "simulate")?.as_slice())?;
    let sidecar: CovSidecar = rec.read_json(&layout.covariance_sidecar(id), "estimate-cov")?;
    let cov_bytes = rec.read(&layout.covariance(id), "estimate-cov")?;
    let cov = CovarianceModel::read(cov_bytes.as_slice(), &sidecar)?;
    TransientCase::new(id, bc, meas)?.with_covariance(cov)
}

fn load_surrogate(rec: &mut Recorder, id: &str) -> Result<Arc<Surrogate>> {
    let path = rec.layout.surrogate(id);
    Ok(Arc::new(rec.read_json(&path, "train-surrogate")?))
}

/// Sampler state of one chain, stored beside the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain: usize,
    pub seed: u64,
    pub warmup: usize,
    pub sampler: String,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    pub mass_diag: Vec<f64>,
    pub mean_accept: f64,
    pub max_depth_hits: usize,
}

impl ChainMeta {
    fn of(c: &PosteriorChain) -> Self {
        Self {
            chain: c.chain,
            seed: c.seed,
            warmup: c.warmup,
            sampler: c.sampler.clone(),
            divergences: c.divergences,
            warmup_divergences: c.warmup_divergences,
            step_size: c.step_size,
            mass_diag: c.mass_diag.clone(),
            mean_accept: c.mean_accept,
            max_depth_hits: c.max_depth_hits,
        }
    }

    fn apply(&self, c: &mut PosteriorChain) {
        c.seed = self.seed;
        c.warmup = self.warmup;
        c.sampler = self.sampler.clone();
        c.divergences = self.divergences;
        c.warmup_divergences = self.warmup_divergences;
        c.step_size = self.step_size;
        c.mass_diag = self.mass_diag.clone();
        c.mean_accept = self.mean_accept;
        c.max_depth_hits = self.max_depth_hits;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRun {
    /// Case id for single-case runs.
    pub label: Option<String>,
    pub chains_file: String,
    pub chains: Vec<ChainMeta>,
    pub diagnostics: ChainDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub model: ModelKind,
    pub cov_mode: hbiuq::CovMode,
    pub cases: Vec<String>,
    pub parameters: Vec<String>,
    pub runs: Vec<CalibrationRun>,
}

fn calibration_cases(ctx: &Context, suite: &BenchmarkSuite) -> Result<Vec<String>> {
    match &ctx.cfg.calibration.cases {
        Some(c) => {
            for id in c {
                if suite.case(id).is_none() {
                    return Err(Error::Validation(format!("calibration.cases: unknown case `{id}`")));
                }
            }
            Ok(c.clone())
        }
        None => Ok(suite.train_indices().into_iter().map(|i| suite.cases[i].id.clone()).collect()),
    }
}

/// Posterior sampling for the configured model.
pub fn calibrate(ctx: &Context) -> Result<Manifest> {
    let mut rec = ctx.recorder("calibrate");
    let suite = read_suite(&mut rec)?;
    let ids = calibration_cases(ctx, &suite)?;
    let mut groups = Vec::with_capacity(ids.len());
    for id in &ids {
        groups.push((load_surrogate(&mut rec, id)?, load_case(&mut rec, id)?));
    }
    let cfg = &ctx.cfg.calibration;
    let sampler = ctx.cfg.sampler();
    let priors = ctx.cfg.priors()?;
    let refs: Vec<(Arc<Surrogate>, &TransientCase)> = groups.iter().map(|(s, c)| (s.clone(), c)).collect();
    let mut runs: Vec<(Option<String>, Vec<PosteriorChain>)> = Vec::new();
    match cfg.model {
        ModelKind::Single => {
            for (i, (s, c)) in groups.iter().enumerate() {
                let t = build_single_level_target(s.clone(), c, cfg.cov_mode, &priors)?;
                let sc = hbiuq::sampler::NutsConfig { seed: sampler.seed.wrapping_add(i as u64), ..sampler.clone() };
                runs.push((Some(c.id.clone()), sample(&t, &sc)?));
            }
        }
        ModelKind::Pooled => {
            let t = build_pooled_target(&refs, cfg.cov_mode, &priors)?;
            runs.push((None, sample(&t, &sampler)?));
        }
        ModelKind::Hierarchical => {
            let t = build_hierarchical_target(&refs, cfg.cov_mode, &ctx.cfg.hyper())?;
            runs.push((None, sample(&t, &sampler)?));
        }
    }
    let mut summary = CalibrationSummary {
        model: cfg.model,
        cov_mode: cfg.cov_mode,
        cases: ids,
        parameters: priors.names.clone(),
        runs: Vec::new(),
    };
    let mut hyper_err = None;
    for (label, chains) in &runs {
        let path = ctx.layout.chains(label.as_deref());
        rec.write(&path, &csv_bytes(|b| write_chains_csv(chains, b))?)?;
        let diagnostics = diagnose(chains)?;
        let divergent: usize = diagnostics.divergences.iter().sum();
        if divergent > 0 {
            rec.warn(format!("{}: {divergent} divergent transitions", ctx.layout.relative(&path)));
        }
        summary.runs.push(CalibrationRun {
            label: label.clone(),
            chains_file: ctx.layout.relative(&path),
            chains: chains.iter().map(ChainMeta::of).collect(),
            diagnostics,
        });
        if cfg.model == ModelKind::Hierarchical {
            match summarize_hyper(chains, cfg.allow_unconverged) {
                Ok(h) => rec.write_json(&ctx.layout.hyper_summary(), &h)?,
                Err(e) => hyper_err = Some(e),
            }
        }
    }
    rec.write_json(&ctx.layout.calibration_summary(), &summary)?;
    let manifest = ctx.finish(rec, sampler.seed)?;
    match hyper_err {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub rhat_limit: f64,
    pub converged: bool,
    pub runs: BTreeMap<String, ChainDiagnostics>,
}

/// Reads chain files back (with sampler state from the calibration
/// summary when present).
pub fn load_chains(rec: &mut Recorder) -> Result<Vec<(String, Vec<PosteriorChain>)>> {
    let layout = rec.layout.clone();
    let files = layout.chain_files();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no chain files in {}; run `calibrate` first",
            layout.calibration_dir().display()
        )));
    }
    let summary: Option<CalibrationSummary> = if layout.calibration_summary().exists() {
        Some(rec.read_json(&layout.calibration_summary(), "calibrate")?)
    } else {
        None
    };
    let mut out = Vec::new();
    for f in files {
        let rel = layout.relative(&f);
        let mut chains = read_chains_csv(rec.read(&f, "calibrate")?.as_slice())?;
        if let Some(run) = summary.as_ref().and_then(|s| s.runs.iter().find(|r| r.chains_file == rel)) {
            for (c, m) in chains.iter_mut().zip(&run.chains) {
                m.apply(c);
            }
        }
        out.push((rel, chains));
    }
    Ok(out)
}

/// Convergence diagnostics for every chain file; `strict` turns a failed
/// R̂ check into an error.
pub fn diagnose_chains(ctx: &Context, strict: bool) -> Result<Manifest> {
    let mut rec = ctx.recorder("diagnose");
    let all = load_chains(&mut rec)?;
    let mut runs = BTreeMap::new();
    let mut rows = vec![["file", "parameter", "mean", "sd", "q025", "median", "q975", "rhat", "ess", "mcse"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (file, chains) in &all {
        let d = diagnose(chains)?;
        for p in &d.parameters {
            rows.push(vec![
                file.clone(),
                p.name.clone(),
                p.mean.to_string(),
                p.sd.to_string(),
                p.q025.to_string(),
                p.median.to_string(),
                p.q975.to_string(),
                opt(p.rhat),
                opt(p.ess),
                opt(p.mcse),
            ]);
        }
        runs.insert(file.clone(), d);
    }
    let converged = runs.values().all(|d| d.converged(RHAT_LIMIT));
    rec.write_json(&ctx.layout.diagnostics(), &DiagnosticsFile { rhat_limit: RHAT_LIMIT, converged, runs })?;
    rec.write(&ctx.layout.diagnostics_csv(), &write_rows(&rows)?)?;
    if !converged {
        rec.warn(format!("R-hat at or above {RHAT_LIMIT} for at least one parameter"));
    }
    let manifest = ctx.finish(rec, 0)?;
    if strict && !converged {
        return Err(Error::Diagnostics(format!("chains have not converged (R-hat limit {RHAT_LIMIT})")));
    }
    Ok(manifest)
}

/// θ columns (constrained) of single-level chains, pooled over chains.
fn theta_draws(chains: &[PosteriorChain], names: &[String]) -> Result<Vec<Vec<f64>>> {
    let idx = names
        .iter()
        .map(|n| chains[0].index_of(n).ok_or_else(|| Error::Validation(format!("chains lack column {n}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(chains.iter().flat_map(|c| c.draws.iter().map(|d| idx.iter().map(|&j| d[j]).collect())).collect())
}

/// Errors of calibrated predictions on training and held-out cases,
/// against the configured reference θ.
pub fn validate_posterior_cmd(ctx: &Context) -> Result<Manifest> {
    let mut rec = ctx.recorder("validate-posterior");
    let seed = ctx.cfg.stage_seed(Stage::Validation);
    let suite = read_suite(&mut rec)?;
    let summary: CalibrationSummary = rec.read_json(&ctx.layout.calibration_summary(), "calibrate")?;
    let source = match summary.model {
        ModelKind::Hierarchical => {
            let h: HyperSummary = rec.read_json(&ctx.layout.hyper_summary(), "calibrate")?;
            ThetaSource::PredictiveNormal { laws: h.predictive() }
        }
        ModelKind::Pooled | ModelKind::Single => {
            let mut draws = Vec::new();
            for (_, chains) in load_chains(&mut rec)? {
                draws.extend(theta_draws(&chains, &summary.parameters)?);
            }
            ThetaSource::Draws { draws }
        }
    };
    let prior = ThetaSource::Point { theta: ctx.cfg.validation.prior_theta.clone() };
    let mut cases = Vec::new();
    for spec in &suite.cases {
        let meas = TimeSeriesGrid::read_csv(rec.read(&ctx.layout.observations(&spec.id), "simulate")?.as_slice())?;
        let bc = TimeSeriesGrid::read_csv(rec.read(&ctx.layout.boundary_conditions(&spec.id), "simulate")?.as_slice())?;
        let split = if summary.cases.contains(&spec.id) { Split::Train } else { Split::Test };
        cases.push((TransientCase::new(spec.id.clone(), bc, meas)?, split));
    }
    let sim = ctx.simulator();
    let forward: Box<dyn ForwardModel> = match ctx.cfg.validation.forward {
        ForwardKind::Simulator => Box::new(SimulatorForward { simulator: &sim as &dyn Simulator, specs: suite.cases.clone() }),
        ForwardKind::Surrogate => {
            let mut surrogates = BTreeMap::new();
            for spec in &suite.cases {
                surrogates.insert(spec.id.clone(), load_surrogate(&mut rec, &spec.id)?);
            }
            Box::new(SurrogateForward { surrogates })
        }
    };
    let report = validate_posterior(&source, Some(&prior), &cases, forward.as_ref(), ctx.cfg.validation.n_draws, seed)?;
    rec.write_json(&ctx.layout.validation_json(), &report)?;
    rec.write(&ctx.layout.validation_csv(), &csv_bytes(|b| report.write_csv(b))?)?;
    ctx.finish(rec, seed)
}

pub fn read_validation(rec: &mut Recorder) -> Result<ValidationReport> {
    let path = rec.layout.validation_json();
    rec.read_json(&path, "validate-posterior")
}

/// Every stage in order.
pub fn run_all(ctx: &Context) -> Result<Vec<Manifest>> {
    Ok(vec![
        doe(ctx, None, None, None, None)?,
        simulate(ctx)?,
        train_surrogate(ctx)?,
        validate_surrogate(ctx)?,
        estimate_covariance(ctx)?,
        calibrate(ctx)?,
        diagnose_chains(ctx, false)?,
        validate_posterior_cmd(ctx)?,
        crate::report::report(ctx)?,
    ])
}

pub(crate) fn recorder_for(ctx: &Context, command: &str) -> Recorder {
    ctx.recorder(command)
}

pub(crate) fn finish_for(ctx: &Context, rec: Recorder) -> Result<Manifest> {
    ctx.finish(rec, 0)
}
