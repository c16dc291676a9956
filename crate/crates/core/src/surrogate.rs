//! One interface over the two surrogate back ends: PCA + one GP per retained
//! score, or an MLP mapping parameters straight to the flattened output.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrainingSet;
use crate::doe::{lhs_sample, uniform_sample};
use crate::error::{check_len, Error, Result};
use crate::gp::{GpFitConfig, GpModel};
use crate::nn::{MlpModel, TrainConfig, TrainHistory};
use crate::pca::PcaModel;
use crate::synthsim::{CaseSpec, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    GpPca,
    Mlp,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::GpPca => "gp_pca",
            Backend::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gp_pca" | "gp" => Ok(Backend::GpPca),
            "mlp" | "ann" | "nn" => Ok(Backend::Mlp),
            _ => Err(Error::InvalidArgument(format!("unknown surrogate backend `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum SurrogateModel {
    GpPca { pca: PcaModel, gps: Vec<GpModel> },
    Mlp { mlp: MlpModel },
}

/// A trained map `θ ∈ R^d → R^k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Surrogate {
    pub model: SurrogateModel,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub case_id: String,
}

impl Surrogate {
    pub fn backend(&self) -> Backend {
        match self.model {
            SurrogateModel::GpPca { .. } => Backend::GpPca,
            SurrogateModel::Mlp { .. } => Backend::Mlp,
        }
    }

    pub fn has_gradient(&self) -> bool {
        self.backend() == Backend::Mlp
    }

    pub fn predict(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len("surrogate input", self.input_dim, theta.len())?;
        match &self.model {
            SurrogateModel::GpPca { pca, gps } => {
                let scores = gps.iter().map(|g| g.predict_mean(theta)).collect::<Result<Vec<_>>>()?;
                pca.inverse_transform(&scores)
            }
            SurrogateModel::Mlp { mlp } => mlp.forward(theta),
        }
    }

    pub fn predict_many(&self, thetas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        thetas.iter().map(|t| self.predict(t)).collect()
    }

    /// Jacobian `k × d`; MLP back end only.
    pub fn grad_predict(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        check_len("surrogate input", self.input_dim, theta.len())?;
        match &self.model {
            SurrogateModel::Mlp { mlp } => mlp.grad_input(theta),
            SurrogateModel::GpPca { .. } => Err(Error::Unsupported("gradients are only available for the MLP back end".into())),
        }
    }

    /// `J(θ)ᵀ v`; MLP back end only.
    pub fn vjp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len("surrogate input", self.input_dim, theta.len())?;
        match &self.model {
            SurrogateModel::Mlp { mlp } => mlp.vjp(theta, v),
            SurrogateModel::GpPca { .. } => Err(Error::Unsupported("gradients are only available for the MLP back end".into())),
        }
    }

    /// Emulator covariance in output space, `P*ᵀ diag(var) P*`; GP+PCA only.
    pub fn emulator_covariance(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        check_len("surrogate input", self.input_dim, theta.len())?;
        match &self.model {
            SurrogateModel::GpPca { pca, gps } => {
                let var = gps.iter().map(|g| g.predict_point(theta).map(|(_, v)| v)).collect::<Result<Vec<_>>>()?;
                let p = pca.loading_matrix();
                Ok(&p * DMatrix::from_diagonal(&DVector::from_vec(var)) * p.transpose())
            }
            SurrogateModel::Mlp { .. } => Err(Error::Unsupported("emulator covariance needs the GP+PCA back end".into())),
        }
    }

    /// Number of retained principal components (GP+PCA only).
    pub fn n_components(&self) -> Option<usize> {
        match &self.model {
            SurrogateModel::GpPca { pca, .. } => Some(pca.p_star),
            SurrogateModel::Mlp { .. } => None,
        }
    }
}

fn fit_gps(training: &TrainingSet, pca: &PcaModel, config: &GpFitConfig) -> Result<Vec<GpModel>> {
    let scores = pca.scores_matrix(&training.outputs)?;
    (0..pca.p_star)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let cfg = GpFitConfig {
                seed: config.seed.wrapping_add(c as u64),
                ..config.clone()
            };
            GpModel::fit(&training.inputs, &y, &cfg).map_err(|e| e.context(format!("GP for principal component {}", c + 1)))
        })
        .collect()
}

fn fit_pca(training: &TrainingSet) -> Result<PcaModel> {
    training.validate()?;
    let pca = PcaModel::fit_samples(&training.outputs)?;
    if pca.degenerate {
        return Err(Error::Degenerate(format!("training outputs of case `{}` have no variance", training.case_id)));
    }
    Ok(pca)
}

/// PCA on the outputs, `p*` chosen by cumulative explained variance, one GP
/// per retained score.
pub fn train_gp_pca(training: &TrainingSet, evr_threshold: f64, config: &GpFitConfig) -> Result<Surrogate> {
    let pca = fit_pca(training)?;
    let p_star = pca.select_components(evr_threshold)?;
    finish_gp_pca(training, pca.truncated(p_star)?, config)
}

/// Same as [`train_gp_pca`] with an explicit component count.
pub fn train_gp_pca_components(training: &TrainingSet, p_star: usize, config: &GpFitConfig) -> Result<Surrogate> {
    let pca = fit_pca(training)?;
    finish_gp_pca(training, pca.truncated(p_star)?, config)
}

fn finish_gp_pca(training: &TrainingSet, pca: PcaModel, config: &GpFitConfig) -> Result<Surrogate> {
    log::info!("case {}: {} principal components retained", training.case_id, pca.p_star);
    let gps = fit_gps(training, &pca, config)?;
    Ok(Surrogate {
        input_dim: training.input_dim(),
        output_dim: training.output_dim(),
        case_id: training.case_id.clone(),
        model: SurrogateModel::GpPca { pca, gps },
    })
}

/// Architecture `[d, hidden…, k]` with data-fitted standardization.
pub fn train_mlp(
    training: &TrainingSet,
    validation: &TrainingSet,
    hidden: &[usize],
    config: &TrainConfig,
) -> Result<(Surrogate, TrainHistory)> {
    training.validate()?;
    let mut sizes = vec![training.input_dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(training.output_dim());
    let init = MlpModel::for_data(&sizes, training, config.seed)?;
    let (mlp, history) = init.train(training, validation, config)?;
    Ok((
        Surrogate {
            input_dim: training.input_dim(),
            output_dim: training.output_dim(),
            case_id: training.case_id.clone(),
            model: SurrogateModel::Mlp { mlp },
        },
        history,
    ))
}

/// Runs the simulator at every design point.
pub fn simulate_design<S: Simulator + ?Sized>(sim: &S, spec: &CaseSpec, points: &[Vec<f64>]) -> Result<TrainingSet> {
    let outputs = points
        .par_iter()
        .map(|p| sim.simulate_flat(p, spec))
        .collect::<Result<Vec<_>>>()?;
    TrainingSet::new(points.to_vec(), outputs, spec.id.clone())
}

/// Everything a convergence study or pipeline needs to build surrogates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSettings {
    pub bounds: Vec<(f64, f64)>,
    pub evr_threshold: f64,
    pub gp: GpFitConfig,
    pub mlp_hidden: Vec<usize>,
    pub mlp: TrainConfig,
    /// Size of the uniform validation set used for MLP early stopping.
    pub validation_size: usize,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        Self {
            bounds: vec![(0.0, 5.0); 4],
            evr_threshold: crate::pca::DEFAULT_EVR_THRESHOLD,
            gp: GpFitConfig {
                restarts: 2,
                ..GpFitConfig::default()
            },
            mlp_hidden: vec![32, 32],
            mlp: TrainConfig {
                learning_rate: 3e-3,
                lr_decay: 0.998,
                l2_penalty: 1e-6,
                max_epochs: 1500,
                early_stop_patience: 100,
                ..TrainConfig::default()
            },
            validation_size: 50,
        }
    }
}

/// Trains one surrogate of `backend` on an LHS design of size `n` over
/// `settings.bounds`.
pub fn build_surrogate<S: Simulator + ?Sized>(
    sim: &S,
    spec: &CaseSpec,
    backend: Backend,
    n: usize,
    settings: &SurrogateSettings,
    seed: u64,
) -> Result<Surrogate> {
    let design = lhs_sample(n, &settings.bounds, seed)?;
    let training = simulate_design(sim, spec, &design.points)?;
    match backend {
        Backend::GpPca => train_gp_pca(&training, settings.evr_threshold, &GpFitConfig { seed, ..settings.gp.clone() }),
        Backend::Mlp => {
            let val = uniform_sample(settings.validation_size.max(training.input_dim() + 1), &settings.bounds, seed ^ 0x5eed)?;
            let validation = simulate_design(sim, spec, &val.points)?;
            let cfg = TrainConfig { seed, ..settings.mlp.clone() };
            train_mlp(&training, &validation, &settings.mlp_hidden, &cfg).map(|(s, _)| s)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub backend: Backend,
    /// Pooled mean absolute error on the held-out runs; `None` if training failed.
    pub mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub case_id: String,
    pub test_size: usize,
    /// Range of the held-out simulator outputs, for relative errors.
    pub output_range: f64,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    pub fn mae(&self, n: usize, backend: Backend) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n && r.backend == backend).and_then(|r| r.mae)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["n", "backend", "mae", "relative_mae", "error"])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.backend.name().to_string(),
                r.mae.map(|m| m.to_string()).unwrap_or_default(),
                r.mae.map(|m| (m / self.output_range).to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pooled mean absolute error of `surrogate` against a held-out set.
pub fn holdout_mae(surrogate: &Surrogate, test: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in test.inputs.iter().zip(&test.outputs) {
        let p = surrogate.predict(x)?;
        total += p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / (test.len() * test.output_dim()) as f64)
}

/// Trains each back end on LHS designs of each size and reports held-out MAE
/// on `test_size` uniform random runs. Failed cells are recorded, not fatal.
pub fn convergence_study<S: Simulator + ?Sized>(
    sim: &S,
    spec: &CaseSpec,
    sample_sizes: &[usize],
    test_size: usize,
    backends: &[Backend],
    settings: &SurrogateSettings,
    seed: u64,
) -> Result<ConvergenceReport> {
    let test_design = uniform_sample(test_size.max(settings.bounds.len() + 1), &settings.bounds, seed ^ 0x7e57)?;
    let test = simulate_design(sim, spec, &test_design.points)?;
    let (lo, hi) = test
        .outputs
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let cells: Vec<(usize, Backend)> = sample_sizes.iter().flat_map(|&n| backends.iter().map(move |&b| (n, b))).collect();
    let rows = cells
        .par_iter()
        .map(|&(n, backend)| {
            let result = build_surrogate(sim, spec, backend, n, settings, seed).and_then(|s| holdout_mae(&s, &test));
            match result {
                Ok(mae) => ConvergenceRow { n, backend, mae: Some(mae), error: None },
                Err(e) => {
                    log::warn!("convergence cell N={n} {}: {e}", backend.name());
                    ConvergenceRow { n, backend, mae: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    Ok(ConvergenceReport {
        case_id: spec.id.clone(),
        test_size: test.len(),
        output_range: hi - lo,
        rows,
    })
}
