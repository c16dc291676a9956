//! Observation covariance from simulated ensembles, and the multivariate
//! normal log-density used by every likelihood in the crate.
//!
//! The experiment cannot be repeated, so the covariance of the measured
//! series is approximated by propagating boundary-condition uncertainty
//! through the simulator and taking the sample covariance of the responses.
//! The simulator is deterministic, so an independent nugget is added on the
//! diagonal before factorization. This over-estimates correlation over long
//! lags; no correction is applied.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::synthsim::{BcUncertainty, CaseSpec, Simulator};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Simulated realizations of one case's flattened output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<Vec<f64>>,
    pub case_id: String,
}

impl Ensemble {
    pub fn new(members: Vec<Vec<f64>>, case_id: impl Into<String>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Validation("an ensemble needs at least 2 members".into()));
        }
        let k = members[0].len();
        for (i, m) in members.iter().enumerate() {
            check_len("ensemble member", k, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("ensemble member {i} is not finite")));
            }
        }
        Ok(Self {
            members,
            case_id: case_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let m = self.members.len() as f64;
        let mut mean = vec![0.0; self.dim()];
        for member in &self.members {
            for (a, b) in mean.iter_mut().zip(member) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        mean
    }

    /// Per-output sample standard deviations (divisor `M - 1`).
    pub fn std_devs(&self) -> Vec<f64> {
        let cov = estimate_cov(self);
        (0..self.dim()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect()
    }

    /// `(0.01 * mean per-output standard deviation)^2`.
    pub fn default_nugget(&self) -> f64 {
        let sd = self.std_devs();
        let mean_sd = sd.iter().sum::<f64>() / sd.len() as f64;
        (0.01 * mean_sd).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Full,
    Diagonal,
}

impl std::str::FromStr for CovMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CovMode::Full),
            "diag" | "diagonal" => Ok(CovMode::Diagonal),
            other => Err(Error::InvalidArgument(format!("unknown covariance mode `{other}`"))),
        }
    }
}

/// Factorized observation covariance `Σ + nugget·I`.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    matrix: DMatrix<f64>,
    nugget: f64,
    mode: CovMode,
    cholesky: DMatrix<f64>,
    log_det: f64,
    clipped: bool,
    pub case_id: Option<String>,
}

impl CovarianceModel {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Σ before the nugget is added.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn mode(&self) -> CovMode {
        self.mode
    }

    /// True when eigenvalue clipping was needed to factorize.
    pub fn clipped(&self) -> bool {
        self.clipped
    }

    /// Lower Cholesky factor of the covariance actually used in densities.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.cholesky
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// The matrix used in densities: `L·Lᵀ`.
    pub fn effective(&self) -> DMatrix<f64> {
        &self.cholesky * self.cholesky.transpose()
    }

    /// Same Σ and nugget, other mode. Diagonal mode keeps only `diag(Σ)`.
    pub fn with_mode(&self, mode: CovMode) -> Result<Self> {
        let mut out = regularize_cov_mode(&self.matrix, self.nugget, mode)?;
        out.case_id = self.case_id.clone();
        Ok(out)
    }

    /// `Σ⁻¹ r` by two triangular solves.
    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_len("covariance solve", self.dim(), r.len())?;
        let mut v = DVector::from_column_slice(r);
        if !self.cholesky.solve_lower_triangular_mut(&mut v) {
            return Err(Error::Numerical("singular Cholesky factor".into()));
        }
        if !self.cholesky.tr_solve_lower_triangular_mut(&mut v) {
            return Err(Error::Numerical("singular Cholesky factor".into()));
        }
        Ok(v.as_slice().to_vec())
    }

    /// `(rᵀ Σ⁻¹ r, Σ⁻¹ r)`.
    pub fn quad_form(&self, r: &[f64]) -> Result<(f64, Vec<f64>)> {
        let w = self.solve(r)?;
        Ok((r.iter().zip(&w).map(|(a, b)| a * b).sum(), w))
    }

    pub fn sidecar(&self) -> CovSidecar {
        CovSidecar {
            case_id: self.case_id.clone(),
            dim: self.dim(),
            nugget: self.nugget,
            mode: self.mode,
            clipped: self.clipped,
        }
    }

    /// Writes Σ (without nugget) as a headerless dense CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_matrix_csv(&self.matrix, writer)
    }

    pub fn read(csv: impl Read, sidecar: &CovSidecar) -> Result<Self> {
        let matrix = read_matrix_csv(csv)?;
        check_len("covariance sidecar dim", sidecar.dim, matrix.nrows())?;
        let mut model = regularize_cov_mode(&matrix, sidecar.nugget, sidecar.mode)?;
        model.case_id = sidecar.case_id.clone();
        Ok(model)
    }
}

/// JSON metadata stored next to an exported covariance CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovSidecar {
    pub case_id: Option<String>,
    pub dim: usize,
    pub nugget: f64,
    pub mode: CovMode,
    pub clipped: bool,
}

pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..m.nrows() {
        wtr.write_record((0..m.ncols()).map(|j| m[(i, j)].to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Validation(format!("cannot parse `{s}` in matrix CSV")))
                })
                .collect::<Result<_>>()?,
        );
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Validation("covariance CSV must be a square matrix".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Runs `members` simulations at `theta` with independently perturbed
/// boundary conditions. Failed members are dropped with a warning.
pub fn propagate_bc_uncertainty<S: Simulator + ?Sized>(
    simulator: &S,
    spec: &CaseSpec,
    bc_uncertainty: &[BcUncertainty],
    members: usize,
    theta: &[f64],
    seed: u64,
) -> Result<Ensemble> {
    let runs: Vec<Option<Vec<f64>>> = (0..members)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64 + 1);
            let run = spec
                .perturbed_bc(bc_uncertainty, &mut rng)
                .and_then(|bc| simulator.simulate_with_bc(theta, spec, &bc))
                .and_then(|g| g.flatten());
            match run {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("ensemble member {m} of case {} dropped: {e}", spec.id);
                    None
                }
            }
        })
        .collect();
    let survivors: Vec<Vec<f64>> = runs.into_iter().flatten().collect();
    if survivors.len() < 2 {
        return Err(Error::Numerical(format!(
            "only {} ensemble members survived for case {}",
            survivors.len(),
            spec.id
        )));
    }
    Ensemble::new(survivors, spec.id.clone())
}

/// Unbiased sample covariance (divisor `M - 1`).
pub fn estimate_cov(ensemble: &Ensemble) -> DMatrix<f64> {
    let k = ensemble.dim();
    let m = ensemble.members.len();
    let mean = ensemble.mean();
    let centered = DMatrix::from_fn(k, m, |i, j| ensemble.members[j][i] - mean[i]);
    let mut cov = &centered * centered.transpose() / (m as f64 - 1.0);
    symmetrize(&mut cov);
    cov
}

/// Covariance estimated separately for each measurement location and
/// assembled block-diagonally; `n_locations` must divide the ensemble width.
pub fn estimate_cov_block_diagonal(ensemble: &Ensemble, n_locations: usize) -> Result<DMatrix<f64>> {
    let k = ensemble.dim();
    if n_locations == 0 || k % n_locations != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n_locations} locations do not divide output width {k}"
        )));
    }
    let full = estimate_cov(ensemble);
    let t = k / n_locations;
    Ok(DMatrix::from_fn(k, k, |i, j| if i / t == j / t { full[(i, j)] } else { 0.0 }))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `Σ + nugget·I`, factorized; clips eigenvalues at `1e-10·trace/k` if the
/// plain factorization fails.
pub fn regularize_cov(sigma: &DMatrix<f64>, nugget: f64) -> Result<CovarianceModel> {
    regularize_cov_mode(sigma, nugget, CovMode::Full)
}

pub fn regularize_cov_mode(sigma: &DMatrix<f64>, nugget: f64, mode: CovMode) -> Result<CovarianceModel> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::InvalidArgument("covariance must be square and non-empty".into()));
    }
    if !(nugget >= 0.0 && nugget.is_finite()) {
        return Err(Error::InvalidArgument(format!("nugget must be >= 0, got {nugget}")));
    }
    let k = sigma.nrows();
    let mut s = match mode {
        CovMode::Full => {
            let mut s = sigma.clone();
            let asym = (0..k)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .map(|(i, j)| (s[(i, j)] - s[(j, i)]).abs())
                .fold(0.0, f64::max);
            let scale = s.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
            if asym > 1e-8 * scale {
                return Err(Error::InvalidArgument("covariance matrix is not symmetric".into()));
            }
            symmetrize(&mut s);
            s
        }
        CovMode::Diagonal => DMatrix::from_diagonal(&sigma.diagonal()),
    };
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
    }
    for i in 0..k {
        s[(i, i)] += nugget;
    }
    let (cholesky, clipped) = match s.clone().cholesky() {
        Some(c) => (c.l(), false),
        None => {
            let trace: f64 = s.diagonal().iter().sum();
            let floor = 1e-10 * trace.abs() / k as f64;
            if !(floor > 0.0) {
                return Err(Error::Numerical("covariance has zero trace".into()));
            }
            let eig = SymmetricEigen::new(s);
            let clipped_vals = eig.eigenvalues.map(|v| v.max(floor));
            let mut rebuilt = &eig.eigenvectors
                * DMatrix::from_diagonal(&clipped_vals)
                * eig.eigenvectors.transpose();
            symmetrize(&mut rebuilt);
            let chol = rebuilt.cholesky().ok_or_else(|| {
                Error::Numerical("covariance is not positive definite after eigenvalue clipping".into())
            })?;
            (chol.l(), true)
        }
    };
    let log_det = 2.0 * cholesky.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !log_det.is_finite() {
        return Err(Error::Numerical("covariance determinant is not finite".into()));
    }
    Ok(CovarianceModel {
        matrix: sigma.clone(),
        nugget,
        mode,
        cholesky,
        log_det,
        clipped,
        case_id: None,
    })
}

/// Diagonal covariance from per-point variances.
pub fn diagonal_cov(variances: &[f64]) -> Result<CovarianceModel> {
    let m = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
    regularize_cov_mode(&m, 0.0, CovMode::Diagonal)
}

/// Multivariate normal log-density via the Cholesky factor.
pub fn mvn_logpdf(x: &[f64], mu: &[f64], cov: &CovarianceModel) -> Result<f64> {
    check_len("mvn_logpdf mean", x.len(), mu.len())?;
    check_len("mvn_logpdf covariance", x.len(), cov.dim())?;
    let r: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut v = DVector::from_column_slice(&r);
    if !cov.cholesky.solve_lower_triangular_mut(&mut v) {
        return Err(Error::Numerical("singular Cholesky factor".into()));
    }
    let k = x.len() as f64;
    Ok(-0.5 * k * LN_2PI - 0.5 * cov.log_det - 0.5 * v.norm_squared())
}
