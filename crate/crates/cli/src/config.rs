//! Run configuration: one JSON document drives every pipeline stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hbiuq::calib::{HyperPrior, PriorSpec};
use hbiuq::covest::CovMode;
use hbiuq::sampler::NutsConfig;
use hbiuq::surrogate::{Backend, SurrogateSettings};
use hbiuq::synthsim::{BcUncertainty, Discrepancy, NoiseModel, SuiteVariant, N_PARAMS};
use hbiuq::{Error, Result, Violation};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub suite: SuiteConfig,
    pub doe: DoeConfig,
    pub surrogate: SurrogateConfig,
    pub covariance: CovConfig,
    pub calibration: CalibConfig,
    pub validation: ValidationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: None,
            suite: SuiteConfig::default(),
            doe: DoeConfig::default(),
            surrogate: SurrogateConfig::default(),
            covariance: CovConfig::default(),
            calibration: CalibConfig::default(),
            validation: ValidationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub variant: SuiteVariant,
    pub noise: NoiseModel,
    /// Injected model discrepancy per case id.
    pub discrepancies: BTreeMap<String, Discrepancy>,
    /// Directory of measured `<case>.csv` grids used instead of synthetic
    /// observations.
    pub observations_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            variant: SuiteVariant::default_heterogeneous(),
            noise: NoiseModel::Iid { sd: 0.01 },
            discrepancies: BTreeMap::new(),
            observations_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoeConfig {
    pub n: usize,
    pub bounds: Vec<(f64, f64)>,
}

impl Default for DoeConfig {
    fn default() -> Self {
        Self {
            n: 200,
            bounds: vec![(0.0, 5.0); N_PARAMS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub backend: Backend,
    /// Bounds are taken from `doe.bounds`.
    pub settings: SurrogateSettings,
    /// Held-out uniform points per case for `validate-surrogate`.
    pub test_size: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mlp,
            settings: SurrogateSettings::default(),
            test_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovConfig {
    pub members: usize,
    /// Parameters at which the ensemble is run.
    pub theta: Vec<f64>,
    pub bc_uncertainty: Vec<BcUncertainty>,
    /// Defaults to the ensemble's own default nugget.
    pub nugget: Option<f64>,
    /// Add the observation-noise covariance of `suite.noise`.
    pub include_noise: bool,
}

impl Default for CovConfig {
    fn default() -> Self {
        Self {
            members: 100,
            theta: vec![1.0; N_PARAMS],
            bc_uncertainty: BcUncertainty::pointwise_all(0.01, 0.9),
            nugget: None,
            include_noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Independent calibration of each case.
    Single,
    /// One θ shared by all calibration cases.
    Pooled,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub model: ModelKind,
    pub cov_mode: CovMode,
    /// Defaults to the training split.
    pub cases: Option<Vec<String>>,
    /// Defaults to uniform priors on `doe.bounds`.
    pub priors: Option<PriorSpec>,
    pub hyper: Option<HyperPrior>,
    /// `seed` is replaced by one derived from the root seed.
    pub sampler: NutsConfig,
    pub allow_unconverged: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Hierarchical,
            cov_mode: CovMode::Full,
            cases: None,
            priors: None,
            hyper: None,
            sampler: NutsConfig::default(),
            allow_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardKind {
    Simulator,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub n_draws: usize,
    /// Reference point evaluated alongside the posterior.
    pub prior_theta: Vec<f64>,
    pub forward: ForwardKind,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            n_draws: 200,
            prior_theta: vec![1.0; N_PARAMS],
            forward: ForwardKind::Simulator,
        }
    }
}

/// Stage offsets mixed into the root seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Doe = 1,
    Simulate = 2,
    Surrogate = 3,
    Covariance = 4,
    Sampler = 5,
    Validation = 6,
}

impl RunConfig {
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(stage as u64)
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.suite.observations_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.out_dir.as_mut() {
            resolve(p);
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Parses JSON; errors name the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Validation(format!("config field `{path}`: {}", e.inner()))
        })
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let d = self.doe.bounds.len();
        if d != N_PARAMS {
            v.push(Violation::new("doe.bounds", format!("need {N_PARAMS} parameter bounds, got {d}")));
        }
        for (i, (lo, hi)) in self.doe.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                v.push(Violation::new(format!("doe.bounds[{i}]"), "lower must be finite and below upper"));
            }
        }
        if self.doe.n < 2 {
            v.push(Violation::new("doe.n", "need at least 2 design points"));
        }
        if let Err(e) = self.suite.noise.validate() {
            v.push(Violation::new("suite.noise", e.to_string()));
        }
        if let Some(dir) = &self.suite.observations_dir {
            if !dir.is_dir() {
                v.push(Violation::new("suite.observations_dir", format!("{} does not exist", dir.display())));
            }
        }
        if self.surrogate.test_size == 0 {
            v.push(Violation::new("surrogate.test_size", "must be positive"));
        }
        if let Err(e) = self.surrogate.settings.mlp.validate() {
            v.push(Violation::new("surrogate.settings.mlp", e.to_string()));
        }
        if self.covariance.members < 2 {
            v.push(Violation::new("covariance.members", "need at least 2 ensemble members"));
        }
        if self.covariance.theta.len() != N_PARAMS {
            v.push(Violation::new("covariance.theta", format!("need {N_PARAMS} values")));
        }
        if let Some(n) = self.covariance.nugget {
            if !(n >= 0.0 && n.is_finite()) {
                v.push(Violation::new("covariance.nugget", "must be finite and >= 0"));
            }
        }
        if let Err(e) = self.calibration.sampler.validate() {
            v.push(Violation::new("calibration.sampler", e.to_string()));
        }
        if let Some(p) = &self.calibration.priors {
            if let Err(e) = p.validate() {
                v.push(Violation::new("calibration.priors", e.to_string()));
            } else if p.dim() != N_PARAMS {
                v.push(Violation::new("calibration.priors", format!("need {N_PARAMS} priors")));
            }
        }
        if let Some(h) = &self.calibration.hyper {
            if let Err(e) = h.validate() {
                v.push(Violation::new("calibration.hyper", e.to_string()));
            } else if h.dim() != N_PARAMS {
                v.push(Violation::new("calibration.hyper", format!("need {N_PARAMS} hyperpriors")));
            }
        }
        if let Some(c) = &self.calibration.cases {
            if c.is_empty() {
                v.push(Violation::new("calibration.cases", "must not be empty"));
            }
            if self.calibration.model == ModelKind::Hierarchical && c.len() < 2 {
                v.push(Violation::new("calibration.cases", "hierarchical calibration needs at least 2 cases"));
            }
        }
        if self.validation.prior_theta.len() != N_PARAMS {
            v.push(Violation::new("validation.prior_theta", format!("need {N_PARAMS} values")));
        }
        if self.validation.n_draws == 0 {
            v.push(Violation::new("validation.n_draws", "must be positive"));
        }
        v
    }

    /// [`validate`](Self::validate) as a single error.
    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            return Ok(());
        }
        let msg: Vec<String> = v.iter().map(|x| format!("{}: {}", x.field, x.rule)).collect();
        Err(Error::Validation(msg.join("; ")))
    }

    pub fn priors(&self) -> Result<PriorSpec> {
        match &self.calibration.priors {
            Some(p) => Ok(p.clone()),
            None => PriorSpec::from_bounds(&self.doe.bounds),
        }
    }

    pub fn hyper(&self) -> HyperPrior {
        self.calibration.hyper.clone().unwrap_or_else(|| HyperPrior::standard(N_PARAMS))
    }

    pub fn surrogate_settings(&self) -> SurrogateSettings {
        SurrogateSettings {
            bounds: self.doe.bounds.clone(),
            ..self.surrogate.settings.clone()
        }
    }

    pub fn sampler(&self) -> NutsConfig {
        NutsConfig {
            seed: self.stage_seed(Stage::Sampler),
            ..self.calibration.sampler.clone()
        }
    }
}
