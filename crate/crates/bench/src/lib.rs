//! Fixtures shared by the benchmarks in `benches/`.

use hbiuq::doe::lhs_sample;
use hbiuq::surrogate::simulate_design;
use hbiuq::synthsim::{case_spec, TransientKind};
use hbiuq::{Result, SyntheticSimulator, TargetDensity, TrainingSet};

/// Simulated LHS design of `n` points on case A-FR.
pub fn training_set(n: usize, seed: u64) -> Result<TrainingSet> {
    let spec = case_spec("A", TransientKind::FlowReduction)?;
    let design = lhs_sample(n, &[(0.0, 5.0); 4], seed)?;
    simulate_design(&SyntheticSimulator, &spec, &design.points)
}

/// Standard normal in `dim` dimensions.
pub struct StdNormal {
    pub dim: usize,
}

impl TargetDensity for StdNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp(&self, z: &[f64]) -> f64 {
        -0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    fn logp_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.logp(z), z.iter().map(|v| -v).collect()))
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
