//! Hierarchical Bayesian inverse uncertainty quantification for
//! time-dependent simulator outputs.
//!
//! The pipeline: draw a Latin hypercube design ([`doe`]), run the simulator
//! ([`synthsim`] provides a cheap stand-in), train a surrogate
//! ([`surrogate`], built on [`pca`] + [`gp`] or on [`nn`]), estimate the
//! observation covariance ([`covest`]), then calibrate with NUTS
//! ([`sampler`], [`calib`]) and validate on held-out cases.

pub mod calib;
pub mod covest;
pub mod data;
pub mod doe;
pub mod error;
pub mod gp;
pub mod nn;
mod optim;
pub mod pca;
pub mod sampler;
pub mod surrogate;
pub mod synthsim;

pub use covest::{CovMode, CovarianceModel, Ensemble};
pub use data::{ParameterVector, Split, TimeSeriesGrid, TrainingSet, TransientCase, Violation};
pub use doe::DesignMatrix;
pub use error::{Error, Result};
pub use gp::{GpModel, Kernel, KernelFamily};
pub use nn::{MlpModel, TrainConfig};
pub use pca::PcaModel;
pub use sampler::{PosteriorChain, TargetDensity};
pub use surrogate::Surrogate;
pub use synthsim::{CaseSpec, Simulator, SyntheticSimulator};
