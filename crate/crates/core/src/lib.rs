//! Ensemble Kalman–Bucy filtering for joint state and drift-parameter
//! estimation in SDEs with correlated model and measurement noise.

pub mod canonical;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod kalman_bucy;
pub mod linalg;
pub mod model;
pub mod models;
pub mod plot;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use experiment::{
    generate_data, run_evidence_sweep, run_experiment, run_filter, ExperimentConfig, ExperimentKind,
    ExperimentOutput,
};
pub use filter::{
    empirical_moments, ensemble_stats, joint_filter_step, param_filter_step, particle_streams,
    state_filter_step, EmpiricalMoments, Ensemble, EnsembleStats, FilterRun, FilterScheme,
    FilterTrace, InnovationMode, TraceRow,
};
pub use kalman_bucy::{kb_filter, kb_mean_cov_step, log_evidence, mle_drift, GaussianBelief, LinearModel};
pub use model::{DriftModel, FnDrift, LinearDrift, LinearInParams, NoiseGeometry};
pub use rng::{RngStream, StreamRole};
pub use sde::SimulatedPath;
