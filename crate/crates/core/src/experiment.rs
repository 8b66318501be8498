//! Config-driven experiments: data generation, filtering, evidence sweeps and
//! artifact output.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{particle_streams, Ensemble, FilterRun, FilterScheme, FilterTrace, InnovationMode};
use crate::kalman_bucy::{log_evidence, mle_drift, GaussianBelief, LinearModel};
use crate::model::{DriftModel, NoiseGeometry};
use crate::models::{
    ou_model, simulate_averaging, simulate_homogenization, steps_for, wrap_angle,
    HeatFvModel, MultiscaleSpec, PeriodicDriftField,
};
use crate::plot::{line_plot, Series};
use crate::rng::{sample_gp_drift, GpPriorSpec, RngStream, StreamRole};
use crate::sde::{decimate_states, simulate_states, synthesize_increments, SimulatedPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub experiment: ExperimentKind,
    pub time: TimeConfig,
    pub noise: NoiseConfig,
    pub filter: FilterConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_scale: Option<ScaleOverride>,
}

/// The data-generating model. The filter always uses the matching reduced or
/// parametrised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentKind {
    /// `dX = aX dt + Q^{1/2} dW` from `X_0 = x0`.
    Ou { a: f64, x0: f64 },
    /// Averaging system; the filter uses OU with the model error `noise.q`.
    Averaging { epsilon: f64, lambda: f64, alpha: f64 },
    /// Homogenisation system; `time.dt` is the fine step Δτ.
    Homogenization { epsilon: f64, a: f64, sigma: f64 },
    /// Periodic drift field on `[0, 2π)` with a GP prior on its nodal values.
    Nonparametric {
        n_grid: usize,
        x0: f64,
        gp: GpSettings,
        /// Seed of the reference drift draw.
        fstar_seed: u64,
        /// Optional CSV with the reference drift; overrides `fstar_seed`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fstar_file: Option<PathBuf>,
    },
    /// Finite-volume stochastic heat equation, joint estimation of `θ`.
    Spde { n_grid: usize, sigma: f64, theta: f64 },
    /// Same data as `spde`; exact-filter evidence over a grid of `θ`.
    EvidenceSweep {
        n_grid: usize,
        sigma: f64,
        theta: f64,
        grid: ThetaGrid,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSettings {
    pub eta: f64,
    pub kappa: f64,
    pub p: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl ThetaGrid {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    /// Data time step. Optional only for the heat equation, where it defaults to `Δx²/80`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub t_end: f64,
    /// The filter sees every `subsample`-th state; its step is `subsample·dt`.
    #[serde(default = "one")]
    pub subsample: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Model error variance of the filtered model (unused by the heat equation).
    #[serde(default)]
    pub q: f64,
    /// Measurement error variance.
    #[serde(default)]
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub ensemble_size: usize,
    /// Innovation of the parameter-only filter (used when `R = 0`, `H = I`).
    #[serde(default)]
    pub innovation: InnovationMode,
    pub prior: PriorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorConfig {
    Gaussian { mean: f64, variance: f64 },
    Uniform { low: f64, high: f64 },
    /// The experiment's GP prior (nonparametric drift only).
    Gp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub plots: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            stride: 1,
            plots: true,
        }
    }
}

/// Settings replaced by `--paper-scale`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        // relative data files are resolved against the config's directory
        if let ExperimentKind::Nonparametric {
            fstar_file: Some(f), ..
        } = &mut cfg.experiment
        {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Data time step (the heat equation defaults to `Δx²/80`).
    pub fn data_dt(&self) -> Result<f64> {
        match (&self.experiment, self.time.dt) {
            (_, Some(dt)) => Ok(dt),
            (ExperimentKind::Spde { n_grid, .. } | ExperimentKind::EvidenceSweep { n_grid, .. }, None) => {
                let dx = 2.0 * PI / *n_grid as f64;
                Ok(dx * dx / 80.0)
            }
            _ => Err(config_err("time.dt is required for this experiment")),
        }
    }

    pub fn filter_dt(&self) -> Result<f64> {
        Ok(self.data_dt()? * self.time.subsample as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let dt = self.data_dt()?;
        positive("time.dt", dt)?;
        if !(self.time.t_end >= 0.0) || !self.time.t_end.is_finite() {
            return Err(config_err("time.t_end must be non-negative"));
        }
        if self.time.subsample == 0 {
            return Err(config_err("time.subsample must be >= 1"));
        }
        if self.noise.q < 0.0 || self.noise.r < 0.0 {
            return Err(config_err("noise variances must be non-negative"));
        }
        if self.filter.ensemble_size < 2 {
            return Err(config_err("filter.ensemble_size must be >= 2"));
        }
        if self.output.stride == 0 {
            return Err(config_err("output.stride must be >= 1"));
        }
        let scalar_prior = || match self.filter.prior {
            PriorConfig::Gaussian { variance, .. } => positive("filter.prior.variance", variance),
            PriorConfig::Uniform { low, high } if low < high => Ok(()),
            PriorConfig::Uniform { .. } => Err(config_err("uniform prior needs low < high")),
            PriorConfig::Gp => Err(config_err("a GP prior is only valid for nonparametric drift")),
        };
        let needs_q = || positive("noise.q", self.noise.q);
        match &self.experiment {
            ExperimentKind::Ou { .. } => {
                needs_q()?;
                scalar_prior()?;
            }
            ExperimentKind::Averaging {
                epsilon,
                lambda,
                alpha,
            } => {
                needs_q()?;
                scalar_prior()?;
                MultiscaleSpec::Averaging {
                    epsilon: *epsilon,
                    lambda: *lambda,
                    alpha: *alpha,
                    q: self.noise.q,
                }
                .validate()
                .map_err(|e| config_err(e.to_string()))?;
            }
            ExperimentKind::Homogenization { epsilon, a, sigma } => {
                needs_q()?;
                scalar_prior()?;
                MultiscaleSpec::Homogenization {
                    epsilon: *epsilon,
                    a: *a,
                    sigma: *sigma,
                }
                .validate()
                .map_err(|e| config_err(e.to_string()))?;
            }
            ExperimentKind::Nonparametric { n_grid, gp, .. } => {
                needs_q()?;
                if self.filter.prior != PriorConfig::Gp {
                    return Err(config_err("nonparametric drift needs filter.prior.kind = \"gp\""));
                }
                GpPriorSpec::new(gp.eta, gp.kappa, gp.p, *n_grid).map_err(|e| config_err(e.to_string()))?;
            }
            ExperimentKind::Spde { n_grid, sigma, theta } | ExperimentKind::EvidenceSweep { n_grid, sigma, theta, .. } => {
                scalar_prior()?;
                positive("experiment.theta", *theta)?;
                let heat = HeatFvModel::new(*n_grid, *sigma, self.noise.r).map_err(|e| config_err(e.to_string()))?;
                if self.time.subsample != 1 {
                    return Err(config_err("the heat equation is filtered at the data step"));
                }
                // the data step keeps the margin of Δt = Δx²/80 below the stability limit
                let limit = heat.default_dt();
                if dt > limit * (1.0 + 1e-12) {
                    return Err(config_err(format!(
                        "time.dt = {dt} exceeds the heat equation step Δx²/80 = {limit}"
                    )));
                }
                if let ExperimentKind::EvidenceSweep { grid, .. } = &self.experiment {
                    positive("experiment.grid.step", grid.step)?;
                    positive("experiment.grid.start", grid.start)?;
                    if grid.stop < grid.start {
                        return Err(config_err("experiment.grid.stop must be >= start"));
                    }
                }
            }
        }
        if !matches!(self.experiment, ExperimentKind::Spde { .. } | ExperimentKind::EvidenceSweep { .. }) {
            let steps = steps_for(self.time.t_end, dt).map_err(|e| config_err(e.to_string()))?;
            if steps % self.time.subsample != 0 {
                return Err(config_err(format!(
                    "time.subsample = {} does not divide the {steps} data steps",
                    self.time.subsample
                )));
            }
        }
        Ok(())
    }

    /// The configuration with its `[paper_scale]` overrides applied.
    pub fn at_paper_scale(&self) -> Result<Self> {
        let Some(s) = self.paper_scale else {
            return Err(config_err("this configuration has no [paper_scale] section"));
        };
        let mut cfg = self.clone();
        if let Some(t) = s.t_end {
            cfg.time.t_end = t;
        }
        if let Some(m) = s.ensemble_size {
            cfg.filter.ensemble_size = m;
        }
        if let Some(k) = s.stride {
            cfg.output.stride = k;
        }
        if let Some(n) = s.n_grid {
            match &mut cfg.experiment {
                ExperimentKind::Nonparametric { n_grid, .. }
                | ExperimentKind::Spde { n_grid, .. }
                | ExperimentKind::EvidenceSweep { n_grid, .. } => {
                    *n_grid = n;
                    if matches!(cfg.experiment, ExperimentKind::Spde { .. } | ExperimentKind::EvidenceSweep { .. }) {
                        cfg.time.dt = None;
                    }
                }
                _ => return Err(config_err("n_grid override needs a gridded experiment")),
            }
        }
        cfg.paper_scale = None;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind_name(&self) -> &'static str {
        match self.experiment {
            ExperimentKind::Ou { .. } => "ou",
            ExperimentKind::Averaging { .. } => "averaging",
            ExperimentKind::Homogenization { .. } => "homogenization",
            ExperimentKind::Nonparametric { .. } => "nonparametric",
            ExperimentKind::Spde { .. } => "spde",
            ExperimentKind::EvidenceSweep { .. } => "evidence-sweep",
        }
    }

    fn heat_model(&self) -> Option<Result<HeatFvModel>> {
        match self.experiment {
            ExperimentKind::Spde { n_grid, sigma, .. } | ExperimentKind::EvidenceSweep { n_grid, sigma, .. } => {
                Some(HeatFvModel::new(n_grid, sigma, self.noise.r))
            }
            _ => None,
        }
    }

    fn gp_spec(&self) -> Option<Result<GpPriorSpec>> {
        match self.experiment {
            ExperimentKind::Nonparametric { n_grid, gp, .. } => Some(GpPriorSpec::new(gp.eta, gp.kappa, gp.p, n_grid)),
            _ => None,
        }
    }

    /// Known initial state of data and filter.
    pub fn initial_state(&self) -> Vec<f64> {
        match self.experiment {
            ExperimentKind::Ou { x0, .. } | ExperimentKind::Nonparametric { x0, .. } => vec![x0],
            ExperimentKind::Averaging { .. } | ExperimentKind::Homogenization { .. } => vec![0.5],
            ExperimentKind::Spde { n_grid, .. } | ExperimentKind::EvidenceSweep { n_grid, .. } => vec![0.0; n_grid],
        }
    }
}

/// The reference drift of a nonparametric experiment.
pub fn reference_drift(cfg: &ExperimentConfig) -> Result<PeriodicDriftField> {
    let ExperimentKind::Nonparametric {
        n_grid,
        fstar_seed,
        fstar_file,
        ..
    } = &cfg.experiment
    else {
        return Err(config_err("reference drift requested for a parametric experiment"));
    };
    if let Some(path) = fstar_file {
        let field = PeriodicDriftField::read_csv(path)?;
        if field.n_grid() != *n_grid {
            return Err(config_err(format!(
                "{} holds {} nodes, expected {n_grid}",
                path.display(),
                field.n_grid()
            )));
        }
        return Ok(field);
    }
    let spec = cfg.gp_spec().expect("nonparametric")?;
    let mut stream = RngStream::for_role(*fstar_seed, StreamRole::Prior, 0);
    PeriodicDriftField::new(sample_gp_drift(&spec, &mut stream)?)
}

/// Increments as seen by the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub dt: f64,
    pub obs_dim: usize,
    /// Observed signal at `t = 0`.
    pub y0: Vec<f64>,
    pub increments: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MleReport {
    /// On the data-resolution path.
    pub fine: f64,
    /// On the subsampled path the filter sees.
    pub subsampled: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    /// Reference states and observed increments on the filter grid.
    pub path: SimulatedPath,
    pub data_dt: f64,
    pub mle: Option<MleReport>,
    pub fstar: Option<PeriodicDriftField>,
    pub warnings: Vec<String>,
}

impl GeneratedData {
    pub fn observations(&self, cfg: &ExperimentConfig) -> Result<Observations> {
        let x0 = self.path.state(0);
        let y0 = match cfg.heat_model() {
            Some(h) => vec![x0[h?.obs_index]],
            None => x0.to_vec(),
        };
        Ok(Observations {
            dt: self.path.dt(),
            obs_dim: self.path.obs_dim(),
            y0,
            increments: self.path.increments_flat().to_vec(),
        })
    }
}

fn data_streams(seed: u64) -> (RngStream, RngStream, RngStream) {
    (
        RngStream::for_role(seed, StreamRole::ModelNoise, 0),
        RngStream::for_role(seed, StreamRole::MeasurementNoise, 0),
        RngStream::for_role(seed, StreamRole::FastProcess, 0),
    )
}

/// Simulate the reference path, decimate it to the filter grid and add
/// measurement noise there.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let dt = cfg.data_dt()?;
    let factor = cfg.time.subsample;
    let (mut model_noise, mut meas_noise, mut fast_noise) = data_streams(cfg.seed);
    let mut warnings = Vec::new();
    let mut mle = None;
    let mut fstar = None;

    let (fine_states, obs_noise): (Vec<f64>, NoiseGeometry) = match &cfg.experiment {
        ExperimentKind::Ou { a, x0 } => {
            let noise = NoiseGeometry::scalar(cfg.noise.q, cfg.noise.r)?;
            let steps = steps_for(cfg.time.t_end, dt)?;
            let states = simulate_states(&ou_model(Some(*a)), &noise, &[*x0], &[], dt, steps, &mut model_noise)?;
            (states, noise)
        }
        ExperimentKind::Averaging {
            epsilon,
            lambda,
            alpha,
        } => {
            let spec = MultiscaleSpec::Averaging {
                epsilon: *epsilon,
                lambda: *lambda,
                alpha: *alpha,
                q: cfg.noise.q,
            };
            warnings.extend(spec.stability_warning(dt));
            let path = simulate_averaging(&spec, dt, cfg.time.t_end, &mut model_noise, &mut fast_noise)?;
            (path.states_flat().to_vec(), NoiseGeometry::scalar(cfg.noise.q, cfg.noise.r)?)
        }
        ExperimentKind::Homogenization { epsilon, a, sigma } => {
            let spec = MultiscaleSpec::Homogenization {
                epsilon: *epsilon,
                a: *a,
                sigma: *sigma,
            };
            warnings.extend(spec.stability_warning(dt));
            let path = simulate_homogenization(&spec, dt, cfg.time.t_end, &mut fast_noise)?;
            (path.states_flat().to_vec(), NoiseGeometry::scalar(cfg.noise.q, cfg.noise.r)?)
        }
        ExperimentKind::Nonparametric { x0, .. } => {
            let field = reference_drift(cfg)?;
            let noise = NoiseGeometry::scalar(cfg.noise.q, cfg.noise.r)?;
            let steps = steps_for(cfg.time.t_end, dt)?;
            let states = simulate_states(&field.as_fixed_model(), &noise, &[*x0], &[], dt, steps, &mut model_noise)?;
            fstar = Some(field);
            (states, noise)
        }
        ExperimentKind::Spde { theta, .. } | ExperimentKind::EvidenceSweep { theta, .. } => {
            let heat = cfg.heat_model().expect("heat")?;
            let noise = heat.noise()?;
            let steps = (cfg.time.t_end / dt).round() as usize;
            let x0 = vec![0.0; heat.n_grid];
            let states = simulate_states(&heat.drift(Some(*theta)), &noise, &x0, &[], dt, steps, &mut model_noise)?;
            (states, noise)
        }
    };

    let nx = obs_noise.state_dim();
    if let ExperimentKind::Homogenization { .. } = cfg.experiment {
        let coarse = decimate_states(&fine_states, 1, factor)?;
        mle = Some(MleReport {
            fine: mle_drift(&fine_states, dt)?,
            subsampled: mle_drift(&coarse, dt * factor as f64)?,
        });
    }
    let states = decimate_states(&fine_states, nx, factor)?;
    drop(fine_states);
    let coarse_dt = dt * factor as f64;
    let increments = if states.len() / nx >= 2 {
        synthesize_increments(&states, &obs_noise, coarse_dt, &mut meas_noise)?
    } else {
        Vec::new()
    };
    let path = SimulatedPath::new(coarse_dt, nx, obs_noise.obs_dim(), states, increments)?;
    Ok(GeneratedData {
        path,
        data_dt: dt,
        mle,
        fstar,
        warnings,
    })
}

/// Draw the initial parameter ensemble (`N_a × M`) from the configured prior.
pub fn draw_prior(cfg: &ExperimentConfig) -> Result<DMatrix<f64>> {
    let m = cfg.filter.ensemble_size;
    let mut stream = RngStream::for_role(cfg.seed, StreamRole::Prior, 0);
    match cfg.filter.prior {
        PriorConfig::Gaussian { mean, variance } => {
            let d = Normal::new(mean, variance.sqrt()).map_err(|e| config_err(e.to_string()))?;
            Ok(DMatrix::from_fn(1, m, |_, _| d.sample(stream.rng_mut())))
        }
        PriorConfig::Uniform { low, high } => {
            let d = Uniform::new(low, high).map_err(|e| config_err(e.to_string()))?;
            Ok(DMatrix::from_fn(1, m, |_, _| d.sample(stream.rng_mut())))
        }
        PriorConfig::Gp => {
            let spec = cfg
                .gp_spec()
                .ok_or_else(|| config_err("a GP prior needs a nonparametric experiment"))??;
            let mut a = DMatrix::zeros(spec.n_grid, m);
            for mut col in a.column_iter_mut() {
                let draw = sample_gp_drift(&spec, &mut stream)?;
                col.copy_from_slice(&draw);
            }
            Ok(a)
        }
    }
}

enum FilterModel {
    Ou(crate::models::OuModel),
    Hat(crate::models::PeriodicHatModel),
    Heat(crate::models::HeatDrift),
}

impl FilterModel {
    fn as_dyn(&self) -> &dyn DriftModel {
        match self {
            FilterModel::Ou(m) => m,
            FilterModel::Hat(m) => m,
            FilterModel::Heat(m) => m,
        }
    }
}

fn filter_model(cfg: &ExperimentConfig) -> Result<(FilterModel, NoiseGeometry)> {
    Ok(match &cfg.experiment {
        ExperimentKind::Ou { .. } | ExperimentKind::Averaging { .. } | ExperimentKind::Homogenization { .. } => (
            FilterModel::Ou(ou_model(None)),
            NoiseGeometry::scalar(cfg.noise.q, cfg.noise.r)?,
        ),
        ExperimentKind::Nonparametric { n_grid, .. } => (
            FilterModel::Hat(crate::models::PeriodicHatModel { n_grid: *n_grid }),
            NoiseGeometry::scalar(cfg.noise.q, cfg.noise.r)?,
        ),
        ExperimentKind::Spde { .. } | ExperimentKind::EvidenceSweep { .. } => {
            let heat = cfg.heat_model().expect("heat")?;
            (FilterModel::Heat(heat.drift(None)), heat.noise()?)
        }
    })
}

/// Parameter-only filtering when the state is observed exactly, joint otherwise.
pub fn filter_scheme(cfg: &ExperimentConfig, noise: &NoiseGeometry) -> FilterScheme {
    if noise.r_is_zero() && noise.h_is_identity() {
        FilterScheme::Parameter(cfg.filter.innovation)
    } else {
        FilterScheme::Joint
    }
}

/// Run the configured filter over `obs`.
pub fn run_filter(cfg: &ExperimentConfig, obs: &Observations) -> Result<FilterTrace> {
    run_filter_with(cfg, obs, |_, _| {})
}

pub fn run_filter_with(
    cfg: &ExperimentConfig,
    obs: &Observations,
    observer: impl FnMut(usize, &Ensemble),
) -> Result<FilterTrace> {
    let (model, noise) = filter_model(cfg)?;
    let expected_dt = cfg.filter_dt()?;
    if (obs.dt - expected_dt).abs() > 1e-9 * expected_dt {
        return Err(config_err(format!(
            "observations have dt = {} but the configuration implies {expected_dt}",
            obs.dt
        )));
    }
    crate::error::check_dim("observation dimension", noise.obs_dim(), obs.obs_dim)?;
    let params = draw_prior(cfg)?;
    let ensemble = Ensemble::with_known_state(&cfg.initial_state(), params)?;
    let mut streams = particle_streams(cfg.seed, cfg.filter.ensemble_size);
    let run = FilterRun {
        model: model.as_dyn(),
        noise: &noise,
        scheme: filter_scheme(cfg, &noise),
        dt: obs.dt,
        increments: &obs.increments,
        y0: &obs.y0,
        stride: cfg.output.stride,
    };
    run.run_with(ensemble, &mut streams, observer)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceSweep {
    pub thetas: Vec<f64>,
    pub log_evidence: Vec<f64>,
    pub argmax: f64,
}

/// Exact Kalman–Bucy log evidence of the heat-equation data for every `θ`.
pub fn run_evidence_sweep(cfg: &ExperimentConfig, data: &GeneratedData, thetas: &[f64]) -> Result<EvidenceSweep> {
    if thetas.is_empty() {
        return Err(Error::InvalidArgument("empty θ grid".into()));
    }
    let heat = cfg
        .heat_model()
        .ok_or_else(|| config_err("the evidence sweep needs a heat-equation experiment"))??;
    let noise = heat.noise()?;
    let lap = heat.laplacian_matrix();
    let belief0 = GaussianBelief::point(&vec![0.0; heat.n_grid]);
    let mut log_ev = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let model = LinearModel::new(&lap * theta, noise.clone())?;
        log_ev.push(log_evidence(&model, data.path.increments_flat(), data.path.dt(), &belief0)?);
    }
    let best = log_ev
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > log_ev[b] { i } else { b });
    Ok(EvidenceSweep {
        thetas: thetas.to_vec(),
        log_evidence: log_ev,
        argmax: thetas[best],
    })
}

/// Estimated drift field against the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEstimate {
    pub nodes: Vec<f64>,
    pub fstar: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Fraction of reference states nearest to each node.
    pub occupancy: Vec<f64>,
    /// Nodes of the highest-occupancy set holding at least half the mass.
    pub central: Vec<bool>,
    pub rms_error: f64,
    pub prior_rms_error: f64,
    pub final_reference_state: f64,
    /// Circular offset of the ensemble-mean state from the reference.
    pub final_state_offset: f64,
    pub final_state_std: f64,
}

/// Occupancy of the grid cells centred on the nodes by a set of states on the circle.
pub fn occupancy(states: &[f64], n_grid: usize) -> Vec<f64> {
    let dx = 2.0 * PI / n_grid as f64;
    let mut counts = vec![0.0; n_grid];
    for &x in states {
        let j = (wrap_angle(x) / dx).round() as usize % n_grid;
        counts[j] += 1.0;
    }
    let total = states.len().max(1) as f64;
    counts.iter().map(|c| c / total).collect()
}

/// Smallest set of highest-occupancy nodes whose mass reaches `fraction`.
pub fn central_region(occupancy: &[f64], fraction: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..occupancy.len()).collect();
    order.sort_by(|&i, &j| occupancy[j].total_cmp(&occupancy[i]).then(i.cmp(&j)));
    let mut inside = vec![false; occupancy.len()];
    let mut mass = 0.0;
    for i in order {
        if mass >= fraction {
            break;
        }
        inside[i] = true;
        mass += occupancy[i];
    }
    inside
}

fn circular_offset(x: f64, reference: f64) -> f64 {
    let d = (x - reference).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

pub fn drift_estimate(data: &GeneratedData, trace: &FilterTrace) -> Result<DriftEstimate> {
    let fstar = data
        .fstar
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no reference drift in this data set".into()))?;
    let n = fstar.n_grid();
    let ens = &trace.final_ensemble;
    crate::error::check_dim("estimated drift nodes", n, ens.param_dim())?;
    let stats = crate::filter::ensemble_stats(ens)?;
    let occ = occupancy(data.path.states_flat(), n);
    let central = central_region(&occ, 0.5);
    let (mut err, mut prior, mut count) = (0.0, 0.0, 0usize);
    for i in (0..n).filter(|&i| central[i]) {
        err += (stats.mean_a[i] - fstar.values[i]).powi(2);
        prior += fstar.values[i].powi(2);
        count += 1;
    }
    let reference = wrap_angle(data.path.state(data.path.len() - 1)[0]);
    let offsets: Vec<f64> = (0..ens.size())
        .map(|i| circular_offset(ens.state(i)[0], reference))
        .collect();
    let m = offsets.len() as f64;
    let mean_off = offsets.iter().sum::<f64>() / m;
    let var_off = offsets.iter().map(|o| (o - mean_off).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(DriftEstimate {
        nodes: (0..n).map(|i| fstar.node(i)).collect(),
        fstar: fstar.values.clone(),
        mean: stats.mean_a.iter().copied().collect(),
        std: stats.var_a.iter().map(|v| v.sqrt()).collect(),
        occupancy: occ,
        central,
        rms_error: (err / count as f64).sqrt(),
        prior_rms_error: (prior / count as f64).sqrt(),
        final_reference_state: reference,
        final_state_offset: mean_off,
        final_state_std: var_off.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub experiment: String,
    pub seed: u64,
    pub filter_dt: f64,
    pub filter_steps: usize,
    pub ensemble_size: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub initial_var_a: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub final_mean_a: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub final_var_a: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mle: Option<MleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence_argmax: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_rms_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_rms_error: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub data: GeneratedData,
    pub trace: Option<FilterTrace>,
    pub evidence: Option<EvidenceSweep>,
    pub drift: Option<DriftEstimate>,
}

/// Generate data and run the matching filter or evidence sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let data = generate_data(cfg)?;
    let mut out = ExperimentOutput {
        config: cfg.clone(),
        data,
        trace: None,
        evidence: None,
        drift: None,
    };
    match &cfg.experiment {
        ExperimentKind::EvidenceSweep { grid, .. } => {
            out.evidence = Some(run_evidence_sweep(cfg, &out.data, &grid.values())?);
        }
        _ => {
            let obs = out.data.observations(cfg)?;
            let trace = run_filter(cfg, &obs)?;
            if out.data.fstar.is_some() {
                out.drift = Some(drift_estimate(&out.data, &trace)?);
            }
            out.trace = Some(trace);
        }
    }
    Ok(out)
}

impl ExperimentOutput {
    pub fn summary(&self) -> RunSummary {
        let last = self.trace.as_ref().map(|t| t.last());
        let first = self.trace.as_ref().map(|t| &t.rows[0]);
        RunSummary {
            experiment: self.config.kind_name().to_string(),
            seed: self.config.seed,
            filter_dt: self.data.path.dt(),
            filter_steps: self.data.path.n_increments(),
            ensemble_size: self.config.filter.ensemble_size,
            initial_var_a: first.map(|r| r.var_a.clone()).unwrap_or_default(),
            final_mean_a: last.map(|r| r.mean_a.clone()).unwrap_or_default(),
            final_var_a: last.map(|r| r.var_a.clone()).unwrap_or_default(),
            mle: self.data.mle,
            evidence_argmax: self.evidence.as_ref().map(|e| e.argmax),
            drift_rms_error: self.drift.as_ref().map(|d| d.rms_error),
            prior_rms_error: self.drift.as_ref().map(|d| d.prior_rms_error),
            warnings: self.data.warnings.clone(),
        }
    }

    /// Write configuration, data, trace, summary and plots into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        let summary = toml::to_string(&self.summary()).map_err(|e| config_err(e.to_string()))?;
        fs::write(dir.join("summary.toml"), summary)?;
        self.data.path.write_increments_csv(&dir.join("increments.csv"))?;
        // the heat equation's full state is large; keep the observed component only
        if self.data.path.state_dim() <= 8 {
            self.data.path.write_states_csv(&dir.join("states.csv"))?;
        }
        let plots = self.config.output.plots;
        if let Some(trace) = &self.trace {
            trace.write_csv(&dir.join("trace.csv"))?;
            trace.write_ensemble_csv(&dir.join("ensemble_final.csv"))?;
            if plots && self.drift.is_none() {
                write_trace_plots(trace, dir)?;
            }
        }
        if let Some(ev) = &self.evidence {
            let mut w = csv::Writer::from_path(dir.join("evidence.csv"))?;
            w.write_record(["theta", "log_evidence"])?;
            for (t, e) in ev.thetas.iter().zip(&ev.log_evidence) {
                w.write_record([t.to_string(), e.to_string()])?;
            }
            w.flush()?;
            if plots {
                let pts: Vec<(f64, f64)> = ev.thetas.iter().copied().zip(ev.log_evidence.iter().copied()).collect();
                line_plot(
                    &dir.join("evidence.svg"),
                    "log evidence",
                    "theta",
                    "log evidence",
                    &[Series {
                        label: "log evidence",
                        points: &pts,
                    }],
                    false,
                )?;
            }
        }
        if let Some(d) = &self.drift {
            let mut w = csv::Writer::from_path(dir.join("drift.csv"))?;
            w.write_record(["node", "x", "reference", "mean", "std", "occupancy", "central"])?;
            for i in 0..d.nodes.len() {
                w.write_record([
                    i.to_string(),
                    d.nodes[i].to_string(),
                    d.fstar[i].to_string(),
                    d.mean[i].to_string(),
                    d.std[i].to_string(),
                    d.occupancy[i].to_string(),
                    u8::from(d.central[i]).to_string(),
                ])?;
            }
            w.flush()?;
            if plots {
                let curve = |v: &[f64]| -> Vec<(f64, f64)> { d.nodes.iter().copied().zip(v.iter().copied()).collect() };
                let (fs, mean, occ) = (curve(&d.fstar), curve(&d.mean), curve(&d.occupancy));
                line_plot(
                    &dir.join("drift.svg"),
                    "drift function",
                    "x",
                    "f(x)",
                    &[
                        Series {
                            label: "reference",
                            points: &fs,
                        },
                        Series {
                            label: "ensemble mean",
                            points: &mean,
                        },
                    ],
                    false,
                )?;
                line_plot(
                    &dir.join("occupancy.svg"),
                    "reference state histogram",
                    "x",
                    "fraction",
                    &[Series {
                        label: "occupancy",
                        points: &occ,
                    }],
                    false,
                )?;
            }
        }
        Ok(())
    }
}

fn write_trace_plots(trace: &FilterTrace, dir: &Path) -> Result<()> {
    let col = |f: &dyn Fn(&crate::filter::TraceRow) -> f64| -> Vec<(f64, f64)> {
        trace.rows.iter().map(|r| (r.t, f(r))).collect()
    };
    if !trace.rows[0].mean_a.is_empty() {
        let mean = col(&|r| r.mean_a[0]);
        let var = col(&|r| r.var_a[0]);
        line_plot(
            &dir.join("param_mean.svg"),
            "parameter ensemble mean",
            "t",
            "mean",
            &[Series {
                label: "mean",
                points: &mean,
            }],
            false,
        )?;
        line_plot(
            &dir.join("param_var.svg"),
            "parameter ensemble variance",
            "t",
            "variance",
            &[Series {
                label: "variance",
                points: &var,
            }],
            true,
        )?;
    }
    let var_x = col(&|r| r.var_x.iter().sum::<f64>() / r.var_x.len().max(1) as f64);
    line_plot(
        &dir.join("state_var.svg"),
        "state ensemble variance (component average)",
        "t",
        "variance",
        &[Series {
            label: "variance",
            points: &var_x,
        }],
        false,
    )?;
    Ok(())
}
