//! Ensemble Kalman–Bucy filters for signal increments with correlated
//! model and measurement errors.
//!
//! Three schemes share the same building blocks:
//!
//! * [`param_filter_step`]: parameters only, for noiseless full observations
//!   (`H = I`, `R = 0`), where the observed signal is the state itself and the
//!   observation map is `h_n(a) = f(Y_n, a)`. Both innovation variants are
//!   available.
//! * [`joint_filter_step`]: states and parameters together. The gain for the
//!   states carries the extra `QHᵀ` term and the innovation reuses the
//!   particle's model-noise draw, which is what makes the scheme consistent
//!   with correlated errors.
//! * [`state_filter_step`]: the joint scheme without parameters.
//!
//! Ensembles are stored column-per-particle (`N_x × M` and `N_a × M`).
//! The gain denominator `C + Δt P̂ʰʰ` is symmetrised and factorised, never
//! inverted. No inflation or localisation is applied.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{solve_spd_right, symmetrize};
use crate::model::{DriftModel, NoiseGeometry};
use crate::rng::{RngStream, StreamRole};

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
    params: DMatrix<f64>,
}

impl Ensemble {
    /// `states` is `N_x × M`, `params` is `N_a × M` (`N_a` may be zero).
    pub fn new(states: DMatrix<f64>, params: DMatrix<f64>) -> Result<Self> {
        check_dim("ensemble size (parameter block)", states.ncols(), params.ncols())?;
        if states.ncols() == 0 {
            return Err(Error::InvalidArgument("ensemble must contain particles".into()));
        }
        Ok(Self { states, params })
    }

    /// Every particle starts at the known initial state `x0`.
    pub fn with_known_state(x0: &[f64], params: DMatrix<f64>) -> Result<Self> {
        let m = params.ncols();
        let states = DMatrix::from_fn(x0.len(), m, |i, _| x0[i]);
        Self::new(states, params)
    }

    pub fn size(&self) -> usize {
        self.states.ncols()
    }
    pub fn state_dim(&self) -> usize {
        self.states.nrows()
    }
    pub fn param_dim(&self) -> usize {
        self.params.nrows()
    }
    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }
    pub fn params(&self) -> &DMatrix<f64> {
        &self.params
    }
    pub fn state(&self, i: usize) -> &[f64] {
        let n = self.state_dim();
        &self.states.as_slice()[i * n..(i + 1) * n]
    }
    pub fn param(&self, i: usize) -> &[f64] {
        let n = self.param_dim();
        &self.params.as_slice()[i * n..(i + 1) * n]
    }

    /// Pin every particle's state to `x` (used when the state is observed exactly).
    pub fn set_all_states(&mut self, x: &[f64]) {
        for mut col in self.states.column_iter_mut() {
            col.copy_from_slice(x);
        }
    }
}

/// One independent noise stream per particle, disjoint from the data streams.
pub fn particle_streams(seed: u64, m: usize) -> Vec<RngStream> {
    (0..m as u64)
        .map(|i| RngStream::for_role(seed, StreamRole::Particle, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnovationMode {
    /// `ΔI = ΔY − ½(h(Ãⁱ) + h̄)Δt`.
    Deterministic,
    /// `ΔI = ΔY − (h(Ãⁱ)Δt + Δt^{1/2} G Ξⁱ)`, perturbed with particle noise.
    #[default]
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    pub h_mean: DVector<f64>,
    pub p_ah: DMatrix<f64>,
    pub p_xh: DMatrix<f64>,
    pub p_hh: DMatrix<f64>,
}

/// Mean of the columns of `v`, computed about the first column so that a
/// collapsed ensemble yields its common value exactly.
fn column_mean(v: &DMatrix<f64>) -> DVector<f64> {
    let (n, m) = v.shape();
    let mut mean = DVector::zeros(n);
    if m == 0 || n == 0 {
        return mean;
    }
    let data = v.as_slice();
    let first = &data[..n];
    for col in data.chunks_exact(n).skip(1) {
        for k in 0..n {
            mean[k] += col[k] - first[k];
        }
    }
    for k in 0..n {
        mean[k] = first[k] + mean[k] / m as f64;
    }
    mean
}

fn centered(v: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = v.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

/// Empirical moments with divisor `M − 1`. `h_values` holds one column per
/// particle (`N_y × M`).
///
/// The cross-covariances are computed from centred particles; this equals the
/// uncentred form `Σ Ãⁱ (hⁱ − h̄)ᵀ` because the `h` deviations sum to zero.
pub fn empirical_moments(ensemble: &Ensemble, h_values: &DMatrix<f64>) -> Result<EmpiricalMoments> {
    let m = ensemble.size();
    if m < 2 {
        return Err(Error::Precondition(format!(
            "empirical covariances need at least 2 particles, got {m}"
        )));
    }
    check_dim("h values per particle", m, h_values.ncols())?;
    let h_mean = column_mean(h_values);
    let dh = centered(h_values, &h_mean);
    let denom = (m - 1) as f64;

    let cross = |block: &DMatrix<f64>| -> DMatrix<f64> {
        if block.nrows() == 0 {
            return DMatrix::zeros(0, dh.nrows());
        }
        let mean = column_mean(block);
        let d = centered(block, &mean);
        (d * dh.transpose()) / denom
    };

    let p_xh = cross(ensemble.states());
    let p_ah = cross(ensemble.params());
    let mut p_hh = (&dh * dh.transpose()) / denom;
    symmetrize(&mut p_hh);
    Ok(EmpiricalMoments {
        h_mean,
        p_ah,
        p_xh,
        p_hh,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean_x: DVector<f64>,
    pub var_x: DVector<f64>,
    pub mean_a: DVector<f64>,
    pub var_a: DVector<f64>,
}

/// Componentwise mean and unbiased variance of states and parameters.
pub fn ensemble_stats(ensemble: &Ensemble) -> Result<EnsembleStats> {
    let m = ensemble.size();
    if m < 2 {
        return Err(Error::Precondition(format!(
            "ensemble variance needs at least 2 particles, got {m}"
        )));
    }
    let moments = |block: &DMatrix<f64>| {
        let mean = column_mean(block);
        let d = centered(block, &mean);
        let var = DVector::from_fn(block.nrows(), |k, _| {
            d.row(k).iter().map(|v| v * v).sum::<f64>() / (m - 1) as f64
        });
        (mean, var)
    };
    let (mean_x, var_x) = moments(ensemble.states());
    let (mean_a, var_a) = moments(ensemble.params());
    Ok(EnsembleStats {
        mean_x,
        var_x,
        mean_a,
        var_a,
    })
}

fn check_model(ensemble: &Ensemble, model: &dyn DriftModel, noise: &NoiseGeometry) -> Result<()> {
    check_dim("ensemble state dimension", model.state_dim(), ensemble.state_dim())?;
    check_dim("ensemble parameter dimension", model.param_dim(), ensemble.param_dim())?;
    check_dim("noise state dimension", model.state_dim(), noise.state_dim())?;
    Ok(())
}

fn check_step(dy: &[f64], dt: f64, noise: &NoiseGeometry, streams: &[RngStream], m: usize) -> Result<()> {
    check_dim("observed increment", noise.obs_dim(), dy.len())?;
    check_dim("particle noise streams", m, streams.len())?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

/// Parameter-only update for noiseless full observations.
///
/// `Ãⁱ ← Ãⁱ + P̂ᵃʰ (Q + Δt P̂ʰʰ)⁻¹ ΔIⁱ` with `hⁱ = f(Y_n, Ãⁱ)`, where
/// `y_current` is the observed signal `Y_n` (equal to the state). The gain is
/// the discrete counterpart of `P̂ᵃʰ Q⁻¹` and coincides with the parameter gain
/// of [`joint_filter_step`] when `H = I` and `R = 0`.
#[allow(clippy::too_many_arguments)]
pub fn param_filter_step(
    ensemble: &mut Ensemble,
    dy: &[f64],
    dt: f64,
    model: &dyn DriftModel,
    noise: &NoiseGeometry,
    mode: InnovationMode,
    y_current: &[f64],
    streams: &mut [RngStream],
) -> Result<()> {
    check_model(ensemble, model, noise)?;
    check_step(dy, dt, noise, streams, ensemble.size())?;
    check_dim("observed signal", model.state_dim(), y_current.len())?;
    if !noise.h_is_identity() || !noise.r_is_zero() {
        return Err(Error::Precondition(
            "the parameter-only filter requires H = I and R = 0".into(),
        ));
    }
    let m = ensemble.size();
    let (nx, na) = (model.state_dim(), model.param_dim());

    let mut hmat = DMatrix::zeros(nx, m);
    for i in 0..m {
        let a = ensemble.param(i);
        model.drift(y_current, a, &mut hmat.as_mut_slice()[i * nx..(i + 1) * nx]);
    }
    let mom = empirical_moments(ensemble, &hmat)?;
    let mut s = noise.q() + &mom.p_hh * dt;
    symmetrize(&mut s);
    let gain = solve_spd_right(&mom.p_ah, &s)?;

    let nw = noise.noise_dim();
    let sdt = dt.sqrt();
    let mut xi = vec![0.0; nw];
    let mut gxi = vec![0.0; nx];
    let mut innov = vec![0.0; nx];
    let params = ensemble.params.as_mut_slice();
    for i in 0..m {
        let h = &hmat.as_slice()[i * nx..(i + 1) * nx];
        match mode {
            InnovationMode::Deterministic => {
                for k in 0..nx {
                    innov[k] = dy[k] - 0.5 * (h[k] + mom.h_mean[k]) * dt;
                }
            }
            InnovationMode::Stochastic => {
                streams[i].fill_standard_normal(&mut xi);
                noise.apply_g(&xi, &mut gxi);
                for k in 0..nx {
                    innov[k] = dy[k] - (h[k] * dt + sdt * gxi[k]);
                }
            }
        }
        let a = &mut params[i * na..(i + 1) * na];
        for (r, av) in a.iter_mut().enumerate() {
            *av += (0..nx).map(|k| gain[(r, k)] * innov[k]).sum::<f64>();
        }
    }
    Ok(())
}

/// Joint state and parameter update with correlated innovations.
///
/// For every particle, with `Θⁱ, Ξⁱ ~ N(0, I)` drawn once per step:
///
/// ```text
/// dⁱ  = Δt f(X̃ⁱ, Ãⁱ) + Δt^{1/2} G Θⁱ
/// ΔIⁱ = ΔY − H dⁱ − Δt^{1/2} R^{1/2} Ξⁱ
/// X̃ⁱ ← X̃ⁱ + dⁱ + (P̂ˣʰ + QHᵀ)(C + Δt P̂ʰʰ)⁻¹ ΔIⁱ
/// Ãⁱ ← Ãⁱ + P̂ᵃʰ (C + Δt P̂ʰʰ)⁻¹ ΔIⁱ
/// ```
///
/// The state update is evaluated as `(X̃ⁱ + KΔY) + (dⁱ − K H dⁱ) − K Δt^{1/2} R^{1/2} Ξⁱ`,
/// so that with `R = 0`, `H = I` and a collapsed scalar ensemble (`K = 1`)
/// the particles reproduce the observed path `X̃ₙ = Yₙ` bit for bit.
pub fn joint_filter_step(
    ensemble: &mut Ensemble,
    dy: &[f64],
    dt: f64,
    model: &dyn DriftModel,
    noise: &NoiseGeometry,
    streams: &mut [RngStream],
) -> Result<()> {
    check_model(ensemble, model, noise)?;
    let m = ensemble.size();
    check_step(dy, dt, noise, streams, m)?;
    let (nx, na, ny, nw) = (
        model.state_dim(),
        model.param_dim(),
        noise.obs_dim(),
        noise.noise_dim(),
    );

    let mut fmat = DMatrix::zeros(nx, m);
    for i in 0..m {
        let (x, a) = (ensemble.state(i), ensemble.param(i));
        model.drift(x, a, &mut fmat.as_mut_slice()[i * nx..(i + 1) * nx]);
    }
    let hmat = noise.h() * &fmat;
    let mom = empirical_moments(ensemble, &hmat)?;

    let mut s = noise.c() + &mom.p_hh * dt;
    symmetrize(&mut s);
    let gain_x = solve_spd_right(&(&mom.p_xh + noise.q_ht()), &s)?;
    let gain_a = if na > 0 {
        solve_spd_right(&mom.p_ah, &s)?
    } else {
        DMatrix::zeros(0, ny)
    };
    let k_dy = &gain_x * DVector::from_column_slice(dy);

    let (h, sr) = (noise.h(), noise.sqrt_r());
    let with_r = !noise.r_is_zero();
    let sdt = dt.sqrt();
    let mut theta = vec![0.0; nw];
    let mut xi = vec![0.0; ny];
    let mut d = vec![0.0; nx];
    let mut gt = vec![0.0; nx];
    let mut hd = vec![0.0; ny];
    let mut rn = vec![0.0; ny];
    let mut innov = vec![0.0; ny];

    for i in 0..m {
        streams[i].fill_standard_normal(&mut theta);
        if with_r {
            streams[i].fill_standard_normal(&mut xi);
        }
        let f = &fmat.as_slice()[i * nx..(i + 1) * nx];
        noise.apply_g(&theta, &mut gt);
        for k in 0..nx {
            d[k] = dt * f[k] + sdt * gt[k];
        }
        for r in 0..ny {
            hd[r] = (0..nx).map(|k| h[(r, k)] * d[k]).sum();
            rn[r] = if with_r {
                sdt * (0..ny).map(|l| sr[(r, l)] * xi[l]).sum::<f64>()
            } else {
                0.0
            };
            innov[r] = dy[r] - hd[r] - rn[r];
        }

        let x = &mut ensemble.states.as_mut_slice()[i * nx..(i + 1) * nx];
        for k in 0..nx {
            let k_hd: f64 = (0..ny).map(|r| gain_x[(k, r)] * hd[r]).sum();
            let mut v = (x[k] + k_dy[k]) + (d[k] - k_hd);
            if with_r {
                v -= (0..ny).map(|r| gain_x[(k, r)] * rn[r]).sum::<f64>();
            }
            x[k] = v;
        }
        model.canonicalize_state(x);

        if na > 0 {
            let a = &mut ensemble.params.as_mut_slice()[i * na..(i + 1) * na];
            for (p, av) in a.iter_mut().enumerate() {
                *av += (0..ny).map(|r| gain_a[(p, r)] * innov[r]).sum::<f64>();
            }
        }
    }
    Ok(())
}

/// State-only update: [`joint_filter_step`] for a model without parameters.
pub fn state_filter_step(
    ensemble: &mut Ensemble,
    dy: &[f64],
    dt: f64,
    model: &dyn DriftModel,
    noise: &NoiseGeometry,
    streams: &mut [RngStream],
) -> Result<()> {
    if model.param_dim() != 0 || ensemble.param_dim() != 0 {
        return Err(Error::Precondition(
            "state-only filtering requires a model without parameters".into(),
        ));
    }
    joint_filter_step(ensemble, dy, dt, model, noise, streams)
}

/// Which update a filter run applies at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterScheme {
    /// Parameter-only filter; the state is the observed signal.
    Parameter(InnovationMode),
    /// Joint state and parameter filter (state-only when `N_a = 0`).
    Joint,
}

/// One output row: time and componentwise ensemble statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub mean_a: Vec<f64>,
    pub var_a: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub var_x: Vec<f64>,
}

impl TraceRow {
    fn from_stats(t: f64, s: &EnsembleStats) -> Self {
        Self {
            t,
            mean_a: s.mean_a.as_slice().to_vec(),
            var_a: s.var_a.as_slice().to_vec(),
            mean_x: s.mean_x.as_slice().to_vec(),
            var_x: s.var_x.as_slice().to_vec(),
        }
    }
}

/// Time series of ensemble statistics plus the final ensemble.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub rows: Vec<TraceRow>,
    pub final_ensemble: Ensemble,
}

impl FilterTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace always holds the initial row")
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let first = &self.rows[0];
        let mut header = vec!["t".to_string()];
        let cols = |prefix: &'static str, n: usize| (1..=n).map(move |i| format!("{prefix}_{i}"));
        header.extend(cols("mean_a", first.mean_a.len()));
        header.extend(cols("var_a", first.var_a.len()));
        header.extend(cols("mean_x", first.mean_x.len()));
        header.extend(cols("var_x", first.var_x.len()));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&header)?;
        for row in &self.rows {
            let rec: Vec<String> = std::iter::once(row.t)
                .chain(row.mean_a.iter().copied())
                .chain(row.var_a.iter().copied())
                .chain(row.mean_x.iter().copied())
                .chain(row.var_x.iter().copied())
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Final ensemble as CSV with columns `particle, x_1.., a_1..`.
    pub fn write_ensemble_csv(&self, path: &std::path::Path) -> Result<()> {
        let e = &self.final_ensemble;
        let mut header = vec!["particle".to_string()];
        header.extend((1..=e.state_dim()).map(|i| format!("x_{i}")));
        header.extend((1..=e.param_dim()).map(|i| format!("a_{i}")));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&header)?;
        for i in 0..e.size() {
            let rec: Vec<String> = std::iter::once(i.to_string())
                .chain(e.state(i).iter().map(|v| v.to_string()))
                .chain(e.param(i).iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything a filter run needs besides the ensemble.
pub struct FilterRun<'a> {
    pub model: &'a dyn DriftModel,
    pub noise: &'a NoiseGeometry,
    pub scheme: FilterScheme,
    pub dt: f64,
    /// Observed increments, `N_y` values per step.
    pub increments: &'a [f64],
    /// Initial observed signal `Y_0`; used by the parameter-only scheme.
    pub y0: &'a [f64],
    /// Record a trace row every `stride` steps (and at t = 0).
    pub stride: usize,
}

impl FilterRun<'_> {
    /// Run the filter over all increments. `observer` sees the ensemble after
    /// every step (step index counts from 1).
    pub fn run_with(
        &self,
        mut ensemble: Ensemble,
        streams: &mut [RngStream],
        mut observer: impl FnMut(usize, &Ensemble),
    ) -> Result<FilterTrace> {
        let ny = self.noise.obs_dim();
        if self.increments.len() % ny != 0 {
            return Err(Error::InvalidArgument("ragged increment buffer".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("output stride must be >= 1".into()));
        }
        let steps = self.increments.len() / ny;
        let mut y = self.y0.to_vec();
        if let FilterScheme::Parameter(_) = self.scheme {
            check_dim("initial signal", self.model.state_dim(), y.len())?;
            ensemble.set_all_states(&y);
        }
        let mut rows = vec![TraceRow::from_stats(0.0, &ensemble_stats(&ensemble)?)];
        for n in 0..steps {
            let dy = &self.increments[n * ny..(n + 1) * ny];
            match self.scheme {
                FilterScheme::Parameter(mode) => {
                    param_filter_step(
                        &mut ensemble,
                        dy,
                        self.dt,
                        self.model,
                        self.noise,
                        mode,
                        &y,
                        streams,
                    )
                    .map_err(|e| e.at_step(n))?;
                    for (yk, d) in y.iter_mut().zip(dy) {
                        *yk += d;
                    }
                    ensemble.set_all_states(&y);
                }
                FilterScheme::Joint => {
                    joint_filter_step(&mut ensemble, dy, self.dt, self.model, self.noise, streams)
                        .map_err(|e| e.at_step(n))?;
                }
            }
            if ensemble.states.iter().chain(ensemble.params.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: Some(n),
                    message: "ensemble diverged (non-finite particle)".into(),
                });
            }
            observer(n + 1, &ensemble);
            if (n + 1) % self.stride == 0 {
                let t = (n + 1) as f64 * self.dt;
                rows.push(TraceRow::from_stats(t, &ensemble_stats(&ensemble)?));
            }
        }
        Ok(FilterTrace {
            rows,
            final_ensemble: ensemble,
        })
    }

    pub fn run(&self, ensemble: Ensemble, streams: &mut [RngStream]) -> Result<FilterTrace> {
        self.run_with(ensemble, streams, |_, _| {})
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnDrift;

    fn scalar_ensemble(states: &[f64], params: &[f64]) -> Ensemble {
        let m = states.len();
        let p = if params.is_empty() {
            DMatrix::zeros(0, m)
        } else {
            DMatrix::from_row_slice(1, m, params)
        };
        Ensemble::new(DMatrix::from_row_slice(1, m, states), p).unwrap()
    }

    #[test]
    fn collapsed_h_gives_zero_moments() {
        let e = scalar_ensemble(&[0.1, 0.1, 0.1], &[0.3, -2.0, 5.0]);
        let h = DMatrix::from_row_slice(1, 3, &[0.1, 0.1, 0.1]);
        let mom = empirical_moments(&e, &h).unwrap();
        assert_eq!(mom.h_mean[0], 0.1);
        assert_eq!(mom.p_ah[(0, 0)], 0.0);
        assert_eq!(mom.p_xh[(0, 0)], 0.0);
        assert_eq!(mom.p_hh[(0, 0)], 0.0);
    }

    #[test]
    fn stats_without_parameters() {
        let s = ensemble_stats(&scalar_ensemble(&[1.0, 3.0], &[])).unwrap();
        assert_eq!((s.mean_x[0], s.var_x[0]), (2.0, 2.0));
        assert!(s.mean_a.is_empty() && s.var_a.is_empty());
    }

    #[test]
    fn two_particle_cross_covariance() {
        let e = scalar_ensemble(&[0.0, 0.0], &[0.0, 2.0]);
        let h = DMatrix::from_row_slice(1, 2, &[0.0, 4.0]);
        let mom = empirical_moments(&e, &h).unwrap();
        assert_eq!(mom.h_mean[0], 2.0);
        assert_eq!(mom.p_ah[(0, 0)], 4.0);
        assert_eq!(mom.p_hh[(0, 0)], 8.0);
    }

    #[test]
    fn moments_need_two_particles() {
        let e = scalar_ensemble(&[0.0], &[1.0]);
        let h = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert!(matches!(empirical_moments(&e, &h), Err(Error::Precondition(_))));
        assert!(ensemble_stats(&e).is_err());
    }

    #[test]
    fn stats_of_two_values() {
        let e = scalar_ensemble(&[0.0, 2.0], &[3.0, 3.0]);
        let s = ensemble_stats(&e).unwrap();
        assert_eq!(s.mean_x[0], 1.0);
        assert_eq!(s.var_x[0], 2.0);
        assert_eq!(s.mean_a[0], 3.0);
        assert_eq!(s.var_a[0], 0.0);
    }

    fn ou_free() -> impl DriftModel {
        FnDrift::new(1, 1, |x: &[f64], a: &[f64], out: &mut [f64]| out[0] = a[0] * x[0])
    }

    #[test]
    fn zero_basis_leaves_parameters_unchanged() {
        // B(Y) = Y = 0: every particle predicts the same h, so the gain vanishes.
        let model = ou_free();
        let noise = NoiseGeometry::scalar(0.5, 0.0).unwrap();
        let mut e = scalar_ensemble(&[0.0; 4], &[-1.0, 0.0, 0.5, 2.0]);
        let before = e.clone();
        let mut streams = particle_streams(1, 4);
        for mode in [InnovationMode::Deterministic, InnovationMode::Stochastic] {
            param_filter_step(&mut e, &[0.3], 0.005, &model, &noise, mode, &[0.0], &mut streams)
                .unwrap();
            assert_eq!(e.params(), before.params());
        }
    }

    #[test]
    fn parameter_gain_hand_evaluation() {
        // h(a) = a at Y = 1 with two particles {0, 2}: P̂ᵃʰ = 2, P̂ʰʰ = 2, h̄ = 1.
        // Deterministic innovation for particle 0: ΔY − ½(0 + 1)Δt.
        let model = ou_free();
        let noise = NoiseGeometry::scalar(0.5, 0.0).unwrap();
        let dt = 0.005;
        let dy = 0.01;
        let mut e = scalar_ensemble(&[1.0, 1.0], &[0.0, 2.0]);
        let mut streams = particle_streams(1, 2);
        param_filter_step(
            &mut e,
            &[dy],
            dt,
            &model,
            &noise,
            InnovationMode::Deterministic,
            &[1.0],
            &mut streams,
        )
        .unwrap();
        let gain = 2.0 / (0.5 + dt * 2.0);
        let expected0 = gain * (dy - 0.5 * (0.0 + 1.0) * dt);
        let expected1 = 2.0 + gain * (dy - 0.5 * (2.0 + 1.0) * dt);
        assert!((e.param(0)[0] - expected0).abs() < 1e-15);
        assert!((e.param(1)[0] - expected1).abs() < 1e-15);
    }

    #[test]
    fn parameter_filter_rejects_noisy_observations() {
        let model = ou_free();
        let noise = NoiseGeometry::scalar(0.5, 0.01).unwrap();
        let mut e = scalar_ensemble(&[1.0, 1.0], &[0.0, 2.0]);
        let mut streams = particle_streams(1, 2);
        let err = param_filter_step(
            &mut e,
            &[0.0],
            0.01,
            &model,
            &noise,
            InnovationMode::Stochastic,
            &[1.0],
            &mut streams,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn collapsed_noiseless_state_filter_follows_data() {
        let model = FnDrift::new(1, 0, |x: &[f64], _: &[f64], out: &mut [f64]| {
            out[0] = -0.5 * x[0]
        });
        let noise = NoiseGeometry::scalar(0.5, 0.0).unwrap();
        let mut e = Ensemble::with_known_state(&[0.5], DMatrix::zeros(0, 5)).unwrap();
        let mut streams = particle_streams(3, 5);
        let mut y = 0.5;
        for dy in [0.01, -0.2, 0.07, 0.0, 0.3] {
            state_filter_step(&mut e, &[dy], 0.005, &model, &noise, &mut streams).unwrap();
            y += dy;
            for i in 0..5 {
                assert_eq!(e.state(i)[0], y);
            }
        }
    }

    #[test]
    fn frozen_model_with_collapsed_ensemble_does_not_move() {
        let model = FnDrift::new(1, 0, |_: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0);
        let noise = NoiseGeometry::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.2),
        )
        .unwrap();
        let mut e = Ensemble::with_known_state(&[1.5], DMatrix::zeros(0, 4)).unwrap();
        let mut streams = particle_streams(3, 4);
        for _ in 0..10 {
            state_filter_step(&mut e, &[0.4], 0.01, &model, &noise, &mut streams).unwrap();
        }
        assert!(e.states().iter().all(|v| *v == 1.5));
    }

    #[test]
    fn state_step_rejects_parameters() {
        let model = ou_free();
        let noise = NoiseGeometry::scalar(0.5, 0.01).unwrap();
        let mut e = scalar_ensemble(&[1.0, 1.0], &[0.0, 2.0]);
        let mut streams = particle_streams(1, 2);
        assert!(state_filter_step(&mut e, &[0.0], 0.01, &model, &noise, &mut streams).is_err());
    }

    #[test]
    fn trace_rows_follow_stride() {
        let model = ou_free();
        let noise = NoiseGeometry::scalar(0.5, 0.01).unwrap();
        let e = Ensemble::with_known_state(&[0.5], DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 1.0]))
            .unwrap();
        let incs = vec![0.001; 10];
        let run = FilterRun {
            model: &model,
            noise: &noise,
            scheme: FilterScheme::Joint,
            dt: 0.01,
            increments: &incs,
            y0: &[0.5],
            stride: 5,
        };
        let trace = run.run(e.clone(), &mut particle_streams(0, 3)).unwrap();
        assert_eq!(trace.rows.len(), 3);
        assert!(trace.rows.windows(2).all(|w| w[0].t < w[1].t));

        let empty = FilterRun { increments: &[], ..run };
        let trace = empty.run(e, &mut particle_streams(0, 3)).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].t, 0.0);
    }
}
