//! The experiment models: Ornstein–Uhlenbeck, the averaging and
//! homogenisation multiscale systems, periodic piecewise-linear drift fields
//! and the finite-volume stochastic heat equation.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DriftModel, LinearInParams, NoiseGeometry};
use crate::rng::RngStream;
use crate::sde::SimulatedPath;

/// `dX = aX dt + Q^{1/2} dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuModel {
    /// `Some(a)` for a known rate, `None` when `a` is the unknown parameter.
    pub rate: Option<f64>,
}

pub fn ou_model(rate: Option<f64>) -> OuModel {
    OuModel { rate }
}

impl DriftModel for OuModel {
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        usize::from(self.rate.is_none())
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = self.rate.unwrap_or_else(|| a[0]) * x[0];
    }
    fn linear_structure(&self) -> Option<&dyn LinearInParams> {
        Some(self)
    }
}

impl LinearInParams for OuModel {
    fn offset(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.rate.map_or(0.0, |a| a * x[0]);
    }
    fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        match self.rate {
            Some(_) => DMatrix::zeros(1, 0),
            None => DMatrix::from_element(1, 1, x[0]),
        }
    }
}

fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and T >= 0 (dt={dt}, T={t_end})"
        )));
    }
    let steps = (t_end / dt).round();
    if (steps * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "T = {t_end} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

pub(crate) fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    step_count(t_end, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiscaleKind {
    Averaging,
    Homogenization,
}

/// Parameters of the two multiscale data generators.
///
/// Averaging: `dY = (1 − Z²)Y dt + Q^{1/2} dWʸ`, `dZ = −(α/ε)Z dt + (2λ/ε)^{1/2} dWᶻ`,
/// reducing to OU with `a = 1 − λ/α`.
///
/// Homogenisation: `dY = ((σ/2)^{1/2}/ε · Z + aY) dt`, `dZ = −Z/ε² dt + (2^{1/2}/ε) dWᶻ`,
/// reducing to OU with rate `a` and `Q = σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MultiscaleSpec {
    Averaging {
        epsilon: f64,
        lambda: f64,
        alpha: f64,
        q: f64,
    },
    Homogenization {
        epsilon: f64,
        a: f64,
        sigma: f64,
    },
}

impl MultiscaleSpec {
    pub fn kind(&self) -> MultiscaleKind {
        match self {
            MultiscaleSpec::Averaging { .. } => MultiscaleKind::Averaging,
            MultiscaleSpec::Homogenization { .. } => MultiscaleKind::Homogenization,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            MultiscaleSpec::Averaging { epsilon, .. } | MultiscaleSpec::Homogenization { epsilon, .. } => {
                epsilon
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon() > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        match *self {
            MultiscaleSpec::Averaging { lambda, alpha, q, .. } => {
                if !(lambda > 0.0) || !(alpha > 0.0) || q < 0.0 {
                    return Err(Error::InvalidArgument(
                        "averaging needs lambda > 0, alpha > 0 and q >= 0".into(),
                    ));
                }
                if lambda / alpha <= 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "reduced dynamics unstable: lambda/alpha = {} must exceed 1",
                        lambda / alpha
                    )));
                }
            }
            MultiscaleSpec::Homogenization { sigma, .. } => {
                if sigma < 0.0 {
                    return Err(Error::InvalidArgument("sigma must be non-negative".into()));
                }
            }
        }
        Ok(())
    }

    /// Drift rate of the reduced OU model.
    pub fn reduced_rate(&self) -> f64 {
        match *self {
            MultiscaleSpec::Averaging { lambda, alpha, .. } => 1.0 - lambda / alpha,
            MultiscaleSpec::Homogenization { a, .. } => a,
        }
    }

    /// Model error variance `Q` of the reduced OU model.
    pub fn reduced_q(&self) -> f64 {
        match *self {
            MultiscaleSpec::Averaging { q, .. } => q,
            MultiscaleSpec::Homogenization { sigma, .. } => sigma,
        }
    }

    /// A message when `dt` resolves the fast process poorly.
    pub fn stability_warning(&self, dt: f64) -> Option<String> {
        let rate = match *self {
            MultiscaleSpec::Averaging { epsilon, alpha, .. } => alpha / epsilon,
            MultiscaleSpec::Homogenization { epsilon, .. } => 1.0 / (epsilon * epsilon),
        };
        (dt * rate > 0.5).then(|| {
            format!(
                "time step {dt} is coarse for the fast process (dt × rate = {:.3} > 0.5)",
                dt * rate
            )
        })
    }
}

const MULTISCALE_Y0: f64 = 0.5;

/// Euler–Maruyama path of the averaging system from `Y₀ = 1/2`, `Z₀ = 0`.
/// Returns the slow component `Y` with its exact increments.
pub fn simulate_averaging(
    spec: &MultiscaleSpec,
    dt: f64,
    t_end: f64,
    slow_noise: &mut RngStream,
    fast_noise: &mut RngStream,
) -> Result<SimulatedPath> {
    spec.validate()?;
    let MultiscaleSpec::Averaging {
        epsilon,
        lambda,
        alpha,
        q,
    } = *spec
    else {
        return Err(Error::InvalidArgument("expected an averaging specification".into()));
    };
    let steps = step_count(t_end, dt)?;
    let sdt = dt.sqrt();
    let (gy, gz) = (q.sqrt(), (2.0 * lambda / epsilon).sqrt());
    let decay = alpha / epsilon;
    let mut ys = Vec::with_capacity(steps + 1);
    let (mut y, mut z) = (MULTISCALE_Y0, 0.0);
    ys.push(y);
    for _ in 0..steps {
        let wy = slow_noise.standard_normal();
        let wz = fast_noise.standard_normal();
        let y_next = y + dt * (1.0 - z * z) * y + gy * sdt * wy;
        z += -dt * decay * z + gz * sdt * wz;
        y = y_next;
        ys.push(y);
    }
    path_with_exact_increments(dt, ys)
}

/// Euler path of the homogenisation system from `Y₀ = 1/2`, `Z₀ = 0`.
/// Returns the slow component `Y` with its exact increments.
pub fn simulate_homogenization(
    spec: &MultiscaleSpec,
    dtau: f64,
    t_end: f64,
    fast_noise: &mut RngStream,
) -> Result<SimulatedPath> {
    spec.validate()?;
    let MultiscaleSpec::Homogenization { epsilon, a, sigma } = *spec else {
        return Err(Error::InvalidArgument("expected a homogenization specification".into()));
    };
    let steps = step_count(t_end, dtau)?;
    let sdt = dtau.sqrt();
    let coupling = (sigma / 2.0).sqrt() / epsilon;
    let decay = 1.0 / (epsilon * epsilon);
    let gz = 2f64.sqrt() / epsilon;
    let mut ys = Vec::with_capacity(steps + 1);
    let (mut y, mut z) = (MULTISCALE_Y0, 0.0);
    ys.push(y);
    for _ in 0..steps {
        let wz = fast_noise.standard_normal();
        let y_next = y + dtau * (coupling * z + a * y);
        z += -dtau * decay * z + gz * sdt * wz;
        y = y_next;
        ys.push(y);
    }
    path_with_exact_increments(dtau, ys)
}

fn path_with_exact_increments(dt: f64, ys: Vec<f64>) -> Result<SimulatedPath> {
    let incs = ys.windows(2).map(|w| w[1] - w[0]).collect();
    SimulatedPath::new(dt, 1, 1, ys, incs)
}

/// Nodal values of a 2π-periodic, piecewise-linear function on `x_i = iΔx`,
/// `Δx = 2π/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicDriftField {
    pub values: Vec<f64>,
}

/// Interpolation cell and weight: `f(x) = (1 − w)a_j + w a_{j+1}`.
fn hat_weights(n_grid: usize, x: f64) -> (usize, usize, f64) {
    let dx = 2.0 * PI / n_grid as f64;
    let s = x.rem_euclid(2.0 * PI) / dx;
    let nearest = s.round();
    if (s - nearest).abs() < 1e-9 {
        let j = (nearest as usize) % n_grid;
        return (j, (j + 1) % n_grid, 0.0);
    }
    let j = (s.floor() as usize).min(n_grid - 1);
    (j, (j + 1) % n_grid, s - j as f64)
}

pub fn wrap_angle(x: f64) -> f64 {
    let w = x.rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

impl PeriodicDriftField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument("drift field needs at least 2 nodes".into()));
        }
        Ok(Self { values })
    }

    pub fn n_grid(&self) -> usize {
        self.values.len()
    }

    pub fn node(&self, i: usize) -> f64 {
        2.0 * PI * i as f64 / self.n_grid() as f64
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (j, k, w) = hat_weights(self.n_grid(), x);
        if w == 0.0 {
            self.values[j]
        } else {
            (1.0 - w) * self.values[j] + w * self.values[k]
        }
    }

    /// The field as a fixed drift `dX = f*(X) dt + ...` (no unknown parameters).
    pub fn as_fixed_model(&self) -> FixedFieldModel<'_> {
        FixedFieldModel { field: self }
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["node", "x", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([i.to_string(), self.node(i).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `node, x, value` (or `node, value`) rows.
    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let last = rec.len().checked_sub(1).ok_or_else(|| {
                Error::InvalidArgument(format!("{}: empty row", path.display()))
            })?;
            let v = rec[last].trim().parse::<f64>().map_err(|e| {
                Error::InvalidArgument(format!("{}: bad value {:?}: {e}", path.display(), &rec[last]))
            })?;
            values.push(v);
        }
        Self::new(values)
    }
}

pub struct FixedFieldModel<'a> {
    field: &'a PeriodicDriftField,
}

impl DriftModel for FixedFieldModel<'_> {
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn drift(&self, x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = self.field.eval(x[0]);
    }
}

/// Unknown drift `f(x, a) = Σᵢ bᵢ(x) aᵢ` with periodic hat functions
/// `bᵢ(x_j) = δᵢⱼ`; the nodal values are the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicHatModel {
    pub n_grid: usize,
}

pub fn drift_field_model(field: &PeriodicDriftField) -> PeriodicHatModel {
    PeriodicHatModel {
        n_grid: field.n_grid(),
    }
}

impl DriftModel for PeriodicHatModel {
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        self.n_grid
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        let (j, k, w) = hat_weights(self.n_grid, x[0]);
        out[0] = if w == 0.0 { a[j] } else { (1.0 - w) * a[j] + w * a[k] };
    }
    fn linear_structure(&self) -> Option<&dyn LinearInParams> {
        Some(self)
    }
    fn canonicalize_state(&self, x: &mut [f64]) {
        x[0] = wrap_angle(x[0]);
    }
}

impl LinearInParams for PeriodicHatModel {
    fn offset(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(1, self.n_grid);
        let (j, k, w) = hat_weights(self.n_grid, x[0]);
        b[(0, j)] += 1.0 - w;
        b[(0, k)] += w;
        b
    }
}

/// Finite-volume discretisation of `du = θΔu dt + σ^{1/2} dW` on `[0, 2π)`:
/// `dqⁱ = θ(qⁱ⁺¹ − 2qⁱ + qⁱ⁻¹)/Δx² dt + (σΔx)^{1/2} dWⁱ`, observed at `obs_index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatFvModel {
    pub n_grid: usize,
    pub sigma: f64,
    pub obs_index: usize,
    pub r: f64,
}

impl HeatFvModel {
    /// Observation at the middle cell `j* = N/2`.
    pub fn new(n_grid: usize, sigma: f64, r: f64) -> Result<Self> {
        let m = Self {
            n_grid,
            sigma,
            obs_index: n_grid / 2,
            r,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid < 3 {
            return Err(Error::InvalidArgument("heat model needs at least 3 cells".into()));
        }
        if !(self.sigma > 0.0) || self.r < 0.0 {
            return Err(Error::InvalidArgument("heat model needs sigma > 0 and r >= 0".into()));
        }
        if self.obs_index >= self.n_grid {
            return Err(Error::InvalidArgument("observation index outside the grid".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        2.0 * PI / self.n_grid as f64
    }

    /// Explicit Euler stability limit `Δx²/(2θ)` of the diffusion term.
    pub fn stability_limit(&self, theta: f64) -> f64 {
        self.dx() * self.dx() / (2.0 * theta)
    }

    /// Time step used for data and filtering: `Δx²/80`.
    pub fn default_dt(&self) -> f64 {
        self.dx() * self.dx() / 80.0
    }

    /// Periodic 3-point Laplacian `(qⁱ⁺¹ − 2qⁱ + qⁱ⁻¹)/Δx²`, written into `out`
    /// as a difference of face fluxes.
    pub fn laplacian(&self, q: &[f64], out: &mut [f64]) {
        let n = self.n_grid;
        let inv = 1.0 / (self.dx() * self.dx());
        let mut west = q[0] - q[n - 1];
        for i in 0..n {
            let east = q[(i + 1) % n] - q[i];
            out[i] = (east - west) * inv;
            west = east;
        }
    }

    pub fn laplacian_matrix(&self) -> DMatrix<f64> {
        let n = self.n_grid;
        let inv = 1.0 / (self.dx() * self.dx());
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            l[(i, i)] -= 2.0 * inv;
            l[(i, (i + 1) % n)] += inv;
            l[(i, (i + n - 1) % n)] += inv;
        }
        l
    }

    /// `G = (σΔx)^{1/2} I`, `H = e_{j*}ᵀ`, `R = r`.
    pub fn noise(&self) -> Result<NoiseGeometry> {
        let n = self.n_grid;
        let mut h = DMatrix::zeros(1, n);
        h[(0, self.obs_index)] = 1.0;
        NoiseGeometry::new(
            DMatrix::identity(n, n) * (self.sigma * self.dx()).sqrt(),
            h,
            DMatrix::from_element(1, 1, self.r),
        )
    }

    /// Drift `θ L q` with `θ` fixed (`Some`) or the unknown parameter (`None`).
    pub fn drift(&self, theta: Option<f64>) -> HeatDrift {
        HeatDrift { model: *self, theta }
    }
}

pub fn heat_fv_drift(model: &HeatFvModel, theta: Option<f64>) -> HeatDrift {
    model.drift(theta)
}

#[derive(Debug, Clone, Copy)]
pub struct HeatDrift {
    model: HeatFvModel,
    theta: Option<f64>,
}

impl DriftModel for HeatDrift {
    fn state_dim(&self) -> usize {
        self.model.n_grid
    }
    fn param_dim(&self) -> usize {
        usize::from(self.theta.is_none())
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        let theta = self.theta.unwrap_or_else(|| a[0]);
        self.model.laplacian(x, out);
        for v in out.iter_mut() {
            *v *= theta;
        }
    }
    fn linear_structure(&self) -> Option<&dyn LinearInParams> {
        Some(self)
    }
}

impl LinearInParams for HeatDrift {
    fn offset(&self, x: &[f64], out: &mut [f64]) {
        match self.theta {
            Some(_) => {
                DriftModel::drift(self, x, &[], out);
            }
            None => out.fill(0.0),
        }
    }
    fn basis(&self, x: &[f64]) -> DMatrix<f64> {
        match self.theta {
            Some(_) => DMatrix::zeros(self.model.n_grid, 0),
            None => {
                let mut lq = vec![0.0; self.model.n_grid];
                self.model.laplacian(x, &mut lq);
                DMatrix::from_column_slice(self.model.n_grid, 1, &lq)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linear_structure_defect;
    use crate::rng::StreamRole;

    #[test]
    fn ou_drift_and_structure() {
        let m = ou_model(None);
        assert_eq!(m.drift_vec(&[0.5], &[-0.5])[0], -0.25);
        let probes: Vec<_> = (0..10)
            .map(|i| (vec![i as f64 * 0.3 - 1.0], vec![1.5 - i as f64 * 0.2]))
            .collect();
        assert!(linear_structure_defect(&m, &probes).unwrap() < 1e-15);
        let fixed = ou_model(Some(-0.5));
        assert_eq!(fixed.param_dim(), 0);
        assert_eq!(fixed.drift_vec(&[0.5], &[])[0], -0.25);
    }

    #[test]
    fn reduced_rates() {
        let avg = MultiscaleSpec::Averaging {
            epsilon: 0.1,
            lambda: 3.0,
            alpha: 2.0,
            q: 0.5,
        };
        assert_eq!(avg.reduced_rate(), -0.5);
        let neutral = MultiscaleSpec::Averaging {
            epsilon: 0.1,
            lambda: 2.0,
            alpha: 2.0,
            q: 0.5,
        };
        assert_eq!(neutral.reduced_rate(), 0.0);
        // λ = α is exactly the unstable boundary
        assert!(neutral.validate().is_err());
        assert!(avg.stability_warning(0.002).is_none());
        assert!(avg.stability_warning(0.05).is_some());
    }

    #[test]
    fn fast_averaging_variable_has_variance_lambda_over_alpha() {
        let spec = MultiscaleSpec::Averaging {
            epsilon: 0.1,
            lambda: 3.0,
            alpha: 2.0,
            q: 0.5,
        };
        let MultiscaleSpec::Averaging { epsilon, lambda, alpha, .. } = spec else { unreachable!() };
        let dt = epsilon / 50.0;
        let mut s = RngStream::for_role(3, StreamRole::FastProcess, 0);
        let mut z = 0.0f64;
        let (mut acc, mut n) = (0.0, 0usize);
        for step in 0..2_000_000 {
            z += -dt * alpha / epsilon * z + (2.0 * lambda / epsilon * dt).sqrt() * s.standard_normal();
            if step > 1000 {
                acc += z * z;
                n += 1;
            }
        }
        let var = acc / n as f64;
        // Euler's stationary variance is λ/α / (1 − dt·α/(2ε)); allow Monte-Carlo slack
        let exact = lambda / alpha;
        assert!((var - exact).abs() / exact < 0.05, "{var} vs {exact}");
    }

    #[test]
    fn homogenization_without_forcing_is_deterministic_decay() {
        let spec = MultiscaleSpec::Homogenization {
            epsilon: 0.1,
            a: -0.5,
            sigma: 0.0,
        };
        let mut s = RngStream::new(1, 0);
        let dtau = 0.0002;
        let path = simulate_homogenization(&spec, dtau, 1.0, &mut s).unwrap();
        let mut y = 0.5;
        for n in 0..path.len() {
            assert_eq!(path.state(n)[0], y);
            y += dtau * (0.0 * 0.0 + -0.5 * y);
        }
    }

    #[test]
    fn homogenization_fast_variable_has_unit_variance() {
        let eps = 0.1f64;
        let dtau = eps * eps / 50.0;
        let mut s = RngStream::new(8, 0);
        let mut z = 0.0f64;
        let (mut acc, mut n) = (0.0, 0usize);
        for step in 0..2_000_000 {
            z += -dtau / (eps * eps) * z + (2.0f64).sqrt() / eps * dtau.sqrt() * s.standard_normal();
            if step > 1000 {
                acc += z * z;
                n += 1;
            }
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn multiscale_paths_start_at_one_half() {
        let spec = MultiscaleSpec::Averaging {
            epsilon: 0.1,
            lambda: 3.0,
            alpha: 2.0,
            q: 0.5,
        };
        let (mut a, mut b) = (RngStream::new(1, 0), RngStream::new(1, 1));
        let p = simulate_averaging(&spec, 0.002, 1.0, &mut a, &mut b).unwrap();
        assert_eq!(p.len(), 501);
        assert_eq!(p.state(0)[0], 0.5);
        assert!(simulate_averaging(&spec, 0.003, 1.0, &mut a, &mut b).is_err());
    }

    #[test]
    fn hat_field_interpolation() {
        let n = 8;
        let values: Vec<f64> = (0..n).map(|i| (i * i) as f64 - 3.0).collect();
        let field = PeriodicDriftField::new(values.clone()).unwrap();
        let model = drift_field_model(&field);
        for j in 0..n {
            let x = field.node(j);
            assert_eq!(model.drift_vec(&[x], &values)[0], values[j]);
            assert_eq!(field.eval(x), values[j]);
            let mid = x + 0.5 * 2.0 * PI / n as f64;
            let expected = 0.5 * (values[j] + values[(j + 1) % n]);
            assert!((model.drift_vec(&[mid], &values)[0] - expected).abs() < 1e-12);
        }
        let x = 2.0 * PI - 0.25 * 2.0 * PI / n as f64;
        let expected = 0.25 * values[n - 1] + 0.75 * values[0];
        assert!((field.eval(x) - expected).abs() < 1e-12);
        assert!((field.eval(x) - field.eval(x - 2.0 * PI)).abs() < 1e-12);
        assert!((field.eval(x) - field.eval(x + 4.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn hat_basis_rows_sum_to_one() {
        let model = PeriodicHatModel { n_grid: 12 };
        for i in 0..50 {
            let x = i as f64 * 0.37 - 3.0;
            let b = model.basis(&[x]);
            assert!((b.sum() - 1.0).abs() < 1e-14);
            assert!(b.iter().filter(|v| **v != 0.0).count() <= 2);
        }
        let probes: Vec<_> = (0..20)
            .map(|i| (vec![i as f64 * 0.41], (0..12).map(|k| ((k * i) as f64).sin()).collect()))
            .collect();
        assert!(linear_structure_defect(&model, &probes).unwrap() < 1e-14);
    }

    #[test]
    fn wrapping_stays_in_domain() {
        let model = PeriodicHatModel { n_grid: 4 };
        for x in [-1e-18, -0.1, 7.0, 2.0 * PI, -4.0 * PI] {
            let mut s = [x];
            model.canonicalize_state(&mut s);
            assert!((0.0..2.0 * PI).contains(&s[0]), "{x} -> {}", s[0]);
        }
    }

    #[test]
    fn heat_stencil() {
        let m = HeatFvModel::new(10, 1.0, 0.0).unwrap();
        let f = m.drift(Some(1.0));
        assert!(f.drift_vec(&[2.5; 10], &[]).iter().all(|v| *v == 0.0));

        let inv = 1.0 / (m.dx() * m.dx());
        for j in [0, 4, 9] {
            let mut e = vec![0.0; 10];
            e[j] = 1.0;
            let lq = f.drift_vec(&e, &[]);
            for i in 0..10 {
                let expected = if i == j {
                    -2.0 * inv
                } else if i == (j + 1) % 10 || i == (j + 9) % 10 {
                    inv
                } else {
                    0.0
                };
                assert_eq!(lq[i], expected, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn heat_matrix_matches_stencil_and_structure() {
        let m = HeatFvModel::new(7, 0.5, 0.0).unwrap();
        let q: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).cos()).collect();
        let free = m.drift(None);
        let direct = free.drift_vec(&q, &[0.8]);
        let via_matrix = m.laplacian_matrix() * nalgebra::DVector::from_vec(q.clone()) * 0.8;
        assert!((direct - via_matrix).amax() < 1e-12);
        let probes = vec![(q, vec![0.8]), (vec![1.0; 7], vec![3.0])];
        assert!(linear_structure_defect(&free, &probes).unwrap() < 1e-12);
    }

    #[test]
    fn heat_noise_geometry() {
        let m = HeatFvModel::new(8, 2.0, 0.0).unwrap();
        let n = m.noise().unwrap();
        assert_eq!(n.obs_dim(), 1);
        assert_eq!(n.h()[(0, 4)], 1.0);
        assert!((n.c()[(0, 0)] - 2.0 * m.dx()).abs() < 1e-15);
        assert!(m.default_dt() < m.stability_limit(1.8));
    }
}
