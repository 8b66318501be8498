//! Exact Kalman–Bucy filter for linear models `dX = FX dt + G dW` observed
//! through `dY = H dX + R^{1/2} dV`, where model and measurement errors are
//! correlated. It serves as the reference for the ensemble filters and
//! provides the data likelihood (model evidence) of a linear model.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{min_eigenvalue, solve_spd_right, symmetrize};
use crate::model::NoiseGeometry;

/// Steps between full eigenvalue checks of the covariance.
const EIGEN_CHECK_STRIDE: usize = 256;
/// Tolerated negative eigenvalue, relative to the trace.
const NEGATIVE_EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LinearModel {
    pub f: DMatrix<f64>,
    pub noise: NoiseGeometry,
}

impl LinearModel {
    pub fn new(f: DMatrix<f64>, noise: NoiseGeometry) -> Result<Self> {
        if !f.is_square() {
            return Err(Error::InvalidArgument("drift matrix F must be square".into()));
        }
        check_dim("drift matrix vs noise geometry", noise.state_dim(), f.nrows())?;
        Ok(Self { f, noise })
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }
}

/// `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self> {
        check_dim("belief covariance rows", mean.len(), cov.nrows())?;
        check_dim("belief covariance columns", mean.len(), cov.ncols())?;
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-10 * scale {
            return Err(Error::InvalidArgument("belief covariance is not symmetric".into()));
        }
        symmetrize(&mut cov);
        Ok(Self { mean, cov })
    }

    /// Known initial state: zero covariance.
    pub fn point(x0: &[f64]) -> Self {
        let n = x0.len();
        Self {
            mean: DVector::from_column_slice(x0),
            cov: DMatrix::zeros(n, n),
        }
    }
}

/// Pieces shared by the mean and covariance equations.
struct GainTerms {
    fp: DMatrix<f64>,
    /// `(PFᵀ + Q)Hᵀ`
    a_ht: DMatrix<f64>,
    /// `(PFᵀ + Q)HᵀC⁻¹`
    gain: DMatrix<f64>,
}

fn gain_terms(model: &LinearModel, cov: &DMatrix<f64>) -> Result<GainTerms> {
    let fp = &model.f * cov;
    let a_ht = (fp.transpose() + model.noise.q()) * model.noise.h().transpose();
    let gain = solve_spd_right(&a_ht, model.noise.c())?;
    Ok(GainTerms { fp, a_ht, gain })
}

fn riccati_from_terms(model: &LinearModel, t: &GainTerms) -> DMatrix<f64> {
    let mut rhs = &t.fp + t.fp.transpose() - &t.gain * t.a_ht.transpose() + model.noise.q();
    symmetrize(&mut rhs);
    rhs
}

/// Right-hand side of the covariance equation
/// `dP/dt = FP + PFᵀ − (PFᵀ + Q)HᵀC⁻¹H(FP + Q) + Q`.
pub fn riccati_rhs(model: &LinearModel, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("covariance", model.state_dim(), cov.nrows())?;
    Ok(riccati_from_terms(model, &gain_terms(model, cov)?))
}

fn check_diagonal(cov: &DMatrix<f64>) -> Result<()> {
    let trace = cov.trace();
    let tol = -NEGATIVE_EIGEN_TOL * trace.abs();
    for i in 0..cov.nrows() {
        if !cov[(i, i)].is_finite() || cov[(i, i)] < tol {
            return Err(Error::numerical(format!(
                "covariance lost positive semi-definiteness (diagonal entry {i} = {:e})",
                cov[(i, i)]
            )));
        }
    }
    Ok(())
}

/// Full eigenvalue check of the negative-eigenvalue guard.
pub fn check_psd(cov: &DMatrix<f64>) -> Result<()> {
    check_diagonal(cov)?;
    if cov.nrows() > 1 {
        let lo = min_eigenvalue(cov);
        if lo < -NEGATIVE_EIGEN_TOL * cov.trace().abs() {
            return Err(Error::numerical(format!(
                "covariance has negative eigenvalue {lo:e}"
            )));
        }
    }
    Ok(())
}

/// One explicit Euler step of the mean and covariance equations
///
/// ```text
/// dx̄ = Fx̄ dt + (PFᵀ + Q)HᵀC⁻¹(dY − HFx̄ dt)
/// dP = [FP + PFᵀ − (PFᵀ + Q)HᵀC⁻¹H(FP + Q) + Q] dt
/// ```
///
/// The covariance is re-symmetrised after the step.
pub fn kb_mean_cov_step(
    model: &LinearModel,
    belief: &GaussianBelief,
    dy: &[f64],
    dt: f64,
) -> Result<GaussianBelief> {
    check_dim("belief dimension", model.state_dim(), belief.mean.len())?;
    check_dim("observed increment", model.noise.obs_dim(), dy.len())?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let terms = gain_terms(model, &belief.cov)?;
    let fx = &model.f * &belief.mean;
    let innov = DVector::from_column_slice(dy) - model.noise.h() * &fx * dt;
    let mean = &belief.mean + &fx * dt + &terms.gain * innov;

    let mut cov = &belief.cov + riccati_from_terms(model, &terms) * dt;
    symmetrize(&mut cov);
    check_diagonal(&cov)?;
    Ok(GaussianBelief { mean, cov })
}

/// Run the filter over a flat increment buffer, returning the belief after
/// every step (index 0 is the initial belief).
pub fn kb_filter(
    model: &LinearModel,
    belief0: &GaussianBelief,
    increments: &[f64],
    dt: f64,
) -> Result<Vec<GaussianBelief>> {
    let ny = model.noise.obs_dim();
    if increments.len() % ny != 0 {
        return Err(Error::InvalidArgument("ragged increment buffer".into()));
    }
    let steps = increments.len() / ny;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(belief0.clone());
    for n in 0..steps {
        let next = kb_mean_cov_step(model, &out[n], &increments[n * ny..(n + 1) * ny], dt)
            .map_err(|e| e.at_step(n))?;
        if (n + 1) % EIGEN_CHECK_STRIDE == 0 {
            check_psd(&next.cov).map_err(|e| e.at_step(n))?;
        }
        out.push(next);
    }
    Ok(out)
}

/// `log N(r; 0, S)` via Cholesky.
fn gaussian_log_density(r: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let n = r.len() as f64;
    if s.nrows() == 1 {
        let v = s[(0, 0)];
        if !(v > 0.0) {
            return Err(Error::numerical(format!(
                "innovation covariance is not positive definite ({v:e})"
            )));
        }
        return Ok(-0.5 * ((2.0 * PI).ln() + v.ln() + r[0] * r[0] / v));
    }
    let chol = s.clone().cholesky().ok_or_else(|| {
        Error::numerical("innovation covariance is not positive definite")
    })?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(r));
    Ok(-0.5 * (n * (2.0 * PI).ln() + log_det + quad))
}

/// Log evidence of the increments under a linear model, by prediction-error
/// decomposition:
///
/// `Σₙ log N(ΔYₙ; HFx̄ₙΔt, CΔt + Δt² HFPₙFᵀHᵀ)`,
///
/// with `(x̄ₙ, Pₙ)` advanced by [`kb_mean_cov_step`] after each term.
pub fn log_evidence(
    model: &LinearModel,
    increments: &[f64],
    dt: f64,
    belief0: &GaussianBelief,
) -> Result<f64> {
    let ny = model.noise.obs_dim();
    if increments.len() % ny != 0 {
        return Err(Error::InvalidArgument("ragged increment buffer".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let hf = model.noise.h() * &model.f;
    let c_dt = model.noise.c() * dt;
    let mut belief = belief0.clone();
    let mut total = 0.0;
    for (n, dy) in increments.chunks_exact(ny).enumerate() {
        let predicted = &hf * &belief.mean * dt;
        let mut s = &c_dt + (&hf * &belief.cov * hf.transpose()) * (dt * dt);
        symmetrize(&mut s);
        let r = DVector::from_column_slice(dy) - predicted;
        total += gaussian_log_density(&r, &s).map_err(|e| e.at_step(n))?;
        belief = kb_mean_cov_step(model, &belief, dy, dt).map_err(|e| e.at_step(n))?;
        if (n + 1) % EIGEN_CHECK_STRIDE == 0 {
            check_psd(&belief.cov).map_err(|e| e.at_step(n))?;
        }
    }
    check_psd(&belief.cov)?;
    Ok(total)
}

/// Drift estimate `Σ Yₙ(Yₙ₊₁ − Yₙ) / Σ Yₙ² Δτ` for the scalar model `dY = aY dt + ...`.
pub fn mle_drift(states: &[f64], dtau: f64) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "drift estimate needs at least 2 samples, got {}",
            states.len()
        )));
    }
    if !(dtau > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dtau}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for w in states.windows(2) {
        num += w[0] * (w[1] - w[0]);
        den += w[0] * w[0];
    }
    den *= dtau;
    if den == 0.0 {
        return Err(Error::DegenerateData(
            "drift estimate undefined for an identically zero path".into(),
        ));
    }
    Ok(num / den)
}
