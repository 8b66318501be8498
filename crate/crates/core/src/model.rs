//! Drift models `f(x, a)` and the noise geometry of the observed increments
//! `dY = H dX + R^{1/2} dV`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{is_diagonal, sqrt_psd};

/// Drift `f(x, a)` of `dX = f(X, a) dt + G dW`.
///
/// Evaluation writes into a caller-provided buffer so the filters can run
/// their per-particle loops without allocating.
pub trait DriftModel: Send + Sync {
    fn state_dim(&self) -> usize;

    /// Number of unknown parameters; zero for pure state problems.
    fn param_dim(&self) -> usize;

    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]);

    /// `f(x, a) = f₀(x) + B(x) a`, when the model has that form.
    fn linear_structure(&self) -> Option<&dyn LinearInParams> {
        None
    }

    /// Map a state back onto its canonical representative (e.g. wrap a
    /// periodic coordinate). Applied by the filters after each step.
    fn canonicalize_state(&self, _x: &mut [f64]) {}

    fn drift_vec(&self, x: &[f64], a: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_dim());
        self.drift(x, a, out.as_mut_slice());
        out
    }
}

/// Linear-in-parameters structure `f₀(x) + B(x) a`.
pub trait LinearInParams {
    fn offset(&self, x: &[f64], out: &mut [f64]);

    /// `B(x)`, an `N_x × N_a` matrix.
    fn basis(&self, x: &[f64]) -> DMatrix<f64>;
}

/// Largest deviation `|f(x,a) − f₀(x) − B(x)a|` over the given probes.
pub fn linear_structure_defect(
    model: &dyn DriftModel,
    probes: &[(Vec<f64>, Vec<f64>)],
) -> Option<f64> {
    let lin = model.linear_structure()?;
    let mut worst = 0.0f64;
    for (x, a) in probes {
        let f = model.drift_vec(x, a);
        let mut f0 = vec![0.0; model.state_dim()];
        lin.offset(x, &mut f0);
        let ba = lin.basis(x) * DVector::from_column_slice(a);
        for i in 0..f.len() {
            worst = worst.max((f[i] - f0[i] - ba[i]).abs());
        }
    }
    Some(worst)
}

/// Drift given by a closure; handy for ad-hoc models and tests.
pub struct FnDrift<F> {
    state_dim: usize,
    param_dim: usize,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(state_dim: usize, param_dim: usize, f: F) -> Self {
        Self {
            state_dim,
            param_dim,
            f,
        }
    }
}

impl<F> DriftModel for FnDrift<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn param_dim(&self) -> usize {
        self.param_dim
    }
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.f)(x, a, out)
    }
}

/// Linear drift `f(x) = F x` without parameters.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    pub f: DMatrix<f64>,
}

impl DriftModel for LinearDrift {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn drift(&self, x: &[f64], _a: &[f64], out: &mut [f64]) {
        let n = self.f.nrows();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            *o = (0..n).map(|j| self.f[(i, j)] * x[j]).sum();
        }
    }
}

/// Noise matrices of the model/observation pair.
///
/// `Q = GGᵀ` is the model error covariance and `C = HQHᵀ + R` the covariance
/// of the total observation error `HGW + R^{1/2}V`, which must be invertible.
#[derive(Debug, Clone)]
pub struct NoiseGeometry {
    g: DMatrix<f64>,
    q: DMatrix<f64>,
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    c: DMatrix<f64>,
    sqrt_r: DMatrix<f64>,
    q_ht: DMatrix<f64>,
    h_g: DMatrix<f64>,
    g_diag: Option<Vec<f64>>,
    r_is_zero: bool,
}

impl NoiseGeometry {
    pub fn new(g: DMatrix<f64>, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_dim("observation operator columns", g.nrows(), h.ncols())?;
        check_dim("measurement covariance rows", h.nrows(), r.nrows())?;
        check_dim("measurement covariance columns", h.nrows(), r.ncols())?;
        if g.ncols() == 0 || h.nrows() == 0 {
            return Err(Error::InvalidArgument("empty noise or observation dimension".into()));
        }
        if (&r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) {
            return Err(Error::InvalidArgument("measurement covariance R is not symmetric".into()));
        }
        let q = &g * g.transpose();
        let q_ht = &q * h.transpose();
        let mut c = &h * &q_ht + &r;
        crate::linalg::symmetrize(&mut c);
        let sqrt_r = sqrt_psd(&r)?;
        let c_ok = if c.nrows() == 1 {
            c[(0, 0)] > 0.0
        } else {
            c.clone().cholesky().is_some()
        };
        if !c_ok {
            return Err(Error::InvalidArgument(
                "total observation error covariance C = HQHᵀ + R is not positive definite".into(),
            ));
        }
        let h_g = &h * &g;
        let r_is_zero = r.iter().all(|v| *v == 0.0);
        let g_diag = (g.is_square() && is_diagonal(&g)).then(|| g.diagonal().iter().copied().collect());
        Ok(Self {
            g,
            q,
            h,
            r,
            c,
            sqrt_r,
            q_ht,
            h_g,
            g_diag,
            r_is_zero,
        })
    }

    /// One-dimensional state observed directly: `G = √q`, `H = 1`, `R = r`.
    pub fn scalar(q: f64, r: f64) -> Result<Self> {
        if q < 0.0 || r < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "variances must be non-negative (q={q}, r={r})"
            )));
        }
        Self::new(
            DMatrix::from_element(1, 1, q.sqrt()),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn sqrt_r(&self) -> &DMatrix<f64> {
        &self.sqrt_r
    }
    /// `QHᵀ`, the cross-covariance between model noise and observation error.
    pub fn q_ht(&self) -> &DMatrix<f64> {
        &self.q_ht
    }
    pub fn h_g(&self) -> &DMatrix<f64> {
        &self.h_g
    }
    /// `out = G ξ`, elementwise when `G` is diagonal.
    pub fn apply_g(&self, xi: &[f64], out: &mut [f64]) {
        match &self.g_diag {
            Some(d) => {
                for ((o, g), x) in out.iter_mut().zip(d).zip(xi) {
                    *o = g * x;
                }
            }
            None => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..xi.len()).map(|k| self.g[(i, k)] * xi[k]).sum();
                }
            }
        }
    }
    pub fn r_is_zero(&self) -> bool {
        self.r_is_zero
    }
    pub fn state_dim(&self) -> usize {
        self.g.nrows()
    }
    pub fn noise_dim(&self) -> usize {
        self.g.ncols()
    }
    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
    pub fn r_is_diagonal(&self) -> bool {
        is_diagonal(&self.r)
    }
    pub fn h_is_identity(&self) -> bool {
        self.h.is_square() && self.h == DMatrix::identity(self.h.nrows(), self.h.ncols())
    }
}
