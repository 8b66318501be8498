//! Seeded noise sources.
//!
//! Every noise source in a run (model noise of the data generator, measurement
//! noise, prior draws, per-particle filter noise) owns its own [`RngStream`],
//! addressed by a `(seed, stream_id)` pair. Streams are ChaCha8 keystreams
//! that differ only in the stream word, so they are independent by
//! construction and a particle's noise does not depend on the ensemble size
//! or on how work is scheduled.
//!
//! Gaussian-process priors on the periodic domain `[0, 2π)` are sampled
//! exactly in Fourier space, see [`sample_gp_drift`].

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical owner of a stream. Folded into the high bits of the stream id so
/// that e.g. particle 3's filter noise never coincides with the data noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    ModelNoise = 1,
    MeasurementNoise = 2,
    Prior = 3,
    Particle = 4,
    FastProcess = 5,
}

impl StreamRole {
    pub fn id(self, index: u64) -> u64 {
        debug_assert!(index < 1 << 48);
        ((self as u64) << 48) | index
    }
}

/// A reproducible Gaussian noise stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn for_role(seed: u64, role: StreamRole, index: u64) -> Self {
        Self::new(seed, role.id(index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// The underlying generator, for sampling other distributions.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Rewind to the start of the stream.
    pub fn reset(&mut self) {
        *self = Self::new(self.seed, self.stream_id);
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Overwrite `out` with independent N(0, 1) samples.
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.standard_normal();
        }
    }

    /// Independent N(0, dt) samples, i.e. Brownian increments over a step `dt`.
    pub fn gaussian_increments(&mut self, dim: usize, dt: f64) -> Result<DVector<f64>> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time step must be positive, got {dt}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        let scale = dt.sqrt();
        Ok(DVector::from_fn(dim, |_, _| scale * self.standard_normal()))
    }
}

/// Zero-mean Gaussian-process prior `GP(0, D⁻¹)` on `[0, 2π)` with precision
/// operator `D = η[(−Δ)ᵖ + κI]`, discretised on `n_grid` equispaced nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPriorSpec {
    pub eta: f64,
    pub kappa: f64,
    pub p: u32,
    pub n_grid: usize,
    #[serde(default = "two_pi")]
    pub domain_length: f64,
}

fn two_pi() -> f64 {
    2.0 * PI
}

impl GpPriorSpec {
    pub fn new(eta: f64, kappa: f64, p: u32, n_grid: usize) -> Result<Self> {
        let spec = Self {
            eta,
            kappa,
            p,
            n_grid,
            domain_length: two_pi(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.kappa > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "GP prior needs eta > 0 and kappa > 0 (eta={}, kappa={})",
                self.eta, self.kappa
            )));
        }
        if self.p < 1 {
            return Err(Error::InvalidArgument("GP regularity p must be >= 1".into()));
        }
        if self.n_grid < 4 {
            return Err(Error::InvalidArgument(format!(
                "GP grid needs at least 4 nodes, got {}",
                self.n_grid
            )));
        }
        if (self.domain_length - two_pi()).abs() > 1e-12 {
            return Err(Error::InvalidArgument(
                "only the periodic domain [0, 2π) is supported".into(),
            ));
        }
        Ok(())
    }

    /// Eigenvalue `η(|k|^{2p} + κ)` of the precision operator for wavenumber `k`.
    pub fn precision(&self, k: i64) -> f64 {
        self.eta * ((k.unsigned_abs() as f64).powi(2 * self.p as i32) + self.kappa)
    }

    /// Resolved wavenumbers `−N/2+1 ..= N/2` (for odd `N`: `−(N−1)/2 ..= (N−1)/2`).
    pub fn wavenumbers(&self) -> impl Iterator<Item = i64> {
        let n = self.n_grid as i64;
        let lo = -(n - 1) / 2;
        let hi = n / 2;
        lo..=hi
    }
}

/// One draw of the GP prior at the grid nodes `x_j = 2πj/N`.
///
/// Normalisation: the field is expanded in the L²-orthonormal Fourier basis
/// `e^{ikx}/√(2π)`, so coefficient `k` has variance `1/(η(|k|^{2p}+κ))` and the
/// pointwise variance is `(1/2π) Σ_k 1/(η(|k|^{2p}+κ))` over the resolved
/// wavenumbers. Coefficients are conjugate-symmetric, the Nyquist mode (even
/// `N`) is real, and the grid values are obtained with one inverse FFT.
pub fn sample_gp_drift(spec: &GpPriorSpec, stream: &mut RngStream) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.n_grid;
    let mut coeffs = vec![Complex64::new(0.0, 0.0); n];

    coeffs[0] = Complex64::new(stream.standard_normal() / spec.precision(0).sqrt(), 0.0);
    let half = n / 2;
    for k in 1..=half {
        let sd = 1.0 / spec.precision(k as i64).sqrt();
        if n % 2 == 0 && k == half {
            coeffs[k] = Complex64::new(sd * stream.standard_normal(), 0.0);
        } else {
            let re = stream.standard_normal();
            let im = stream.standard_normal();
            let c = Complex64::new(re, im) * (sd / 2f64.sqrt());
            coeffs[k] = c;
            coeffs[n - k] = c.conj();
        }
    }

    let mut planner = FftPlanner::new();
    // rustfft's inverse transform is the unnormalised sum Σ_k c_k e^{+2πijk/N}.
    planner.plan_fft_inverse(n).process(&mut coeffs);
    let norm = 1.0 / spec.domain_length.sqrt();
    Ok(coeffs.iter().map(|c| c.re * norm).collect())
}

/// Analytic pointwise variance of [`sample_gp_drift`], by direct spectral summation.
pub fn gp_pointwise_variance(spec: &GpPriorSpec) -> f64 {
    spec.wavenumbers().map(|k| 1.0 / spec.precision(k)).sum::<f64>() / spec.domain_length
}
