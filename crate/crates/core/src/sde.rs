//! Euler–Maruyama simulation and synthesis of observed increments.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::model::{DriftModel, NoiseGeometry};
use crate::rng::RngStream;

/// A simulated trajectory on the grid `t_n = n·dt` together with the observed
/// increments `ΔY_n`, stored row-major in flat buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    dt: f64,
    state_dim: usize,
    obs_dim: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
}

impl SimulatedPath {
    pub fn new(
        dt: f64,
        state_dim: usize,
        obs_dim: usize,
        states: Vec<f64>,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if state_dim == 0 || obs_dim == 0 {
            return Err(Error::InvalidArgument("path dimensions must be positive".into()));
        }
        if states.len() % state_dim != 0 || increments.len() % obs_dim != 0 {
            return Err(Error::InvalidArgument("ragged path buffers".into()));
        }
        let n_states = states.len() / state_dim;
        if n_states == 0 {
            return Err(Error::InvalidArgument("path has no states".into()));
        }
        check_dim("increment count", n_states - 1, increments.len() / obs_dim)?;
        Ok(Self {
            dt,
            state_dim,
            obs_dim,
            states,
            increments,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn n_increments(&self) -> usize {
        self.increments.len() / self.obs_dim
    }
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.state_dim..(n + 1) * self.state_dim]
    }
    pub fn increment(&self, n: usize) -> &[f64] {
        &self.increments[n * self.obs_dim..(n + 1) * self.obs_dim]
    }
    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }
    pub fn increments_flat(&self) -> &[f64] {
        &self.increments
    }

    /// Scalar component `i` of every state, e.g. the observed signal of a 1-D path.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.chunks(self.state_dim).map(|s| s[i]).collect()
    }

    /// Replace the increments, keeping the states.
    pub fn with_increments(self, obs_dim: usize, increments: Vec<f64>) -> Result<Self> {
        Self::new(self.dt, self.state_dim, obs_dim, self.states, increments)
    }

    pub fn write_states_csv(&self, path: &Path) -> Result<()> {
        let header = header_row("x", self.state_dim);
        write_rows(path, &header, self.len(), |n| (self.time(n), self.state(n)))
    }

    pub fn write_increments_csv(&self, path: &Path) -> Result<()> {
        let header = header_row("dy", self.obs_dim);
        write_rows(path, &header, self.n_increments(), |n| (self.time(n), self.increment(n)))
    }
}

fn header_row(prefix: &str, dim: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=dim).map(|i| format!("{prefix}_{i}")))
        .collect()
}

fn write_rows<'a>(
    path: &Path,
    header: &[String],
    rows: usize,
    row: impl Fn(usize) -> (f64, &'a [f64]),
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    let mut record = Vec::with_capacity(header.len());
    for n in 0..rows {
        let (t, values) = row(n);
        record.clear();
        record.push(t.to_string());
        record.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Increments read back from a CSV with header `t, dy_1, ..`. Returns the time
/// step (from the first two rows, or `fallback_dt` for a single row) and the
/// flat increment buffer.
pub fn read_increments_csv(path: &Path, fallback_dt: f64) -> Result<(f64, usize, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let obs_dim = r.headers()?.len().saturating_sub(1);
    if obs_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: increment file needs a time column and at least one dy column",
            path.display()
        )));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("{}: bad number {s:?}: {e}", path.display())))
        };
        times.push(parse(&rec[0])?);
        for i in 1..=obs_dim {
            values.push(parse(&rec[i])?);
        }
    }
    let dt = if times.len() >= 2 { times[1] - times[0] } else { fallback_dt };
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{}: time column must be increasing",
            path.display()
        )));
    }
    Ok((dt, obs_dim, values))
}

/// One step `x + dt·f(x,a) + G·√dt·ξ` with the standard normal draws `xi` given.
pub fn euler_maruyama_step_with(
    model: &dyn DriftModel,
    noise: &NoiseGeometry,
    x: &[f64],
    a: &[f64],
    dt: f64,
    xi: &[f64],
) -> Result<DVector<f64>> {
    check_dim("Euler-Maruyama state", model.state_dim(), x.len())?;
    check_dim("Euler-Maruyama parameters", model.param_dim(), a.len())?;
    check_dim("noise state dimension", model.state_dim(), noise.state_dim())?;
    check_dim("noise draws", noise.noise_dim(), xi.len())?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let f = model.drift_vec(x, a);
    let sdt = dt.sqrt();
    let g = noise.g();
    Ok(DVector::from_fn(x.len(), |i, _| {
        let gxi: f64 = (0..xi.len()).map(|k| g[(i, k)] * xi[k]).sum();
        x[i] + dt * f[i] + sdt * gxi
    }))
}

/// One Euler–Maruyama step with noise `ξ ~ N(0, dt·I)` drawn from `stream`.
pub fn euler_maruyama_step(
    model: &dyn DriftModel,
    noise: &NoiseGeometry,
    x: &[f64],
    a: &[f64],
    dt: f64,
    stream: &mut RngStream,
) -> Result<DVector<f64>> {
    let mut xi = vec![0.0; noise.noise_dim()];
    stream.fill_standard_normal(&mut xi);
    euler_maruyama_step_with(model, noise, x, a, dt, &xi)
}

/// Integrate `steps` Euler–Maruyama steps from `x0`; returns the flat state buffer.
pub fn simulate_states(
    model: &dyn DriftModel,
    noise: &NoiseGeometry,
    x0: &[f64],
    a: &[f64],
    dt: f64,
    steps: usize,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    let nx = model.state_dim();
    check_dim("initial state", nx, x0.len())?;
    check_dim("parameters", model.param_dim(), a.len())?;
    check_dim("noise state dimension", nx, noise.state_dim())?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let nw = noise.noise_dim();
    let sdt = dt.sqrt();
    let mut states = Vec::with_capacity((steps + 1) * nx);
    states.extend_from_slice(x0);
    let mut f = vec![0.0; nx];
    let mut xi = vec![0.0; nw];
    let mut gxi = vec![0.0; nx];
    let mut x = x0.to_vec();
    for _ in 0..steps {
        model.drift(&x, a, &mut f);
        stream.fill_standard_normal(&mut xi);
        noise.apply_g(&xi, &mut gxi);
        for i in 0..nx {
            x[i] += dt * f[i] + sdt * gxi[i];
        }
        states.extend_from_slice(&x);
    }
    Ok(states)
}

/// `ΔY_n = H(X_{n+1} − X_n) + √dt·R^{1/2}·Ξ_n` for a flat state buffer.
pub fn synthesize_increments(
    states: &[f64],
    noise: &NoiseGeometry,
    dt: f64,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    let nx = noise.state_dim();
    let ny = noise.obs_dim();
    if states.len() % nx != 0 {
        return Err(Error::InvalidArgument("ragged state buffer".into()));
    }
    let n_states = states.len() / nx;
    if n_states < 2 {
        return Err(Error::InvalidArgument(
            "increment synthesis needs at least two states".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let h = noise.h();
    let sr = noise.sqrt_r();
    let noisy = !noise.r_is_zero();
    let sdt = dt.sqrt();
    let mut out = Vec::with_capacity((n_states - 1) * ny);
    let mut xi = vec![0.0; ny];
    let mut dx = vec![0.0; nx];
    for n in 0..n_states - 1 {
        let (x0, x1) = (&states[n * nx..(n + 1) * nx], &states[(n + 1) * nx..(n + 2) * nx]);
        for i in 0..nx {
            dx[i] = x1[i] - x0[i];
        }
        if noisy {
            stream.fill_standard_normal(&mut xi);
        }
        for r in 0..ny {
            let mut v: f64 = (0..nx).map(|i| h[(r, i)] * dx[i]).sum();
            if noisy {
                v += sdt * (0..ny).map(|k| sr[(r, k)] * xi[k]).sum::<f64>();
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Keep every `factor`-th state; coarse increments are the sums of the fine
/// increments they span and the time step becomes `factor·dt`.
pub fn subsample(path: &SimulatedPath, factor: usize) -> Result<SimulatedPath> {
    if factor == 0 {
        return Err(Error::InvalidArgument("subsampling factor must be >= 1".into()));
    }
    let fine = path.len() - 1;
    if fine % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "subsampling factor {factor} does not divide the {fine} steps of the path"
        )));
    }
    if factor == 1 {
        return Ok(path.clone());
    }
    let (nx, ny) = (path.state_dim(), path.obs_dim());
    let coarse = fine / factor;
    let mut states = Vec::with_capacity((coarse + 1) * nx);
    let mut incs = Vec::with_capacity(coarse * ny);
    for m in 0..=coarse {
        states.extend_from_slice(path.state(m * factor));
    }
    for m in 0..coarse {
        let mut acc = vec![0.0; ny];
        for n in m * factor..(m + 1) * factor {
            for (a, d) in acc.iter_mut().zip(path.increment(n)) {
                *a += d;
            }
        }
        incs.extend_from_slice(&acc);
    }
    SimulatedPath::new(path.dt() * factor as f64, nx, ny, states, incs)
}

/// Decimate a flat state buffer without increments (for data whose
/// measurement noise is added on the coarse grid).
pub fn decimate_states(states: &[f64], state_dim: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("subsampling factor must be >= 1".into()));
    }
    let n = states.len() / state_dim;
    if n == 0 || (n - 1) % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "subsampling factor {factor} does not divide the {} steps of the path",
            n.saturating_sub(1)
        )));
    }
    Ok(states
        .chunks(state_dim)
        .step_by(factor)
        .flatten()
        .copied()
        .collect())
}

/// Writes `t, x_1..` rows for an arbitrary flat state buffer.
pub fn write_state_rows(
    out: &mut impl Write,
    dt: f64,
    state_dim: usize,
    states: &[f64],
) -> std::io::Result<()> {
    write!(out, "t")?;
    for i in 1..=state_dim {
        write!(out, ",x_{i}")?;
    }
    writeln!(out)?;
    for (n, s) in states.chunks(state_dim).enumerate() {
        write!(out, "{}", n as f64 * dt)?;
        for v in s {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
