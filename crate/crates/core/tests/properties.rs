use std::f64::consts::PI;

use enkbf::canonical;
use enkbf::filter::{Ensemble, FilterRun, FilterScheme};
use enkbf::kalman_bucy::{kb_mean_cov_step, GaussianBelief, LinearModel};
use enkbf::models::{wrap_angle, HeatFvModel, PeriodicDriftField};
use enkbf::sde::{subsample, synthesize_increments, SimulatedPath};
use enkbf::{empirical_moments, particle_streams, DriftModel, ExperimentConfig, FnDrift, NoiseGeometry, RngStream};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn ensemble_case() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    (2usize..=10, 1usize..=3, 0usize..=3, 1usize..=3)
        .prop_flat_map(|(m, nx, na, ny)| (matrix(nx, m), matrix(na, m), matrix(ny, m)))
}

fn cross(a: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.ncols();
    let mut out = DMatrix::zeros(a.nrows(), h.nrows());
    for p in 0..a.nrows() {
        for r in 0..h.nrows() {
            let hbar = h.row(r).sum() / m as f64;
            out[(p, r)] = (0..m).map(|i| a[(p, i)] * (h[(r, i)] - hbar)).sum::<f64>() / (m - 1) as f64;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn moments_match_double_loop((x, a, h) in ensemble_case()) {
        let ens = Ensemble::new(x.clone(), a.clone()).unwrap();
        let mom = empirical_moments(&ens, &h).unwrap();
        prop_assert!((mom.p_xh - cross(&x, &h)).amax() < 1e-12);
        prop_assert!((mom.p_hh - cross(&h, &h)).amax() < 1e-12);
        if a.nrows() > 0 {
            prop_assert!((mom.p_ah - cross(&a, &h)).amax() < 1e-12);
        }
    }

    #[test]
    fn moments_ignore_a_common_shift((x, a, h) in ensemble_case(), shift in -100.0..100.0f64) {
        let ens = Ensemble::new(x.clone(), a.clone()).unwrap();
        let base = empirical_moments(&ens, &h).unwrap();
        let moved = empirical_moments(&ens, &h.add_scalar(shift)).unwrap();
        prop_assert!((base.p_hh - moved.p_hh).amax() < 1e-10);
        prop_assert!((base.p_xh - moved.p_xh).amax() < 1e-10);
    }

    #[test]
    fn cross_covariances_are_symmetric((x, a, h) in ensemble_case()) {
        let ens = Ensemble::new(x, a).unwrap();
        let p = empirical_moments(&ens, &h).unwrap().p_hh;
        prop_assert!((&p - p.transpose()).amax() < 1e-12);
    }

    #[test]
    fn subsampled_increments_sum_to_fine_ones(
        incs in prop::collection::vec(-1.0..1.0f64, 60),
        factor in prop::sample::select(vec![1usize, 2, 3, 4, 5, 6, 10, 12, 15, 20, 30, 60]),
    ) {
        let mut states = vec![0.0];
        for d in &incs {
            states.push(states.last().unwrap() + d);
        }
        let fine = SimulatedPath::new(0.01, 1, 1, states, incs.clone()).unwrap();
        let coarse = subsample(&fine, factor).unwrap();
        prop_assert_eq!(coarse.n_increments(), 60 / factor);
        prop_assert!((coarse.dt() - 0.01 * factor as f64).abs() < 1e-15);
        let total: f64 = coarse.increments_flat().iter().sum();
        let fine_total: f64 = incs.iter().sum();
        prop_assert!((total - fine_total).abs() < 1e-12);
        for m in 0..coarse.n_increments() {
            let span: f64 = incs[m * factor..(m + 1) * factor].iter().sum();
            prop_assert!((coarse.increment(m)[0] - span).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_increments_telescope(states in prop::collection::vec(-3.0..3.0f64, 2..50)) {
        let noise = NoiseGeometry::scalar(1.0, 0.0).unwrap();
        let mut s = RngStream::new(0, 0);
        let incs = synthesize_increments(&states, &noise, 0.1, &mut s).unwrap();
        let total: f64 = incs.iter().sum();
        prop_assert!((total - (states[states.len() - 1] - states[0])).abs() < 1e-12);
    }

    #[test]
    fn heat_drift_conserves_mass(
        q in prop::collection::vec(-1.0..1.0f64, 4..120),
        theta in 0.1..2.0f64,
    ) {
        let model = HeatFvModel::new(q.len(), 1.0, 0.0).unwrap();
        let f = model.drift(None).drift_vec(&q, &[theta]);
        // face fluxes telescope; what remains is rounding of O(N ε θ max|q| / Δx²)
        let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs())) * theta / (model.dx() * model.dx());
        prop_assert!(f.sum().abs() <= 8.0 * q.len() as f64 * f64::EPSILON * scale);
    }

    #[test]
    fn hat_field_is_periodic_and_interpolates(
        values in prop::collection::vec(-2.0..2.0f64, 2..40),
        x in -20.0..20.0f64,
        k in -3i32..=3,
    ) {
        let field = PeriodicDriftField::new(values.clone()).unwrap();
        let shifted = field.eval(x + 2.0 * PI * k as f64);
        prop_assert!((field.eval(x) - shifted).abs() < 1e-9);
        for (i, v) in values.iter().enumerate() {
            prop_assert_eq!(field.eval(field.node(i)), *v);
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((lo - 1e-12..=hi + 1e-12).contains(&field.eval(x)));
    }

    #[test]
    fn hat_field_is_continuous(values in prop::collection::vec(-2.0..2.0f64, 2..40), x in 0.0..(2.0 * PI)) {
        let field = PeriodicDriftField::new(values.clone()).unwrap();
        let h = 1e-9;
        let slope = values.iter().map(|v| v.abs()).sum::<f64>() * values.len() as f64 / PI;
        prop_assert!((field.eval(x + h) - field.eval(x - h)).abs() <= 2.0 * h * slope + 1e-12);
    }

    #[test]
    fn wrapped_angles_land_in_one_period(x in -1e4..1e4f64) {
        let w = wrap_angle(x);
        prop_assert!((0.0..2.0 * PI).contains(&w));
        let turns = (x - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn collapsed_state_filter_reproduces_the_signal(
        coef in prop::collection::vec(-1.0..1.0f64, 3),
        q in 0.01..2.0f64,
        dt in 1e-4..0.1f64,
        y0 in -2.0..2.0f64,
        m in 2usize..12,
        incs in prop::collection::vec(-0.5..0.5f64, 1..80),
        seed in any::<u64>(),
    ) {
        let model = FnDrift::new(1, 0, move |x: &[f64], _a: &[f64], out: &mut [f64]| {
            out[0] = coef[0] + coef[1] * x[0] + coef[2] * x[0].cos();
        });
        let noise = NoiseGeometry::scalar(q, 0.0).unwrap();
        let mut y = vec![y0];
        for d in &incs {
            y.push(y.last().unwrap() + d);
        }
        let run = FilterRun {
            model: &model,
            noise: &noise,
            scheme: FilterScheme::Joint,
            dt,
            increments: &incs,
            y0: &[y0],
            stride: 1,
        };
        let ens = Ensemble::with_known_state(&[y0], DMatrix::zeros(0, m)).unwrap();
        let mut worst = 0.0f64;
        run.run_with(ens, &mut particle_streams(seed, m), |n, e| {
            for i in 0..e.size() {
                worst = worst.max((e.state(i)[0] - y[n]).abs());
            }
        })
        .unwrap();
        prop_assert_eq!(worst, 0.0);
    }

    #[test]
    fn riccati_step_keeps_covariance_symmetric_psd(
        n in 1usize..=3,
        seed in any::<u64>(),
        dt in 1e-5..1e-3f64,
    ) {
        // explicit Euler stays positive while dt·‖P‖·‖C⁻¹‖ is small
        let mut s = RngStream::new(seed, 0);
        let f = DMatrix::from_fn(n, n, |_, _| s.standard_normal());
        let b = DMatrix::from_fn(n, n, |_, _| 0.5 * s.standard_normal());
        let g = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.3 * s.standard_normal() });
        let noise = NoiseGeometry::new(g, DMatrix::identity(n, n), DMatrix::identity(n, n) * 0.05).unwrap();
        let lin = LinearModel::new(f, noise).unwrap();
        let mut belief = GaussianBelief::new(DVector::zeros(n), &b * b.transpose()).unwrap();
        let dy = vec![0.0; n];
        for _ in 0..50 {
            belief = kb_mean_cov_step(&lin, &belief, &dy, dt).unwrap();
            prop_assert_eq!(&belief.cov, &belief.cov.transpose());
            prop_assert!(belief.cov.clone().symmetric_eigenvalues().min() > -1e-12);
        }
    }

    #[test]
    fn argmax_survives_affine_rescaling(
        curve in prop::collection::vec(-1e3..1e3f64, 2..30),
        scale in 1e-3..1e3f64,
        offset in -1e5..1e5f64,
    ) {
        let argmax = |v: &[f64]| {
            v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
        };
        let moved: Vec<f64> = curve.iter().map(|v| scale * v + offset).collect();
        let (i, j) = (argmax(&curve), argmax(&moved));
        prop_assert!(i == j || (curve[i] - curve[j]).abs() <= 1e-9 * curve[i].abs().max(1.0));
    }
}

#[test]
fn canonical_configs_round_trip() {
    for (name, text) in canonical::CONFIGS {
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let once = cfg.to_toml().unwrap();
        let twice = ExperimentConfig::from_toml(&once).unwrap().to_toml().unwrap();
        assert_eq!(once, twice, "{name}");
    }
}

proptest! {
    #[test]
    fn ou_config_round_trips(
        seed in any::<u64>(),
        a in -2.0..0.0f64,
        q in 0.01..1.0f64,
        r in prop::sample::select(vec![0.0, 1e-4, 0.01]),
        m in 2usize..2000,
        stride in 1usize..100,
    ) {
        let text = format!(
            "seed = {seed}\n[experiment]\nkind = \"ou\"\na = {a:?}\nx0 = 0.5\n[time]\ndt = 0.01\nt_end = 1.0\n\
             [noise]\nq = {q:?}\nr = {r:?}\n[filter]\nensemble_size = {m}\n\
             [filter.prior]\nkind = \"gaussian\"\nmean = 0.0\nvariance = 1.0\n[output]\nstride = {stride}\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let out = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&out).unwrap();
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.noise.q, q);
        prop_assert_eq!(back.noise.r, r);
        prop_assert_eq!(out, back.to_toml().unwrap());
    }
}
