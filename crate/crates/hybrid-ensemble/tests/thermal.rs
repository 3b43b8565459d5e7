use hybrid_ensemble::dynamics::{EnsembleHamiltonian, Potential};
use hybrid_ensemble::ensemble::{gaussian_packet, gaussian_packet_q};
use hybrid_ensemble::observables::{PhaseFunction, QuantumOperator};
use hybrid_ensemble::thermal::*;
use hybrid_ensemble::{HybridEnsemble, HybridError, HybridGrid};
use ndarray::Array2;
use num_complex::Complex64;

fn ho() -> PhaseSpaceHamiltonian {
    PhaseSpaceHamiltonian::harmonic(1.0, 1.0)
}

fn window() -> f64 {
    50.0 * 2.0 * std::f64::consts::PI
}

#[test]
fn harmonic_time_averages() {
    let te = TrajectoryEnsemble::new(&ho(), 2.0, 0.0);
    let fs = [PhaseFunction::x(), PhaseFunction::kinetic(1.0), ho().function().clone()];
    let a = time_averages(&fs, &te, window()).unwrap();
    assert!(a.values[0].abs() < 1e-6);
    // virial theorem: <k^2/2> = E/2
    assert!((a.values[1] - 1.0).abs() < 1e-6, "{}", a.values[1]);
    assert!((a.values[2] - 2.0).abs() < 2.0 * a.energy_drift + 1e-12);
    assert!(a.energy_drift < ENERGY_DRIFT_TOLERANCE);
    assert!(a.periods >= MIN_PERIODS);
    assert!(a.convergence < 1e-6);
}

#[test]
fn time_average_does_not_depend_on_the_start_along_the_shell() {
    let f = [PhaseFunction::x2(), PhaseFunction::xk()];
    let r = 2.0f64;
    let starts = [(r, 0.0), (0.0, r), (r / 2f64.sqrt(), -r / 2f64.sqrt()), (-r * 0.6, r * 0.8)];
    let base = time_averages(&f, &TrajectoryEnsemble::new(&ho(), starts[0].0, starts[0].1), window()).unwrap();
    for &(x, k) in &starts[1..] {
        let a = time_averages(&f, &TrajectoryEnsemble::new(&ho(), x, k), window()).unwrap();
        for j in 0..2 {
            assert!((a.values[j] - base.values[j]).abs() < 1e-6, "{:?} vs {:?}", a.values, base.values);
        }
    }
}

#[test]
fn drift_refinement_keeps_quartic_energy() {
    let h = PhaseSpaceHamiltonian::quartic(1.0, 1.0);
    let te = TrajectoryEnsemble::with_settings(&h, 2.5, 0.0, TrajectorySettings { dt: 0.05, ..Default::default() });
    let a = time_averages(&[PhaseFunction::x4_quarter()], &te, 50.0).unwrap();
    assert!(a.energy_drift < ENERGY_DRIFT_TOLERANCE);
    assert!(a.dt < 0.05);
}

#[test]
fn samples_are_reproducible_and_thread_independent() {
    let a = sample_thermal(&ho(), 1.0, 500, Sampler::ImportanceGaussian, 11).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| sample_thermal(&ho(), 1.0, 500, Sampler::ImportanceGaussian, 11).unwrap());
    assert_eq!(a.samples, b.samples);
    let c = sample_thermal(&ho(), 1.0, 500, Sampler::ImportanceGaussian, 12).unwrap();
    assert_ne!(a.samples, c.samples);
    let q = PhaseSpaceHamiltonian::quartic(1.0, 1.0);
    let m1 = sample_thermal(&q, 1.0, 500, Sampler::MetropolisRW, 3).unwrap();
    let m2 = pool.install(|| sample_thermal(&q, 1.0, 500, Sampler::MetropolisRW, 3).unwrap());
    assert_eq!(m1.samples, m2.samples);
    let wsum: f64 = a.samples.iter().map(|s| s.weight).sum();
    assert!((wsum - 1.0).abs() < 1e-12);
}

#[test]
fn cold_samples_concentrate_at_the_minimum() {
    let spread = |beta: f64| {
        let m = sample_thermal(&ho(), beta, 2000, Sampler::ImportanceGaussian, 5).unwrap();
        m.samples.iter().map(|s| s.weight * (s.x0 * s.x0 + s.k0 * s.k0)).sum::<f64>()
    };
    let (a, b, c) = (spread(1.0), spread(10.0), spread(1000.0));
    assert!(a > b && b > c);
    assert!(c < 1e-2);
}

#[test]
fn equipartition_sample_means() {
    // weights come straight from exp(-beta H): <H> = 1/beta and <x^2> = 1/(beta m Omega^2)
    for (beta, seed) in [(1.0, 21u64), (2.0, 22)] {
        let m = sample_thermal(&ho(), beta, 10_000, Sampler::ImportanceGaussian, seed).unwrap();
        let hv: Vec<f64> = m.samples.iter().map(|s| ho().eval(s.x0, s.k0)).collect();
        let x2: Vec<f64> = m.samples.iter().map(|s| s.x0 * s.x0).collect();
        let (hm, hs) = m.mean_and_stderr(&hv).unwrap();
        let (xm, xs) = m.mean_and_stderr(&x2).unwrap();
        assert!((hm - 1.0 / beta).abs() < 3.0 * hs, "{hm} {hs}");
        assert!((xm - 1.0 / beta).abs() < 3.0 * xs, "{xm} {xs}");
    }
}

#[test]
fn quartic_needs_the_metropolis_sampler() {
    let q = PhaseSpaceHamiltonian::quartic(1.0, 1.0);
    assert!(matches!(sample_thermal(&q, 1.0, 100, Sampler::ImportanceGaussian, 1), Err(HybridError::NonIntegrableWeight(_))));
}

#[test]
fn flat_minimum_has_no_small_oscillation_period() {
    assert!((ho().characteristic_period().unwrap() - 2.0 * std::f64::consts::PI).abs() < 1e-9);
    assert_eq!(PhaseSpaceHamiltonian::quartic(1.0, 1.0).characteristic_period(), None);
}

#[test]
fn canonical_average_of_one_is_one() {
    let r = canonical_average(&PhaseFunction::one(), &ho(), 1.0, 200, window(), 9, Sampler::ImportanceGaussian).unwrap();
    assert!((r.mixture_value - 1.0).abs() < 1e-12);
    assert!((r.quadrature_reference - 1.0).abs() < 1e-12);
}

#[test]
fn shifted_quadratic_matches_the_gaussian_result() {
    // H = k^2/2 + (x - 1)^2 ; <x> = 1, <x^2> = 1 + 1/(2 beta)
    let f = PhaseFunction::new("shifted", |x, k| 0.5 * k * k + (x - 1.0).powi(2), |x, _| 2.0 * (x - 1.0), |_, k| k);
    let h = PhaseSpaceHamiltonian::new(f).unwrap();
    let beta = 1.5;
    let r = canonical_averages(
        &[PhaseFunction::x(), PhaseFunction::x2()],
        &h,
        beta,
        2000,
        50.0 * h.characteristic_period().unwrap(),
        4,
        Sampler::ImportanceGaussian,
        TrajectorySettings::default(),
    )
    .unwrap();
    let exact = [1.0, 1.0 + 1.0 / (2.0 * beta)];
    for (a, e) in r.averages.iter().zip(exact) {
        assert!((a.quadrature_reference - e).abs() < 1e-10);
        assert!((a.mixture_value - e).abs() < 3.0 * a.stderr, "{a:?}");
    }
}

#[test]
fn quartic_canonical_average_matches_quadrature() {
    let q = PhaseSpaceHamiltonian::quartic(1.0, 1.0);
    let r = canonical_averages(
        &[PhaseFunction::x4_quarter(), PhaseFunction::kinetic(1.0)],
        &q,
        1.0,
        2000,
        50.0,
        17,
        Sampler::MetropolisRW,
        TrajectorySettings { dt: 0.02, ..Default::default() },
    )
    .unwrap();
    for a in &r.averages {
        assert!(a.z_score.abs() < 3.0, "{a:?}");
    }
    assert!(r.max_energy_drift < ENERGY_DRIFT_TOLERANCE);
}

#[test]
fn noninteracting_systems_factorize() {
    let h1 = ho();
    let h2 = PhaseSpaceHamiltonian::harmonic(1.0, 1.3);
    let beta = 1.0;
    let t = window();
    let r = factorization_check(&h1, &h2, &PhaseFunction::x(), &PhaseFunction::x(), beta, 2000, t, 31, Sampler::ImportanceGaussian).unwrap();
    assert!(r.weight_residual < 1e-12);
    assert!(r.product_reference.abs() < 1e-12);
    assert!(r.z_score.abs() < 3.0, "{r:?}");
    let r = factorization_check(&h1, &h2, &PhaseFunction::x2(), &PhaseFunction::k2(), beta, 2000, t, 32, Sampler::ImportanceGaussian).unwrap();
    // product of the one-dimensional oracles 1/beta and 1/beta
    assert!((r.product_reference - 1.0).abs() < 1e-10);
    assert!(r.z_score.abs() < 3.0, "{r:?}");
    // <H1 + H2> = 2/beta by linearity
    let a = canonical_average(h1.function(), &h1, beta, 2000, t, 33, Sampler::ImportanceGaussian).unwrap();
    let b = canonical_average(h2.function(), &h2, beta, 2000, t, 34, Sampler::ImportanceGaussian).unwrap();
    let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.mixture_value + b.mixture_value - 2.0 / beta).abs() < 3.0 * se);
}

fn oscillator_grid() -> HybridGrid {
    HybridGrid::continuous((-10.0, 10.0, 128), (-5.0, 5.0, 8)).unwrap()
}

fn eigen_ensemble(n: usize) -> (f64, HybridEnsemble) {
    let g = oscillator_grid();
    let states = quantum_eigenstates(&g, 1.0, |q| 0.5 * q * q, 1.0, n + 1).unwrap();
    let (e, v) = states[n].clone();
    (e, HybridEnsemble::product(&g, &v, &gaussian_packet(&g, 0.0, 1.0, 0.0, 1.0), 1.0).unwrap())
}

fn quantum_ho() -> EnsembleHamiltonian {
    EnsembleHamiltonian::Quantum { m_q: 1.0, potential: Potential::harmonic_q(1.0, 1.0) }
}

#[test]
fn oscillator_eigenstates_are_stationary() {
    for n in 0..3 {
        let (e, ens) = eigen_ensemble(n);
        assert!((e - (n as f64 + 0.5)).abs() < 1e-9, "{e}");
        let r = stationarity_check(&quantum_ho(), &ens, 0.5, 0.004).unwrap();
        assert!(r.dp_norm < 1e-9, "{r:?}");
        assert!((r.energy_estimate - (n as f64 + 0.5)).abs() < 1e-6, "{r:?}");
    }
}

#[test]
fn coherent_state_is_not_stationary() {
    let g = oscillator_grid();
    let psi_q = gaussian_packet_q(&g, 2.0, 1.0 / 2f64.sqrt(), 0.0, 1.0).unwrap();
    let ens = HybridEnsemble::product(&g, &psi_q, &gaussian_packet(&g, 0.0, 1.0, 0.0, 1.0), 1.0).unwrap();
    let r = stationarity_check(&quantum_ho(), &ens, 0.5, 0.004).unwrap();
    assert!(r.dp_norm > 1e-2, "{r:?}");
}

#[test]
fn rotor_shell_ensemble_is_stationary() {
    // roundoff at the highest wavenumbers grows quickly in the classical psi
    // equation, so the shell is resolved on a coarse grid over a short window
    let g = HybridGrid::classical(0.0, 2.0 * std::f64::consts::PI, 32).unwrap();
    let (ens, h) = rotor_stationary_ensemble(&g, 1.0, 0.5, 2.0).unwrap();
    let r = stationarity_check(&h, &ens, 0.1, 0.004).unwrap();
    assert!(r.dp_norm < 1e-9, "{r:?}");
    assert!((r.energy_estimate - 2.0).abs() < 1e-6, "{r:?}");
    assert!(rotor_stationary_ensemble(&g, 1.0, 0.5, 0.9).is_err());
}

fn matmul(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    a.dot(b)
}

// exp(-beta H) by scaling and squaring of a Taylor series
fn boltzmann_matrix(h: &Array2<Complex64>, beta: f64) -> Array2<Complex64> {
    let d = h.nrows();
    let s = 10;
    let a = h.mapv(|z| z * (-beta / 2f64.powi(s)));
    let mut term = Array2::<Complex64>::eye(d);
    let mut sum = term.clone();
    for n in 1..30 {
        term = matmul(&term, &a).mapv(|z| z / n as f64);
        sum = sum + &term;
    }
    for _ in 0..s {
        sum = matmul(&sum, &sum);
    }
    sum
}

#[test]
fn quantum_gibbs_mixture_matches_the_trace_formula() {
    let g = HybridGrid::discrete(4, -5.0, 5.0, 16).unwrap();
    let c = |re: f64, im: f64| Complex64::new(re, im);
    let hm = Array2::from_shape_vec(
        (4, 4),
        vec![
            c(1.0, 0.0), c(0.3, 0.1), c(0.0, 0.0), c(-0.2, 0.0),
            c(0.3, -0.1), c(0.5, 0.0), c(0.4, 0.2), c(0.0, 0.0),
            c(0.0, 0.0), c(0.4, -0.2), c(-0.7, 0.0), c(0.1, -0.3),
            c(-0.2, 0.0), c(0.0, 0.0), c(0.1, 0.3), c(0.2, 0.0),
        ],
    )
    .unwrap();
    let h = QuantumOperator::new("H", hm.clone()).unwrap();
    let m = QuantumOperator::diagonal("M", &[1.0, -1.0, 2.0, 0.5]);
    let psi_c = gaussian_packet(&g, 0.0, 1.0, 0.0, 1.0);
    for beta in [0.3, 1.0, 2.5] {
        let rho = boltzmann_matrix(&hm, beta);
        let z: Complex64 = rho.diag().sum();
        let exact = (matmul(m.matrix(), &rho).diag().sum() / z).re;
        let mix = quantum_thermal_average(&g, &h, &m, beta, &psi_c, 1.0).unwrap();
        assert!((mix - exact).abs() < 1e-12, "beta {beta}: {mix} vs {exact}");
        let e_mix = quantum_thermal_average(&g, &h, &h, beta, &psi_c, 1.0).unwrap();
        let e_exact = (matmul(&hm, &rho).diag().sum() / z).re;
        assert!((e_mix - e_exact).abs() < 1e-12);
    }
}
