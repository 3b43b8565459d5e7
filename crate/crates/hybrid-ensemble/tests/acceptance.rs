//! Acceptance suite: one PASS/FAIL line per criterion, tolerances fixed here.
//! Run a subset with `cargo test --test acceptance -- 3 7`.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use hybrid_ensemble::bracket::{
    jacobi_residual, poisson_bracket_ps, poisson_bracket_psi, strong_separability_probe, verify_cc_homomorphism,
    verify_configuration_separability, verify_qq_homomorphism,
};
use hybrid_ensemble::dynamics::{ehrenfest_experiment, EhrenfestBenchmark, EnsembleHamiltonian, Potential};
use hybrid_ensemble::ensemble::{gaussian_packet, gaussian_packet_q};
use hybrid_ensemble::measurement::{
    amplitudes, collapse, evolve_measurement, exact_post_measurement, l2_distance, pointer_distribution, MeasurementSetup,
};
use hybrid_ensemble::thermal::{
    canonical_averages, quantum_eigenstates, quantum_thermal_average, stationarity_check, PhaseSpaceHamiltonian, Sampler,
    TrajectorySettings,
};
use hybrid_ensemble::fixtures;
use hybrid_ensemble::observables::{
    homogeneity_check, ClassicalObservable, DensitySquared, Functional, LinearCombination, PhaseFunction,
    QuantumObservable, QuantumOperator,
};
use hybrid_ensemble::{HybridEnsemble, HybridGrid, Result};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    what: String,
    value: f64,
    tol: f64,
    /// true: pass when value < tol; false: pass when value > tol
    below: bool,
}

impl Check {
    fn below(what: impl Into<String>, value: f64, tol: f64) -> Self {
        Check { what: what.into(), value, tol, below: true }
    }

    fn above(what: impl Into<String>, value: f64, tol: f64) -> Self {
        Check { what: what.into(), value, tol, below: false }
    }

    fn passed(&self) -> bool {
        if self.below {
            self.value < self.tol
        } else {
            self.value > self.tol
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Result<Vec<Check>>);

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<Criterion> = vec![
        (1, "Lie axioms", criterion_1),
        (2, "classical homomorphism", criterion_2),
        (3, "quantum homomorphism", criterion_3),
        (4, "configuration separability", criterion_4),
        (5, "strong-separability violation", criterion_5),
        (6, "generalized Ehrenfest", criterion_6),
        (7, "measurement protocol", criterion_7),
        (8, "thermal suite", criterion_8),
        (9, "homogeneity identities", criterion_9),
        (10, "stationarity", criterion_10),
    ];
    let mut all_ok = true;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let ok = match run() {
            Ok(checks) => {
                let mut ok = true;
                for c in &checks {
                    let rel = if c.below { "<" } else { ">" };
                    let tag = if c.passed() { "ok  " } else { "FAIL" };
                    println!("    [{tag}] {}: {:.3e} (need {rel} {:.0e})", c.what, c.value, c.tol);
                    ok &= c.passed();
                }
                ok
            }
            Err(err) => {
                println!("    error: {err}");
                false
            }
        };
        all_ok &= ok;
        println!("criterion {id:>2} {}: {name} ({:.1}s)", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn c(f: PhaseFunction) -> Arc<dyn Functional> {
    Arc::new(ClassicalObservable::new(f))
}

fn q(m: QuantumOperator) -> Arc<dyn Functional> {
    Arc::new(QuantumObservable::new(m))
}

fn criterion_1() -> Result<Vec<Check>> {
    let grid = HybridGrid::discrete(2, -8.0, 8.0, 64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pool: Vec<Arc<dyn Functional>> = vec![
        c(PhaseFunction::x()),
        c(PhaseFunction::k()),
        c(PhaseFunction::harmonic(1.0, 1.3)),
        c(PhaseFunction::xk()),
        q(QuantumOperator::pauli_x()),
        q(QuantumOperator::pauli_y()),
        q(QuantumOperator::pauli_z()),
    ];
    let (mut anti, mut bilin) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        let e = fixtures::smooth_random_localized(&grid, 1000 + seed, 1.2, 1.0)?;
        let i = rng.random_range(0..pool.len());
        let j = rng.random_range(0..pool.len());
        let k = rng.random_range(0..pool.len());
        let (a, b, cc) = (&pool[i], &pool[j], &pool[k]);
        let ab = poisson_bracket_ps(a.as_ref(), b.as_ref(), &e)?.value;
        let ba = poisson_bracket_ps(b.as_ref(), a.as_ref(), &e)?.value;
        anti = anti.max((ab + ba).abs());
        let ab_psi = poisson_bracket_psi(a.as_ref(), b.as_ref(), &e)?.value;
        let ba_psi = poisson_bracket_psi(b.as_ref(), a.as_ref(), &e)?.value;
        anti = anti.max((ab_psi + ba_psi).abs());
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = LinearCombination::new(vec![(alpha, a.clone()), (beta, b.clone())]);
        let lhs = poisson_bracket_ps(&combo, cc.as_ref(), &e)?.value;
        let rhs = alpha * poisson_bracket_ps(a.as_ref(), cc.as_ref(), &e)?.value
            + beta * poisson_bracket_ps(b.as_ref(), cc.as_ref(), &e)?.value;
        bilin = bilin.max((lhs - rhs).abs());
        let lhs = poisson_bracket_psi(&combo, cc.as_ref(), &e)?.value;
        let rhs = alpha * poisson_bracket_psi(a.as_ref(), cc.as_ref(), &e)?.value
            + beta * poisson_bracket_psi(b.as_ref(), cc.as_ref(), &e)?.value;
        bilin = bilin.max((lhs - rhs).abs());
    }
    let cgrid = HybridGrid::classical(-8.0, 8.0, 64)?;
    let ce = fixtures::smooth_random_localized(&cgrid, 77, 1.2, 1.0)?;
    let jac_c = jacobi_residual(c(PhaseFunction::x()), c(PhaseFunction::k()), c(PhaseFunction::x2()), &ce, 1e-5)?;
    let qgrid = HybridGrid::discrete(2, 0.0, 6.0, 32)?;
    let qe = fixtures::smooth_random(&qgrid, 78, 1.0)?;
    let jac_q = jacobi_residual(
        q(QuantumOperator::pauli_x()),
        q(QuantumOperator::pauli_y()),
        q(QuantumOperator::pauli_z()),
        &qe,
        1e-5,
    )?;
    Ok(vec![
        Check::below("antisymmetry, 50 random ensembles", anti, 1e-12),
        Check::below("bilinearity, 50 random ensembles", bilin, 1e-12),
        Check::below("Jacobi C_x, C_k, C_x2 (eps 1e-5)", jac_c, 1e-4),
        Check::below("Jacobi Q_sx, Q_sy, Q_sz (eps 1e-5)", jac_q, 1e-4),
    ])
}

fn criterion_2() -> Result<Vec<Check>> {
    let grid = HybridGrid::classical(-10.0, 10.0, 256)?;
    let psi = grid.complex_field(|_, x| Complex64::new(-(x - 0.3).powi(2) / 1.6, 0.7 * x - 0.15 * x * x).exp());
    let e = HybridEnsemble::from_psi(&grid, psi, 1.0)?;
    let fs = [
        PhaseFunction::x(),
        PhaseFunction::k(),
        PhaseFunction::x2(),
        PhaseFunction::k2(),
        PhaseFunction::xk(),
        PhaseFunction::harmonic(1.0, 1.0),
    ];
    let mut worst = 0.0f64;
    let mut worst_pair = String::new();
    for f in &fs {
        for g in &fs {
            let r = verify_cc_homomorphism(f, g, &e)?;
            if r.residual > worst {
                worst = r.residual;
                worst_pair = format!("({},{})", f.label(), g.label());
            }
        }
    }
    let xk = verify_cc_homomorphism(&PhaseFunction::x(), &PhaseFunction::k(), &e)?;
    Ok(vec![
        Check::below(format!("max |{{C_f,C_g}} - C_{{f,g}}| over 36 pairs, worst {worst_pair}"), worst, 1e-8),
        Check::below("|{C_x,C_k} - 1|", (xk.lhs - 1.0).abs(), 1e-12),
    ])
}

fn criterion_3() -> Result<Vec<Check>> {
    let dgrid = HybridGrid::discrete(2, 0.0, 6.0, 32)?;
    let paulis = [QuantumOperator::pauli_x(), QuantumOperator::pauli_y(), QuantumOperator::pauli_z()];
    let mut pauli_worst = 0.0f64;
    for seed in 0..5 {
        let e = fixtures::smooth_random(&dgrid, 300 + seed, 1.0)?;
        for m in &paulis {
            for n in &paulis {
                pauli_worst = pauli_worst.max(verify_qq_homomorphism(m, n, &e)?.residual);
            }
        }
    }
    let cgrid = HybridGrid::continuous((-8.0, 8.0, 64), (-8.0, 8.0, 32))?;
    let ops = [
        QuantumOperator::position(&cgrid)?,
        QuantumOperator::momentum(&cgrid, 1.0)?,
        QuantumOperator::kinetic(&cgrid, 1.0, 1.0)?,
        QuantumOperator::potential(&cgrid, "V", |q| 0.5 * q * q + 0.1 * q.powi(4))?,
    ];
    let mut grid_worst = 0.0f64;
    for seed in 0..3 {
        let e = fixtures::smooth_random_localized(&cgrid, 400 + seed, 1.3, 1.0)?;
        for m in &ops {
            for n in &ops {
                grid_worst = grid_worst.max(verify_qq_homomorphism(m, n, &e)?.residual);
            }
        }
    }
    Ok(vec![
        Check::below("Pauli pairs, d=2", pauli_worst, 1e-10),
        Check::below("grid-basis pairs (q, p, kinetic, V)", grid_worst, 1e-10),
    ])
}

fn criterion_4() -> Result<Vec<Check>> {
    let grid = HybridGrid::continuous((-6.0, 6.0, 32), (-6.0, 6.0, 64))?;
    let e = fixtures::smooth_random(&grid, 21, 1.0)?;
    let m = QuantumOperator::kinetic(&grid, 1.0, 1.0)?.sum(&QuantumOperator::momentum(&grid, 1.0)?)?;
    let big_g = QuantumOperator::potential(&grid, "G", |q| q.sin() + 0.1 * q * q)?;
    let f = PhaseFunction::harmonic(1.0, 0.8).product(&PhaseFunction::quadratic(0.1, 0.2, 0.3, 0.0, 0.5, 1.0));
    let r = verify_configuration_separability(&e, &PhaseFunction::x2(), &m, &big_g, &f)?;
    let dgrid = HybridGrid::discrete(2, -10.0, 10.0, 128)?;
    let two = fixtures::two_branch(&dgrid, -2.0, 2.5, 0.9, 1.0)?;
    let rd = verify_configuration_separability(&two, &PhaseFunction::x(), &QuantumOperator::pauli_x(), &QuantumOperator::pauli_z(), &PhaseFunction::kinetic(1.0))?;
    Ok(vec![
        Check::below("|{C_g(x), Q_M}|", r.cg_qm.abs(), 1e-9),
        Check::below("|{Q_G(q), C_f}|", r.qg_cf.abs(), 1e-9),
        Check::below("|{C_k, Q_p}|", r.ck_qp.unwrap_or(f64::NAN).abs(), 1e-9),
        Check::below("|{C_x, Q_q}|", r.cx_qq.unwrap_or(f64::NAN).abs(), 1e-9),
        Check::below("|{C_x, Q_p}|", r.cx_qp.unwrap_or(f64::NAN).abs(), 1e-9),
        Check::below("|{C_k, Q_q}|", r.ck_qq.unwrap_or(f64::NAN).abs(), 1e-9),
        Check::below("two-branch |{C_x, Q_sx}|", rd.cg_qm.abs(), 1e-9),
        Check::below("two-branch |{Q_sz, C_kinetic}|", rd.qg_cf.abs(), 1e-9),
    ])
}

fn criterion_5() -> Result<Vec<Check>> {
    let grid = HybridGrid::continuous((-8.0, 8.0, 128), (-8.0, 8.0, 128))?;
    let e = fixtures::correlated_gaussian(&grid, 0.3, 1.0)?;
    let s = strong_separability_probe(&e, 1.0, 1.0)?;
    let prod = fixtures::product_gaussian(&grid, 0.4, -0.6, 0.2, 0.9, 1.0)?;
    let sp = strong_separability_probe(&prod, 1.0, 1.0)?;
    Ok(vec![
        Check::above("|kinetic-kinetic bracket| on correlated fixture", s.bracket.abs(), 1e-3),
        Check::below("relative deviation from the integral expression", (s.bracket - s.integral).abs() / s.integral.abs(), 1e-6),
        Check::below("|bracket| on product state", sp.bracket.abs(), 1e-9),
    ])
}

/// Coupled oscillators, two periods of the slow normal mode, log-polar scheme
/// on the default 128 x 256 grid.
fn criterion_6() -> Result<Vec<Check>> {
    let b = EhrenfestBenchmark::default();
    let t_final = 2.0 * b.slow_period();
    let run = ehrenfest_experiment(&b, t_final, 0.0025)?;
    let mut out = Vec::new();
    for (name, d) in ["<x>", "<k>", "<q>", "<p>"].iter().zip(run.deviations) {
        out.push(Check::below(format!("{name} vs ODE oracle (relative, T = {t_final:.3})"), d, 1e-4));
    }
    let rel = ["d<x>/dt = <k>/m_c", "d<k>/dt = -<dV/dx>", "d<q>/dt = <p>/m_q", "d<p>/dt = -<dV/dq>"];
    for (name, r) in rel.iter().zip(run.relation_residuals) {
        out.push(Check::below(format!("relation {name}"), r, 1e-4));
    }
    out.push(Check::below("relative energy drift", run.energy_drift, 1e-7));
    out.push(Check::below("norm drift per step", run.record.max_norm_drift, 1e-10));
    Ok(out)
}

fn criterion_9() -> Result<Vec<Check>> {
    let grid = HybridGrid::continuous((-8.0, 8.0, 32), (-8.0, 8.0, 64))?;
    let e = fixtures::smooth_random_localized(&grid, 91, 1.3, 1.0)?;
    let mut observables: Vec<Arc<dyn Functional>> = Vec::new();
    for label in ["1", "x", "k", "x2", "k2", "xk", "x4/4", "kinetic(m=2)", "ho(m=1,omega=1)", "quartic(m=1,g=1)"] {
        observables.push(c(PhaseFunction::from_label(label)?));
    }
    for label in ["identity", "q", "p", "kinetic(m=1)"] {
        observables.push(q(QuantumOperator::from_label(label, &grid, 1.0)?));
    }
    let dgrid = HybridGrid::discrete(2, -8.0, 8.0, 64)?;
    let de = fixtures::smooth_random_localized(&dgrid, 92, 1.3, 1.0)?;
    let mut scale = 0.0f64;
    let mut local = 0.0f64;
    for a in &observables {
        for lambda in [0.5, 2.0, 3.7] {
            let r = homogeneity_check(a.as_ref(), &e, lambda)?;
            scale = scale.max(r.residual_scale);
            local = local.max(r.residual_local);
        }
    }
    for label in ["sigma_x", "sigma_y", "sigma_z", "identity"] {
        let a = q(QuantumOperator::from_label(label, &dgrid, 1.0)?);
        let r = homogeneity_check(a.as_ref(), &de, 2.0)?;
        scale = scale.max(r.residual_scale);
        local = local.max(r.residual_local);
    }
    let lambda = 2.0;
    let r2 = homogeneity_check(&DensitySquared, &e, lambda)?;
    let p2 = DensitySquared.value(&e)?;
    let predicted = lambda * (lambda - 1.0) * p2;
    Ok(vec![
        Check::below("max |A[lP,S] - l A[P,S]| over registered C_f, Q_M", scale, 1e-9),
        Check::below("max |A - int P dA/dP| over registered C_f, Q_M", local, 1e-9),
        Check::above("int P^2 scale residual (counterexample)", r2.residual_scale, 1e-3),
        Check::below("int P^2 residual vs l(l-1) int P^2, relative", (r2.residual_scale - predicted).abs() / predicted, 1e-12),
    ])
}

fn cx(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Pointer box [-12, 12) with 256 cells, K = 4, Gaussian pointer sigma = 0.5.
fn criterion_7() -> Result<Vec<Check>> {
    let hbar = 1.0;
    let dt = 0.0005;
    let g2 = HybridGrid::discrete(2, -12.0, 12.0, 256)?;
    let sz = MeasurementSetup::gaussian(&g2, QuantumOperator::pauli_z(), 4.0, 1.0, 0.5)?;
    let psi = amplitudes(&[cx(0.6, 0.0), cx(0.0, 0.8)]);
    let num = evolve_measurement(&g2, &psi, &sz, dt, hbar)?;
    let exact = exact_post_measurement(&g2, &psi, &sz, hbar)?;
    let l2 = l2_distance(&num, &exact)?;

    // Born weights read off the pointer: qubit and a degenerate 3-level operator
    let mut weight_err = 0.0f64;
    let r = pointer_distribution(&num, &sz)?;
    for ((_, w), want) in r.branch_weights.iter().zip([0.64, 0.36]) {
        weight_err = weight_err.max((w - want).abs());
    }
    let g3 = HybridGrid::discrete(3, -12.0, 12.0, 256)?;
    let deg = MeasurementSetup::gaussian(&g3, QuantumOperator::diagonal("M", &[1.0, 1.0, -1.0]), 4.0, 1.0, 0.5)?;
    let psi3 = amplitudes(&[cx(0.6, 0.0), cx(0.0, 0.48), cx(0.64, 0.0)]);
    let num3 = evolve_measurement(&g3, &psi3, &deg, dt, hbar)?;
    let r3 = pointer_distribution(&num3, &deg)?;
    for ((_, w), want) in r3.branch_weights.iter().zip([0.4096, 0.5904]) {
        weight_err = weight_err.max((w - want).abs());
    }

    // collapsed quantum marginals against |<q|n>|^2 (projected and renormalized)
    let mut collapse_err = 0.0f64;
    let mut post = Vec::new();
    for (a, want) in [(4.0, [1.0, 0.0]), (-4.0, [0.0, 1.0])] {
        let col = collapse(&num, &sz, a)?;
        for (z, w) in col.psi_a.iter().zip(want) {
            collapse_err = collapse_err.max((z.norm_sqr() - w).abs());
        }
        post.push(col.ensemble);
    }
    let col = collapse(&num3, &deg, 4.0)?;
    for (z, w) in col.psi_a.iter().zip([0.36 / 0.5904, 0.2304 / 0.5904, 0.0]) {
        collapse_err = collapse_err.max((z.norm_sqr() - w).abs());
    }
    let sx = MeasurementSetup::gaussian(&g2, QuantumOperator::pauli_x(), 4.0, 1.0, 0.5)?;
    let psix = amplitudes(&[cx(0.4f64.cos(), 0.0), Complex64::from_polar(0.4f64.sin(), 1.1)]);
    let numx = evolve_measurement(&g2, &psix, &sx, dt, hbar)?;
    for a in [4.0, -4.0] {
        let col = collapse(&numx, &sx, a)?;
        for z in col.psi_a.iter() {
            collapse_err = collapse_err.max((z.norm_sqr() - 0.5).abs());
        }
        post.push(col.ensemble);
    }

    // strong separability on the collapsed product states
    let mut bracket = 0.0f64;
    let fs = ["x", "k", "x2", "k2", "xk", "kinetic(m=1)"];
    for e in &post {
        for f in fs {
            for m in [QuantumOperator::pauli_x(), QuantumOperator::pauli_y(), QuantumOperator::pauli_z()] {
                let b = poisson_bracket_ps(c(PhaseFunction::from_label(f)?).as_ref(), q(m).as_ref(), e)?;
                bracket = bracket.max(b.value.abs());
            }
        }
    }
    Ok(vec![
        Check::below("L2 numeric vs exact shifted sum", l2, 1e-6),
        Check::below("branch weights vs |c_n|^2 and degenerate p_n", weight_err, 1e-9),
        Check::below("collapsed marginal vs |<q|n>|^2", collapse_err, 1e-8),
        Check::below("max |{C_f, Q_M}| after collapse", bracket, 1e-9),
    ])
}

fn matmul(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    a.dot(b)
}

// exp(-beta H) by Taylor series with scaling and squaring
fn boltzmann(h: &Array2<Complex64>, beta: f64) -> Array2<Complex64> {
    let s = 12;
    let a = h.mapv(|z| z * (-beta / 2f64.powi(s)));
    let mut term = Array2::<Complex64>::eye(h.nrows());
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

/// 10^4 samples per mixture, averaging windows of 50 periods.
fn criterion_8() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let ho = PhaseSpaceHamiltonian::harmonic(1.0, 1.0);
    let t_avg = 50.0 * ho.characteristic_period().expect("harmonic curvature");
    let fs = [ho.function().clone(), PhaseFunction::x2(), PhaseFunction::kinetic(1.0)];
    let settings = TrajectorySettings::default();
    for (beta, seed) in [(0.5, 801u64), (1.0, 802), (2.0, 803)] {
        let r = canonical_averages(&fs, &ho, beta, 10_000, t_avg, seed, Sampler::ImportanceGaussian, settings)?;
        let analytic = [1.0 / beta, 1.0 / beta, 1.0 / (2.0 * beta)];
        for (a, want) in r.averages.iter().zip(analytic) {
            out.push(Check::below(
                format!("HO beta={beta} {}: |mixture - analytic| / stderr ({:.5} vs {want})", a.observable, a.mixture_value),
                (a.mixture_value - want).abs() / a.stderr,
                3.0,
            ));
        }
        out.push(Check::below(format!("HO beta={beta} max relative energy drift"), r.max_energy_drift, 1e-8));
    }
    let quartic = PhaseSpaceHamiltonian::quartic(1.0, 1.0);
    let r = canonical_averages(
        &[PhaseFunction::x4_quarter(), PhaseFunction::kinetic(1.0)],
        &quartic,
        1.0,
        10_000,
        50.0,
        804,
        Sampler::MetropolisRW,
        // high-energy quartic orbits refine dt until the drift bound holds
        TrajectorySettings { dt: 0.02, ..settings },
    )?;
    for a in &r.averages {
        out.push(Check::below(
            format!("quartic beta=1 {}: |z| vs quadrature ({:.5} vs {:.5})", a.observable, a.mixture_value, a.quadrature_reference),
            a.z_score.abs(),
            3.0,
        ));
    }
    out.push(Check::below("quartic max relative energy drift", r.max_energy_drift, 1e-8));

    let g = HybridGrid::discrete(4, -5.0, 5.0, 16)?;
    let hm = Array2::from_shape_vec(
        (4, 4),
        vec![
            cx(1.0, 0.0), cx(0.3, 0.1), cx(0.0, 0.0), cx(-0.2, 0.0),
            cx(0.3, -0.1), cx(0.5, 0.0), cx(0.4, 0.2), cx(0.0, 0.0),
            cx(0.0, 0.0), cx(0.4, -0.2), cx(-0.7, 0.0), cx(0.1, -0.3),
            cx(-0.2, 0.0), cx(0.0, 0.0), cx(0.1, 0.3), cx(0.2, 0.0),
        ],
    )
    .expect("4x4");
    let h = QuantumOperator::new("H", hm.clone())?;
    let m = QuantumOperator::diagonal("M", &[1.0, -1.0, 2.0, 0.5]);
    let psi_c = gaussian_packet(&g, 0.0, 1.0, 0.0, 1.0);
    let mut gibbs = 0.0f64;
    for beta in [0.5, 1.0, 2.0] {
        let rho = boltzmann(&hm, beta);
        let z: Complex64 = rho.diag().sum();
        for op in [&m, &h] {
            let exact = (matmul(op.matrix(), &rho).diag().sum() / z).re;
            let mix = quantum_thermal_average(&g, &h, op, beta, &psi_c, 1.0)?;
            gibbs = gibbs.max((mix - exact).abs());
        }
    }
    out.push(Check::below("quantum d=4 mixture vs Tr(M e^-bH)/Z", gibbs, 1e-12));
    Ok(out)
}

/// Harmonic eigenstates n = 0..3 on q in [-10, 10) with 128 points, window 0.5.
fn criterion_10() -> Result<Vec<Check>> {
    let g = HybridGrid::continuous((-10.0, 10.0, 128), (-5.0, 5.0, 8))?;
    let h = EnsembleHamiltonian::Quantum { m_q: 1.0, potential: Potential::harmonic_q(1.0, 1.0) };
    let chi = gaussian_packet(&g, 0.0, 1.0, 0.0, 1.0);
    let states = quantum_eigenstates(&g, 1.0, |q| 0.5 * q * q, 1.0, 4)?;
    let mut out = Vec::new();
    for (n, (_, v)) in states.iter().enumerate() {
        let e = HybridEnsemble::product(&g, v, &chi, 1.0)?;
        let r = stationarity_check(&h, &e, 0.5, 0.004)?;
        let want = n as f64 + 0.5;
        out.push(Check::below(format!("n={n} dP_norm"), r.dp_norm, 1e-9));
        out.push(Check::below(format!("n={n} |E - (n+1/2) hbar omega| (E = {:.9})", r.energy_estimate), (r.energy_estimate - want).abs(), 1e-6));
    }
    let coherent = HybridEnsemble::product(&g, &gaussian_packet_q(&g, 2.0, 1.0 / 2f64.sqrt(), 0.0, 1.0)?, &chi, 1.0)?;
    let r = stationarity_check(&h, &coherent, 0.5, 0.004)?;
    out.push(Check::above("coherent state dP_norm (negative control)", r.dp_norm, 1e-2));
    Ok(out)
}
