//! The experiment suites behind each subcommand.

use std::f64::consts::PI;
use std::sync::Arc;

use hybrid_ensemble::bracket::{
    jacobi_residual, poisson_bracket_ps, poisson_bracket_psi, strong_separability_probe, verify_cc_homomorphism,
    verify_configuration_separability, verify_qq_homomorphism,
};
use hybrid_ensemble::dynamics::{ehrenfest_experiment_on, EhrenfestBenchmark, EnsembleHamiltonian, Potential, Scheme};
use hybrid_ensemble::ensemble::{gaussian_packet, gaussian_packet_q};
use hybrid_ensemble::fixtures;
use hybrid_ensemble::measurement::{
    collapse, evolve_measurement, exact_post_measurement, expected_conditional, l2_distance, pointer_distribution,
    MeasurementSetup,
};
use hybrid_ensemble::observables::{
    homogeneity_check, ClassicalObservable, Functional, LinearCombination, PhaseFunction, QuantumObservable, QuantumOperator,
};
use hybrid_ensemble::thermal::{
    canonical_averages, quantum_eigenstates, stationarity_check, PhaseSpaceHamiltonian, Sampler, TrajectorySettings,
    ENERGY_DRIFT_TOLERANCE,
};
use hybrid_ensemble::{HybridEnsemble, HybridError, HybridGrid};
use num_complex::Complex64;
use serde_json::json;

use crate::config::{parse_sampler_name, parse_scheme_name, pick, require, Axis, GridSection, RunConfig};
use crate::error::CliError;
use crate::report::{Cell, Fingerprint, Provenance, Table, VerificationReport};

/// Primary data plus sibling files, keyed by suffix (e.g. "branches.csv").
pub struct Outcome {
    pub report: VerificationReport,
    pub primary: Option<String>,
    pub extras: Vec<(String, String)>,
}

impl Outcome {
    fn report_only(report: VerificationReport) -> Self {
        Outcome { report, primary: None, extras: Vec::new() }
    }
}

fn c(f: PhaseFunction) -> Arc<dyn Functional> {
    Arc::new(ClassicalObservable::new(f))
}

fn q(m: QuantumOperator) -> Arc<dyn Functional> {
    Arc::new(QuantumObservable::new(m))
}

fn describe(g: &HybridGrid) -> String {
    let x = g.x_coords();
    let xs = format!("x [{}, {}) n={}", x[0], x[0] + g.x_length(), g.n_x());
    match g.q_coords() {
        Ok(qc) => format!("q [{}, {}) n={}; {xs}", qc[0], qc[0] + g.dq().unwrap_or(0.0) * qc.len() as f64, qc.len()),
        Err(_) => format!("levels {}; {xs}", g.n_quantum()),
    }
}

// ---------------------------------------------------------------- brackets

pub struct BracketOptions {
    pub seed: u64,
    pub ensembles: usize,
    pub hbar: f64,
}

impl BracketOptions {
    pub fn resolve(cfg: &RunConfig, seed: Option<u64>) -> Self {
        BracketOptions {
            seed: seed.or(cfg.seed).unwrap_or(0),
            ensembles: cfg.experiment.ensembles.unwrap_or(50),
            hbar: cfg.physics.hbar.unwrap_or(1.0),
        }
    }
}

/// Algebraic identities of the functional bracket on fixed fixtures.
pub fn brackets(o: &BracketOptions) -> Result<Outcome, CliError> {
    let hbar = o.hbar;
    let grid = HybridGrid::discrete(2, -8.0, 8.0, 64)?;
    let mut r = VerificationReport::new(
        "brackets",
        Fingerprint { grid: describe(&grid), dt: None, seed: Some(o.seed), notes: vec![format!("{} random ensembles", o.ensembles)] },
    );

    // Lie axioms on random localized ensembles
    let pool: Vec<Arc<dyn Functional>> = vec![
        c(PhaseFunction::x()),
        c(PhaseFunction::k()),
        c(PhaseFunction::harmonic(1.0, 1.3)),
        c(PhaseFunction::xk()),
        q(QuantumOperator::pauli_x()),
        q(QuantumOperator::pauli_y()),
        q(QuantumOperator::pauli_z()),
    ];
    let (mut anti, mut anti_at) = (0.0f64, (0.0, 0.0));
    let (mut bilin, mut bilin_at) = (0.0f64, (0.0, 0.0));
    for n in 0..o.ensembles {
        let e = fixtures::smooth_random_localized(&grid, o.seed.wrapping_add(n as u64), 1.2, hbar)?;
        // deterministic operand choice from the ensemble index
        let (i, j, k) = (n % pool.len(), (3 * n + 1) % pool.len(), (5 * n + 2) % pool.len());
        let (a, b, cc) = (&pool[i], &pool[j], &pool[k]);
        let ab = poisson_bracket_ps(a.as_ref(), b.as_ref(), &e)?.value;
        let ba = poisson_bracket_ps(b.as_ref(), a.as_ref(), &e)?.value;
        if (ab + ba).abs() >= anti {
            anti = (ab + ba).abs();
            anti_at = (ab, -ba);
        }
        let (alpha, beta) = (0.5 + 0.1 * n as f64 % 1.7, -1.3 + 0.07 * n as f64);
        let combo = LinearCombination::new(vec![(alpha, a.clone()), (beta, b.clone())]);
        let lhs = poisson_bracket_ps(&combo, cc.as_ref(), &e)?.value;
        let rhs = alpha * poisson_bracket_ps(a.as_ref(), cc.as_ref(), &e)?.value + beta * poisson_bracket_ps(b.as_ref(), cc.as_ref(), &e)?.value;
        if (lhs - rhs).abs() >= bilin {
            bilin = (lhs - rhs).abs();
            bilin_at = (lhs, rhs);
        }
    }
    r.below("antisymmetry {A,B} = -{B,A} (worst ensemble)", anti_at.0, anti_at.1, anti, 1e-12, Provenance::Analytic);
    r.below("bilinearity {aA+bB,C} = a{A,C} + b{B,C} (worst ensemble)", bilin_at.0, bilin_at.1, bilin, 1e-12, Provenance::Analytic);

    // (P,S) and psi forms on periodic node-free ensembles
    let pgrid = HybridGrid::continuous((-8.0, 8.0, 32), (-8.0, 8.0, 32))?;
    let w = 2.0 * PI / 16.0;
    let wave = PhaseFunction::new("sin(wx)k", move |x, k| (w * x).sin() * k, move |x, k| w * (w * x).cos() * k, move |x, _| (w * x).sin());
    let ops: Vec<Arc<dyn Functional>> = vec![
        c(PhaseFunction::k2()),
        c(wave),
        q(QuantumOperator::momentum(&pgrid, hbar)?),
        q(QuantumOperator::potential(&pgrid, "cos(wq)", move |x| (w * x).cos())?),
    ];
    let (mut form, mut form_at) = (0.0f64, (0.0, 0.0));
    for n in 0..o.ensembles.min(10) {
        let e = fixtures::smooth_random(&pgrid, o.seed.wrapping_add(5000 + n as u64), hbar)?;
        for a in &ops {
            for b in &ops {
                let ps = poisson_bracket_ps(a.as_ref(), b.as_ref(), &e)?.value;
                let psi = poisson_bracket_psi(a.as_ref(), b.as_ref(), &e)?.value;
                let rel = (ps - psi).abs() / ps.abs().max(1.0);
                if rel >= form {
                    form = rel;
                    form_at = (ps, psi);
                }
            }
        }
    }
    r.below("(P,S) form = psi form, node-free ensembles (relative)", form_at.0, form_at.1, form, 1e-7, Provenance::Analytic);

    let cgrid = HybridGrid::classical(-8.0, 8.0, 64)?;
    let ce = fixtures::smooth_random_localized(&cgrid, 77, 1.2, hbar)?;
    let jc = jacobi_residual(c(PhaseFunction::x()), c(PhaseFunction::k()), c(PhaseFunction::x2()), &ce, 1e-5)?;
    r.below("Jacobi C_x, C_k, C_x2 (eps 1e-5)", jc, 0.0, jc, 1e-4, Provenance::Analytic);
    let qgrid = HybridGrid::discrete(2, 0.0, 6.0, 32)?;
    let qe = fixtures::smooth_random(&qgrid, 78, hbar)?;
    let jq = jacobi_residual(q(QuantumOperator::pauli_x()), q(QuantumOperator::pauli_y()), q(QuantumOperator::pauli_z()), &qe, 1e-5)?;
    r.below("Jacobi Q_sx, Q_sy, Q_sz (eps 1e-5)", jq, 0.0, jq, 1e-4, Provenance::Analytic);

    // classical homomorphism
    let hgrid = HybridGrid::classical(-10.0, 10.0, 256)?;
    let psi = hgrid.complex_field(|_, x| Complex64::new(-(x - 0.3).powi(2) / 1.6, (0.7 * x - 0.15 * x * x) / hbar).exp());
    let he = HybridEnsemble::from_psi(&hgrid, psi, hbar)?;
    let fs = [PhaseFunction::x(), PhaseFunction::k(), PhaseFunction::x2(), PhaseFunction::k2(), PhaseFunction::xk(), PhaseFunction::harmonic(1.0, 1.0)];
    for f in &fs {
        for g in &fs {
            let chk = verify_cc_homomorphism(f, g, &he)?;
            r.below(format!("{{C_{0},C_{1}}} = C_{{{0},{1}}}", f.label(), g.label()), chk.lhs, chk.rhs, chk.residual, 1e-8, Provenance::Analytic);
        }
    }
    let xk = verify_cc_homomorphism(&PhaseFunction::x(), &PhaseFunction::k(), &he)?;
    r.below("{C_x,C_k} = 1", xk.lhs, 1.0, (xk.lhs - 1.0).abs(), 1e-12, Provenance::Analytic);

    // quantum homomorphism
    let paulis = [QuantumOperator::pauli_x(), QuantumOperator::pauli_y(), QuantumOperator::pauli_z()];
    let pe = fixtures::smooth_random(&qgrid, o.seed.wrapping_add(300), hbar)?;
    for m in &paulis {
        for n in &paulis {
            let chk = verify_qq_homomorphism(m, n, &pe)?;
            r.below(format!("{{Q_{0},Q_{1}}} = Q_[{0},{1}]/ihbar", m.label(), n.label()), chk.lhs, chk.rhs, chk.residual, 1e-10, Provenance::Matrix);
        }
    }
    let ggrid = HybridGrid::continuous((-8.0, 8.0, 64), (-8.0, 8.0, 32))?;
    let gops = [
        QuantumOperator::position(&ggrid)?,
        QuantumOperator::momentum(&ggrid, hbar)?,
        QuantumOperator::kinetic(&ggrid, hbar, 1.0)?,
        QuantumOperator::potential(&ggrid, "V", |x| 0.5 * x * x + 0.1 * x.powi(4))?,
    ];
    let ge = fixtures::smooth_random_localized(&ggrid, o.seed.wrapping_add(400), 1.3, hbar)?;
    for m in &gops {
        for n in &gops {
            let chk = verify_qq_homomorphism(m, n, &ge)?;
            r.below(format!("{{Q_{0},Q_{1}}} = Q_[{0},{1}]/ihbar", m.label(), n.label()), chk.lhs, chk.rhs, chk.residual, 1e-10, Provenance::Matrix);
        }
    }

    // configuration separability on an entangled ensemble
    let sgrid = HybridGrid::continuous((-6.0, 6.0, 32), (-6.0, 6.0, 64))?;
    let se = fixtures::smooth_random(&sgrid, 21, hbar)?;
    let m = QuantumOperator::kinetic(&sgrid, hbar, 1.0)?.sum(&QuantumOperator::momentum(&sgrid, hbar)?)?;
    let big_g = QuantumOperator::potential(&sgrid, "G", |x| x.sin() + 0.1 * x * x)?;
    let f = PhaseFunction::harmonic(1.0, 0.8).product(&PhaseFunction::quadratic(0.1, 0.2, 0.3, 0.0, 0.5, 1.0));
    let s = verify_configuration_separability(&se, &PhaseFunction::x2(), &m, &big_g, &f)?;
    for (name, v) in [
        ("{C_g(x), Q_M}", Some(s.cg_qm)),
        ("{Q_G(q), C_f}", Some(s.qg_cf)),
        ("{C_k, Q_p}", s.ck_qp),
        ("{C_x, Q_q}", s.cx_qq),
        ("{C_x, Q_p}", s.cx_qp),
        ("{C_k, Q_q}", s.ck_qq),
    ] {
        let v = v.unwrap_or(f64::NAN);
        r.below(format!("{name} = 0"), v, 0.0, v.abs(), 1e-9, Provenance::Analytic);
    }

    // strong separability fails on correlated ensembles, holds on products
    let cg = HybridGrid::continuous((-8.0, 8.0, 128), (-8.0, 8.0, 128))?;
    let corr = strong_separability_probe(&fixtures::correlated_gaussian(&cg, 0.3, hbar)?, 1.0, 1.0)?;
    r.above("kinetic-kinetic bracket on correlated ensemble (nonzero)", corr.bracket, 0.0, corr.bracket.abs(), 1e-3, Provenance::Analytic);
    r.below(
        "kinetic-kinetic bracket = integral expression (relative)",
        corr.bracket,
        corr.integral,
        (corr.bracket - corr.integral).abs() / corr.integral.abs(),
        1e-6,
        Provenance::Quadrature,
    );
    let prod = strong_separability_probe(&fixtures::product_gaussian(&cg, 0.4, -0.6, 0.2, 0.9, hbar)?, 1.0, 1.0)?;
    r.below("kinetic-kinetic bracket on product ensemble = 0", prod.bracket, 0.0, prod.bracket.abs(), 1e-9, Provenance::Analytic);
    Ok(Outcome::report_only(r))
}

// ---------------------------------------------------------------- ehrenfest

pub const EHRENFEST_COLUMNS: [&str; 13] =
    ["t", "<x>", "<k>", "<q>", "<p>", "<dV/dx>", "<dV/dq>", "energy", "norm", "ode_x", "ode_k", "ode_q", "ode_p"];

pub struct EhrenfestOptions {
    pub benchmark: EhrenfestBenchmark,
    pub grid: HybridGrid,
    pub t_final: f64,
    pub dt: f64,
    pub scheme: Scheme,
}

impl EhrenfestOptions {
    pub fn resolve(cfg: &RunConfig, dt: Option<f64>, t_final: Option<f64>) -> Result<Self, CliError> {
        let d = EhrenfestBenchmark::default();
        let (p, e) = (&cfg.physics, &cfg.experiment);
        let b = EhrenfestBenchmark {
            m_q: p.m_q.unwrap_or(d.m_q),
            m_c: p.m_c.unwrap_or(d.m_c),
            omega: p.omega.unwrap_or(d.omega),
            big_omega: p.big_omega.unwrap_or(d.big_omega),
            coupling_k: p.coupling.unwrap_or(d.coupling_k),
            q0: e.q0.unwrap_or(d.q0),
            p0: e.p0.unwrap_or(d.p0),
            x0: e.x0.unwrap_or(d.x0),
            k0: e.k0.unwrap_or(d.k0),
            sigma_q: e.sigma_q.unwrap_or(d.sigma_q),
            sigma_x: e.sigma_x.unwrap_or(d.sigma_x),
            hbar: p.hbar.unwrap_or(d.hbar),
        };
        if !b.admissible() {
            return Err(CliError::Config(format!(
                "`physics.K` = {} needs K^2 < m_q m_c omega^2 Omega^2 for a bounded potential",
                b.coupling_k
            )));
        }
        let default = GridSection { levels: None, q: Some(Axis::new(-11.0, 11.0, 128)), x: Some(Axis::new(-5.0, 5.0, 256)) };
        let grid = cfg.grid_or(&default)?;
        let t_final = match (t_final, e.t_final, e.periods) {
            (Some(t), _, _) | (None, Some(t), _) => t,
            (None, None, Some(n)) => n * b.slow_period(),
            (None, None, None) => 2.0 * b.slow_period(),
        };
        if !(t_final > 0.0) {
            return Err(CliError::Usage(format!("--t-final must be positive, got {t_final}")));
        }
        let dt = dt.or(e.dt).unwrap_or(0.0025);
        if !(dt > 0.0) {
            return Err(CliError::Usage(format!("--dt must be positive, got {dt}")));
        }
        let scheme = match e.scheme.as_deref().map(parse_scheme_name).transpose()? {
            Some("rk4") => Scheme::Rk4,
            _ => Scheme::LogPolarRk4 { degree: e.degree.unwrap_or(4) },
        };
        Ok(EhrenfestOptions { benchmark: b, grid, t_final, dt, scheme })
    }
}

/// Coupled oscillators against the classical ODE for the means.
pub fn ehrenfest(o: &EhrenfestOptions) -> Result<Outcome, CliError> {
    let run = ehrenfest_experiment_on(&o.benchmark, &o.grid, o.t_final, o.dt, o.scheme)?;
    let rec = &run.record;
    let series = |l: &str| rec.series(l).ok_or_else(|| CliError::Io(format!("missing series {l}")));
    let cols = [series("<x>")?, series("<k>")?, series("<q>")?, series("<p>")?, series("<dV/dx>")?, series("<dV/dq>")?];
    let mut t = Table::new(&EHRENFEST_COLUMNS);
    for i in 0..rec.len() {
        let mut row = vec![rec.times[i]];
        row.extend(cols.iter().map(|s| s[i]));
        row.extend([rec.energy[i], rec.norm[i], run.ode.x[i], run.ode.k[i], run.ode.q[i], run.ode.p[i]]);
        t.push_nums(&row);
    }
    let scheme = match o.scheme {
        Scheme::Rk4 => "rk4".to_string(),
        Scheme::LogPolarRk4 { degree } => format!("logpolar degree {degree}"),
    };
    let mut r = VerificationReport::new(
        "ehrenfest",
        Fingerprint { grid: describe(&o.grid), dt: Some(o.dt), seed: None, notes: vec![format!("scheme {scheme}"), format!("t_final {}", o.t_final)] },
    );
    r.environment.notes.extend(rec.warnings.iter().cloned());
    let last = rec.len() - 1;
    let ode = [&run.ode.x, &run.ode.k, &run.ode.q, &run.ode.p];
    for (n, name) in ["<x>", "<k>", "<q>", "<p>"].iter().enumerate() {
        r.below(
            format!("{name} = ODE mean (max relative deviation; lhs, rhs at t_final)"),
            cols[n][last],
            ode[n][last],
            run.deviations[n],
            1e-4,
            Provenance::Ode,
        );
    }
    let rel = ["d<x>/dt = <k>/m_c", "d<k>/dt = -<dV/dx>", "d<q>/dt = <p>/m_q", "d<p>/dt = -<dV/dq>"];
    for (name, v) in rel.iter().zip(run.relation_residuals) {
        r.below(format!("{name} (relative)"), v, 0.0, v, 1e-4, Provenance::Analytic);
    }
    r.below("energy conserved (relative drift)", rec.energy[last], rec.energy[0], run.energy_drift, 1e-7, Provenance::Analytic);
    r.below("norm conserved (per-step drift)", rec.norm[last], 1.0, rec.max_norm_drift, 1e-10, Provenance::Analytic);
    Ok(Outcome { report: r, primary: Some(t.to_csv()?), extras: Vec::new() })
}

// ---------------------------------------------------------------- measure

pub struct MeasureOptions {
    pub operator: String,
    pub state: Vec<Complex64>,
    pub big_k: f64,
    pub pointer_width: f64,
    pub duration: f64,
    pub collapse_at: Option<f64>,
    pub dt: f64,
    pub hbar: f64,
    pub x: Axis,
    pub json: bool,
}

/// "0.6, 0.8i" or "1,1" into amplitudes.
pub fn parse_state(s: &str) -> Result<Vec<Complex64>, CliError> {
    let v = s
        .split(',')
        .map(|t| t.trim().replace(' ', ""))
        .map(|t| t.parse::<Complex64>().map_err(|_| CliError::Usage(format!("bad amplitude `{t}` in --state"))))
        .collect::<Result<Vec<_>, _>>()?;
    let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    if v.len() < 2 {
        return Err(CliError::Usage("--state needs at least two amplitudes".into()));
    }
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(CliError::Usage("--state has zero norm".into()));
    }
    Ok(v.into_iter().map(|z| z / norm.sqrt()).collect())
}

pub fn parse_reading(s: &str) -> Result<Option<f64>, CliError> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    s.trim().parse().map(Some).map_err(|_| CliError::Usage(format!("--collapse-at takes a number or `none`, got `{s}`")))
}

impl MeasureOptions {
    #[allow(clippy::too_many_arguments)]
    pub fn resolve(
        cfg: &RunConfig,
        operator: Option<String>,
        state: Option<String>,
        big_k: Option<f64>,
        pointer_width: Option<f64>,
        collapse_at: Option<String>,
        dt: Option<f64>,
        json: bool,
    ) -> Result<Self, CliError> {
        let e = &cfg.experiment;
        let operator = pick(operator, &e.operator).unwrap_or_else(|| "sigma_z".into());
        let state = parse_state(&pick(state, &e.state).unwrap_or_else(|| "0.6, 0.8i".into()))?;
        if cfg.grid.q.is_some() {
            return Err(CliError::Config("measure needs a finite quantum sector; use `grid.levels`".into()));
        }
        if let Some(d) = cfg.grid.levels {
            if d != state.len() {
                return Err(CliError::Config(format!("`grid.levels` = {d} but the state has {} amplitudes", state.len())));
            }
        }
        let collapse_at = match pick(collapse_at, &e.collapse_at) {
            Some(s) => parse_reading(&s)?,
            None => None,
        };
        let o = MeasureOptions {
            operator,
            state,
            big_k: pick(big_k, &e.pointer_k).unwrap_or(4.0),
            pointer_width: pick(pointer_width, &e.pointer_width).unwrap_or(0.5),
            duration: e.duration.unwrap_or(1.0),
            collapse_at,
            dt: dt.or(e.dt).unwrap_or(0.0005),
            hbar: cfg.physics.hbar.unwrap_or(1.0),
            x: cfg.grid.x.unwrap_or(Axis::new(-12.0, 12.0, 256)),
            json,
        };
        if !(o.pointer_width > 0.0) || !(o.dt > 0.0) {
            return Err(CliError::Usage("--pointer-width and --dt must be positive".into()));
        }
        Ok(o)
    }
}

/// Pointer protocol: RK4 against the shifted sum, Born weights, optional collapse.
pub fn measure(o: &MeasureOptions) -> Result<Outcome, CliError> {
    let d = o.state.len();
    let grid = HybridGrid::discrete(d, o.x.min, o.x.max, o.x.points)?;
    let op = QuantumOperator::from_label(&o.operator, &grid, o.hbar)?;
    if op.dim() != d {
        return Err(CliError::Usage(format!("operator `{}` acts on {} levels, state has {d}", o.operator, op.dim())));
    }
    let psi_q = ndarray::Array1::from(o.state.clone());
    let setup = MeasurementSetup::gaussian(&grid, op.clone(), o.big_k, o.duration, o.pointer_width)?;
    let num = evolve_measurement(&grid, &psi_q, &setup, o.dt, o.hbar)?;
    let exact = exact_post_measurement(&grid, &psi_q, &setup, o.hbar)?;
    let reading = pointer_distribution(&num, &setup)?;
    let born = setup.branch_probabilities(&psi_q);

    let mut r = VerificationReport::new(
        "measure",
        Fingerprint {
            grid: describe(&grid),
            dt: Some(o.dt),
            seed: None,
            notes: vec![format!("operator {}, K {}, pointer width {}, duration {}", o.operator, o.big_k, o.pointer_width, o.duration)],
        },
    );
    let l2 = l2_distance(&num, &exact)?;
    r.below("RK4 state = shifted-sum state (L2)", l2, 0.0, l2, 1e-6, Provenance::Analytic);
    r.below("norm after interaction", num.norm(), 1.0, (num.norm() - 1.0).abs(), 1e-9, Provenance::Analytic);
    r.below("branch overlap", reading.overlap, 0.0, reading.overlap, 1e-12, Provenance::Analytic);
    let total: f64 = reading.branch_weights.iter().map(|(_, w)| w).sum();
    r.below("branch weights sum to 1", total, 1.0, (total - 1.0).abs(), 1e-9, Provenance::Analytic);
    let mut branches = Table::new(&["eigenvalue", "pointer_weight", "born_probability"]);
    for ((lambda, w), (_, p)) in reading.branch_weights.iter().zip(&born) {
        r.below(format!("weight of lambda = {lambda} = <psi|E_n|psi>"), *w, *p, (w - p).abs(), 1e-9, Provenance::Matrix);
        branches.push_nums(&[*lambda, *w, *p]);
    }

    let mut collapse_table = None;
    let mut collapse_json = serde_json::Value::Null;
    if let Some(a) = o.collapse_at {
        let col = collapse(&num, &setup, a)?;
        let expected = expected_conditional(&setup, &psi_q, col.branch, grid.quantum_weight())?;
        let marginal: Vec<f64> = col.psi_a.iter().map(|z| z.norm_sqr()).collect();
        let err = marginal.iter().zip(expected.iter()).map(|(m, x)| (m - x).abs()).fold(0.0, f64::max);
        r.below(format!("collapsed marginal at a = {a} = |E_n psi|^2 / p_n"), marginal[0], expected[0], err, 1e-8, Provenance::Matrix);
        let again = collapse(&col.ensemble, &setup, a)?;
        let phase = again.psi_a.iter().zip(col.psi_a.iter()).map(|(u, v)| u.conj() * v).sum::<Complex64>();
        let idem = (1.0 - phase.norm()).abs();
        r.below("collapse is idempotent on the quantum component", phase.norm(), 1.0, idem, 1e-12, Provenance::Analytic);
        let mut worst = 0.0f64;
        let mut ms = vec![op.clone()];
        if d == 2 {
            ms.extend([QuantumOperator::pauli_x(), QuantumOperator::pauli_y(), QuantumOperator::pauli_z()]);
        }
        for f in [PhaseFunction::x(), PhaseFunction::k(), PhaseFunction::x2(), PhaseFunction::k2(), PhaseFunction::xk()] {
            for m in &ms {
                let b = poisson_bracket_ps(c(f.clone()).as_ref(), q(m.clone()).as_ref(), &col.ensemble)?.value;
                worst = worst.max(b.abs());
            }
        }
        r.below("max |{C_f, Q_M}| after collapse = 0", worst, 0.0, worst, 1e-9, Provenance::Analytic);
        r.environment.notes.push(format!("collapse regularizes delta(x - a) by a Gaussian of width {}", col.pointer_width));
        let mut t = Table::new(&["level", "re", "im", "marginal", "expected"]);
        for (i, z) in col.psi_a.iter().enumerate() {
            t.push_nums(&[i as f64, z.re, z.im, marginal[i], expected[i]]);
        }
        collapse_json = json!({
            "reading": a,
            "eigenvalue": col.eigenvalue,
            "pointer_width": col.pointer_width,
            "psi_re": col.psi_a.iter().map(|z| z.re).collect::<Vec<_>>(),
            "psi_im": col.psi_a.iter().map(|z| z.im).collect::<Vec<_>>(),
            "marginal": marginal,
            "expected": expected.to_vec(),
        });
        collapse_table = Some(t);
    }

    let xs = grid.x_coords();
    if o.json {
        let doc = json!({
            "schema_version": crate::report::SCHEMA_VERSION,
            "x": xs.to_vec(),
            "pointer_density": reading.distribution,
            "branches": reading.branch_weights.iter().zip(&born).map(|((l, w), (_, p))| json!({"eigenvalue": l, "pointer_weight": w, "born_probability": p})).collect::<Vec<_>>(),
            "collapse": collapse_json,
        });
        let mut s = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        s.push('\n');
        return Ok(Outcome { report: r, primary: Some(s), extras: Vec::new() });
    }
    let mut dist = Table::new(&["x", "pointer_density"]);
    for (x, p) in xs.iter().zip(&reading.distribution) {
        dist.push_nums(&[*x, *p]);
    }
    let mut extras = vec![("branches.csv".to_string(), branches.to_csv()?)];
    if let Some(t) = collapse_table {
        extras.push(("collapse.csv".into(), t.to_csv()?));
    }
    Ok(Outcome { report: r, primary: Some(dist.to_csv()?), extras })
}

// ---------------------------------------------------------------- thermal

pub const THERMAL_COLUMNS: [&str; 5] = ["observable", "mixture_value", "stderr", "quadrature_reference", "z_score"];

pub struct ThermalOptions {
    pub hamiltonian: String,
    pub beta: f64,
    pub samples: usize,
    pub t_avg: Option<f64>,
    pub seed: u64,
    pub sampler: &'static str,
    pub observables: Vec<String>,
    pub dt: f64,
}

impl ThermalOptions {
    #[allow(clippy::too_many_arguments)]
    pub fn resolve(
        cfg: &RunConfig,
        hamiltonian: Option<String>,
        beta: Option<f64>,
        samples: Option<usize>,
        t_avg: Option<f64>,
        seed: Option<u64>,
        sampler: Option<String>,
        observables: Vec<String>,
        dt: Option<f64>,
    ) -> Result<Self, CliError> {
        let e = &cfg.experiment;
        let hamiltonian = require(pick(hamiltonian, &e.hamiltonian), "experiment.hamiltonian", "--hamiltonian")?;
        let beta = require(pick(beta, &e.beta), "experiment.beta", "--beta")?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(CliError::Usage(format!("--beta must be positive, got {beta}")));
        }
        let samples = pick(samples, &e.samples).unwrap_or(10_000);
        if samples < 2 {
            return Err(CliError::Usage("--samples must be at least 2".into()));
        }
        let t_avg = pick(t_avg, &e.t_avg);
        if let Some(t) = t_avg {
            if !(t > 0.0) {
                return Err(CliError::Usage(format!("--t-avg must be positive, got {t}")));
            }
        }
        let sampler = parse_sampler_name(&pick(sampler, &e.sampler).unwrap_or_else(|| "auto".into()))?;
        let observables = if !observables.is_empty() {
            observables
        } else {
            e.observables.clone().unwrap_or_else(|| vec![hamiltonian.clone(), "x2".into(), "k2".into()])
        };
        let dt = dt.or(e.dt).unwrap_or(TrajectorySettings::default().dt);
        Ok(ThermalOptions { hamiltonian, beta, samples, t_avg, seed: seed.or(cfg.seed).unwrap_or(0), sampler, observables, dt })
    }
}

/// Trajectory-mixture averages against phase-space quadrature.
pub fn thermal(o: &ThermalOptions) -> Result<Outcome, CliError> {
    let h = PhaseSpaceHamiltonian::from_label(&o.hamiltonian)?;
    let fs = o.observables.iter().map(|l| PhaseFunction::from_label(l)).collect::<Result<Vec<_>, _>>()?;
    let t_avg = o.t_avg.unwrap_or_else(|| h.characteristic_period().map_or(50.0, |p| 50.0 * p));
    let settings = TrajectorySettings { dt: o.dt, ..TrajectorySettings::default() };
    let mut notes = vec![format!("beta {}, {} samples, T_avg {t_avg}", o.beta, o.samples)];
    let run = |s: Sampler| canonical_averages(&fs, &h, o.beta, o.samples, t_avg, o.seed, s, settings);
    let report = match o.sampler {
        "importance" => run(Sampler::ImportanceGaussian)?,
        "metropolis" => run(Sampler::MetropolisRW)?,
        _ => match run(Sampler::ImportanceGaussian) {
            Err(HybridError::NonIntegrableWeight(why)) => {
                notes.push(format!("importance sampling rejected ({why}); used Metropolis chains"));
                run(Sampler::MetropolisRW)?
            }
            other => other?,
        },
    };
    notes.push(format!("sampler {:?}, effective sample size {:.1}", report.sampler, report.effective_sample_size));
    let mut r = VerificationReport::new("thermal", Fingerprint { grid: format!("phase space, H = {}", o.hamiltonian), dt: Some(o.dt), seed: Some(o.seed), notes });
    let mut t = Table::new(&THERMAL_COLUMNS);
    for a in &report.averages {
        t.push(vec![Cell::Text(a.observable.clone()), Cell::Num(a.mixture_value), Cell::Num(a.stderr), Cell::Num(a.quadrature_reference), Cell::Num(a.z_score)]);
        r.below(format!("<{}> mixture = canonical (|z|)", a.observable), a.mixture_value, a.quadrature_reference, a.z_score.abs(), 3.0, Provenance::Quadrature);
    }
    r.below("trajectory energy conserved (max relative drift)", report.max_energy_drift, 0.0, report.max_energy_drift, ENERGY_DRIFT_TOLERANCE, Provenance::Analytic);
    Ok(Outcome { report: r, primary: Some(t.to_csv()?), extras: Vec::new() })
}

// ---------------------------------------------------------------- selfcheck

/// Quantum oscillator eigenstates are stationary; a coherent state is not.
pub fn stationarity() -> Result<VerificationReport, CliError> {
    let g = HybridGrid::continuous((-10.0, 10.0, 128), (-5.0, 5.0, 8))?;
    let mut r = VerificationReport::new("stationarity", Fingerprint { grid: describe(&g), dt: Some(0.004), seed: None, notes: vec![] });
    let h = EnsembleHamiltonian::Quantum { m_q: 1.0, potential: Potential::harmonic_q(1.0, 1.0) };
    let chi = gaussian_packet(&g, 0.0, 1.0, 0.0, 1.0);
    for (n, (_, v)) in quantum_eigenstates(&g, 1.0, |x| 0.5 * x * x, 1.0, 3)?.iter().enumerate() {
        let s = stationarity_check(&h, &HybridEnsemble::product(&g, v, &chi, 1.0)?, 0.5, 0.004)?;
        let want = n as f64 + 0.5;
        r.below(format!("n={n}: P unchanged over the window"), s.dp_norm, 0.0, s.dp_norm, 1e-9, Provenance::Analytic);
        r.below(format!("n={n}: E = (n + 1/2) hbar omega"), s.energy_estimate, want, (s.energy_estimate - want).abs(), 1e-6, Provenance::Analytic);
    }
    let coherent = HybridEnsemble::product(&g, &gaussian_packet_q(&g, 2.0, 1.0 / 2f64.sqrt(), 0.0, 1.0)?, &chi, 1.0)?;
    let s = stationarity_check(&h, &coherent, 0.5, 0.004)?;
    r.above("coherent state moves (negative control)", s.dp_norm, 0.0, s.dp_norm, 1e-2, Provenance::Analytic);
    Ok(r)
}

/// Degree-one homogeneity of the registered observables.
pub fn homogeneity() -> Result<VerificationReport, CliError> {
    let g = HybridGrid::continuous((-8.0, 8.0, 32), (-8.0, 8.0, 64))?;
    let e = fixtures::smooth_random_localized(&g, 91, 1.3, 1.0)?;
    let mut r = VerificationReport::new("homogeneity", Fingerprint { grid: describe(&g), dt: None, seed: Some(91), notes: vec![] });
    let mut obs: Vec<Arc<dyn Functional>> = Vec::new();
    for l in ["1", "x", "k", "x2", "k2", "xk", "x4/4", "kinetic(m=2)", "ho(m=1,omega=1)"] {
        obs.push(c(PhaseFunction::from_label(l)?));
    }
    for l in ["identity", "q", "p", "kinetic(m=1)"] {
        obs.push(q(QuantumOperator::from_label(l, &g, 1.0)?));
    }
    for a in &obs {
        let h = homogeneity_check(a.as_ref(), &e, 2.0)?;
        let v = a.value(&e)?;
        r.below(format!("{}[2P,S] = 2 {}[P,S]", a.label(), a.label()), h.residual_scale, 0.0, h.residual_scale, 1e-9, Provenance::Analytic);
        r.below(format!("{} = int P dA/dP", a.label()), v, v, h.residual_local, 1e-9, Provenance::Analytic);
    }
    Ok(r)
}

/// All suites at their shipped defaults, shortened where runtime allows.
pub fn selfcheck() -> Result<VerificationReport, CliError> {
    let cfg = RunConfig::default();
    let mut r = VerificationReport::new("selfcheck", Fingerprint { grid: "per suite".into(), dt: None, seed: Some(0), notes: vec![] });
    r.absorb(brackets(&BracketOptions::resolve(&cfg, None))?.report);
    r.absorb(homogeneity()?);
    let mut ehr = EhrenfestOptions::resolve(&cfg, None, None)?;
    ehr.t_final = 0.5 * ehr.benchmark.slow_period();
    r.absorb(ehrenfest(&ehr)?.report);
    r.absorb(measure(&MeasureOptions::resolve(&cfg, None, None, None, None, Some("4.0".into()), None, false)?)?.report);
    let th = ThermalOptions::resolve(&cfg, Some("ho(m=1,omega=1)".into()), Some(1.0), Some(2000), None, Some(0), None, vec![], None)?;
    r.absorb(thermal(&th)?.report);
    r.absorb(stationarity()?);
    Ok(r)
}
