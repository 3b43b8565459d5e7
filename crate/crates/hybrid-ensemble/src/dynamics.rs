//! Ensemble Hamiltonians, equations of motion and time evolution.
//!
//! Every Hamiltonian drives psi through psi_t = -(i/hbar) conj(dH/dpsi), which is
//! equivalent to P_t = dH/dS, S_t = -dH/dP. The mixed quantum-classical
//! Hamiltonian can also be advanced in log-polar form (see [`crate::logpolar`]).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::Zip;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{gaussian_packet, gaussian_packet_q, HybridEnsemble};
use crate::error::{HybridError, Result};
use crate::grid::{ComplexField, HybridGrid, RealField};
use crate::logpolar::{LogPolarBasis, LogPolarProblem, LogPolarState};
use crate::measurement::{interaction_rhs, MeasurementSetup};
use crate::observables::{psi_from_ps_derivatives, ClassicalObservable, ConfigurationObservable, Functional, PhaseFunction};

/// Default constant c in dt_max = c min(dq,dx)^2 min(m_q,m_c) / hbar.
pub const STABILITY_CONSTANT: f64 = 0.2;
/// Node exposure above which a run carries a warning.
pub const NODE_WARNING_FRACTION: f64 = 0.01;
/// Largest probability tolerated in the two outermost cells of each open axis.
pub const EDGE_TOLERANCE: f64 = 1e-10;

const I: Complex64 = Complex64::new(0.0, 1.0);

type Pot = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Potential V(q, x) with its gradient.
#[derive(Clone)]
pub struct Potential {
    label: String,
    v: Pot,
    dv_dq: Pot,
    dv_dx: Pot,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Potential({})", self.label)
    }
}

impl Potential {
    pub fn new<V, Q, X>(label: impl Into<String>, v: V, dv_dq: Q, dv_dx: X) -> Self
    where
        V: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        Q: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        X: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Potential { label: label.into(), v: Arc::new(v), dv_dq: Arc::new(dv_dq), dv_dx: Arc::new(dv_dx) }
    }

    pub fn zero() -> Self {
        Self::new("zero", |_, _| 0.0, |_, _| 0.0, |_, _| 0.0)
    }

    /// V = m w^2 q^2/2.
    pub fn harmonic_q(m: f64, omega: f64) -> Self {
        let c = m * omega * omega;
        Self::new(format!("ho_q(m={m},omega={omega})"), move |q, _| 0.5 * c * q * q, move |q, _| c * q, |_, _| 0.0)
    }

    /// V = m w^2 q^2/2 + M W^2 x^2/2 + K q x.
    pub fn coupled_oscillators(m_q: f64, m_c: f64, omega: f64, big_omega: f64, coupling: f64) -> Self {
        let a = m_q * omega * omega;
        let b = m_c * big_omega * big_omega;
        let k = coupling;
        Self::new(
            format!("coupled_ho(mq={m_q},mc={m_c},omega={omega},Omega={big_omega},K={coupling})"),
            move |q, x| 0.5 * a * q * q + 0.5 * b * x * x + k * q * x,
            move |q, x| a * q + k * x,
            move |q, x| b * x + k * q,
        )
    }

    /// Parses "zero", "ho_q(m=,omega=)" and "coupled_ho(mq=,mc=,omega=,Omega=,K=)".
    pub fn from_label(label: &str) -> Result<Self> {
        let (name, args) = crate::observables::parse_label(label)?;
        let get = |key: &str, default: Option<f64>| -> Result<f64> {
            args.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .or(default)
                .ok_or_else(|| HybridError::InvalidParameter(format!("potential '{label}' needs '{key}'")))
        };
        match name.as_str() {
            "zero" => Ok(Self::zero()),
            "ho_q" => Ok(Self::harmonic_q(get("m", Some(1.0))?, get("omega", Some(1.0))?)),
            "coupled_ho" => Ok(Self::coupled_oscillators(
                get("mq", Some(1.0))?,
                get("mc", Some(1.0))?,
                get("omega", Some(1.0))?,
                get("Omega", Some(1.0))?,
                get("K", None)?,
            )),
            _ => Err(HybridError::InvalidParameter(format!("unknown potential '{label}'"))),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, q: f64, x: f64) -> f64 {
        (self.v)(q, x)
    }

    pub fn field(&self, grid: &HybridGrid) -> RealField {
        grid.real_field(|q, x| (self.v)(q, x))
    }

    pub fn dq_field(&self, grid: &HybridGrid) -> RealField {
        grid.real_field(|q, x| (self.dv_dq)(q, x))
    }

    pub fn dx_field(&self, grid: &HybridGrid) -> RealField {
        grid.real_field(|q, x| (self.dv_dx)(q, x))
    }
}

/// Ensemble Hamiltonian H[P,S].
#[derive(Clone)]
pub enum EnsembleHamiltonian {
    /// integral of P[(S_q)^2/2m + hbar^2 (P_q)^2/(8 m P^2) + V(q)]; the classical sector is inert.
    Quantum { m_q: f64, potential: Potential },
    /// C_H = integral of P H(x, S_x).
    Classical { h: PhaseFunction },
    /// Mixed quantum-classical Hamiltonian with potential V(q, x).
    MixedQC { m_q: f64, m_c: f64, potential: Potential },
    /// kappa(t) M k pointer coupling.
    Measurement { setup: Arc<MeasurementSetup> },
    Custom(Arc<dyn Functional>),
}

impl fmt::Debug for EnsembleHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EnsembleHamiltonian({})", self.label())
    }
}

fn check_mass(m: f64) -> Result<()> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(HybridError::InvalidParameter(format!("masses must be positive, got {m}")));
    }
    Ok(())
}

impl EnsembleHamiltonian {
    pub fn label(&self) -> String {
        match self {
            Self::Quantum { m_q, potential } => format!("quantum(m={m_q}, V={})", potential.label()),
            Self::Classical { h } => format!("classical({})", h.label()),
            Self::MixedQC { m_q, m_c, potential } => format!("mixed(m_q={m_q}, m_c={m_c}, V={})", potential.label()),
            Self::Measurement { setup } => format!("measurement({})", setup.operator().label()),
            Self::Custom(a) => format!("custom({})", a.label()),
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, Self::Measurement { .. })
    }

    pub fn check_grid(&self, grid: &HybridGrid) -> Result<()> {
        match self {
            Self::Quantum { m_q, .. } => {
                check_mass(*m_q)?;
                grid.dq().map(|_| ())
            }
            Self::MixedQC { m_q, m_c, .. } => {
                check_mass(*m_q)?;
                check_mass(*m_c)?;
                grid.dq().map(|_| ())
            }
            Self::Measurement { setup } => {
                if setup.operator().dim() != grid.n_quantum() {
                    return Err(HybridError::DimensionMismatch { expected: grid.n_quantum(), found: setup.operator().dim() });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// H at time t. MixedQC and Quantum use the psi path, which stays accurate
    /// in the far tails where (P_q)^2/P amplifies aliasing.
    pub fn value(&self, e: &HybridEnsemble, t: f64) -> Result<f64> {
        match self {
            Self::Measurement { setup } => {
                let kappa = setup.kappa(t);
                if kappa == 0.0 {
                    return Ok(0.0);
                }
                let g = e.grid();
                let kpsi = g.d_dx(e.psi())?.mapv(|z| -I * e.hbar() * z);
                let mk = setup.operator().apply(&kpsi)?;
                let s: Complex64 = e.psi().iter().zip(mk.iter()).map(|(a, b)| a.conj() * b).sum();
                Ok(kappa * s.re * g.cell_weight())
            }
            _ => self.value_psi(e),
        }
    }

    /// Value through P, S and their derivatives.
    pub fn value_ps(&self, e: &HybridEnsemble) -> Result<f64> {
        self.check_grid(e.grid())?;
        match self {
            Self::Quantum { m_q, potential } => ps_energy(e, *m_q, None, potential),
            Self::MixedQC { m_q, m_c, potential } => ps_energy(e, *m_q, Some(*m_c), potential),
            Self::Classical { h } => ClassicalObservable::new(h.clone()).value(e),
            Self::Custom(a) => a.value(e),
            Self::Measurement { .. } => self.value(e, 0.0),
        }
    }

    /// Value through psi and its spectral derivatives.
    pub fn value_psi(&self, e: &HybridEnsemble) -> Result<f64> {
        self.check_grid(e.grid())?;
        match self {
            Self::Quantum { m_q, potential } => psi_energy(e, *m_q, None, potential),
            Self::MixedQC { m_q, m_c, potential } => psi_energy(e, *m_q, Some(*m_c), potential),
            _ => self.value_ps(e),
        }
    }

    /// psi_t at time t.
    pub fn psi_rhs(&self, e: &HybridEnsemble, t: f64) -> Result<ComplexField> {
        self.check_grid(e.grid())?;
        let g = e.grid();
        let hbar = e.hbar();
        let psi = e.psi();
        let out = match self {
            Self::Quantum { m_q, potential } => {
                let lap = g.laplacian_q(psi)?;
                let v = potential.field(g);
                let c = hbar * hbar / (2.0 * m_q);
                Zip::from(&lap).and(&v).and(psi).map_collect(|&l, &v, &z| -I / hbar * (-c * l + v * z))
            }
            Self::MixedQC { m_q, m_c, potential } => {
                let lq = g.laplacian_q(psi)?;
                let lx = g.laplacian_x(psi)?;
                let amp = psi.mapv(|z| z.norm());
                let lamp = g.laplacian_x_real(&amp)?;
                let v = potential.field(g);
                let floor = e.p_floor();
                let (cq, cx) = (hbar * hbar / (2.0 * m_q), hbar * hbar / (2.0 * m_c));
                // potential plus the subtracted quantum potential, floored at nodes
                let w = Zip::from(&amp).and(&lamp).and(&v).map_collect(|&a, &la, &vv| vv + if a * a > floor { cx * la / a } else { 0.0 });
                Zip::from(psi).and(&lq).and(&lx).and(&w).map_collect(|&z, &q2, &x2, &wv| -I / hbar * (-cq * q2 - cx * x2 + wv * z))
            }
            Self::Classical { h } => {
                let d = ClassicalObservable::new(h.clone()).psi_derivative(e).expect("classical observables are differentiable")?;
                d.mapv(|z| -I / hbar * z.conj())
            }
            Self::Measurement { setup } => interaction_rhs(g, setup, psi, t)?,
            Self::Custom(a) => {
                let d = custom_psi_derivative(a.as_ref(), e)?;
                d.mapv(|z| -I / hbar * z.conj())
            }
        };
        if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(HybridError::NonFinite("equation of motion right-hand side".into()));
        }
        Ok(out)
    }

    /// (P_t, S_t) = (dH/dS, -dH/dP) obtained from psi_t. S_t is zero below the density floor.
    pub fn eom_rhs(&self, e: &HybridEnsemble, t: f64) -> Result<(RealField, RealField)> {
        let dpsi = self.psi_rhs(e, t)?;
        let floor = e.p_floor();
        let hbar = e.hbar();
        let mut p_t = RealField::zeros(dpsi.dim());
        let mut s_t = RealField::zeros(dpsi.dim());
        Zip::from(&mut p_t).and(&mut s_t).and(e.psi()).and(&dpsi).for_each(|pt, st, &z, &dz| {
            let w = z.conj() * dz;
            *pt = 2.0 * w.re;
            let p = z.norm_sqr();
            *st = if p > floor { hbar * w.im / p } else { 0.0 };
        });
        Ok((p_t, s_t))
    }

    /// Largest stable time step of the psi-form RK4 scheme, or None when no bound is known.
    pub fn stability_bound(&self, e: &HybridEnsemble, c: f64) -> Result<Option<f64>> {
        let g = e.grid();
        let hbar = e.hbar();
        Ok(match self {
            Self::Quantum { m_q, .. } => Some(c * g.dq()?.powi(2) * m_q / hbar),
            Self::MixedQC { m_q, m_c, .. } => Some(c * g.dq()?.min(g.dx()).powi(2) * m_q.min(*m_c) / hbar),
            Self::Classical { h } => {
                // advection speed and phase rotation rate over the occupied cells
                let k = e.momentum_field()?;
                let p = e.density();
                let pmax = p.iter().fold(0.0f64, |a, &v| a.max(v));
                let x = g.x_coords();
                let (mut vmax, mut hmax) = (0.0f64, 0.0f64);
                for ((i, j), &kv) in k.indexed_iter() {
                    if p[[i, j]] > 1e-12 * pmax {
                        vmax = vmax.max(h.dk(x[j], kv).abs());
                        hmax = hmax.max(h.eval(x[j], kv).abs());
                    }
                }
                let a = if vmax > 0.0 { g.dx() / vmax } else { f64::INFINITY };
                let b = if hmax > 0.0 { hbar / hmax } else { f64::INFINITY };
                let m = a.min(b);
                m.is_finite().then_some(c * m)
            }
            Self::Measurement { setup } => {
                let s = setup.kappa_max() * setup.max_abs_eigenvalue();
                (s > 0.0).then(|| g.dx() / s)
            }
            Self::Custom(_) => None,
        })
    }
}

impl Functional for EnsembleHamiltonian {
    fn label(&self) -> String {
        EnsembleHamiltonian::label(self)
    }

    /// Value at t = 0.
    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        EnsembleHamiltonian::value(self, e, 0.0)
    }

    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        Some(self.psi_rhs(e, 0.0).map(|d| d.mapv(|z| -I * e.hbar() * z.conj())))
    }
}

fn custom_psi_derivative(a: &dyn Functional, e: &HybridEnsemble) -> Result<ComplexField> {
    if let Some(d) = a.psi_derivative(e) {
        return d;
    }
    if let Some(d) = a.ps_derivatives(e) {
        let (ap, as_) = d?;
        return psi_from_ps_derivatives(e, &ap, &as_);
    }
    Err(HybridError::MissingDerivatives(a.label()))
}

fn ps_energy(e: &HybridEnsemble, m_q: f64, m_c: Option<f64>, potential: &Potential) -> Result<f64> {
    let g = e.grid();
    let hbar = e.hbar();
    let p = e.density();
    let sq = e.quantum_phase_gradient()?;
    // (P_q)^2/(8P) is evaluated as (d_q sqrt P)^2/2: differentiating P directly
    // and dividing by P amplifies spectral leakage in the tails
    let root_q = g.d_dq_real(&p.mapv(f64::sqrt))?;
    let sx = match m_c {
        Some(_) => Some(e.momentum_field()?),
        None => None,
    };
    let v = potential.field(g);
    let floor = e.p_floor();
    let mut acc = 0.0;
    for ((idx, &pv), &vv) in p.indexed_iter().zip(v.iter()) {
        acc += pv * vv;
        if pv > floor {
            acc += pv * sq[idx].powi(2) / (2.0 * m_q) + hbar * hbar * root_q[idx].powi(2) / (2.0 * m_q);
            if let (Some(sx), Some(mc)) = (&sx, m_c) {
                acc += pv * sx[idx].powi(2) / (2.0 * mc);
            }
        }
    }
    Ok(acc * g.cell_weight())
}

fn psi_energy(e: &HybridEnsemble, m_q: f64, m_c: Option<f64>, potential: &Potential) -> Result<f64> {
    let g = e.grid();
    let hbar = e.hbar();
    let psi = e.psi();
    let dq = g.d_dq(psi)?;
    let v = potential.field(g);
    let mut acc: f64 = Zip::from(psi).and(&dq).and(&v).fold(0.0, |a, z, d, &vv| a + hbar * hbar / (2.0 * m_q) * d.norm_sqr() + vv * z.norm_sqr());
    if let Some(mc) = m_c {
        let dx = g.d_dx(psi)?;
        let damp = g.d_dx_real(&psi.mapv(|z| z.norm()))?;
        acc += Zip::from(&dx).and(&damp).fold(0.0, |a, d, &da| a + hbar * hbar / (2.0 * mc) * (d.norm_sqr() - da * da));
    }
    Ok(acc * g.cell_weight())
}

/// Time-stepping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    /// Classical RK4 on psi with spectral derivatives.
    Rk4,
    /// RK4 on Legendre coefficients of ln|psi| and S; MixedQC on continuous grids only.
    LogPolarRk4 { degree: usize },
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::Rk4
    }
}

fn check_finite(psi: &ComplexField, step: usize) -> Result<()> {
    if psi.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(HybridError::NanDuringEvolution { step });
    }
    Ok(())
}

fn rk4_psi(h: &EnsembleHamiltonian, e: &HybridEnsemble, t: f64, dt: f64) -> Result<ComplexField> {
    let psi = e.psi();
    let stage = |k: &ComplexField, c: f64| e.with_psi(psi + &k.mapv(|z| z * c));
    let k1 = h.psi_rhs(e, t)?;
    let k2 = h.psi_rhs(&stage(&k1, 0.5 * dt)?, t + 0.5 * dt)?;
    let k3 = h.psi_rhs(&stage(&k2, 0.5 * dt)?, t + 0.5 * dt)?;
    let k4 = h.psi_rhs(&stage(&k3, dt)?, t + dt)?;
    let c = dt / 6.0;
    Ok(Zip::from(psi).and(&k1).and(&k2).and(&k3).and(&k4).map_collect(|&z, &a, &b, &cc, &d| z + (a + 2.0 * b + 2.0 * cc + d) * c))
}

fn mixed_parts(h: &EnsembleHamiltonian) -> Result<(f64, f64, &Potential)> {
    match h {
        EnsembleHamiltonian::MixedQC { m_q, m_c, potential } => Ok((*m_q, *m_c, potential)),
        _ => Err(HybridError::InvalidParameter("the log-polar scheme applies to the mixed quantum-classical Hamiltonian only".into())),
    }
}

fn logpolar_bound(h: &EnsembleHamiltonian, e: &HybridEnsemble, degree: usize, c: f64) -> Result<f64> {
    let (m_q, m_c, _) = mixed_parts(h)?;
    let d = LogPolarBasis::effective_spacing(e.grid(), degree)?;
    Ok(c * d * d * m_q.min(m_c) / e.hbar())
}

/// One renormalized step of size dt starting at time t.
pub fn step(h: &EnsembleHamiltonian, e: &HybridEnsemble, t: f64, dt: f64, scheme: Scheme) -> Result<HybridEnsemble> {
    match scheme {
        Scheme::Rk4 => {
            let psi = rk4_psi(h, e, t, dt)?;
            check_finite(&psi, 1)?;
            HybridEnsemble::from_psi(e.grid(), psi, e.hbar())
        }
        Scheme::LogPolarRk4 { degree } => {
            let (m_q, m_c, pot) = mixed_parts(h)?;
            let prob = LogPolarProblem::new(e.grid(), degree, m_q, m_c, e.hbar(), &pot.field(e.grid()))?;
            let s = prob.fit(e)?;
            let mut s = prob.rk4_step(&s, dt);
            prob.renormalize(&mut s);
            let psi = prob.psi(&s);
            check_finite(&psi, 1)?;
            HybridEnsemble::from_psi(e.grid(), psi, e.hbar())
        }
    }
}

/// Evolution settings besides the time step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub scheme: Scheme,
    pub stability_constant: f64,
    /// Record every n-th step (the final state is always recorded).
    pub record_every: usize,
    /// Fail with BoundaryReached when the edge probability exceeds this.
    pub edge_tolerance: Option<f64>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { scheme: Scheme::Rk4, stability_constant: STABILITY_CONSTANT, record_every: 1, edge_tolerance: None }
    }
}

/// Time series from one evolution. All per-record vectors have equal length.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvolutionRecord {
    pub times: Vec<f64>,
    pub expectations: BTreeMap<String, Vec<f64>>,
    pub energy: Vec<f64>,
    pub norm: Vec<f64>,
    /// |N - 1| before the renormalization that ended each recorded step (0 initially).
    pub norm_drift: Vec<f64>,
    /// Largest per-step drift over all steps, recorded or not.
    pub max_norm_drift: f64,
    pub max_node_fraction: f64,
    pub warnings: Vec<String>,
}

impl EvolutionRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn series(&self, label: &str) -> Option<&[f64]> {
        self.expectations.get(label).map(|v| v.as_slice())
    }

    /// max |E(t) - E(0)| / |E(0)|.
    pub fn relative_energy_drift(&self) -> f64 {
        let e0 = self.energy.first().copied().unwrap_or(0.0);
        let d = self.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
        if e0 != 0.0 {
            d / e0.abs()
        } else {
            d
        }
    }

    fn push(
        &mut self,
        t: f64,
        e: &HybridEnsemble,
        h: &EnsembleHamiltonian,
        record: &[Arc<dyn Functional>],
        drift: f64,
    ) -> Result<()> {
        self.times.push(t);
        let (values, energy) = rayon::join(
            || record.par_iter().map(|a| a.value(e)).collect::<Result<Vec<f64>>>(),
            || h.value(e, t),
        );
        for (a, v) in record.iter().zip(values?) {
            self.expectations.entry(a.label()).or_default().push(v);
        }
        self.energy.push(energy?);
        self.norm.push(e.norm());
        self.norm_drift.push(drift);
        let nf = node_fraction(e);
        self.max_node_fraction = self.max_node_fraction.max(nf);
        Ok(())
    }
}

/// Fraction of occupied cells that sit in a node: cells with P below the floor
/// whose x-neighbourhood carries P > 1e-8 max P, relative to all cells with such
/// a neighbourhood.
pub fn node_fraction(e: &HybridEnsemble) -> f64 {
    let p = e.density();
    let pmax = p.iter().fold(0.0f64, |a, &v| a.max(v));
    let floor = e.p_floor();
    let (nq, nx) = p.dim();
    let mut occupied = 0usize;
    let mut nodes = 0usize;
    for i in 0..nq {
        for j in 0..nx {
            let l = p[[i, (j + nx - 1) % nx]];
            let r = p[[i, (j + 1) % nx]];
            if l.max(r).max(p[[i, j]]) > 1e-8 * pmax {
                occupied += 1;
                if p[[i, j]] <= floor {
                    nodes += 1;
                }
            }
        }
    }
    if occupied == 0 {
        0.0
    } else {
        nodes as f64 / occupied as f64
    }
}

/// Probability carried by the two outermost cells on each side of x and of a continuous q.
pub fn edge_probability(e: &HybridEnsemble) -> f64 {
    let p = e.density();
    let (nq, nx) = p.dim();
    let q_open = e.grid().is_continuous_quantum();
    let mut s = 0.0;
    for ((i, j), &v) in p.indexed_iter() {
        let on_x = j < 2 || j + 2 >= nx;
        let on_q = q_open && (i < 2 || i + 2 >= nq);
        if on_x || on_q {
            s += v;
        }
    }
    s * e.grid().cell_weight()
}

/// Result of [`evolve`].
#[derive(Clone, Debug)]
pub struct Evolution {
    pub record: EvolutionRecord,
    pub state: HybridEnsemble,
}

/// Evolve from t = 0 to t_final with steps of at most dt, recording the given functionals.
pub fn evolve(
    h: &EnsembleHamiltonian,
    e: &HybridEnsemble,
    t_final: f64,
    dt: f64,
    record: &[Arc<dyn Functional>],
    opts: &EvolveOptions,
) -> Result<Evolution> {
    if !(t_final > 0.0) || !(dt > 0.0) || !t_final.is_finite() {
        return Err(HybridError::InvalidParameter(format!("need t_final > 0 and dt > 0, got {t_final}, {dt}")));
    }
    if opts.record_every == 0 {
        return Err(HybridError::InvalidParameter("record_every must be at least 1".into()));
    }
    h.check_grid(e.grid())?;
    let steps = (t_final / dt - 1e-9).ceil().max(1.0) as usize;
    let dt = t_final / steps as f64;
    let bound = match opts.scheme {
        Scheme::Rk4 => h.stability_bound(e, opts.stability_constant)?,
        Scheme::LogPolarRk4 { degree } => Some(logpolar_bound(h, e, degree, opts.stability_constant)?),
    };
    if let Some(b) = bound {
        if dt > b {
            return Err(HybridError::StabilityBound { dt, dt_max: b });
        }
    }

    let mut rec = EvolutionRecord::default();
    let check_edge = |s: &HybridEnsemble| -> Result<()> {
        if let Some(tol) = opts.edge_tolerance {
            let ep = edge_probability(s);
            if ep > tol {
                return Err(HybridError::BoundaryReached { edge_probability: ep });
            }
        }
        Ok(())
    };
    let state = e.normalized()?;
    check_edge(&state)?;
    rec.push(0.0, &state, h, record, 0.0)?;

    let finish = |rec: &mut EvolutionRecord, n: usize, s: &HybridEnsemble, drift: f64| -> Result<()> {
        rec.max_norm_drift = rec.max_norm_drift.max(drift);
        if n % opts.record_every == 0 || n == steps {
            check_edge(s)?;
            rec.push(n as f64 * dt, s, h, record, drift)?;
        }
        Ok(())
    };

    let final_state = match opts.scheme {
        Scheme::Rk4 => {
            let mut s = state;
            for n in 1..=steps {
                let psi = rk4_psi(h, &s, (n - 1) as f64 * dt, dt)?;
                check_finite(&psi, n)?;
                let raw = s.with_psi(psi)?;
                let drift = (raw.norm() - 1.0).abs();
                s = raw.normalized()?;
                finish(&mut rec, n, &s, drift)?;
            }
            s
        }
        Scheme::LogPolarRk4 { degree } => {
            let (m_q, m_c, pot) = mixed_parts(h)?;
            let prob = LogPolarProblem::new(e.grid(), degree, m_q, m_c, e.hbar(), &pot.field(e.grid()))?;
            let mut c: LogPolarState = prob.fit(&state)?;
            prob.renormalize(&mut c);
            let mut s = state;
            for n in 1..=steps {
                c = prob.rk4_step(&c, dt);
                if c.log_amplitude.iter().chain(c.phase.iter()).any(|v| !v.is_finite()) {
                    return Err(HybridError::NanDuringEvolution { step: n });
                }
                let drift = (prob.renormalize(&mut c) - 1.0).abs();
                if n % opts.record_every == 0 || n == steps {
                    let psi = prob.psi(&c);
                    check_finite(&psi, n)?;
                    s = HybridEnsemble::from_psi_unnormalized(e.grid(), psi, e.hbar())?;
                }
                finish(&mut rec, n, &s, drift)?;
            }
            s
        }
    };
    if rec.max_node_fraction > NODE_WARNING_FRACTION {
        rec.warnings.push(format!(
            "node exposure {:.3} exceeds {NODE_WARNING_FRACTION}: the subtracted quantum potential is floored there",
            rec.max_node_fraction
        ));
    }
    Ok(Evolution { record: rec, state: final_state })
}

/// Mutual-information proxy: integral of P ln(P / (P_q P_c)).
pub fn mutual_information(e: &HybridEnsemble) -> f64 {
    let p = e.density();
    let pq = e.marginal_quantum();
    let pc = e.marginal_classical();
    let floor = e.p_floor();
    let mut s = 0.0;
    for ((i, j), &v) in p.indexed_iter() {
        if v > floor && pq[i] > 0.0 && pc[j] > 0.0 {
            s += v * (v / (pq[i] * pc[j])).ln();
        }
    }
    s * e.grid().cell_weight()
}

/// <p> = hbar Im integral psi* D_q psi.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuantumMomentum;

impl Functional for QuantumMomentum {
    fn label(&self) -> String {
        "<p>".into()
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        let d = e.grid().d_dq(e.psi())?;
        let s: f64 = e.psi().iter().zip(d.iter()).map(|(z, dz)| (z.conj() * dz).im).sum();
        Ok(e.hbar() * s * e.grid().cell_weight())
    }

    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        Some(e.grid().d_dq(e.psi()).map(|d| d.mapv(|z| (-I * e.hbar() * z).conj())))
    }
}

/// Linearly coupled oscillators: V = m w^2 q^2/2 + M W^2 x^2/2 + K q x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EhrenfestBenchmark {
    pub m_q: f64,
    pub m_c: f64,
    pub omega: f64,
    #[serde(rename = "Omega")]
    pub big_omega: f64,
    #[serde(rename = "K")]
    pub coupling_k: f64,
    pub q0: f64,
    pub p0: f64,
    pub x0: f64,
    pub k0: f64,
    /// Standard deviation of the initial quantum density.
    pub sigma_q: f64,
    /// Standard deviation of the initial classical density.
    pub sigma_x: f64,
    pub hbar: f64,
}

impl Default for EhrenfestBenchmark {
    fn default() -> Self {
        EhrenfestBenchmark {
            m_q: 1.0,
            m_c: 1.0,
            omega: 1.0,
            big_omega: 1.0,
            coupling_k: 0.25,
            q0: 1.0,
            p0: 0.0,
            x0: -1.0,
            k0: 0.0,
            sigma_q: 2f64.sqrt(),
            sigma_x: 0.5 / 2f64.sqrt(),
            hbar: 1.0,
        }
    }
}

/// Labels recorded by the experiment, in CSV order.
pub const EHRENFEST_LABELS: [&str; 6] = ["<x>", "<k>", "<q>", "<p>", "<dV/dx>", "<dV/dq>"];

impl EhrenfestBenchmark {
    /// K^2 < m_q m_c w^2 W^2, i.e. a positive-definite potential.
    pub fn admissible(&self) -> bool {
        let pos = [self.m_q, self.m_c, self.omega, self.big_omega, self.sigma_q, self.sigma_x, self.hbar].iter().all(|v| *v > 0.0 && v.is_finite());
        pos && self.coupling_k.powi(2) < self.m_q * self.m_c * (self.omega * self.big_omega).powi(2)
    }

    pub fn potential(&self) -> Potential {
        Potential::coupled_oscillators(self.m_q, self.m_c, self.omega, self.big_omega, self.coupling_k)
    }

    pub fn hamiltonian(&self) -> EnsembleHamiltonian {
        EnsembleHamiltonian::MixedQC { m_q: self.m_q, m_c: self.m_c, potential: self.potential() }
    }

    /// Normal-mode angular frequencies (slow, fast).
    pub fn normal_frequencies(&self) -> (f64, f64) {
        let a = self.omega.powi(2);
        let d = self.big_omega.powi(2);
        let b = self.coupling_k / (self.m_q * self.m_c).sqrt();
        let mean = 0.5 * (a + d);
        let r = (0.25 * (a - d).powi(2) + b * b).sqrt();
        ((mean - r).max(0.0).sqrt(), (mean + r).sqrt())
    }

    pub fn slow_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.normal_frequencies().0
    }

    /// Grid used by [`ehrenfest_experiment`].
    pub fn default_grid(&self) -> Result<HybridGrid> {
        HybridGrid::continuous((-11.0, 11.0, 128), (-5.0, 5.0, 256))
    }

    /// Product of Gaussian packets.
    pub fn initial_state(&self, grid: &HybridGrid) -> Result<HybridEnsemble> {
        let psi_q = gaussian_packet_q(grid, self.q0, self.sigma_q, self.p0, self.hbar)?;
        let psi_c = gaussian_packet(grid, self.x0, self.sigma_x, self.k0, self.hbar);
        HybridEnsemble::product(grid, &psi_q, &psi_c, self.hbar)
    }

    /// (x, k, q, p) derivative of the closed oscillator system.
    pub fn ode_rhs(&self, y: [f64; 4]) -> [f64; 4] {
        let [x, k, q, p] = y;
        [
            k / self.m_c,
            -self.m_c * self.big_omega.powi(2) * x - self.coupling_k * q,
            p / self.m_q,
            -self.m_q * self.omega.powi(2) * q - self.coupling_k * x,
        ]
    }

    /// Recorded observables for a grid.
    pub fn observables(&self, grid: &HybridGrid) -> Vec<Arc<dyn Functional>> {
        let b = *self;
        let a = self.m_q * self.omega.powi(2);
        let c = self.m_c * self.big_omega.powi(2);
        vec![
            Arc::new(ConfigurationObservable::new(grid, "<x>", |_, x| x)),
            Arc::new(LabeledClassical("<k>", ClassicalObservable::new(PhaseFunction::k()))),
            Arc::new(ConfigurationObservable::new(grid, "<q>", |q, _| q)),
            Arc::new(QuantumMomentum),
            Arc::new(ConfigurationObservable::new(grid, "<dV/dx>", move |q, x| c * x + b.coupling_k * q)),
            Arc::new(ConfigurationObservable::new(grid, "<dV/dq>", move |q, x| a * q + b.coupling_k * x)),
        ]
    }
}

/// Classical observable under a fixed label.
struct LabeledClassical(&'static str, ClassicalObservable);

impl Functional for LabeledClassical {
    fn label(&self) -> String {
        self.0.into()
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        self.1.value(e)
    }

    fn ps_derivatives(&self, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        self.1.ps_derivatives(e)
    }

    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        self.1.psi_derivative(e)
    }
}

/// Classical oscillator trajectory sampled at the recorded times.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OdeTable {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub k: Vec<f64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

/// RK4 solution of the closed (x, k, q, p) system with `substeps` steps per interval.
pub fn coupled_oscillator_ode(b: &EhrenfestBenchmark, y0: [f64; 4], times: &[f64], substeps: usize) -> OdeTable {
    let mut out = OdeTable::default();
    let mut y = y0;
    let mut t_prev = times.first().copied().unwrap_or(0.0);
    let n = substeps.max(1);
    for &t in times {
        let h = (t - t_prev) / n as f64;
        for _ in 0..n {
            let add = |a: [f64; 4], k: [f64; 4], c: f64| [a[0] + c * k[0], a[1] + c * k[1], a[2] + c * k[2], a[3] + c * k[3]];
            let k1 = b.ode_rhs(y);
            let k2 = b.ode_rhs(add(y, k1, 0.5 * h));
            let k3 = b.ode_rhs(add(y, k2, 0.5 * h));
            let k4 = b.ode_rhs(add(y, k3, h));
            for i in 0..4 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        t_prev = t;
        out.t.push(t);
        out.x.push(y[0]);
        out.k.push(y[1]);
        out.q.push(y[2]);
        out.p.push(y[3]);
    }
    out
}

/// Outcome of the generalized Ehrenfest experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EhrenfestRun {
    pub record: EvolutionRecord,
    pub ode: OdeTable,
    /// max_t |num - ode| / max_t |ode| for x, k, q, p.
    pub deviations: [f64; 4],
    pub max_deviation: f64,
    /// Centered-difference residuals of d<x>/dt = <k>/m_c, d<k>/dt = -<dV/dx>,
    /// d<q>/dt = <p>/m_q and d<p>/dt = -<dV/dq>, each divided by max |rhs|.
    pub relation_residuals: [f64; 4],
    pub energy_drift: f64,
}

/// Experiment on the default grid with the log-polar scheme.
pub fn ehrenfest_experiment(b: &EhrenfestBenchmark, t_final: f64, dt: f64) -> Result<EhrenfestRun> {
    let grid = b.default_grid()?;
    ehrenfest_experiment_on(b, &grid, t_final, dt, Scheme::LogPolarRk4 { degree: 4 })
}

pub fn ehrenfest_experiment_on(b: &EhrenfestBenchmark, grid: &HybridGrid, t_final: f64, dt: f64, scheme: Scheme) -> Result<EhrenfestRun> {
    if !b.admissible() {
        return Err(HybridError::InvalidParameter(format!(
            "coupling K = {} violates K^2 < m_q m_c omega^2 Omega^2 or a parameter is not positive",
            b.coupling_k
        )));
    }
    let e0 = b.initial_state(grid)?;
    // recording every other step keeps the centered differences well inside tolerance
    let opts = EvolveOptions { scheme, record_every: 2, edge_tolerance: Some(EDGE_TOLERANCE), ..Default::default() };
    let ev = evolve(&b.hamiltonian(), &e0, t_final, dt, &b.observables(grid), &opts)?;
    let rec = ev.record;
    let s = |l: &str| rec.series(l).expect("recorded label").to_vec();
    let (x, k, q, p, vx, vq) = (s("<x>"), s("<k>"), s("<q>"), s("<p>"), s("<dV/dx>"), s("<dV/dq>"));
    let y0 = [x[0], k[0], q[0], p[0]];
    let ode = coupled_oscillator_ode(b, y0, &rec.times, 16);
    let rel = |num: &[f64], r: &[f64]| {
        let scale = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        num.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
    };
    let deviations = [rel(&x, &ode.x), rel(&k, &ode.k), rel(&q, &ode.q), rel(&p, &ode.p)];
    let neg = |v: &[f64]| v.iter().map(|a| -a).collect::<Vec<_>>();
    let scaled = |v: &[f64], c: f64| v.iter().map(|a| a * c).collect::<Vec<_>>();
    let relation_residuals = [
        relation_residual(&rec.times, &x, &scaled(&k, 1.0 / b.m_c)),
        relation_residual(&rec.times, &k, &neg(&vx)),
        relation_residual(&rec.times, &q, &scaled(&p, 1.0 / b.m_q)),
        relation_residual(&rec.times, &p, &neg(&vq)),
    ];
    Ok(EhrenfestRun {
        energy_drift: rec.relative_energy_drift(),
        max_deviation: deviations.iter().copied().fold(0.0, f64::max),
        deviations,
        relation_residuals,
        ode,
        record: rec,
    })
}

/// Three-point derivative at interior sample i, second order on uneven spacing.
pub fn centered_derivative(t: &[f64], a: &[f64], i: usize) -> f64 {
    let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
    (h1 * h1 * a[i + 1] - h2 * h2 * a[i - 1] + (h2 * h2 - h1 * h1) * a[i]) / (h1 * h2 * (h1 + h2))
}

/// max over interior samples of |centered derivative of a - rhs| / max |rhs|.
pub fn relation_residual(t: &[f64], a: &[f64], rhs: &[f64]) -> f64 {
    let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    (1..t.len().saturating_sub(1))
        .map(|i| (centered_derivative(t, a, i) - rhs[i]).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Evolve to T, conjugate, evolve another T and conjugate back; returns the
/// largest change of <x>, <k>, <q>, <p> relative to the initial state.
pub fn time_reversal_residual(b: &EhrenfestBenchmark, grid: &HybridGrid, t: f64, dt: f64, scheme: Scheme) -> Result<f64> {
    let h = b.hamiltonian();
    let e0 = b.initial_state(grid)?;
    let obs: Vec<Arc<dyn Functional>> = b.observables(grid).into_iter().take(4).collect();
    let opts = EvolveOptions { scheme, record_every: usize::MAX, edge_tolerance: Some(EDGE_TOLERANCE), ..Default::default() };
    let fwd = evolve(&h, &e0, t, dt, &[], &opts)?;
    let back = evolve(&h, &fwd.state.conjugate(), t, dt, &[], &opts)?;
    let end = back.state.conjugate();
    let mut worst = 0.0f64;
    for a in &obs {
        worst = worst.max((a.value(&end)? - a.value(&e0)?).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{numerical_variational_derivative, ClassicalObservable};

    fn small_grid() -> HybridGrid {
        HybridGrid::continuous((-8.0, 8.0, 64), (-8.0, 8.0, 64)).unwrap()
    }

    fn gauss(g: &HybridGrid, q0: f64, p0: f64, x0: f64, k0: f64) -> HybridEnsemble {
        let psi = g.complex_field(|q, x| {
            Complex64::new(-0.5 * (q - q0).powi(2) - 0.4 * (x - x0).powi(2) - 0.1 * q * x, p0 * q + k0 * x + 0.05 * q * x).exp()
        });
        HybridEnsemble::from_psi(g, psi, 1.0).unwrap()
    }

    #[test]
    fn ground_state_is_stationary() {
        let g = HybridGrid::continuous((-10.0, 10.0, 64), (-4.0, 4.0, 8)).unwrap();
        let psi = g.complex_field(|q, _| Complex64::new((-0.5 * q * q).exp(), 0.0));
        let e = HybridEnsemble::from_psi(&g, psi, 1.0).unwrap();
        let h = EnsembleHamiltonian::Quantum { m_q: 1.0, potential: Potential::harmonic_q(1.0, 1.0) };
        let (pt, st) = h.eom_rhs(&e, 0.0).unwrap();
        let p = e.density();
        assert!(pt.iter().all(|v| v.abs() < 1e-12));
        for (s, pv) in st.iter().zip(p.iter()) {
            if *pv > 1e-10 {
                assert!((s + 0.5).abs() < 1e-9, "{s}");
            }
        }
    }

    #[test]
    fn free_streaming() {
        let g = HybridGrid::classical(-10.0, 10.0, 128).unwrap();
        let k0 = 0.7;
        let psi = g.complex_field(|_, x| Complex64::from_polar((-x * x / 2.0).exp(), k0 * x));
        let e = HybridEnsemble::from_psi(&g, psi, 1.0).unwrap();
        let h = EnsembleHamiltonian::Classical { h: PhaseFunction::kinetic(1.0) };
        let (pt, _) = h.eom_rhs(&e, 0.0).unwrap();
        let dp = g.d_dx_real(&e.density()).unwrap();
        let err = pt.iter().zip(dp.iter()).map(|(a, b)| (a + k0 * b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn mixed_value_paths_agree() {
        let g = small_grid();
        let e = gauss(&g, 0.3, 0.2, -0.4, 0.5);
        let h = EnsembleHamiltonian::MixedQC { m_q: 1.0, m_c: 2.0, potential: Potential::coupled_oscillators(1.0, 2.0, 1.0, 0.7, 0.2) };
        let a = h.value_ps(&e).unwrap();
        let b = h.value_psi(&e).unwrap();
        assert!((a - b).abs() < 1e-8 * a.abs(), "{a} {b}");
    }

    #[test]
    fn mixed_rhs_matches_numerical_variation() {
        let g = HybridGrid::continuous((-6.0, 6.0, 16), (-6.0, 6.0, 16)).unwrap();
        let e = gauss(&g, 0.2, 0.1, 0.3, -0.2);
        let h = EnsembleHamiltonian::MixedQC { m_q: 1.0, m_c: 1.0, potential: Potential::coupled_oscillators(1.0, 1.0, 1.0, 1.0, 0.25) };
        let (pt, st) = h.eom_rhs(&e, 0.0).unwrap();
        let (hp, hs) = numerical_variational_derivative(&h, &e, 1e-7).unwrap();
        let p = e.density();
        let pmax = p.iter().fold(0.0f64, |a, &v| a.max(v));
        for idx in 0..p.len() {
            let (i, j) = (idx / 16, idx % 16);
            if p[[i, j]] > 1e-2 * pmax {
                assert!((pt[[i, j]] - hs[[i, j]]).abs() < 1e-6, "P_t {} {}", pt[[i, j]], hs[[i, j]]);
                assert!((st[[i, j]] + hp[[i, j]]).abs() < 1e-6, "S_t {} {}", st[[i, j]], -hp[[i, j]]);
            }
        }
        let total: f64 = pt.sum() * g.cell_weight();
        assert!(total.abs() < 1e-10);
    }

    #[test]
    fn free_quantum_packet_moves_uniformly() {
        let g = HybridGrid::continuous((-20.0, 20.0, 256), (-4.0, 4.0, 8)).unwrap();
        let psi = g.complex_field(|q, _| Complex64::from_polar((-(q + 2.0).powi(2) / 4.0).exp(), 0.8 * q));
        let e = HybridEnsemble::from_psi(&g, psi, 1.0).unwrap();
        let h = EnsembleHamiltonian::Quantum { m_q: 1.0, potential: Potential::zero() };
        let q_obs: Arc<dyn Functional> = Arc::new(ConfigurationObservable::new(&g, "<q>", |q, _| q));
        let dt = 0.2 * g.dq().unwrap().powi(2);
        let ev = evolve(&h, &e, 2.0, dt, &[q_obs], &EvolveOptions { record_every: 50, ..Default::default() }).unwrap();
        for (t, q) in ev.record.times.iter().zip(ev.record.series("<q>").unwrap()) {
            assert!((q - (-2.0 + 0.8 * t)).abs() < 1e-6, "t={t} q={q}");
        }
        assert!(ev.record.relative_energy_drift() < 1e-7);
    }

    #[test]
    fn coherent_state_oscillates() {
        let g = HybridGrid::continuous((-10.0, 10.0, 128), (-4.0, 4.0, 8)).unwrap();
        let psi = g.complex_field(|q, _| Complex64::new((-(q - 1.5).powi(2) / 2.0).exp(), 0.0));
        let e = HybridEnsemble::from_psi(&g, psi, 1.0).unwrap();
        let h = EnsembleHamiltonian::Quantum { m_q: 1.0, potential: Potential::harmonic_q(1.0, 1.0) };
        let q_obs: Arc<dyn Functional> = Arc::new(ConfigurationObservable::new(&g, "<q>", |q, _| q));
        let t_final = 2.0 * std::f64::consts::PI;
        let ev = evolve(&h, &e, t_final, 0.004, &[q_obs], &EvolveOptions { record_every: 25, ..Default::default() }).unwrap();
        for (t, q) in ev.record.times.iter().zip(ev.record.series("<q>").unwrap()) {
            assert!((q - 1.5 * t.cos()).abs() < 1e-5, "t={t} q={q}");
        }
        assert!(ev.record.max_norm_drift < 1e-10);
    }

    #[test]
    fn product_state_stays_independent() {
        let g = small_grid();
        let e = crate::fixtures::product_gaussian(&g, 0.5, 0.3, -0.5, 0.2, 1.0).unwrap();
        let pot = Potential::new("sep", |q, x| 0.5 * q * q + 0.5 * x * x, |q, _| q, |_, x| x);
        let h = EnsembleHamiltonian::MixedQC { m_q: 1.0, m_c: 1.0, potential: pot };
        let ev = evolve(&h, &e, 0.5, 0.01, &[], &EvolveOptions::default()).unwrap();
        assert!(mutual_information(&ev.state).abs() < 1e-8);
    }

    #[test]
    fn stability_bound_is_enforced() {
        let g = small_grid();
        let e = gauss(&g, 0.0, 0.0, 0.0, 0.0);
        let h = EnsembleHamiltonian::MixedQC { m_q: 1.0, m_c: 1.0, potential: Potential::zero() };
        let err = evolve(&h, &e, 1.0, 0.5, &[], &EvolveOptions::default()).unwrap_err();
        assert!(matches!(err, HybridError::StabilityBound { .. }));
    }

    #[test]
    fn classical_rhs_matches_observable_derivatives() {
        let g = HybridGrid::classical(-8.0, 8.0, 64).unwrap();
        let psi = g.complex_field(|_, x| Complex64::new(-0.5 * x * x, 0.3 * x + 0.1 * x * x).exp());
        let e = HybridEnsemble::from_psi(&g, psi, 1.0).unwrap();
        let f = PhaseFunction::harmonic(1.0, 1.3);
        let h = EnsembleHamiltonian::Classical { h: f.clone() };
        let (pt, st) = h.eom_rhs(&e, 0.0).unwrap();
        let (ap, as_) = ClassicalObservable::new(f).ps_derivatives(&e).unwrap().unwrap();
        let p = e.density();
        for idx in 0..64 {
            if p[[0, idx]] > 1e-8 {
                assert!((pt[[0, idx]] - as_[[0, idx]]).abs() < 1e-9);
                assert!((st[[0, idx]] + ap[[0, idx]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn centered_derivative_is_exact_for_quadratics() {
        let t = [0.0, 0.3, 0.4];
        let a: Vec<f64> = t.iter().map(|s| 2.0 * s * s - s + 1.0).collect();
        assert!((centered_derivative(&t, &a, 1) - (4.0 * 0.3 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ode_oracle_conserves_energy() {
        let b = EhrenfestBenchmark::default();
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let o = coupled_oscillator_ode(&b, [-1.0, 0.0, 1.0, 0.0], &times, 10);
        let en = |i: usize| 0.5 * o.k[i].powi(2) + 0.5 * o.p[i].powi(2) + 0.5 * o.x[i].powi(2) + 0.5 * o.q[i].powi(2) + 0.25 * o.x[i] * o.q[i];
        assert!((en(100) - en(0)).abs() < 1e-10);
    }
}
