//! Functional Poisson bracket in (P,S) and psi form, plus the algebraic
//! identity checks built on it.

use std::sync::Arc;

use ndarray::Zip;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::HybridEnsemble;
use crate::error::{HybridError, Result};
use crate::grid::RealField;
use crate::observables::{
    analytic_psi_derivative, variational_derivatives, ClassicalObservable, Functional, PhaseFunction,
    QuantumObservable, QuantumOperator,
};

/// Largest grid accepted by [`jacobi_residual`].
pub const JACOBI_CELL_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BracketMethod {
    PSForm,
    PsiForm,
    /// At least one operand was differentiated numerically.
    Composed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketReport {
    pub value: f64,
    pub method: BracketMethod,
    pub grid_resolution: (usize, usize),
    /// Rounding estimate: a few ulps of the integral of |integrand|.
    pub estimated_error: f64,
}

fn ps_integral(e: &HybridEnsemble, a: &(RealField, RealField), b: &(RealField, RealField)) -> (f64, f64) {
    let mut acc = 0.0;
    let mut abs = 0.0;
    Zip::from(&a.0).and(&a.1).and(&b.0).and(&b.1).for_each(|&ap, &as_, &bp, &bs| {
        let t = ap * bs - bp * as_;
        acc += t;
        abs += (ap * bs).abs() + (bp * as_).abs();
    });
    let w = e.grid().cell_weight();
    (acc * w, abs * w)
}

fn error_estimate(abs_integral: f64, n: usize) -> f64 {
    4.0 * f64::EPSILON * abs_integral * (n as f64).sqrt()
}

/// {A,B} = integral of (dA/dP dB/dS - dB/dP dA/dS), using analytic derivatives only.
pub fn poisson_bracket_ps(a: &dyn Functional, b: &dyn Functional, e: &HybridEnsemble) -> Result<BracketReport> {
    poisson_bracket_ps_with(a, b, e, None)
}

/// As [`poisson_bracket_ps`], with numerical derivatives at step `eps` for
/// operands lacking analytic ones (None disables the fallback).
pub fn poisson_bracket_ps_with(a: &dyn Functional, b: &dyn Functional, e: &HybridEnsemble, eps: Option<f64>) -> Result<BracketReport> {
    let numeric = crate::observables::analytic_ps_derivatives(a, e).is_none()
        || crate::observables::analytic_ps_derivatives(b, e).is_none();
    let da = variational_derivatives(a, e, eps)?;
    let db = variational_derivatives(b, e, eps)?;
    let (value, abs) = ps_integral(e, &da, &db);
    Ok(BracketReport {
        value,
        method: if numeric { BracketMethod::Composed } else { BracketMethod::PSForm },
        grid_resolution: e.grid().shape(),
        estimated_error: error_estimate(abs, e.grid().n_cells()),
    })
}

/// {A,B} = (2/hbar) Im integral of (dA/dpsi) conj(dB/dpsi).
pub fn poisson_bracket_psi(a: &dyn Functional, b: &dyn Functional, e: &HybridEnsemble) -> Result<BracketReport> {
    let da = analytic_psi_derivative(a, e).ok_or_else(|| HybridError::MissingDerivatives(a.label()))??;
    let db = analytic_psi_derivative(b, e).ok_or_else(|| HybridError::MissingDerivatives(b.label()))??;
    let mut acc = 0.0;
    let mut abs = 0.0;
    Zip::from(&da).and(&db).for_each(|&u, &v| {
        acc += (u * v.conj()).im;
        abs += u.norm() * v.norm();
    });
    let scale = 2.0 / e.hbar() * e.grid().cell_weight();
    Ok(BracketReport {
        value: acc * scale,
        method: BracketMethod::PsiForm,
        grid_resolution: e.grid().shape(),
        estimated_error: error_estimate(abs * scale, e.grid().n_cells()),
    })
}

/// The functional e -> {A,B}[e]; it exposes no analytic derivatives.
#[derive(Clone)]
pub struct BracketFunctional {
    pub a: Arc<dyn Functional>,
    pub b: Arc<dyn Functional>,
}

impl BracketFunctional {
    pub fn new(a: Arc<dyn Functional>, b: Arc<dyn Functional>) -> Self {
        BracketFunctional { a, b }
    }
}

impl Functional for BracketFunctional {
    fn label(&self) -> String {
        format!("{{{},{}}}", self.a.label(), self.b.label())
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        Ok(poisson_bracket_ps(self.a.as_ref(), self.b.as_ref(), e)?.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

impl IdentityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        IdentityCheck { lhs, rhs, residual: (lhs - rhs).abs() }
    }
}

/// {C_f, C_g} against C_{{f,g}}.
pub fn verify_cc_homomorphism(f: &PhaseFunction, g: &PhaseFunction, e: &HybridEnsemble) -> Result<IdentityCheck> {
    let lhs = poisson_bracket_ps(&ClassicalObservable::new(f.clone()), &ClassicalObservable::new(g.clone()), e)?.value;
    let rhs = ClassicalObservable::new(f.poisson(g)).value(e)?;
    Ok(IdentityCheck::new(lhs, rhs))
}

/// {Q_M, Q_N} against Q_{[M,N]/(i hbar)}.
pub fn verify_qq_homomorphism(m: &QuantumOperator, n: &QuantumOperator, e: &HybridEnsemble) -> Result<IdentityCheck> {
    let lhs = poisson_bracket_psi(&QuantumObservable::new(m.clone()), &QuantumObservable::new(n.clone()), e)?.value;
    let comm = m.commutator_over_ihbar(n, e.hbar())?;
    let rhs = QuantumObservable::new(comm).value(e)?;
    Ok(IdentityCheck::new(lhs, rhs))
}

/// Brackets that vanish for every ensemble by configuration separability.
/// The four momentum/position pairs need a continuous quantum sector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityResiduals {
    pub cg_qm: f64,
    pub qg_cf: f64,
    pub ck_qp: Option<f64>,
    pub cx_qq: Option<f64>,
    pub cx_qp: Option<f64>,
    pub ck_qq: Option<f64>,
}

impl SeparabilityResiduals {
    pub fn max(&self) -> f64 {
        [Some(self.cg_qm), Some(self.qg_cf), self.ck_qp, self.cx_qq, self.cx_qp, self.ck_qq]
            .into_iter()
            .flatten()
            .fold(0.0, |a, b| a.max(b.abs()))
    }
}

pub fn verify_configuration_separability(
    e: &HybridEnsemble,
    g: &PhaseFunction,
    m: &QuantumOperator,
    big_g: &QuantumOperator,
    f: &PhaseFunction,
) -> Result<SeparabilityResiduals> {
    let x = e.grid().x_coords()[0];
    if (g.dk(x, 0.0)).abs() > 0.0 || (g.dk(x, 1.7)).abs() > 0.0 {
        return Err(HybridError::InvalidParameter(format!("g must not depend on k, got `{}`", g.label())));
    }
    let offdiag = big_g.matrix().indexed_iter().any(|((i, j), z)| i != j && z.norm() > 0.0);
    if offdiag {
        return Err(HybridError::InvalidParameter(format!("G must be diagonal, got `{}`", big_g.label())));
    }
    let br = |a: &dyn Functional, b: &dyn Functional| poisson_bracket_ps(a, b, e).map(|r| r.value);
    let cg_qm = br(&ClassicalObservable::new(g.clone()), &QuantumObservable::new(m.clone()))?;
    let qg_cf = br(&QuantumObservable::new(big_g.clone()), &ClassicalObservable::new(f.clone()))?;
    let (mut ck_qp, mut cx_qq, mut cx_qp, mut ck_qq) = (None, None, None, None);
    if e.grid().is_continuous_quantum() {
        let q = QuantumObservable::new(QuantumOperator::position(e.grid())?);
        let p = QuantumObservable::new(QuantumOperator::momentum(e.grid(), e.hbar())?);
        let cx = ClassicalObservable::new(PhaseFunction::x());
        let ck = ClassicalObservable::new(PhaseFunction::k());
        ck_qp = Some(br(&ck, &p)?);
        cx_qq = Some(br(&cx, &q)?);
        cx_qp = Some(br(&cx, &p)?);
        ck_qq = Some(br(&ck, &q)?);
    }
    Ok(SeparabilityResiduals { cg_qm, qg_cf, ck_qp, cx_qq, cx_qp, ck_qq })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongSeparability {
    /// {C_{k^2/2m_c}, Q_{-hbar^2 d_q^2 / 2m_q}} by the (P,S) bracket.
    pub bracket: f64,
    /// (hbar^2 / 2 m_c m_q) integral of P S_x d/dx(R_qq / R), R = sqrt(P).
    pub integral: f64,
}

/// Kinetic-kinetic bracket and its closed-form integral, evaluated independently.
pub fn strong_separability_probe(e: &HybridEnsemble, m_c: f64, m_q: f64) -> Result<StrongSeparability> {
    let grid = e.grid();
    if !grid.is_continuous_quantum() {
        return Err(HybridError::DiscreteQuantumSector);
    }
    if !(m_c > 0.0 && m_q > 0.0) {
        return Err(HybridError::InvalidParameter("masses must be positive".into()));
    }
    let hbar = e.hbar();
    let c = ClassicalObservable::new(PhaseFunction::kinetic(m_c));
    let q = QuantumObservable::new(QuantumOperator::kinetic(grid, hbar, m_q)?);
    let bracket = poisson_bracket_ps(&c, &q, e)?.value;

    let p = e.density();
    let floor = e.p_floor();
    let r = p.mapv(f64::sqrt);
    let r_qq = grid.laplacian_q_real(&r)?;
    let ratio = Zip::from(&r).and(&r_qq).and(&p).map_collect(|&rv, &rq, &pv| if pv > floor { rq / rv } else { 0.0 });
    let d_ratio = grid.d_dx_real(&ratio)?;
    let k = e.momentum_field()?;
    let integrand = Zip::from(&p).and(&k).and(&d_ratio).map_collect(|&pv, &kv, &dv| pv * kv * dv);
    let integral = hbar * hbar / (2.0 * m_c * m_q) * grid.integrate(&integrand)?;
    Ok(StrongSeparability { bracket, integral })
}

fn same_object(a: &dyn Functional, b: &dyn Functional) -> bool {
    std::ptr::eq(a as *const dyn Functional as *const (), b as *const dyn Functional as *const ())
}

/// |{A,{B,C}} + {B,{C,A}} + {C,{A,B}}|, with the outer derivatives of each
/// inner bracket taken numerically at step `eps`.
pub fn jacobi_residual(
    a: Arc<dyn Functional>,
    b: Arc<dyn Functional>,
    c: Arc<dyn Functional>,
    e: &HybridEnsemble,
    eps: f64,
) -> Result<f64> {
    let cells = e.grid().n_cells();
    if cells > JACOBI_CELL_LIMIT {
        return Err(HybridError::ResourceGuard { cells, limit: JACOBI_CELL_LIMIT });
    }
    if same_object(a.as_ref(), b.as_ref()) || same_object(b.as_ref(), c.as_ref()) || same_object(a.as_ref(), c.as_ref()) {
        // two equal entries: the cyclic sum cancels by antisymmetry
        return Ok(0.0);
    }
    let nested = |outer: &Arc<dyn Functional>, x: &Arc<dyn Functional>, y: &Arc<dyn Functional>| -> Result<f64> {
        let inner = BracketFunctional::new(x.clone(), y.clone());
        Ok(poisson_bracket_ps_with(outer.as_ref(), &inner, e, Some(eps))?.value)
    };
    let total = nested(&a, &b, &c)? + nested(&b, &c, &a)? + nested(&c, &a, &b)?;
    Ok(total.abs())
}

/// (2/hbar) Im <M psi | N psi>, the commutator expectation evaluated directly.
pub fn commutator_expectation(m: &QuantumOperator, n: &QuantumOperator, e: &HybridEnsemble) -> Result<f64> {
    let mpsi = m.apply(e.psi())?;
    let npsi = n.apply(e.psi())?;
    let s: Complex64 = mpsi.iter().zip(npsi.iter()).map(|(u, v)| u.conj() * v).sum();
    Ok(2.0 / e.hbar() * s.im * e.grid().cell_weight())
}
