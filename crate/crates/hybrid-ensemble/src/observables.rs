//! Classical observables C_f, quantum observables Q_M and generic functionals,
//! with values and variational derivatives in (P,S) and psi form.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::ensemble::HybridEnsemble;
use crate::error::{HybridError, Result};
use crate::grid::{to_complex, ComplexField, HybridGrid, RealField};

/// A real functional A[P,S] of a hybrid ensemble.
///
/// `ps_derivatives` returns (dA/dP, dA/dS) and `psi_derivative` returns dA/dpsi,
/// both as densities with respect to the grid quadrature measure.
pub trait Functional: Send + Sync {
    fn label(&self) -> String;

    fn value(&self, e: &HybridEnsemble) -> Result<f64>;

    fn ps_derivatives(&self, _e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        None
    }

    fn psi_derivative(&self, _e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        None
    }
}

/// Chain rule from dA/dpsi to (dA/dP, dA/dS):
/// dA/dP = Re(psi dA/dpsi)/P and dA/dS = -(2/hbar) Im(psi dA/dpsi).
pub fn ps_from_psi_derivative(e: &HybridEnsemble, a_psi: &ComplexField) -> Result<(RealField, RealField)> {
    e.grid().check_shape(a_psi)?;
    let floor = e.p_floor();
    let hbar = e.hbar();
    let mut a_p = RealField::zeros(a_psi.dim());
    let mut a_s = RealField::zeros(a_psi.dim());
    Zip::from(&mut a_p).and(&mut a_s).and(e.psi()).and(a_psi).for_each(|ap, as_, &z, &d| {
        let prod = z * d;
        let p = z.norm_sqr();
        *ap = if p > floor { prod.re / p } else { 0.0 };
        *as_ = -2.0 / hbar * prod.im;
    });
    Ok((a_p, a_s))
}

/// Inverse chain rule: dA/dpsi = psi* (dA/dP - i hbar dA/dS / (2P)); zero below the floor.
pub fn psi_from_ps_derivatives(e: &HybridEnsemble, a_p: &RealField, a_s: &RealField) -> Result<ComplexField> {
    e.grid().check_shape(a_p)?;
    e.grid().check_shape(a_s)?;
    let floor = e.p_floor();
    let hbar = e.hbar();
    Ok(Zip::from(e.psi()).and(a_p).and(a_s).map_collect(|&z, &ap, &as_| {
        let p = z.norm_sqr();
        if p > floor {
            z.conj() * Complex64::new(ap, -hbar * as_ / (2.0 * p))
        } else {
            Complex64::new(0.0, 0.0)
        }
    }))
}

/// Analytic (P,S) derivatives if the functional provides them in either form.
pub fn analytic_ps_derivatives(a: &dyn Functional, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
    if let Some(r) = a.ps_derivatives(e) {
        return Some(r);
    }
    a.psi_derivative(e).map(|r| r.and_then(|d| ps_from_psi_derivative(e, &d)))
}

/// Analytic psi derivative if the functional provides one in either form.
pub fn analytic_psi_derivative(a: &dyn Functional, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
    if let Some(r) = a.psi_derivative(e) {
        return Some(r);
    }
    a.ps_derivatives(e).map(|r| r.and_then(|(p, s)| psi_from_ps_derivatives(e, &p, &s)))
}

/// Per-cell finite-difference variational derivatives.
///
/// The density at one cell is shifted by eps/w (w the cell weight) so that the
/// functional moves by eps times the derivative. Cells with P below the shift
/// use a second-order one-sided difference. The phase is shifted through
/// psi -> psi exp(i delta/hbar).
pub fn numerical_variational_derivative(a: &dyn Functional, e: &HybridEnsemble, eps: f64) -> Result<(RealField, RealField)> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(HybridError::InvalidParameter(format!("eps must lie in [1e-8, 1e-3], got {eps}")));
    }
    let grid = e.grid();
    let (nq, nx) = grid.shape();
    let h = eps / grid.cell_weight();
    let hbar = e.hbar();
    let a0 = a.value(e)?;
    let eval_at = |i: usize, j: usize, z: Complex64| -> Result<f64> {
        let mut psi = e.psi().clone();
        psi[[i, j]] = z;
        a.value(&e.with_psi(psi)?)
    };
    let scaled = |z: Complex64, p: f64, target: f64| -> Complex64 {
        if p > 0.0 {
            z * (target / p).sqrt()
        } else {
            Complex64::new(target.sqrt(), 0.0)
        }
    };
    let cells: Vec<(usize, usize)> = (0..nq).flat_map(|i| (0..nx).map(move |j| (i, j))).collect();
    let results: Vec<Result<(f64, f64)>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let z = e.psi()[[i, j]];
            let p = z.norm_sqr();
            let dp = if p > h {
                (eval_at(i, j, scaled(z, p, p + h))? - eval_at(i, j, scaled(z, p, p - h))?) / (2.0 * eps)
            } else {
                let a1 = eval_at(i, j, scaled(z, p, p + h))?;
                let a2 = eval_at(i, j, scaled(z, p, p + 2.0 * h))?;
                (-3.0 * a0 + 4.0 * a1 - a2) / (2.0 * eps)
            };
            let rot = Complex64::from_polar(1.0, h / hbar);
            let ds = (eval_at(i, j, z * rot)? - eval_at(i, j, z * rot.conj())?) / (2.0 * eps);
            Ok((dp, ds))
        })
        .collect();
    let mut d_p = RealField::zeros((nq, nx));
    let mut d_s = RealField::zeros((nq, nx));
    for (&(i, j), r) in cells.iter().zip(results) {
        let (dp, ds) = r?;
        d_p[[i, j]] = dp;
        d_s[[i, j]] = ds;
    }
    Ok((d_p, d_s))
}

/// Derivatives of `a`: analytic when available, otherwise numerical with `eps`
/// (or an error when `eps` is None).
pub fn variational_derivatives(a: &dyn Functional, e: &HybridEnsemble, eps: Option<f64>) -> Result<(RealField, RealField)> {
    match analytic_ps_derivatives(a, e) {
        Some(r) => r,
        None => match eps {
            Some(eps) => numerical_variational_derivative(a, e, eps),
            None => Err(HybridError::MissingDerivatives(a.label())),
        },
    }
}

type Eval = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Real phase-space function f(x,k) with its gradient.
#[derive(Clone)]
pub struct PhaseFunction {
    label: String,
    f: Eval,
    df_dx: Eval,
    df_dk: Eval,
}

impl fmt::Debug for PhaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhaseFunction({})", self.label)
    }
}

impl PhaseFunction {
    pub fn new<F, Fx, Fk>(label: impl Into<String>, f: F, df_dx: Fx, df_dk: Fk) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        Fx: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        Fk: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        PhaseFunction { label: label.into(), f: Arc::new(f), df_dx: Arc::new(df_dx), df_dk: Arc::new(df_dk) }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn eval(&self, x: f64, k: f64) -> f64 {
        (self.f)(x, k)
    }

    #[inline]
    pub fn dx(&self, x: f64, k: f64) -> f64 {
        (self.df_dx)(x, k)
    }

    #[inline]
    pub fn dk(&self, x: f64, k: f64) -> f64 {
        (self.df_dk)(x, k)
    }

    pub fn one() -> Self {
        Self::new("1", |_, _| 1.0, |_, _| 0.0, |_, _| 0.0)
    }

    pub fn x() -> Self {
        Self::new("x", |x, _| x, |_, _| 1.0, |_, _| 0.0)
    }

    pub fn k() -> Self {
        Self::new("k", |_, k| k, |_, _| 0.0, |_, _| 1.0)
    }

    pub fn x2() -> Self {
        Self::new("x2", |x, _| x * x, |x, _| 2.0 * x, |_, _| 0.0)
    }

    pub fn k2() -> Self {
        Self::new("k2", |_, k| k * k, |_, _| 0.0, |_, k| 2.0 * k)
    }

    pub fn xk() -> Self {
        Self::new("xk", |x, k| x * k, |_, k| k, |x, _| x)
    }

    /// k^2 / 2m
    pub fn kinetic(m: f64) -> Self {
        Self::new(format!("kinetic(m={m})"), move |_, k| k * k / (2.0 * m), |_, _| 0.0, move |_, k| k / m)
    }

    /// k^2/2m + m Omega^2 x^2 / 2
    pub fn harmonic(m: f64, omega: f64) -> Self {
        let c = m * omega * omega;
        Self::new(
            format!("ho(m={m},omega={omega})"),
            move |x, k| k * k / (2.0 * m) + 0.5 * c * x * x,
            move |x, _| c * x,
            move |_, k| k / m,
        )
    }

    /// k^2/2m + g x^4 / 4
    pub fn quartic(m: f64, g: f64) -> Self {
        Self::new(
            format!("quartic(m={m},g={g})"),
            move |x, k| k * k / (2.0 * m) + 0.25 * g * x.powi(4),
            move |x, _| g * x.powi(3),
            move |_, k| k / m,
        )
    }

    /// x^4 / 4
    pub fn x4_quarter() -> Self {
        Self::new("x4/4", |x, _| 0.25 * x.powi(4), |x, _| x.powi(3), |_, _| 0.0)
    }

    /// a x^2 + b x k + c k^2 + d x + e k + f0
    pub fn quadratic(a: f64, b: f64, c: f64, d: f64, e: f64, f0: f64) -> Self {
        Self::new(
            format!("quadratic({a},{b},{c},{d},{e},{f0})"),
            move |x, k| a * x * x + b * x * k + c * k * k + d * x + e * k + f0,
            move |x, k| 2.0 * a * x + b * k + d,
            move |x, k| b * x + 2.0 * c * k + e,
        )
    }

    pub fn scaled(&self, c: f64) -> Self {
        let (f, fx, fk) = (self.f.clone(), self.df_dx.clone(), self.df_dk.clone());
        Self::new(format!("{c}*{}", self.label), move |x, k| c * f(x, k), move |x, k| c * fx(x, k), move |x, k| c * fk(x, k))
    }

    pub fn product(&self, other: &PhaseFunction) -> Self {
        let (f, fx, fk) = (self.f.clone(), self.df_dx.clone(), self.df_dk.clone());
        let (g, gx, gk) = (other.f.clone(), other.df_dx.clone(), other.df_dk.clone());
        let (f2, g2) = (f.clone(), g.clone());
        let (f3, g3) = (f.clone(), g.clone());
        Self::new(
            format!("({})*({})", self.label, other.label),
            move |x, k| f(x, k) * g(x, k),
            move |x, k| fx(x, k) * g2(x, k) + f2(x, k) * gx(x, k),
            move |x, k| fk(x, k) * g3(x, k) + f3(x, k) * gk(x, k),
        )
    }

    /// Phase-space bracket {f,g} = f_x g_k - f_k g_x. Its gradient uses
    /// fourth-order central differences of the analytic gradients.
    pub fn poisson(&self, other: &PhaseFunction) -> Self {
        let (fx, fk) = (self.df_dx.clone(), self.df_dk.clone());
        let (gx, gk) = (other.df_dx.clone(), other.df_dk.clone());
        let br: Eval = Arc::new(move |x, k| fx(x, k) * gk(x, k) - fk(x, k) * gx(x, k));
        let (b1, b2, b3) = (br.clone(), br.clone(), br);
        Self::new(
            format!("{{{},{}}}", self.label, other.label),
            move |x, k| b1(x, k),
            move |x, k| central4(|t| b2(t, k), x),
            move |x, k| central4(|t| b3(x, t), k),
        )
    }

    /// Max relative deviation between analytic gradients and fourth-order
    /// differences of f on the lattice {-2,-1.5,...,2}^2.
    pub fn gradient_consistency(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..9 {
            for j in 0..9 {
                let (x, k) = (-2.0 + 0.5 * i as f64, -2.0 + 0.5 * j as f64);
                let nx = central4(|t| self.eval(t, k), x);
                let nk = central4(|t| self.eval(x, t), k);
                let ex = (nx - self.dx(x, k)).abs() / self.dx(x, k).abs().max(1.0);
                let ek = (nk - self.dk(x, k)).abs() / self.dk(x, k).abs().max(1.0);
                worst = worst.max(ex).max(ek);
            }
        }
        worst
    }

    /// Registry lookup: "1", "x", "k", "x2", "k2", "xk", "x4/4",
    /// "kinetic(m=..)", "ho(m=..,omega=..)", "quartic(m=..,g=..)".
    pub fn from_label(label: &str) -> Result<Self> {
        let (name, params) = parse_label(label)?;
        let get = |key: &str, default: f64| -> Result<f64> { lookup_param(&params, key, default, label) };
        let f = match name.as_str() {
            "1" | "one" => Self::one(),
            "x" => Self::x(),
            "k" => Self::k(),
            "x2" => Self::x2(),
            "k2" => Self::k2(),
            "xk" => Self::xk(),
            "x4/4" => Self::x4_quarter(),
            "kinetic" => Self::kinetic(get("m", 1.0)?),
            "ho" => Self::harmonic(get("m", 1.0)?, get("omega", 1.0)?),
            "quartic" => Self::quartic(get("m", 1.0)?, get("g", 1.0)?),
            _ => return Err(HybridError::InvalidParameter(format!("unknown phase function `{label}`"))),
        };
        Ok(f)
    }
}

fn central4<F: Fn(f64) -> f64>(f: F, t: f64) -> f64 {
    let h = 1e-3 * t.abs().max(1.0);
    (-f(t + 2.0 * h) + 8.0 * f(t + h) - 8.0 * f(t - h) + f(t - 2.0 * h)) / (12.0 * h)
}

/// Splits "name(a=1,b=2)" into the name and key/value pairs.
pub fn parse_label(label: &str) -> Result<(String, Vec<(String, f64)>)> {
    let label = label.trim();
    let Some(open) = label.find('(') else {
        return Ok((label.to_string(), Vec::new()));
    };
    if !label.ends_with(')') {
        return Err(HybridError::InvalidParameter(format!("malformed label `{label}`")));
    }
    let name = label[..open].trim().to_string();
    let inner = &label[open + 1..label.len() - 1];
    let mut params = Vec::new();
    for part in inner.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = match part.split_once('=') {
            Some((k, v)) => (k.trim().to_string(), v.trim()),
            None => (String::new(), part),
        };
        let v: f64 = v
            .parse()
            .map_err(|_| HybridError::InvalidParameter(format!("bad number `{v}` in label `{label}`")))?;
        params.push((k, v));
    }
    Ok((name, params))
}

fn lookup_param(params: &[(String, f64)], key: &str, default: f64, label: &str) -> Result<f64> {
    for (k, _) in params {
        if !k.is_empty() && !["m", "omega", "g"].contains(&k.as_str()) {
            return Err(HybridError::InvalidParameter(format!("unknown parameter `{k}` in `{label}`")));
        }
    }
    Ok(params.iter().find(|(k, _)| k == key).map_or(default, |(_, v)| *v))
}

/// Dense Hermitian operator on the quantum sector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumOperator {
    label: String,
    matrix: Array2<Complex64>,
}

impl QuantumOperator {
    pub fn new(label: impl Into<String>, matrix: Array2<Complex64>) -> Result<Self> {
        let label = label.into();
        let (r, c) = matrix.dim();
        if r != c {
            return Err(HybridError::DimensionMismatch { expected: r, found: c });
        }
        let scale = matrix.iter().fold(1.0f64, |a, z| a.max(z.norm()));
        let mut dev = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                dev = dev.max((matrix[[i, j]] - matrix[[j, i]].conj()).norm());
            }
        }
        if dev > 1e-12 * scale {
            return Err(HybridError::NotHermitian { label, deviation: dev });
        }
        Ok(QuantumOperator { label, matrix })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn identity(d: usize) -> Self {
        QuantumOperator { label: "identity".into(), matrix: Array2::eye(d) }
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    pub fn pauli_x() -> Self {
        let m = ndarray::arr2(&[[Self::c(0., 0.), Self::c(1., 0.)], [Self::c(1., 0.), Self::c(0., 0.)]]);
        QuantumOperator { label: "sigma_x".into(), matrix: m }
    }

    pub fn pauli_y() -> Self {
        let m = ndarray::arr2(&[[Self::c(0., 0.), Self::c(0., -1.)], [Self::c(0., 1.), Self::c(0., 0.)]]);
        QuantumOperator { label: "sigma_y".into(), matrix: m }
    }

    pub fn pauli_z() -> Self {
        let m = ndarray::arr2(&[[Self::c(1., 0.), Self::c(0., 0.)], [Self::c(0., 0.), Self::c(-1., 0.)]]);
        QuantumOperator { label: "sigma_z".into(), matrix: m }
    }

    pub fn diagonal(label: impl Into<String>, values: &[f64]) -> Self {
        let mut m = Array2::zeros((values.len(), values.len()));
        for (i, v) in values.iter().enumerate() {
            m[[i, i]] = Complex64::new(*v, 0.0);
        }
        QuantumOperator { label: label.into(), matrix: m }
    }

    /// diag(q) in the grid basis.
    pub fn position(grid: &HybridGrid) -> Result<Self> {
        let q = grid.q_coords()?;
        Ok(Self::diagonal("q", q.as_slice().expect("contiguous coordinates")))
    }

    /// G(q) in the grid basis.
    pub fn potential<F: Fn(f64) -> f64>(grid: &HybridGrid, label: impl Into<String>, v: F) -> Result<Self> {
        let q = grid.q_coords()?;
        let vals: Vec<f64> = q.iter().map(|&q| v(q)).collect();
        Ok(Self::diagonal(label, &vals))
    }

    /// (hbar/i) D_q with D the grid derivative matrix.
    pub fn momentum(grid: &HybridGrid, hbar: f64) -> Result<Self> {
        let d = grid.derivative_matrix_q()?;
        let m = d.mapv(|v| Complex64::new(0.0, -hbar * v));
        Self::new("p", m)
    }

    /// -(hbar^2 / 2m) D_q D_q.
    pub fn kinetic(grid: &HybridGrid, hbar: f64, mass: f64) -> Result<Self> {
        let d = grid.derivative_matrix_q()?;
        let dd = d.dot(&d);
        let m = dd.mapv(|v| Complex64::new(-hbar * hbar / (2.0 * mass) * v, 0.0));
        Self::new(format!("kinetic(m={mass})"), m)
    }

    /// [self, other] / (i hbar), Hermitian when both factors are.
    pub fn commutator_over_ihbar(&self, other: &QuantumOperator, hbar: f64) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(HybridError::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        let comm = self.matrix.dot(&other.matrix) - other.matrix.dot(&self.matrix);
        let m = comm.mapv(|z| z / Complex64::new(0.0, hbar));
        // restore exact Hermiticity lost to rounding
        let sym = (&m + &m.t().mapv(|z| z.conj())).mapv(|z| z * 0.5);
        Self::new(format!("[{},{}]/(i hbar)", self.label, other.label), sym)
    }

    pub fn scaled(&self, c: f64) -> Self {
        QuantumOperator { label: format!("{c}*{}", self.label), matrix: self.matrix.mapv(|z| z * c) }
    }

    pub fn sum(&self, other: &QuantumOperator) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(HybridError::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(QuantumOperator { label: format!("{}+{}", self.label, other.label), matrix: &self.matrix + &other.matrix })
    }

    /// M psi, acting on the quantum index of every classical column.
    pub fn apply(&self, psi: &ComplexField) -> Result<ComplexField> {
        if psi.nrows() != self.dim() {
            return Err(HybridError::DimensionMismatch { expected: self.dim(), found: psi.nrows() });
        }
        Ok(self.matrix.dot(psi))
    }

    /// Integral of psi* M psi (complex, imaginary part is rounding only).
    pub fn expectation_complex(&self, e: &HybridEnsemble) -> Result<Complex64> {
        let mpsi = self.apply(e.psi())?;
        let s: Complex64 = e.psi().iter().zip(mpsi.iter()).map(|(a, b)| a.conj() * b).sum();
        Ok(s * e.grid().cell_weight())
    }

    /// Registry lookup: "sigma_x", "sigma_y", "sigma_z", "identity", "q", "p",
    /// "kinetic(m=..)", "diag(a,b,...)".
    pub fn from_label(label: &str, grid: &HybridGrid, hbar: f64) -> Result<Self> {
        let (name, params) = parse_label(label)?;
        let op = match name.as_str() {
            "sigma_x" => Self::pauli_x(),
            "sigma_y" => Self::pauli_y(),
            "sigma_z" => Self::pauli_z(),
            "identity" => Self::identity(grid.n_quantum()),
            "q" => Self::position(grid)?,
            "p" => Self::momentum(grid, hbar)?,
            "kinetic" => Self::kinetic(grid, hbar, lookup_param(&params, "m", 1.0, label)?)?,
            "diag" => {
                let vals: Vec<f64> = params.iter().map(|(_, v)| *v).collect();
                Self::diagonal(label, &vals)
            }
            _ => return Err(HybridError::InvalidParameter(format!("unknown operator `{label}`"))),
        };
        Ok(op)
    }
}

/// C_f = integral of P f(x, dS/dx).
#[derive(Clone, Debug)]
pub struct ClassicalObservable {
    pub f: PhaseFunction,
}

impl ClassicalObservable {
    pub fn new(f: PhaseFunction) -> Self {
        ClassicalObservable { f }
    }

    /// f(x,k) and f_k(x,k) sampled on the grid with the ensemble momentum field.
    fn sampled(&self, e: &HybridEnsemble) -> Result<(RealField, RealField)> {
        let k = e.momentum_field()?;
        let x = e.grid().x_coords();
        let mut fv = RealField::zeros(k.dim());
        let mut fk = RealField::zeros(k.dim());
        for ((i, j), &kv) in k.indexed_iter() {
            fv[[i, j]] = self.f.eval(x[j], kv);
            fk[[i, j]] = self.f.dk(x[j], kv);
        }
        Ok((fv, fk))
    }
}

impl Functional for ClassicalObservable {
    fn label(&self) -> String {
        format!("C:{}", self.f.label())
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        let (fv, _) = self.sampled(e)?;
        let p = e.density();
        let mut acc = 0.0;
        for (pv, fv) in p.iter().zip(fv.iter()) {
            if *pv > 0.0 {
                if !fv.is_finite() {
                    return Err(HybridError::NonFinite(format!("{} on the support", self.label())));
                }
                acc += pv * fv;
            }
        }
        Ok(acc * e.grid().cell_weight())
    }

    /// dC/dP = f(x,k), dC/dS = -d/dx (P f_k).
    fn ps_derivatives(&self, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        Some((|| {
            let (fv, fk) = self.sampled(e)?;
            let flux = e.density() * &fk;
            let a_s = -e.grid().d_dx_real(&flux)?;
            Ok((fv, a_s))
        })())
    }

    /// dC/dpsi = psi* f + (i hbar/2) [ (psi*/psi) f_k D psi + D(psi* f_k) ].
    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        Some((|| {
            let (fv, fk) = self.sampled(e)?;
            let g = e.grid();
            let psi = e.psi();
            let dpsi = g.d_dx(psi)?;
            let conj_fk = Zip::from(psi).and(&fk).map_collect(|&z, &f| z.conj() * f);
            let d_conj_fk = g.d_dx(&conj_fk)?;
            let floor = e.p_floor();
            let half_ih = Complex64::new(0.0, 0.5 * e.hbar());
            let mut out = ComplexField::zeros(psi.dim());
            Zip::from(&mut out)
                .and(psi)
                .and(&fv)
                .and(&fk)
                .and(&dpsi)
                .and(&d_conj_fk)
                .for_each(|o, &z, &f, &fkv, &dz, &dcf| {
                    let p = z.norm_sqr();
                    let ratio_term = if p > floor { z.conj() * z.conj() / p * fkv * dz } else { Complex64::new(0.0, 0.0) };
                    *o = z.conj() * f + half_ih * (ratio_term + dcf);
                });
            Ok(out)
        })())
    }
}

/// Q_M = integral of psi* M psi.
#[derive(Clone, Debug)]
pub struct QuantumObservable {
    pub m: QuantumOperator,
}

impl QuantumObservable {
    pub fn new(m: QuantumOperator) -> Self {
        QuantumObservable { m }
    }
}

impl Functional for QuantumObservable {
    fn label(&self) -> String {
        format!("Q:{}", self.m.label())
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        Ok(self.m.expectation_complex(e)?.re)
    }

    /// dQ/dpsi = (M psi)*.
    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        Some(self.m.apply(e.psi()).map(|m| m.mapv(|z| z.conj())))
    }
}

/// I[P,S] = integral of P.
#[derive(Clone, Copy, Debug, Default)]
pub struct Normalization;

impl Functional for Normalization {
    fn label(&self) -> String {
        "I".into()
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        Ok(e.norm())
    }

    fn ps_derivatives(&self, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        let shape = e.grid().shape();
        Some(Ok((RealField::ones(shape), RealField::zeros(shape))))
    }
}

/// Integral of P^2: not homogeneous of degree one.
#[derive(Clone, Copy, Debug, Default)]
pub struct DensitySquared;

impl Functional for DensitySquared {
    fn label(&self) -> String {
        "int P^2".into()
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        Ok(e.density().mapv(|p| p * p).sum() * e.grid().cell_weight())
    }

    fn ps_derivatives(&self, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        Some(Ok((e.density() * 2.0, RealField::zeros(e.grid().shape()))))
    }
}

/// Sum of c_i A_i; derivatives are available when every term provides them.
#[derive(Clone)]
pub struct LinearCombination {
    pub terms: Vec<(f64, Arc<dyn Functional>)>,
}

impl LinearCombination {
    pub fn new(terms: Vec<(f64, Arc<dyn Functional>)>) -> Self {
        LinearCombination { terms }
    }
}

impl Functional for LinearCombination {
    fn label(&self) -> String {
        self.terms.iter().map(|(c, a)| format!("{c}*{}", a.label())).collect::<Vec<_>>().join(" + ")
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        let mut acc = 0.0;
        for (c, a) in &self.terms {
            acc += c * a.value(e)?;
        }
        Ok(acc)
    }

    fn ps_derivatives(&self, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        let shape = e.grid().shape();
        let mut dp = RealField::zeros(shape);
        let mut ds = RealField::zeros(shape);
        for (c, a) in &self.terms {
            match analytic_ps_derivatives(a.as_ref(), e)? {
                Ok((p, s)) => {
                    dp.scaled_add(*c, &p);
                    ds.scaled_add(*c, &s);
                }
                Err(err) => return Some(Err(err)),
            }
        }
        Some(Ok((dp, ds)))
    }

    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        let mut out = ComplexField::zeros(e.grid().shape());
        for (c, a) in &self.terms {
            match a.psi_derivative(e)? {
                Ok(d) => out.scaled_add(Complex64::new(*c, 0.0), &d),
                Err(err) => return Some(Err(err)),
            }
        }
        Some(Ok(out))
    }
}

type ValueFn = Arc<dyn Fn(&HybridEnsemble) -> Result<f64> + Send + Sync>;
type PsFn = Arc<dyn Fn(&HybridEnsemble) -> Result<(RealField, RealField)> + Send + Sync>;
type PsiFn = Arc<dyn Fn(&HybridEnsemble) -> Result<ComplexField> + Send + Sync>;

/// Functional assembled from closures.
#[derive(Clone)]
pub struct CustomFunctional {
    label: String,
    value: ValueFn,
    ps: Option<PsFn>,
    psi: Option<PsiFn>,
}

impl CustomFunctional {
    pub fn new<F>(label: impl Into<String>, value: F) -> Self
    where
        F: Fn(&HybridEnsemble) -> Result<f64> + Send + Sync + 'static,
    {
        CustomFunctional { label: label.into(), value: Arc::new(value), ps: None, psi: None }
    }

    pub fn with_ps_derivatives<F>(mut self, f: F) -> Self
    where
        F: Fn(&HybridEnsemble) -> Result<(RealField, RealField)> + Send + Sync + 'static,
    {
        self.ps = Some(Arc::new(f));
        self
    }

    pub fn with_psi_derivative<F>(mut self, f: F) -> Self
    where
        F: Fn(&HybridEnsemble) -> Result<ComplexField> + Send + Sync + 'static,
    {
        self.psi = Some(Arc::new(f));
        self
    }
}

impl Functional for CustomFunctional {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        (self.value)(e)
    }

    fn ps_derivatives(&self, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        self.ps.as_ref().map(|f| f(e))
    }

    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        self.psi.as_ref().map(|f| f(e))
    }
}

/// Expectation of a configuration-space function f(q, x): integral of P f.
#[derive(Clone)]
pub struct ConfigurationObservable {
    label: String,
    field: RealField,
}

impl ConfigurationObservable {
    pub fn new<F: Fn(f64, f64) -> f64>(grid: &HybridGrid, label: impl Into<String>, f: F) -> Self {
        ConfigurationObservable { label: label.into(), field: grid.real_field(f) }
    }

    pub fn field(&self) -> &RealField {
        &self.field
    }
}

impl fmt::Debug for ConfigurationObservable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConfigurationObservable").field("label", &self.label).finish()
    }
}

impl Functional for ConfigurationObservable {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn value(&self, e: &HybridEnsemble) -> Result<f64> {
        e.grid().check_shape(&self.field)?;
        let s: f64 = e.psi().iter().zip(self.field.iter()).map(|(z, f)| z.norm_sqr() * f).sum();
        Ok(s * e.grid().cell_weight())
    }

    fn ps_derivatives(&self, e: &HybridEnsemble) -> Option<Result<(RealField, RealField)>> {
        Some(e.grid().check_shape(&self.field).map(|_| (self.field.clone(), RealField::zeros(self.field.dim()))))
    }

    fn psi_derivative(&self, e: &HybridEnsemble) -> Option<Result<ComplexField>> {
        Some(
            e.grid()
                .check_shape(&self.field)
                .map(|_| Zip::from(e.psi()).and(&self.field).map_collect(|z, &f| z.conj() * f)),
        )
    }
}

pub fn classical_expectation(e: &HybridEnsemble, f: &PhaseFunction) -> Result<f64> {
    ClassicalObservable::new(f.clone()).value(e)
}

pub fn quantum_expectation(e: &HybridEnsemble, m: &QuantumOperator) -> Result<f64> {
    QuantumObservable::new(m.clone()).value(e)
}

pub fn classical_variational_derivatives(e: &HybridEnsemble, f: &PhaseFunction) -> Result<(RealField, RealField)> {
    ClassicalObservable::new(f.clone()).ps_derivatives(e).expect("analytic derivatives")
}

/// M psi, i.e. dQ_M/dpsi*.
pub fn quantum_wavefunction_derivative(e: &HybridEnsemble, m: &QuantumOperator) -> Result<ComplexField> {
    m.apply(e.psi())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogeneityResiduals {
    /// |A[lambda P, S] - lambda A[P,S]|
    pub residual_scale: f64,
    /// |A[P,S] - integral of P dA/dP|
    pub residual_local: f64,
}

/// Degree-one homogeneity and local-density representation of a functional.
/// Uses analytic dA/dP when available, otherwise numerical derivatives (eps 1e-6).
pub fn homogeneity_check(a: &dyn Functional, e: &HybridEnsemble, lambda: f64) -> Result<HomogeneityResiduals> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(HybridError::InvalidParameter(format!("lambda must be non-negative, got {lambda}")));
    }
    let scaled = e.with_psi(e.psi().mapv(|z| z * lambda.sqrt()))?;
    let a0 = a.value(e)?;
    let residual_scale = (a.value(&scaled)? - lambda * a0).abs();
    let (dp, _) = variational_derivatives(a, e, Some(1e-6))?;
    let local = e.grid().integrate(&(e.density() * &dp))?;
    Ok(HomogeneityResiduals { residual_scale, residual_local: (a0 - local).abs() })
}

/// Quantum-sector vector helper.
pub fn normalize_vector(v: &Array1<Complex64>, weight: f64) -> Result<Array1<Complex64>> {
    let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>() * weight;
    if !(n > 0.0) {
        return Err(HybridError::ZeroMass);
    }
    Ok(v.mapv(|z| z / n.sqrt()))
}

/// Sample f(x,k) on the grid given a momentum field (helper for tests and reports).
pub fn sample_phase_function(grid: &HybridGrid, f: &PhaseFunction, k: &RealField) -> RealField {
    let x = grid.x_coords();
    Array2::from_shape_fn(k.dim(), |(i, j)| f.eval(x[j], k[[i, j]]))
}

/// Complex copy of a real field (re-exported convenience).
pub fn complexify(field: &RealField) -> ComplexField {
    to_complex(field)
}
