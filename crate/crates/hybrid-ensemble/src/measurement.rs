//! Pointer measurement of a quantum observable by a classical pointer.
//!
//! During the interaction psi obeys i hbar psi_t = kappa(t) (hbar/i) d_x M psi,
//! so each eigenspace of M is carried rigidly along x by K lambda_n, with
//! K the time integral of kappa.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ensemble::{gaussian_packet, HybridEnsemble};
use crate::error::{HybridError, Result};
use crate::grid::{ComplexField, HybridGrid};
use crate::observables::QuantumOperator;

/// Support threshold relative to the peak of each displaced pointer density.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KappaProfile {
    /// kappa = (K/T)(1 - cos(2 pi t / T)) on [0,T]
    SmoothBump,
    /// kappa = K/T on [0,T]
    Constant,
}

/// One eigenvalue of M with the projector onto its eigenspace.
#[derive(Clone, Debug)]
pub struct Eigenspace {
    pub lambda: f64,
    pub projector: Array2<Complex64>,
    pub multiplicity: usize,
}

/// Eigendecomposition of a Hermitian operator with degenerate eigenvalues
/// grouped into projectors.
pub fn spectral_decomposition(m: &QuantumOperator) -> Result<Vec<Eigenspace>> {
    let d = m.dim();
    let mat = DMatrix::from_fn(d, d, |i, j| m.matrix()[[i, j]]);
    let eig = mat.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut spaces: Vec<Eigenspace> = Vec::new();
    for idx in order {
        let lambda = eig.eigenvalues[idx];
        let v = eig.eigenvectors.column(idx);
        let outer = Array2::from_shape_fn((d, d), |(i, j)| v[i] * v[j].conj());
        match spaces.last_mut() {
            Some(last) if (lambda - last.lambda).abs() <= tol => {
                let n = last.multiplicity as f64;
                last.lambda = (last.lambda * n + lambda) / (n + 1.0);
                last.projector = &last.projector + &outer;
                last.multiplicity += 1;
            }
            _ => spaces.push(Eigenspace { lambda, projector: outer, multiplicity: 1 }),
        }
    }
    let mut sum = Array2::<Complex64>::zeros((d, d));
    for s in &spaces {
        sum = sum + &s.projector;
    }
    let dev = sum
        .indexed_iter()
        .map(|((i, j), z)| (z - if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) }).norm())
        .fold(0.0, f64::max);
    if dev > 1e-10 {
        return Err(HybridError::InvalidParameter(format!("eigenprojectors do not resolve the identity (deviation {dev:e})")));
    }
    Ok(spaces)
}

#[derive(Clone, Debug)]
pub struct MeasurementSetup {
    operator: QuantumOperator,
    spaces: Vec<Eigenspace>,
    big_k: f64,
    duration: f64,
    profile: KappaProfile,
    pointer: Array1<Complex64>,
}

impl MeasurementSetup {
    /// `pointer` is the initial classical-sector factor; it is normalized here.
    pub fn new(
        grid: &HybridGrid,
        operator: QuantumOperator,
        big_k: f64,
        duration: f64,
        profile: KappaProfile,
        pointer: Array1<Complex64>,
    ) -> Result<Self> {
        if !big_k.is_finite() || big_k == 0.0 {
            return Err(HybridError::InvalidParameter(format!("coupling K must be finite and nonzero, got {big_k}")));
        }
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(HybridError::InvalidParameter(format!("duration must be positive, got {duration}")));
        }
        if operator.dim() != grid.n_quantum() {
            return Err(HybridError::DimensionMismatch { expected: grid.n_quantum(), found: operator.dim() });
        }
        if pointer.len() != grid.n_x() {
            return Err(HybridError::DimensionMismatch { expected: grid.n_x(), found: pointer.len() });
        }
        let n = pointer.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dx();
        if !(n > 0.0) {
            return Err(HybridError::ZeroMass);
        }
        let pointer = pointer.mapv(|z| z / n.sqrt());
        let spaces = spectral_decomposition(&operator)?;
        Ok(MeasurementSetup { operator, spaces, big_k, duration, profile, pointer })
    }

    /// Gaussian pointer of width `sigma` centred at x = 0, smooth bump profile.
    pub fn gaussian(grid: &HybridGrid, operator: QuantumOperator, big_k: f64, duration: f64, sigma: f64) -> Result<Self> {
        let pointer = gaussian_packet(grid, 0.0, sigma, 0.0, 1.0);
        Self::new(grid, operator, big_k, duration, KappaProfile::SmoothBump, pointer)
    }

    pub fn operator(&self) -> &QuantumOperator {
        &self.operator
    }

    pub fn eigenspaces(&self) -> &[Eigenspace] {
        &self.spaces
    }

    pub fn big_k(&self) -> f64 {
        self.big_k
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn profile(&self) -> KappaProfile {
        self.profile
    }

    pub fn pointer(&self) -> &Array1<Complex64> {
        &self.pointer
    }

    pub fn kappa(&self, t: f64) -> f64 {
        if !(0.0..=self.duration).contains(&t) {
            return 0.0;
        }
        let mean = self.big_k / self.duration;
        match self.profile {
            KappaProfile::SmoothBump => mean * (1.0 - (2.0 * PI * t / self.duration).cos()),
            KappaProfile::Constant => mean,
        }
    }

    pub fn kappa_max(&self) -> f64 {
        let mean = (self.big_k / self.duration).abs();
        match self.profile {
            KappaProfile::SmoothBump => 2.0 * mean,
            KappaProfile::Constant => mean,
        }
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.spaces.iter().fold(0.0, |a, s| a.max(s.lambda.abs()))
    }

    /// (lambda_n, <psi_Q|E_n|psi_Q>) for a normalized quantum vector.
    pub fn branch_probabilities(&self, psi_q: &Array1<Complex64>) -> Vec<(f64, f64)> {
        let n = psi_q.iter().map(|z| z.norm_sqr()).sum::<f64>();
        self.spaces
            .iter()
            .map(|s| {
                let proj = s.projector.dot(psi_q);
                let p: f64 = psi_q.iter().zip(proj.iter()).map(|(a, b)| (a.conj() * b).re).sum();
                (s.lambda, p / n)
            })
            .collect()
    }

    fn check_wrap(&self, grid: &HybridGrid) -> Result<()> {
        let shift = self.big_k.abs() * self.max_abs_eigenvalue();
        let half = 0.5 * grid.x_length();
        if shift > half {
            return Err(HybridError::WrapAround { shift, half_box: half });
        }
        Ok(())
    }

    /// Pointer density displaced by K lambda for each eigenspace.
    pub fn displaced_pointers(&self, grid: &HybridGrid) -> Result<Vec<Array1<f64>>> {
        self.spaces
            .iter()
            .map(|s| Ok(grid.translate_x_1d(&self.pointer, self.big_k * s.lambda)?.mapv(|z| z.norm_sqr())))
            .collect()
    }

    /// Cells where each displaced pointer density exceeds the support threshold.
    pub fn branch_supports(&self, grid: &HybridGrid) -> Result<Vec<Vec<bool>>> {
        Ok(self
            .displaced_pointers(grid)?
            .into_iter()
            .map(|p| {
                let peak = p.iter().fold(0.0f64, |a, &v| a.max(v));
                p.iter().map(|&v| v > SUPPORT_THRESHOLD * peak).collect()
            })
            .collect())
    }

    /// Largest pairwise overlap integral of sqrt(P_n P_m) between displaced pointers.
    pub fn overlap_metric(&self, grid: &HybridGrid) -> Result<f64> {
        let ps = self.displaced_pointers(grid)?;
        let mut worst = 0.0f64;
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                let o: f64 = ps[i].iter().zip(ps[j].iter()).map(|(a, b)| (a * b).sqrt()).sum::<f64>() * grid.dx();
                worst = worst.max(o);
            }
        }
        Ok(worst)
    }
}

fn normalized_quantum(grid: &HybridGrid, psi_q: &Array1<Complex64>) -> Result<Array1<Complex64>> {
    if psi_q.len() != grid.n_quantum() {
        return Err(HybridError::DimensionMismatch { expected: grid.n_quantum(), found: psi_q.len() });
    }
    crate::observables::normalize_vector(psi_q, grid.quantum_weight())
}

/// Initial product state psi_Q(q) psi_C(x).
pub fn initial_state(grid: &HybridGrid, psi_q: &Array1<Complex64>, setup: &MeasurementSetup, hbar: f64) -> Result<HybridEnsemble> {
    HybridEnsemble::product(grid, &normalized_quantum(grid, psi_q)?, setup.pointer(), hbar)
}

/// Sum_n (E_n psi_Q)(q) psi_C(x - K lambda_n), with exact spectral shifts.
pub fn exact_post_measurement(grid: &HybridGrid, psi_q: &Array1<Complex64>, setup: &MeasurementSetup, hbar: f64) -> Result<HybridEnsemble> {
    setup.check_wrap(grid)?;
    let psi_q = normalized_quantum(grid, psi_q)?;
    let mut psi = ComplexField::zeros(grid.shape());
    for s in setup.eigenspaces() {
        let comp = s.projector.dot(&psi_q);
        let shifted = grid.translate_x_1d(setup.pointer(), setup.big_k() * s.lambda)?;
        for ((i, j), v) in psi.indexed_iter_mut() {
            *v += comp[i] * shifted[j];
        }
    }
    HybridEnsemble::from_psi_unnormalized(grid, psi, hbar)
}

/// psi_t = -kappa(t) M d_x psi.
pub fn interaction_rhs(grid: &HybridGrid, setup: &MeasurementSetup, psi: &ComplexField, t: f64) -> Result<ComplexField> {
    let kappa = setup.kappa(t);
    if kappa == 0.0 {
        return Ok(ComplexField::zeros(psi.dim()));
    }
    let dx = grid.d_dx(psi)?;
    let m = setup.operator().apply(&dx)?;
    Ok(m.mapv(|z| z * (-kappa)))
}

/// RK4 integration of the interaction over [0,T] from the product state.
/// Requires kappa_max max|lambda| dt <= dx.
pub fn evolve_measurement(grid: &HybridGrid, psi_q: &Array1<Complex64>, setup: &MeasurementSetup, dt: f64, hbar: f64) -> Result<HybridEnsemble> {
    let cfl = setup.kappa_max() * setup.max_abs_eigenvalue() * dt;
    if !(dt > 0.0) || cfl > grid.dx() {
        return Err(HybridError::StabilityBound { dt, dt_max: grid.dx() / (setup.kappa_max() * setup.max_abs_eigenvalue()) });
    }
    setup.check_wrap(grid)?;
    let e0 = initial_state(grid, psi_q, setup, hbar)?;
    let steps = (setup.duration() / dt).ceil() as usize;
    let h = setup.duration() / steps as f64;
    let mut psi = e0.into_psi();
    for n in 0..steps {
        let t = n as f64 * h;
        let k1 = interaction_rhs(grid, setup, &psi, t)?;
        let k2 = interaction_rhs(grid, setup, &(&psi + &k1.mapv(|z| z * (0.5 * h))), t + 0.5 * h)?;
        let k3 = interaction_rhs(grid, setup, &(&psi + &k2.mapv(|z| z * (0.5 * h))), t + 0.5 * h)?;
        let k4 = interaction_rhs(grid, setup, &(&psi + &k3.mapv(|z| z * h)), t + h)?;
        let c = Complex64::new(h / 6.0, 0.0);
        psi = psi + (k1 + k2.mapv(|z| z * 2.0) + k3.mapv(|z| z * 2.0) + k4).mapv(|z| z * c);
        if psi.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(HybridError::NanDuringEvolution { step: n + 1 });
        }
    }
    HybridEnsemble::from_psi_unnormalized(grid, psi, hbar)
}

/// sqrt(integral |psi_a - psi_b|^2).
pub fn l2_distance(a: &HybridEnsemble, b: &HybridEnsemble) -> Result<f64> {
    a.grid().check_shape(b.psi())?;
    let s: f64 = a.psi().iter().zip(b.psi().iter()).map(|(u, v)| (u - v).norm_sqr()).sum();
    Ok((s * a.grid().cell_weight()).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointerReading {
    pub distribution: Vec<f64>,
    /// (lambda_n, probability mass on the support of branch n)
    pub branch_weights: Vec<(f64, f64)>,
    pub overlap: f64,
}

/// Classical marginal after the interaction, split by branch supports.
pub fn pointer_distribution(e: &HybridEnsemble, setup: &MeasurementSetup) -> Result<PointerReading> {
    let grid = e.grid();
    let marginal = e.marginal_classical();
    let supports = setup.branch_supports(grid)?;
    let branch_weights = setup
        .eigenspaces()
        .iter()
        .zip(&supports)
        .map(|(s, sup)| {
            let w: f64 = marginal.iter().zip(sup).filter(|(_, &inside)| inside).map(|(p, _)| p).sum::<f64>() * grid.dx();
            (s.lambda, w)
        })
        .collect();
    Ok(PointerReading { distribution: marginal.to_vec(), branch_weights, overlap: setup.overlap_metric(grid)? })
}

#[derive(Clone, Debug)]
pub struct Collapse {
    pub ensemble: HybridEnsemble,
    pub branch: usize,
    pub eigenvalue: f64,
    /// Normalized quantum conditional psi(q, a).
    pub psi_a: Array1<Complex64>,
    /// Width of the Gaussian standing in for delta(x - a).
    pub pointer_width: f64,
}

/// Bayesian update on reading x = a: delta(x - a) times the quantum conditional at a.
pub fn collapse(e: &HybridEnsemble, setup: &MeasurementSetup, a: f64) -> Result<Collapse> {
    let grid = e.grid();
    let xs = grid.x_coords();
    if a < xs[0] || a >= xs[0] + grid.x_length() {
        return Err(HybridError::AmbiguousReading(format!("reading {a} lies outside the pointer box")));
    }
    let supports = setup.branch_supports(grid)?;
    let cell = (((a - xs[0]) / grid.dx()).round() as usize) % grid.n_x();
    let hits: Vec<usize> = supports.iter().enumerate().filter(|(_, s)| s[cell]).map(|(n, _)| n).collect();
    let branch = match hits.as_slice() {
        [n] => *n,
        [] => return Err(HybridError::AmbiguousReading(format!("reading {a} lies outside every branch support"))),
        many => {
            let lambdas: Vec<f64> = many.iter().map(|&n| setup.eigenspaces()[n].lambda).collect();
            return Err(HybridError::AmbiguousReading(format!("reading {a} lies in overlapping branches {lambdas:?}")));
        }
    };
    let conditional = grid.interpolate_x(e.psi(), a)?;
    let psi_a = normalized_quantum(grid, &conditional)?;
    // four cells per standard deviation keeps spectral derivatives of the bump clean
    let width = 4.0 * grid.dx();
    let delta = gaussian_packet(grid, a, width, 0.0, e.hbar());
    let ensemble = HybridEnsemble::product(grid, &psi_a, &delta, e.hbar())?;
    Ok(Collapse { ensemble, branch, eigenvalue: setup.eigenspaces()[branch].lambda, psi_a, pointer_width: width })
}

/// Quantum marginal of a collapsed ensemble compared with |<q|E_n psi_Q>|^2 / p_n.
pub fn expected_conditional(setup: &MeasurementSetup, psi_q: &Array1<Complex64>, branch: usize, weight: f64) -> Result<Array1<f64>> {
    let s = setup
        .eigenspaces()
        .get(branch)
        .ok_or_else(|| HybridError::InvalidParameter(format!("no branch {branch}")))?;
    let proj = s.projector.dot(psi_q);
    let n: f64 = proj.iter().map(|z| z.norm_sqr()).sum::<f64>() * weight;
    if !(n > 0.0) {
        return Err(HybridError::ZeroMass);
    }
    Ok(proj.mapv(|z| z.norm_sqr() / n))
}

/// Stack a list of quantum amplitudes into a column for convenience.
pub fn amplitudes(values: &[Complex64]) -> Array1<Complex64> {
    Array1::from(values.to_vec())
}
