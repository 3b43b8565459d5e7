//! Hybrid configuration ensembles stored as psi = sqrt(P) exp(iS/hbar).

use ndarray::{Array1, Array2, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HybridError, Result};
use crate::grid::{ComplexField, GridSpec, HybridGrid, RealField};
use crate::observables::Functional;

/// Relative density floor below which phases and log-derivatives are treated as undefined.
pub const P_FLOOR_REL: f64 = 1e-30;

/// Tolerance for the normalization invariant.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct HybridEnsemble {
    grid: HybridGrid,
    psi: ComplexField,
    hbar: f64,
}

fn check_hbar(hbar: f64) -> Result<()> {
    if !(hbar > 0.0) || !hbar.is_finite() {
        return Err(HybridError::InvalidParameter(format!("hbar must be positive, got {hbar}")));
    }
    Ok(())
}

impl HybridEnsemble {
    /// Normalizing constructor from a wavefunction.
    pub fn from_psi(grid: &HybridGrid, psi: ComplexField, hbar: f64) -> Result<Self> {
        let mut e = Self::from_psi_unnormalized(grid, psi, hbar)?;
        let n = e.norm();
        if !(n > 0.0) {
            return Err(HybridError::ZeroMass);
        }
        let s = 1.0 / n.sqrt();
        e.psi.mapv_inplace(|z| z * s);
        Ok(e)
    }

    /// Wraps psi as-is. Used for perturbed or scaled states where normalization
    /// is deliberately suspended (variational derivatives, homogeneity checks).
    pub fn from_psi_unnormalized(grid: &HybridGrid, psi: ComplexField, hbar: f64) -> Result<Self> {
        check_hbar(hbar)?;
        grid.check_shape(&psi)?;
        if psi.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(HybridError::NonFinite("wavefunction".into()));
        }
        Ok(HybridEnsemble { grid: grid.clone(), psi, hbar })
    }

    /// Builds the ensemble from (P, S); P is normalized to unit integral.
    pub fn from_ps(grid: &HybridGrid, p: &RealField, s: &RealField, hbar: f64) -> Result<Self> {
        check_hbar(hbar)?;
        grid.check_shape(p)?;
        grid.check_shape(s)?;
        for ((i, j), &v) in p.indexed_iter() {
            if !v.is_finite() {
                return Err(HybridError::NonFinite(format!("P at ({i},{j})")));
            }
            if v < -1e-12 {
                return Err(HybridError::NegativeDensity { value: v, index: (i, j) });
            }
        }
        let mass = grid.integrate(&p.mapv(|v| v.max(0.0)))?;
        if !(mass > 0.0) {
            return Err(HybridError::ZeroMass);
        }
        let mut psi = ComplexField::zeros(grid.shape());
        Zip::from(&mut psi).and(p).and(s).for_each(|z, &pv, &sv| {
            *z = Complex64::from_polar((pv.max(0.0) / mass).sqrt(), sv / hbar);
        });
        Ok(HybridEnsemble { grid: grid.clone(), psi, hbar })
    }

    /// Independent ensemble psi(q,x) = psi_Q(q) psi_C(x); each factor is normalized.
    pub fn product(grid: &HybridGrid, psi_q: &Array1<Complex64>, psi_c: &Array1<Complex64>, hbar: f64) -> Result<Self> {
        check_hbar(hbar)?;
        if psi_q.len() != grid.n_quantum() {
            return Err(HybridError::DimensionMismatch { expected: grid.n_quantum(), found: psi_q.len() });
        }
        if psi_c.len() != grid.n_x() {
            return Err(HybridError::DimensionMismatch { expected: grid.n_x(), found: psi_c.len() });
        }
        let nq = psi_q.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.quantum_weight();
        let nc = psi_c.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dx();
        if !(nq > 0.0) || !(nc > 0.0) {
            return Err(HybridError::ZeroMass);
        }
        let (sq, sc) = (1.0 / nq.sqrt(), 1.0 / nc.sqrt());
        let psi = Array2::from_shape_fn(grid.shape(), |(i, j)| psi_q[i] * sq * psi_c[j] * sc);
        Self::from_psi_unnormalized(grid, psi, hbar)
    }

    /// Gaussian-regularized phase-space point (x', k'): P ~ N(x', sigma^2), S = k' x.
    /// `quantum` defaults to the single state of a d=1 sector.
    pub fn phase_point(
        grid: &HybridGrid,
        x0: f64,
        k0: f64,
        sigma: f64,
        hbar: f64,
        quantum: Option<&Array1<Complex64>>,
    ) -> Result<Self> {
        let min = 2.0 * grid.dx();
        if !(sigma >= min) {
            return Err(HybridError::Unresolvable { sigma, min });
        }
        let psi_q = match quantum {
            Some(v) => v.clone(),
            None => {
                if grid.n_quantum() != 1 {
                    return Err(HybridError::InvalidParameter(
                        "phase point without a quantum factor needs a one-state quantum sector".into(),
                    ));
                }
                Array1::from(vec![Complex64::new(1.0, 0.0)])
            }
        };
        let psi_c = gaussian_packet(grid, x0, sigma, k0, hbar);
        Self::product(grid, &psi_q, &psi_c, hbar)
    }

    pub fn grid(&self) -> &HybridGrid {
        &self.grid
    }

    pub fn psi(&self) -> &ComplexField {
        &self.psi
    }

    pub fn into_psi(self) -> ComplexField {
        self.psi
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// Same grid and hbar, new wavefunction (no normalization).
    pub fn with_psi(&self, psi: ComplexField) -> Result<Self> {
        Self::from_psi_unnormalized(&self.grid, psi, self.hbar)
    }

    pub fn density(&self) -> RealField {
        self.psi.mapv(|z| z.norm_sqr())
    }

    pub fn p_floor(&self) -> f64 {
        P_FLOOR_REL * self.psi.iter().fold(0.0f64, |a, z| a.max(z.norm_sqr()))
    }

    /// S = hbar * arg(psi) modulo 2 pi hbar; zero below the density floor.
    pub fn phase(&self) -> RealField {
        let floor = self.p_floor();
        self.psi.mapv(|z| if z.norm_sqr() > floor { self.hbar * z.arg() } else { 0.0 })
    }

    pub fn norm(&self) -> f64 {
        self.psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.cell_weight()
    }

    pub fn normalized(&self) -> Result<Self> {
        Self::from_psi(&self.grid, self.psi.clone(), self.hbar)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(HybridError::InvalidParameter(format!("ensemble norm {n} differs from 1")));
        }
        Ok(())
    }

    /// hbar * Im(D psi / psi) with the floor applied.
    fn log_derivative_im(&self, dpsi: &ComplexField) -> RealField {
        let floor = self.p_floor();
        let mut k = RealField::zeros(self.grid.shape());
        Zip::from(&mut k).and(&self.psi).and(dpsi).for_each(|kv, &z, &dz| {
            let p = z.norm_sqr();
            *kv = if p > floor { self.hbar * (z.conj() * dz).im / p } else { 0.0 };
        });
        k
    }

    /// Classical momentum field k = dS/dx.
    pub fn momentum_field(&self) -> Result<RealField> {
        let d = self.grid.d_dx(&self.psi)?;
        Ok(self.log_derivative_im(&d))
    }

    /// Quantum-sector phase gradient dS/dq (continuous sector only).
    pub fn quantum_phase_gradient(&self) -> Result<RealField> {
        let d = self.grid.d_dq(&self.psi)?;
        Ok(self.log_derivative_im(&d))
    }

    /// P * dS/dx computed without division: hbar * Im(psi* D psi).
    pub fn classical_current(&self) -> Result<RealField> {
        let d = self.grid.d_dx(&self.psi)?;
        Ok(Zip::from(&self.psi).and(&d).map_collect(|&z, &dz| self.hbar * (z.conj() * dz).im))
    }

    pub fn marginal_classical(&self) -> Array1<f64> {
        self.density().sum_axis(Axis(0)) * self.grid.quantum_weight()
    }

    pub fn marginal_quantum(&self) -> Array1<f64> {
        self.density().sum_axis(Axis(1)) * self.grid.dx()
    }

    /// Complex conjugate (time reversal).
    pub fn conjugate(&self) -> Self {
        HybridEnsemble { grid: self.grid.clone(), psi: self.psi.mapv(|z| z.conj()), hbar: self.hbar }
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let (nq, nx) = self.grid.shape();
        Snapshot {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            grid: *self.grid.spec(),
            hbar: self.hbar,
            shape: [nq, nx],
            re: self.psi.iter().map(|z| z.re).collect(),
            im: self.psi.iter().map(|z| z.im).collect(),
        }
    }

    pub fn from_snapshot(s: &Snapshot) -> Result<Self> {
        if s.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(HybridError::Serialization(format!("unsupported schema version {}", s.schema_version)));
        }
        let grid = HybridGrid::new(s.grid)?;
        let n = s.shape[0] * s.shape[1];
        if s.re.len() != n || s.im.len() != n {
            return Err(HybridError::Serialization("snapshot length does not match shape".into()));
        }
        let psi = Array2::from_shape_fn((s.shape[0], s.shape[1]), |(i, j)| {
            let k = i * s.shape[1] + j;
            Complex64::new(s.re[k], s.im[k])
        });
        Self::from_psi_unnormalized(&grid, psi, s.hbar)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_snapshot()).map_err(|e| HybridError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Snapshot = serde_json::from_str(text).map_err(|e| HybridError::Serialization(e.to_string()))?;
        Self::from_snapshot(&s)
    }
}

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

/// Flat serialized ensemble: grid descriptor, hbar and row-major Re/Im psi.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub grid: GridSpec,
    pub hbar: f64,
    pub shape: [usize; 2],
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

/// Normalized Gaussian packet on the classical axis with linear phase k0 x / hbar.
pub fn gaussian_packet(grid: &HybridGrid, x0: f64, sigma: f64, k0: f64, hbar: f64) -> Array1<Complex64> {
    let raw: Array1<Complex64> = grid
        .x_coords()
        .mapv(|x| Complex64::from_polar((-(x - x0).powi(2) / (4.0 * sigma * sigma)).exp(), k0 * x / hbar));
    let n = raw.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dx();
    raw / Complex64::new(n.sqrt(), 0.0)
}

/// Normalized Gaussian packet along the quantum coordinate (continuous sector).
pub fn gaussian_packet_q(grid: &HybridGrid, q0: f64, sigma: f64, p0: f64, hbar: f64) -> Result<Array1<Complex64>> {
    let q = grid.q_coords()?;
    let raw: Array1<Complex64> =
        q.mapv(|q| Complex64::from_polar((-(q - q0).powi(2) / (4.0 * sigma * sigma)).exp(), p0 * q / hbar));
    let n = raw.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.quantum_weight();
    Ok(raw / Complex64::new(n.sqrt(), 0.0))
}

/// Weighted collection of ensembles on one grid.
#[derive(Clone, Debug)]
pub struct Mixture {
    members: Vec<(f64, HybridEnsemble)>,
}

impl Mixture {
    pub fn new(members: Vec<(f64, HybridEnsemble)>) -> Result<Self> {
        if members.is_empty() {
            return Err(HybridError::InvalidParameter("empty mixture".into()));
        }
        let total: f64 = members.iter().map(|(w, _)| *w).sum();
        if members.iter().any(|(w, _)| !(0.0..=1.0).contains(w)) || (total - 1.0).abs() > 1e-12 {
            return Err(HybridError::InvalidParameter(format!("mixture weights must lie in [0,1] and sum to 1 (sum {total})")));
        }
        let g = members[0].1.grid();
        if members.iter().any(|(_, e)| e.grid() != g) {
            return Err(HybridError::InvalidParameter("mixture members must share one grid".into()));
        }
        Ok(Mixture { members })
    }

    pub fn members(&self) -> &[(f64, HybridEnsemble)] {
        &self.members
    }

    /// Sum_j p_j A[P_j, S_j].
    pub fn expectation(&self, a: &dyn Functional) -> Result<f64> {
        let mut acc = 0.0;
        for (w, e) in &self.members {
            acc += w * a.value(e)?;
        }
        Ok(acc)
    }
}
