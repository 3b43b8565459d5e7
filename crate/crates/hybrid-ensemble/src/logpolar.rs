//! Log-polar collocation for the hybrid quantum-classical equation.
//!
//! psi = exp(l + iS/hbar) with l and S expanded in tensor Legendre polynomials
//! P_i(u_q) P_j(u_x), i + j <= degree, where u maps each box to [-1, 1]. The
//! equations
//!
//!   l_t = -(S_q l_q + S_qq/2)/m_q - (S_x l_x + S_xx/2)/m_c
//!   S_t = -(S_q^2/2m_q + S_x^2/2m_c + V) + (hbar^2/2m_q)(l_qq + l_q^2)
//!
//! are collocated on the grid and projected back onto the coefficients by
//! least squares; RK4 advances the coefficients.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::ensemble::HybridEnsemble;
use crate::error::{HybridError, Result};
use crate::grid::{HybridGrid, RealField};

/// Largest relative L2 misfit accepted when fitting a state.
pub const FIT_TOLERANCE: f64 = 1e-6;

/// Legendre values and first two derivatives at u, degrees 0..=n.
fn legendre(n: usize, u: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut d1 = vec![0.0; n + 1];
    let mut d2 = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = u;
        d1[1] = 1.0;
    }
    for k in 1..n {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * u * p[k] - kf * p[k - 1]) / (kf + 1.0);
        d1[k + 1] = d1[k - 1] + (2.0 * kf + 1.0) * p[k];
        d2[k + 1] = d2[k - 1] + (2.0 * kf + 1.0) * d1[k];
    }
    (p, d1, d2)
}

/// Each row of `m` dotted with `a` and with `b`. For these tall, narrow
/// matrices this is several times faster than the general product.
fn rows_dot2(m: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = (a.as_slice().expect("contiguous"), b.as_slice().expect("contiguous"));
    let rows = m.as_slice().expect("standard layout").chunks_exact(a.len());
    let mut u = Vec::with_capacity(m.nrows());
    let mut v = Vec::with_capacity(m.nrows());
    for r in rows {
        let (mut x, mut y) = (0.0, 0.0);
        for ((&rv, &av), &bv) in r.iter().zip(a).zip(b) {
            x += rv * av;
            y += rv * bv;
        }
        u.push(x);
        v.push(y);
    }
    (u, v)
}

/// Largest number of collocation points per axis.
pub const MAX_COLLOCATION: usize = 64;

/// Basis matrices for a total-degree Legendre basis on a continuous grid.
///
/// Values and first derivatives are kept on the full grid (fitting and
/// reconstruction); the right-hand side is collocated on a strided subgrid of at
/// most [`MAX_COLLOCATION`] points per axis and projected by least squares there.
#[derive(Clone, Debug)]
pub struct LogPolarBasis {
    degree: usize,
    shape: (usize, usize),
    b: Array2<f64>,
    bq: Array2<f64>,
    bx: Array2<f64>,
    /// Flat indices of the collocation points.
    nodes: Vec<usize>,
    cq: Array2<f64>,
    cqq: Array2<f64>,
    cx: Array2<f64>,
    cxx: Array2<f64>,
    pinv: Array2<f64>,
}

impl LogPolarBasis {
    pub fn new(grid: &HybridGrid, degree: usize) -> Result<Self> {
        if !grid.is_continuous_quantum() {
            return Err(HybridError::DiscreteQuantumSector);
        }
        if degree < 2 {
            return Err(HybridError::InvalidParameter(format!("log-polar degree must be at least 2, got {degree}")));
        }
        let q = grid.q_coords()?;
        let x = grid.x_coords();
        let (qa, qb) = (q[0], q[0] + grid.dq()? * q.len() as f64);
        let (xa, xb) = (x[0], x[0] + grid.x_length());
        let (sq, sx) = (2.0 / (qb - qa), 2.0 / (xb - xa));
        let lq: Vec<_> = q.iter().map(|&v| legendre(degree, (2.0 * v - qa - qb) / (qb - qa))).collect();
        let lx: Vec<_> = x.iter().map(|&v| legendre(degree, (2.0 * v - xa - xb) / (xb - xa))).collect();
        let index: Vec<(usize, usize)> = (0..=degree).flat_map(|i| (0..=degree - i).map(move |j| (i, j))).collect();
        let (nq, nx) = grid.shape();
        let nb = index.len();
        // kind 0: value, 1: d/dq, 2: d2/dq2, 3: d/dx, 4: d2/dx2
        let entry = |row: usize, c: usize, kind: u8| -> f64 {
            let (iq, ix) = (row / nx, row % nx);
            let (i, j) = index[c];
            let (pq, dq1, dq2) = &lq[iq];
            let (px, dx1, dx2) = &lx[ix];
            match kind {
                0 => pq[i] * px[j],
                1 => dq1[i] * sq * px[j],
                2 => dq2[i] * sq * sq * px[j],
                3 => pq[i] * dx1[j] * sx,
                _ => pq[i] * dx2[j] * sx * sx,
            }
        };
        let full = |kind: u8| Array2::from_shape_fn((nq * nx, nb), |(r, c)| entry(r, c, kind));
        let (stride_q, stride_x) = (nq.div_ceil(MAX_COLLOCATION), nx.div_ceil(MAX_COLLOCATION));
        let nodes: Vec<usize> = (0..nq).step_by(stride_q).flat_map(|i| (0..nx).step_by(stride_x).map(move |j| i * nx + j)).collect();
        let coll = |kind: u8| Array2::from_shape_fn((nodes.len(), nb), |(r, c)| entry(nodes[r], c, kind));
        let cb = coll(0);
        let dm = DMatrix::from_fn(nodes.len(), nb, |r, c| cb[[r, c]]);
        let pinv_m = dm
            .pseudo_inverse(1e-12)
            .map_err(|e| HybridError::InvalidParameter(format!("log-polar basis pseudo-inverse failed: {e}")))?;
        let pinv = Array2::from_shape_fn((nb, nodes.len()), |(r, c)| pinv_m[(r, c)]);
        Ok(LogPolarBasis {
            degree,
            shape: (nq, nx),
            b: full(0),
            bq: full(1),
            bx: full(3),
            cq: coll(1),
            cqq: coll(2),
            cx: coll(3),
            cxx: coll(4),
            nodes,
            pinv,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_coefficients(&self) -> usize {
        self.b.ncols()
    }

    fn reshape(&self, v: Array1<f64>) -> RealField {
        v.into_shape_with_order(self.shape).expect("basis rows match the grid")
    }

    pub fn eval(&self, c: &Array1<f64>) -> RealField {
        self.reshape(self.b.dot(c))
    }

    /// Least-squares coefficients of a field sampled at the collocation points.
    pub fn project(&self, field: &RealField) -> Array1<f64> {
        let flat: Array1<f64> = self.nodes.iter().map(|&i| field.as_slice().expect("standard layout")[i]).collect();
        self.pinv.dot(&flat)
    }

    /// Effective grid spacing of the basis, used for the stability bound: L / degree^2.
    pub fn effective_spacing(grid: &HybridGrid, degree: usize) -> Result<f64> {
        let lq = grid.dq()? * grid.n_quantum() as f64;
        Ok(lq.min(grid.x_length()) / (degree * degree) as f64)
    }
}

/// Coefficients of (l, S) for one ensemble.
#[derive(Clone, Debug)]
pub struct LogPolarState {
    pub log_amplitude: Array1<f64>,
    pub phase: Array1<f64>,
}

/// Parameters of the hybrid equation in log-polar form.
#[derive(Clone, Debug)]
pub struct LogPolarProblem {
    pub basis: LogPolarBasis,
    pub m_q: f64,
    pub m_c: f64,
    pub hbar: f64,
    /// Potential at the collocation points.
    pub potential: Array1<f64>,
    pub weight: f64,
}

impl LogPolarProblem {
    pub fn new(grid: &HybridGrid, degree: usize, m_q: f64, m_c: f64, hbar: f64, potential: &RealField) -> Result<Self> {
        grid.check_shape(potential)?;
        let basis = LogPolarBasis::new(grid, degree)?;
        let flat: Vec<f64> = potential.iter().copied().collect();
        let potential = basis.nodes.iter().map(|&i| flat[i]).collect();
        Ok(LogPolarProblem {
            basis,
            m_q,
            m_c,
            hbar,
            potential,
            weight: grid.cell_weight(),
        })
    }

    /// Least-squares fit of ln|psi| and of the phase gradients hbar Im(D psi / psi)
    /// on cells with P > 1e-24 max P. The phase constant is taken at the peak of P.
    pub fn fit(&self, e: &HybridEnsemble) -> Result<LogPolarState> {
        let grid = e.grid();
        let psi = e.psi();
        let p = e.density();
        let pmax = p.iter().fold(0.0f64, |a, &v| a.max(v));
        let cut = 1e-24 * pmax;
        let dq = grid.d_dq(psi)?;
        let dx = grid.d_dx(psi)?;
        let hbar = e.hbar();
        let nb = self.basis.n_coefficients();
        let rows: Vec<usize> = p.iter().enumerate().filter(|(_, &v)| v > cut).map(|(i, _)| i).collect();
        if rows.len() < 2 * nb {
            return Err(HybridError::NotRepresentable("too few occupied cells to fit".into()));
        }
        let flat_psi: Vec<Complex64> = psi.iter().copied().collect();
        let flat_dq: Vec<Complex64> = dq.iter().copied().collect();
        let flat_dx: Vec<Complex64> = dx.iter().copied().collect();

        let amp = DMatrix::from_fn(rows.len(), nb, |r, c| self.basis.b[[rows[r], c]]);
        let rhs_amp = nalgebra::DVector::from_fn(rows.len(), |r, _| flat_psi[rows[r]].norm().ln());
        let cl = amp
            .svd(true, true)
            .solve(&rhs_amp, 1e-13)
            .map_err(|e| HybridError::NotRepresentable(format!("amplitude fit failed: {e}")))?;

        let m = rows.len();
        // rows weighted by |psi| so that tail cells, where D psi / psi is dominated
        // by spectral leakage, do not steer the fit
        let amax = pmax.sqrt();
        let wrow = |r: usize| flat_psi[rows[r % m]].norm() / amax;
        let grad = DMatrix::from_fn(2 * m, nb, |r, c| {
            let b = if r < m { self.basis.bq[[rows[r], c]] } else { self.basis.bx[[rows[r - m], c]] };
            wrow(r) * b
        });
        let rhs_grad = nalgebra::DVector::from_fn(2 * m, |r, _| {
            let i = rows[r % m];
            let d = if r < m { flat_dq[i] } else { flat_dx[i] };
            wrow(r) * hbar * (d / flat_psi[i]).im
        });
        // the constant mode has zero gradient; solve without it
        let grad_nc = grad.columns(1, nb - 1).into_owned();
        let cs_nc = grad_nc
            .svd(true, true)
            .solve(&rhs_grad, 1e-13)
            .map_err(|e| HybridError::NotRepresentable(format!("phase fit failed: {e}")))?;
        let mut cs = Array1::zeros(nb);
        for c in 1..nb {
            cs[c] = cs_nc[c - 1];
        }
        let peak = p.iter().enumerate().fold((0, 0.0f64), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0;
        let s_peak: f64 = (0..nb).map(|c| self.basis.b[[peak, c]] * cs[c]).sum();
        let target = hbar * flat_psi[peak].arg();
        cs[0] = target - s_peak;

        let state = LogPolarState { log_amplitude: Array1::from_iter(cl.iter().copied()), phase: cs };
        let rebuilt = self.psi(&state);
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in rebuilt.iter().zip(psi.iter()) {
            num += (a - b).norm_sqr();
            den += b.norm_sqr();
        }
        let misfit = (num / den).sqrt();
        if !(misfit < FIT_TOLERANCE) {
            return Err(HybridError::NotRepresentable(format!(
                "relative misfit {misfit:e} of the degree-{} log-polar fit exceeds {FIT_TOLERANCE:e}",
                self.basis.degree
            )));
        }
        Ok(state)
    }

    pub fn psi(&self, s: &LogPolarState) -> Array2<Complex64> {
        let (l, ph) = rows_dot2(&self.basis.b, &s.log_amplitude, &s.phase);
        let flat: Array1<Complex64> = l.iter().zip(&ph).map(|(&a, &b)| Complex64::new(a, b / self.hbar).exp()).collect();
        flat.into_shape_with_order(self.basis.shape).expect("basis rows match the grid")
    }

    pub fn norm(&self, s: &LogPolarState) -> f64 {
        let (l, _) = rows_dot2(&self.basis.b, &s.log_amplitude, &s.log_amplitude);
        l.iter().map(|&l| (2.0 * l).exp()).sum::<f64>() * self.weight
    }

    /// Shift the constant coefficient of l so that the norm is one; returns the pre-shift norm.
    pub fn renormalize(&self, s: &mut LogPolarState) -> f64 {
        let n = self.norm(s);
        // P_0(u_q) P_0(u_x) = 1 is the first basis column
        s.log_amplitude[0] -= 0.5 * n.ln();
        n
    }

    pub fn rhs(&self, s: &LogPolarState) -> LogPolarState {
        let b = &self.basis;
        let (l, ph) = (&s.log_amplitude, &s.phase);
        let ((lq, sq), (lqq, sqq)) = (rows_dot2(&b.cq, l, ph), rows_dot2(&b.cqq, l, ph));
        let ((lx, sx), (_, sxx)) = (rows_dot2(&b.cx, l, ph), rows_dot2(&b.cxx, l, ph));
        let (mq, mc, hb) = (self.m_q, self.m_c, self.hbar);
        let n = lq.len();
        let mut dl = Array1::zeros(n);
        let mut ds = Array1::zeros(n);
        for i in 0..n {
            dl[i] = -(sq[i] * lq[i] + 0.5 * sqq[i]) / mq - (sx[i] * lx[i] + 0.5 * sxx[i]) / mc;
            ds[i] = -(sq[i] * sq[i] / (2.0 * mq) + sx[i] * sx[i] / (2.0 * mc) + self.potential[i])
                + hb * hb / (2.0 * mq) * (lqq[i] + lq[i] * lq[i]);
        }
        let (cl, cs) = rows_dot2(&b.pinv, &dl, &ds);
        LogPolarState { log_amplitude: Array1::from(cl), phase: Array1::from(cs) }
    }

    pub fn rk4_step(&self, s: &LogPolarState, dt: f64) -> LogPolarState {
        let axpy = |a: &LogPolarState, k: &LogPolarState, h: f64| LogPolarState {
            log_amplitude: &a.log_amplitude + &(&k.log_amplitude * h),
            phase: &a.phase + &(&k.phase * h),
        };
        let k1 = self.rhs(s);
        let k2 = self.rhs(&axpy(s, &k1, 0.5 * dt));
        let k3 = self.rhs(&axpy(s, &k2, 0.5 * dt));
        let k4 = self.rhs(&axpy(s, &k3, dt));
        let comb = |f: fn(&LogPolarState) -> &Array1<f64>| -> Array1<f64> {
            (f(&k1) + &(f(&k2) * 2.0) + &(f(&k3) * 2.0) + f(&k4)) * (dt / 6.0)
        };
        LogPolarState {
            log_amplitude: &s.log_amplitude + &comb(|k| &k.log_amplitude),
            phase: &s.phase + &comb(|k| &k.phase),
        }
    }
}
