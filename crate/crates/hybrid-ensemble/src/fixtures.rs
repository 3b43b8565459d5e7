//! Reproducible ensembles used by tests, the CLI self-check and benchmarks.

use std::f64::consts::PI;

use ndarray::Array1;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ensemble::{gaussian_packet, HybridEnsemble};
use crate::error::Result;
use crate::grid::HybridGrid;

/// Node-free ensemble psi = exp(a + i b) with a, b random trigonometric
/// polynomials of degree <= 2 in each periodic coordinate. Discrete quantum
/// sectors get an independent pair (a, b) per index.
pub fn smooth_random(grid: &HybridGrid, seed: u64, hbar: f64) -> Result<HybridEnsemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lx = grid.x_length();
    let x0 = grid.x_coords()[0];
    let lq = if grid.is_continuous_quantum() { grid.dq()? * grid.n_quantum() as f64 } else { 1.0 };
    let q0 = if grid.is_continuous_quantum() { grid.q_coords()?[0] } else { 0.0 };
    let continuous = grid.is_continuous_quantum();
    let nq_modes: i32 = if continuous { 2 } else { 0 };
    let mut modes = Vec::new();
    for m in -nq_modes..=nq_modes {
        for n in -2i32..=2 {
            if m == 0 && n == 0 {
                continue;
            }
            let amp_a = 0.3 * rng.random_range(-1.0..1.0) / (1 + m.abs() + n.abs()) as f64;
            let amp_b = rng.random_range(-1.0..1.0) / (1 + m.abs() + n.abs()) as f64;
            let phase_a = rng.random_range(0.0..2.0 * PI);
            let phase_b = rng.random_range(0.0..2.0 * PI);
            modes.push((m, n, amp_a, phase_a, amp_b, phase_b));
        }
    }
    let per_index: Vec<(f64, f64)> = (0..grid.n_quantum()).map(|_| (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI))).collect();
    let psi = ndarray::Array2::from_shape_fn(grid.shape(), |(i, j)| {
        let x = x0 + j as f64 * grid.dx();
        let (tq, shift_a, shift_b) = if continuous {
            let q = q0 + i as f64 * lq / grid.n_quantum() as f64;
            (2.0 * PI * (q - q0) / lq, 0.0, 0.0)
        } else {
            (0.0, per_index[i].0, per_index[i].1)
        };
        let tx = 2.0 * PI * (x - x0) / lx;
        let (mut a, mut b) = (0.0, 0.0);
        for &(m, n, aa, pa, ab, pb) in &modes {
            let arg = m as f64 * tq + n as f64 * tx;
            a += aa * (arg + pa + shift_a).cos();
            b += ab * (arg + pb + shift_b).cos();
        }
        Complex64::new(a, b).exp()
    });
    HybridEnsemble::from_psi(grid, psi, hbar)
}

/// (|0> phi_a + |1> phi_b)/sqrt(2) with Gaussian packets at `xa`, `xb`.
pub fn two_branch(grid: &HybridGrid, xa: f64, xb: f64, sigma: f64, hbar: f64) -> Result<HybridEnsemble> {
    let a = gaussian_packet(grid, xa, sigma, 0.4, hbar);
    let b = gaussian_packet(grid, xb, sigma, -0.7, hbar);
    let psi = ndarray::Array2::from_shape_fn(grid.shape(), |(i, j)| match i {
        0 => a[j],
        1 => b[j],
        _ => Complex64::new(0.0, 0.0),
    });
    HybridEnsemble::from_psi(grid, psi, hbar)
}

/// Correlated Gaussian with a q-dependent classical phase:
/// psi = exp(-q^2/2 - x^2/2 - c q x + i c q x / hbar).
///
/// The real correlation term is what makes the kinetic-kinetic bracket nonzero:
/// with c = 0 in the amplitude, sqrt(P) factorizes and the bracket integrand
/// carries d/dx of a q-only function.
pub fn correlated_gaussian(grid: &HybridGrid, c: f64, hbar: f64) -> Result<HybridEnsemble> {
    let psi = grid.complex_field(|q, x| Complex64::new(-0.5 * q * q - 0.5 * x * x - c * q * x, c * q * x / hbar).exp());
    HybridEnsemble::from_psi(grid, psi, hbar)
}

/// psi = exp(-q^2/2 - x^2/2 + i c q x / hbar): entangled in phase only.
pub fn phase_entangled_gaussian(grid: &HybridGrid, c: f64, hbar: f64) -> Result<HybridEnsemble> {
    let psi = grid.complex_field(|q, x| Complex64::new(-0.5 * q * q - 0.5 * x * x, c * q * x / hbar).exp());
    HybridEnsemble::from_psi(grid, psi, hbar)
}

/// Product of Gaussian packets in q and x.
pub fn product_gaussian(grid: &HybridGrid, q0: f64, p0: f64, x0: f64, k0: f64, hbar: f64) -> Result<HybridEnsemble> {
    let psi_q: Array1<Complex64> = crate::ensemble::gaussian_packet_q(grid, q0, 1.0 / 2f64.sqrt(), p0, hbar)?;
    let psi_c = gaussian_packet(grid, x0, 0.8, k0, hbar);
    HybridEnsemble::product(grid, &psi_q, &psi_c, hbar)
}

/// [`smooth_random`] times a Gaussian envelope of width `width` centred in the
/// box (in x, and in q when the quantum sector is continuous). Suited to
/// observables such as x or q that are not periodic on the box.
pub fn smooth_random_localized(grid: &HybridGrid, seed: u64, width: f64, hbar: f64) -> Result<HybridEnsemble> {
    let base = smooth_random(grid, seed, hbar)?;
    let xs = grid.x_coords();
    let xc = 0.5 * (xs[0] + xs[xs.len() - 1] + grid.dx());
    let qc = if grid.is_continuous_quantum() {
        let qs = grid.q_coords()?;
        Some(0.5 * (qs[0] + qs[qs.len() - 1] + grid.dq()?))
    } else {
        None
    };
    let envelope = grid.real_field(|q, x| {
        let mut a = -(x - xc).powi(2) / (4.0 * width * width);
        if let Some(qc) = qc {
            a -= (q - qc).powi(2) / (4.0 * width * width);
        }
        a.exp()
    });
    let psi = base.psi() * &envelope.mapv(|v| Complex64::new(v, 0.0));
    HybridEnsemble::from_psi(grid, psi, hbar)
}
