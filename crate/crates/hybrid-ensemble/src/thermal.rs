//! Stationary ensembles and thermal mixtures.
//!
//! A classical stationary ensemble is labelled by a phase point (x0, k0) and
//! its averages are time averages along the trajectory through that point. A
//! thermal mixture weights these ensembles by exp(-beta H(x0, k0)).

use nalgebra::DMatrix;
use ndarray::Array1;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evolve, EnsembleHamiltonian, EvolveOptions};
use crate::ensemble::{HybridEnsemble, Mixture};
use crate::error::{HybridError, Result};
use crate::grid::HybridGrid;
use crate::observables::{PhaseFunction, QuantumObservable, QuantumOperator};

/// Smallest number of whole periods in an averaging window.
pub const MIN_PERIODS: usize = 50;
/// Relative energy drift allowed along a trajectory.
pub const ENERGY_DRIFT_TOLERANCE: f64 = 1e-8;
/// Independent Metropolis chains per mixture.
pub const METROPOLIS_CHAINS: usize = 10;
const BATCHES_PER_CHAIN: usize = 5;
const METROPOLIS_BURN_IN: usize = 4000;
const METROPOLIS_THIN: usize = 5;
const QUADRATURE_NODES: usize = 1201;
const QUADRATURE_EXPONENT: f64 = 60.0;

/// Separable phase-space Hamiltonian H(x,k) = T(k) + V(x).
#[derive(Clone, Debug)]
pub struct PhaseSpaceHamiltonian {
    f: PhaseFunction,
}

impl PhaseSpaceHamiltonian {
    /// Checks gradient consistency and separability on a small lattice.
    pub fn new(f: PhaseFunction) -> Result<Self> {
        let g = f.gradient_consistency();
        if !(g < 1e-6) {
            return Err(HybridError::InvalidParameter(format!("gradient of `{}` inconsistent with its values ({g:e})", f.label())));
        }
        let pts = [-1.7, -0.6, 0.0, 0.45, 1.3];
        for &a in &pts {
            for &b in &pts {
                for &c in &pts {
                    let dx = (f.dx(a, b) - f.dx(a, c)).abs() / f.dx(a, b).abs().max(1.0);
                    let dk = (f.dk(b, a) - f.dk(c, a)).abs() / f.dk(b, a).abs().max(1.0);
                    if dx > 1e-12 || dk > 1e-12 {
                        return Err(HybridError::InvalidParameter(format!(
                            "`{}` is not separable; leapfrog trajectories need H = T(k) + V(x)",
                            f.label()
                        )));
                    }
                }
            }
        }
        Ok(PhaseSpaceHamiltonian { f })
    }

    pub fn harmonic(m: f64, omega: f64) -> Self {
        PhaseSpaceHamiltonian { f: PhaseFunction::harmonic(m, omega) }
    }

    pub fn quartic(m: f64, g: f64) -> Self {
        PhaseSpaceHamiltonian { f: PhaseFunction::quartic(m, g) }
    }

    /// Accepts the labels of [`PhaseFunction::from_label`].
    pub fn from_label(label: &str) -> Result<Self> {
        Self::new(PhaseFunction::from_label(label)?)
    }

    pub fn label(&self) -> &str {
        self.f.label()
    }

    pub fn function(&self) -> &PhaseFunction {
        &self.f
    }

    #[inline]
    pub fn eval(&self, x: f64, k: f64) -> f64 {
        self.f.eval(x, k)
    }

    /// Minimum by Newton iteration on the gradient, started at the origin.
    pub fn minimum(&self) -> Result<(f64, f64)> {
        let (mut x, mut k) = (0.0, 0.0);
        for _ in 0..200 {
            let (gx, gk) = (self.f.dx(x, k), self.f.dk(x, k));
            if gx.abs() < 1e-14 && gk.abs() < 1e-14 {
                return Ok((x, k));
            }
            let [[a, b], [_, d]] = self.hessian(x, k);
            let det = a * d - b * b;
            if det.abs() > 1e-10 {
                x -= (d * gx - b * gk) / det;
                k -= (a * gk - b * gx) / det;
            } else {
                // degenerate curvature: plain gradient step
                x -= 0.1 * gx;
                k -= 0.1 * gk;
            }
        }
        let (gx, gk) = (self.f.dx(x, k), self.f.dk(x, k));
        if gx.abs() < 1e-8 && gk.abs() < 1e-8 {
            Ok((x, k))
        } else {
            Err(HybridError::InvalidParameter(format!("no minimum found for `{}`", self.label())))
        }
    }

    /// Hessian from central differences of the analytic gradient.
    pub fn hessian(&self, x: f64, k: f64) -> [[f64; 2]; 2] {
        let h = 1e-5;
        let hxx = (self.f.dx(x + h, k) - self.f.dx(x - h, k)) / (2.0 * h);
        let hkk = (self.f.dk(x, k + h) - self.f.dk(x, k - h)) / (2.0 * h);
        let hxk = 0.5 * ((self.f.dx(x, k + h) - self.f.dx(x, k - h)) + (self.f.dk(x + h, k) - self.f.dk(x - h, k))) / (2.0 * h);
        [[hxx, hxk], [hxk, hkk]]
    }

    /// 2 pi / sqrt(H_xx H_kk) at the minimum, if the curvature is not flat there.
    pub fn characteristic_period(&self) -> Option<f64> {
        let (x, k) = self.minimum().ok()?;
        let [[a, _], [_, d]] = self.hessian(x, k);
        non_degenerate(a, d).then(|| 2.0 * std::f64::consts::PI / (a * d).sqrt())
    }
}

/// A curvature ratio below 1e-8 counts as flat (quartic-like).
fn non_degenerate(a: f64, d: f64) -> bool {
    a > 0.0 && d > 0.0 && a.min(d) > 1e-8 * a.max(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Leapfrog,
    /// Fourth-order composition of three leapfrog steps.
    Yoshida4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySettings {
    pub dt: f64,
    pub integrator: Integrator,
    /// Escape bound on |x| and |k|.
    pub bound: f64,
    /// The window may grow to this multiple of T_avg to fit MIN_PERIODS periods.
    pub max_window_factor: f64,
    /// Times dt is halved when the energy drift exceeds ENERGY_DRIFT_TOLERANCE.
    pub max_refinements: u32,
}

impl Default for TrajectorySettings {
    fn default() -> Self {
        TrajectorySettings { dt: 0.01, integrator: Integrator::Yoshida4, bound: 1e6, max_window_factor: 1000.0, max_refinements: 6 }
    }
}

/// Stationary classical ensemble through the phase point (x0, k0).
#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    pub hamiltonian: PhaseSpaceHamiltonian,
    pub x0: f64,
    pub k0: f64,
    pub energy: f64,
    pub settings: TrajectorySettings,
}

impl TrajectoryEnsemble {
    pub fn new(h: &PhaseSpaceHamiltonian, x0: f64, k0: f64) -> Self {
        Self::with_settings(h, x0, k0, TrajectorySettings::default())
    }

    pub fn with_settings(h: &PhaseSpaceHamiltonian, x0: f64, k0: f64, settings: TrajectorySettings) -> Self {
        TrajectoryEnsemble { hamiltonian: h.clone(), x0, k0, energy: h.eval(x0, k0), settings }
    }
}

/// Time averages over a whole number of periods.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeAverage {
    pub values: Vec<f64>,
    /// Averages over the first half of the periods.
    pub half_window: Vec<f64>,
    /// max |full - half| over the observables.
    pub convergence: f64,
    pub periods: usize,
    pub window: f64,
    pub energy_drift: f64,
    /// Step actually used after refinement.
    pub dt: f64,
}

const YOSHIDA_W1: f64 = 1.351_207_191_959_657_8;
const YOSHIDA_W0: f64 = -1.702_414_383_919_315_3;

fn drift_kick(h: &PhaseFunction, x: &mut f64, k: &mut f64, dt: f64, scheme: Integrator) {
    match scheme {
        Integrator::Leapfrog => {
            *x += 0.5 * dt * h.dk(*x, *k);
            *k -= dt * h.dx(*x, *k);
            *x += 0.5 * dt * h.dk(*x, *k);
        }
        Integrator::Yoshida4 => {
            let c = [0.5 * YOSHIDA_W1, 0.5 * (YOSHIDA_W0 + YOSHIDA_W1)];
            *x += c[0] * dt * h.dk(*x, *k);
            *k -= YOSHIDA_W1 * dt * h.dx(*x, *k);
            *x += c[1] * dt * h.dk(*x, *k);
            *k -= YOSHIDA_W0 * dt * h.dx(*x, *k);
            *x += c[1] * dt * h.dk(*x, *k);
            *k -= YOSHIDA_W1 * dt * h.dx(*x, *k);
            *x += c[0] * dt * h.dk(*x, *k);
        }
    }
}

/// Averages of several observables along one trajectory. The window runs
/// between upward zero crossings of xdot (interpolated inside a step), covers
/// at least `t_avg` and at least MIN_PERIODS periods.
pub fn time_averages(fs: &[PhaseFunction], te: &TrajectoryEnsemble, t_avg: f64) -> Result<TimeAverage> {
    let mut s = te.settings;
    let mut out = averages_at(fs, te, t_avg, s)?;
    for _ in 0..s.max_refinements {
        if out.energy_drift <= ENERGY_DRIFT_TOLERANCE {
            break;
        }
        s.dt *= 0.5;
        out = averages_at(fs, te, t_avg, s)?;
    }
    Ok(out)
}

fn averages_at(fs: &[PhaseFunction], te: &TrajectoryEnsemble, t_avg: f64, s: TrajectorySettings) -> Result<TimeAverage> {
    if !(t_avg > 0.0) || !(s.dt > 0.0) || !(s.bound > 0.0) {
        return Err(HybridError::InvalidParameter(format!("need t_avg > 0, dt > 0 and bound > 0 (got {t_avg}, {}, {})", s.dt, s.bound)));
    }
    let h = te.hamiltonian.function();
    let (mut x, mut k) = (te.x0, te.k0);
    if h.dx(x, k) == 0.0 && h.dk(x, k) == 0.0 {
        // fixed point: the trajectory is a single phase point
        let v: Vec<f64> = fs.iter().map(|f| f.eval(x, k)).collect();
        return Ok(TimeAverage { half_window: v.clone(), values: v, convergence: 0.0, periods: 0, window: 0.0, energy_drift: 0.0, dt: s.dt });
    }
    let e0 = te.energy;
    let scale = e0.abs().max(f64::MIN_POSITIVE);
    let nf = fs.len();
    let mut acc = vec![0.0; nf];
    let mut f0: Vec<f64> = fs.iter().map(|f| f.eval(x, k)).collect();
    let mut f1 = vec![0.0; nf];
    let mut v0 = h.dk(x, k);
    let mut t = 0.0;
    let t_cap = t_avg * s.max_window_factor;
    let mut crossings: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut drift = 0.0f64;
    loop {
        drift_kick(h, &mut x, &mut k, s.dt, s.integrator);
        // summed like the integrals so that f = 1 averages to exactly 1
        let t1 = t + s.dt;
        if !(x.abs() <= s.bound && k.abs() <= s.bound) {
            return Err(HybridError::TrajectoryEscape { t: t1, x, k });
        }
        drift = drift.max((h.eval(x, k) - e0).abs() / scale);
        for (slot, f) in f1.iter_mut().zip(fs) {
            *slot = f.eval(x, k);
        }
        let v1 = h.dk(x, k);
        if v0 < 0.0 && v1 >= 0.0 {
            let th = -v0 / (v1 - v0);
            let tc = t + th * s.dt;
            let ic: Vec<f64> = (0..nf)
                .map(|j| {
                    let fc = f0[j] + th * (f1[j] - f0[j]);
                    acc[j] + 0.5 * th * s.dt * (f0[j] + fc)
                })
                .collect();
            crossings.push((tc, ic));
            if crossings.len() > MIN_PERIODS && tc - crossings[0].0 >= t_avg {
                break;
            }
        }
        for j in 0..nf {
            acc[j] += 0.5 * s.dt * (f0[j] + f1[j]);
        }
        std::mem::swap(&mut f0, &mut f1);
        v0 = v1;
        t = t1;
        if t > t_cap {
            return Err(HybridError::InvalidParameter(format!(
                "trajectory from ({}, {}) completed {} periods by t = {t}; the window needs {MIN_PERIODS}",
                te.x0,
                te.k0,
                crossings.len().saturating_sub(1)
            )));
        }
    }
    let periods = crossings.len() - 1;
    let (t_start, i_start) = &crossings[0];
    let (t_end, i_end) = &crossings[periods];
    let (t_mid, i_mid) = &crossings[periods / 2];
    let values: Vec<f64> = (0..nf).map(|j| (i_end[j] - i_start[j]) / (t_end - t_start)).collect();
    let half_window: Vec<f64> = (0..nf).map(|j| (i_mid[j] - i_start[j]) / (t_mid - t_start)).collect();
    let convergence = values.iter().zip(&half_window).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(TimeAverage { values, half_window, convergence, periods, window: t_end - t_start, energy_drift: drift, dt: s.dt })
}

/// Time average of one observable; returns the value.
pub fn time_average(f: &PhaseFunction, te: &TrajectoryEnsemble, t_avg: f64) -> Result<f64> {
    Ok(time_averages(std::slice::from_ref(f), te, t_avg)?.values[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Independent draws from the Gaussian matched to the Hessian at the minimum.
    ImportanceGaussian,
    /// Random-walk Metropolis chains targeting exp(-beta H).
    MetropolisRW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalSample {
    pub x0: f64,
    pub k0: f64,
    /// Normalized weight.
    pub weight: f64,
    /// Unnormalized log weight: -beta H minus the log proposal density.
    pub log_weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThermalMixture {
    pub beta: f64,
    pub samples: Vec<ThermalSample>,
    pub sampler: Sampler,
    pub seed: u64,
    pub effective_sample_size: f64,
    /// Contiguous blocks for batch-mean errors (correlated samplers only).
    pub batches: Option<Vec<std::ops::Range<usize>>>,
    pub acceptance_rate: Option<f64>,
}

impl ThermalMixture {
    /// Weighted mean of per-sample values and its standard error.
    pub fn mean_and_stderr(&self, values: &[f64]) -> Result<(f64, f64)> {
        if values.len() != self.samples.len() {
            return Err(HybridError::DimensionMismatch { expected: self.samples.len(), found: values.len() });
        }
        let mean: f64 = self.samples.iter().zip(values).map(|(s, v)| s.weight * v).sum();
        let se = match &self.batches {
            None => self.samples.iter().zip(values).map(|(s, v)| (s.weight * (v - mean)).powi(2)).sum::<f64>().sqrt(),
            Some(batches) => {
                let means: Vec<f64> = batches.iter().map(|r| values[r.clone()].iter().sum::<f64>() / r.len() as f64).collect();
                let b = means.len() as f64;
                let mb = means.iter().sum::<f64>() / b;
                (means.iter().map(|m| (m - mb).powi(2)).sum::<f64>() / (b - 1.0) / b).sqrt()
            }
        };
        Ok((mean, se))
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a thermal mixture over phase points. Sample i (or chain i) uses its
/// own ChaCha stream, so results do not depend on the thread count.
pub fn sample_thermal(h: &PhaseSpaceHamiltonian, beta: f64, n_samples: usize, sampler: Sampler, seed: u64) -> Result<ThermalMixture> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(HybridError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    match sampler {
        Sampler::ImportanceGaussian => {
            if n_samples < 2 {
                return Err(HybridError::InvalidParameter("need at least 2 samples".into()));
            }
            importance_gaussian(h, beta, n_samples, seed)
        }
        Sampler::MetropolisRW => {
            if n_samples < 2 * METROPOLIS_CHAINS * BATCHES_PER_CHAIN {
                return Err(HybridError::InvalidParameter(format!(
                    "Metropolis sampling needs at least {} samples",
                    2 * METROPOLIS_CHAINS * BATCHES_PER_CHAIN
                )));
            }
            metropolis(h, beta, n_samples, seed)
        }
    }
}

fn importance_gaussian(h: &PhaseSpaceHamiltonian, beta: f64, n: usize, seed: u64) -> Result<ThermalMixture> {
    let (xm, km) = h.minimum()?;
    let [[a, b], [_, d]] = h.hessian(xm, km);
    let det = a * d - b * b;
    if !(non_degenerate(a, d) && det > 0.0) {
        return Err(HybridError::NonIntegrableWeight(format!(
            "Hessian of `{}` at its minimum is not positive definite; use the Metropolis sampler",
            h.label()
        )));
    }
    // covariance (beta Hess)^-1 and its Cholesky factor
    let (cxx, cxk, ckk) = (d / (beta * det), -b / (beta * det), a / (beta * det));
    let l11 = cxx.sqrt();
    let l21 = cxk / l11;
    let l22 = (ckk - l21 * l21).sqrt();
    let h0 = h.eval(xm, km);
    let raw: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            let (x, k) = (xm + l11 * u, km + l21 * u + l22 * v);
            (x, k, -beta * (h.eval(x, k) - h0) + 0.5 * (u * u + v * v))
        })
        .collect();
    if raw.iter().any(|r| !r.2.is_finite()) {
        return Err(HybridError::NonIntegrableWeight(format!("exp(-beta H) of `{}` overflowed on a sample", h.label())));
    }
    let lmax = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = raw.iter().map(|r| (r.2 - lmax).exp()).collect();
    let total: f64 = ws.iter().sum();
    let ess = total * total / ws.iter().map(|w| w * w).sum::<f64>();
    if ess < 0.01 * n as f64 {
        return Err(HybridError::NonIntegrableWeight(format!(
            "importance weights for `{}` degenerate (effective sample size {ess:.1} of {n}); the proposal variance diverges",
            h.label()
        )));
    }
    let samples = raw.iter().zip(&ws).map(|(r, w)| ThermalSample { x0: r.0, k0: r.1, weight: w / total, log_weight: r.2 }).collect();
    Ok(ThermalMixture {
        beta,
        samples,
        sampler: Sampler::ImportanceGaussian,
        seed,
        effective_sample_size: ess,
        batches: None,
        acceptance_rate: None,
    })
}

fn metropolis(h: &PhaseSpaceHamiltonian, beta: f64, n: usize, seed: u64) -> Result<ThermalMixture> {
    let (xm, km) = h.minimum()?;
    let per = n / METROPOLIS_CHAINS;
    let extra = n % METROPOLIS_CHAINS;
    let lens: Vec<usize> = (0..METROPOLIS_CHAINS).map(|c| per + usize::from(c < extra)).collect();
    let chains: Vec<(Vec<(f64, f64, f64)>, f64)> = (0..METROPOLIS_CHAINS)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, c as u64);
            let (mut x, mut k) = (xm, km);
            let mut lp = -beta * h.eval(x, k);
            let mut step = 1.0 / beta.sqrt();
            let propose = |x: f64, k: f64, step: f64, rng: &mut ChaCha8Rng| {
                let u: f64 = rng.sample(StandardNormal);
                let v: f64 = rng.sample(StandardNormal);
                (x + step * u, k + step * v, rng.random::<f64>())
            };
            // burn-in with step adaptation toward ~40% acceptance
            let mut accepted = 0usize;
            for it in 1..=METROPOLIS_BURN_IN {
                let (xn, kn, r) = propose(x, k, step, &mut rng);
                let ln = -beta * h.eval(xn, kn);
                if ln.is_finite() && r.ln() < ln - lp {
                    (x, k, lp) = (xn, kn, ln);
                    accepted += 1;
                }
                if it % 100 == 0 {
                    let rate = accepted as f64 / 100.0;
                    step *= (rate / 0.4).clamp(0.5, 2.0).sqrt();
                    accepted = 0;
                }
            }
            let mut out = Vec::with_capacity(lens[c]);
            let (mut acc, mut tries) = (0usize, 0usize);
            while out.len() < lens[c] {
                for _ in 0..METROPOLIS_THIN {
                    let (xn, kn, r) = propose(x, k, step, &mut rng);
                    let ln = -beta * h.eval(xn, kn);
                    tries += 1;
                    if ln.is_finite() && r.ln() < ln - lp {
                        (x, k, lp) = (xn, kn, ln);
                        acc += 1;
                    }
                }
                out.push((x, k, lp));
            }
            (out, acc as f64 / tries as f64)
        })
        .collect();
    let mut samples = Vec::with_capacity(n);
    let mut batches = Vec::new();
    let mut rate = 0.0;
    for (chain, r) in chains {
        rate += r / METROPOLIS_CHAINS as f64;
        let start = samples.len();
        let len = chain.len();
        for b in 0..BATCHES_PER_CHAIN {
            batches.push(start + b * len / BATCHES_PER_CHAIN..start + (b + 1) * len / BATCHES_PER_CHAIN);
        }
        samples.extend(chain.into_iter().map(|(x, k, lp)| ThermalSample { x0: x, k0: k, weight: 1.0 / n as f64, log_weight: lp }));
    }
    if samples.iter().any(|s| !(s.x0.abs() < 1e12 && s.k0.abs() < 1e12)) {
        return Err(HybridError::NonIntegrableWeight(format!("Metropolis chains for `{}` ran away", h.label())));
    }
    Ok(ThermalMixture {
        beta,
        samples,
        sampler: Sampler::MetropolisRW,
        seed,
        effective_sample_size: n as f64,
        batches: Some(batches),
        acceptance_rate: Some(rate),
    })
}

/// int f exp(-beta H) / int exp(-beta H) by the trapezoid rule on a box
/// around the minimum that reaches beta (H - H_min) >= 60 along both axes.
pub fn quadrature_reference(f: &PhaseFunction, h: &PhaseSpaceHamiltonian, beta: f64) -> Result<f64> {
    let (xm, km) = h.minimum()?;
    let h0 = h.eval(xm, km);
    let reach = |dir: (f64, f64)| -> Result<f64> {
        let mut l = 1.0;
        for _ in 0..80 {
            let up = beta * (h.eval(xm + l * dir.0, km + l * dir.1) - h0);
            let dn = beta * (h.eval(xm - l * dir.0, km - l * dir.1) - h0);
            if up >= QUADRATURE_EXPONENT && dn >= QUADRATURE_EXPONENT {
                return Ok(l);
            }
            l *= 1.25;
        }
        Err(HybridError::NonIntegrableWeight(format!("exp(-beta H) of `{}` does not decay", h.label())))
    };
    let (lx, lk) = (reach((1.0, 0.0))?, reach((0.0, 1.0))?);
    let n = QUADRATURE_NODES;
    let (hx, hk) = (2.0 * lx / (n - 1) as f64, 2.0 * lk / (n - 1) as f64);
    // rows summed in order so the result does not depend on the thread count
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = xm - lx + i as f64 * hx;
            let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..n {
                let k = km - lk + j as f64 * hk;
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let w = wi * wj * (-beta * (h.eval(x, k) - h0)).exp();
                a += w * f.eval(x, k);
                b += w;
            }
            (a, b)
        })
        .collect();
    let (num, den) = rows.iter().fold((0.0, 0.0), |p, q| (p.0 + q.0, p.1 + q.1));
    Ok(num / den)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CanonicalAverage {
    pub observable: String,
    pub mixture_value: f64,
    pub stderr: f64,
    pub quadrature_reference: f64,
    pub z_score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CanonicalReport {
    pub beta: f64,
    pub hamiltonian: String,
    pub sampler: Sampler,
    pub n_samples: usize,
    pub effective_sample_size: f64,
    pub averages: Vec<CanonicalAverage>,
    pub max_energy_drift: f64,
    pub min_periods: usize,
    /// Largest half-vs-full window difference over samples and observables.
    pub max_window_convergence: f64,
}

fn z_score(value: f64, reference: f64, se: f64) -> f64 {
    let d = value - reference;
    if se > 0.0 {
        d / se
    } else if d == 0.0 {
        0.0
    } else {
        d.signum() * f64::INFINITY
    }
}

/// Per-sample time averages for every phase point of a mixture.
pub fn trajectory_averages(
    fs: &[PhaseFunction],
    h: &PhaseSpaceHamiltonian,
    mixture: &ThermalMixture,
    t_avg: f64,
    settings: TrajectorySettings,
) -> Result<Vec<TimeAverage>> {
    mixture
        .samples
        .par_iter()
        .map(|s| time_averages(fs, &TrajectoryEnsemble::with_settings(h, s.x0, s.k0, settings), t_avg))
        .collect()
}

/// Canonical averages of several observables from one thermal mixture of
/// trajectory ensembles, each compared with the quadrature oracle.
#[allow(clippy::too_many_arguments)]
pub fn canonical_averages(
    fs: &[PhaseFunction],
    h: &PhaseSpaceHamiltonian,
    beta: f64,
    n_samples: usize,
    t_avg: f64,
    seed: u64,
    sampler: Sampler,
    settings: TrajectorySettings,
) -> Result<CanonicalReport> {
    let mixture = sample_thermal(h, beta, n_samples, sampler, seed)?;
    let avgs = trajectory_averages(fs, h, &mixture, t_avg, settings)?;
    let mut averages = Vec::with_capacity(fs.len());
    for (j, f) in fs.iter().enumerate() {
        let vals: Vec<f64> = avgs.iter().map(|a| a.values[j]).collect();
        let (value, se) = mixture.mean_and_stderr(&vals)?;
        let reference = quadrature_reference(f, h, beta)?;
        averages.push(CanonicalAverage {
            observable: f.label().to_string(),
            mixture_value: value,
            stderr: se,
            quadrature_reference: reference,
            z_score: z_score(value, reference, se),
        });
    }
    Ok(CanonicalReport {
        beta,
        hamiltonian: h.label().to_string(),
        sampler,
        n_samples,
        effective_sample_size: mixture.effective_sample_size,
        averages,
        max_energy_drift: avgs.iter().map(|a| a.energy_drift).fold(0.0, f64::max),
        min_periods: avgs.iter().map(|a| a.periods).filter(|&p| p > 0).min().unwrap_or(0),
        max_window_convergence: avgs.iter().map(|a| a.convergence).fold(0.0, f64::max),
    })
}

/// Single-observable form of [`canonical_averages`] with default settings.
pub fn canonical_average(
    f: &PhaseFunction,
    h: &PhaseSpaceHamiltonian,
    beta: f64,
    n_samples: usize,
    t_avg: f64,
    seed: u64,
    sampler: Sampler,
) -> Result<CanonicalAverage> {
    let r = canonical_averages(std::slice::from_ref(f), h, beta, n_samples, t_avg, seed, sampler, TrajectorySettings::default())?;
    Ok(r.averages.into_iter().next().expect("one observable"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorizationReport {
    /// max |log w_joint - log w_1 - log w_2| over paired samples.
    pub weight_residual: f64,
    pub joint_value: f64,
    pub joint_stderr: f64,
    /// Product of the two one-dimensional quadrature oracles.
    pub product_reference: f64,
    pub z_score: f64,
}

/// Two noninteracting systems sampled independently and paired by index. The
/// joint stationary ensemble of a pair is the product ensemble, so the joint
/// average of f1 f2 is the product of the two time averages.
#[allow(clippy::too_many_arguments)]
pub fn factorization_check(
    h1: &PhaseSpaceHamiltonian,
    h2: &PhaseSpaceHamiltonian,
    f1: &PhaseFunction,
    f2: &PhaseFunction,
    beta: f64,
    n_samples: usize,
    t_avg: f64,
    seed: u64,
    sampler: Sampler,
) -> Result<FactorizationReport> {
    let m1 = sample_thermal(h1, beta, n_samples, sampler, seed)?;
    let m2 = sample_thermal(h2, beta, n_samples, sampler, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    let settings = TrajectorySettings::default();
    let a1 = trajectory_averages(std::slice::from_ref(f1), h1, &m1, t_avg, settings)?;
    let a2 = trajectory_averages(std::slice::from_ref(f2), h2, &m2, t_avg, settings)?;
    let (x1m, k1m) = h1.minimum()?;
    let (x2m, k2m) = h2.minimum()?;
    let (e1, e2) = (h1.eval(x1m, k1m), h2.eval(x2m, k2m));
    let mut residual = 0.0f64;
    let mut log_joint = Vec::with_capacity(n_samples);
    for (s1, s2) in m1.samples.iter().zip(&m2.samples) {
        // joint weight from the total energy, with the same proposal terms
        let prop1 = s1.log_weight + beta * (h1.eval(s1.x0, s1.k0) - e1);
        let prop2 = s2.log_weight + beta * (h2.eval(s2.x0, s2.k0) - e2);
        let lj = -beta * (h1.eval(s1.x0, s1.k0) + h2.eval(s2.x0, s2.k0) - e1 - e2) + prop1 + prop2;
        residual = residual.max((lj - s1.log_weight - s2.log_weight).abs());
        log_joint.push(lj);
    }
    let lmax = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_joint.iter().map(|l| (l - lmax).exp()).collect();
    let total: f64 = w.iter().sum();
    let joint = ThermalMixture {
        beta,
        samples: m1
            .samples
            .iter()
            .zip(&m2.samples)
            .zip(&w)
            .zip(&log_joint)
            .map(|(((s1, _), wi), lj)| ThermalSample { x0: s1.x0, k0: s1.k0, weight: wi / total, log_weight: *lj })
            .collect(),
        sampler,
        seed,
        effective_sample_size: total * total / w.iter().map(|v| v * v).sum::<f64>(),
        batches: m1.batches.clone(),
        acceptance_rate: None,
    };
    let prod: Vec<f64> = a1.iter().zip(&a2).map(|(p, q)| p.values[0] * q.values[0]).collect();
    let (value, se) = joint.mean_and_stderr(&prod)?;
    let reference = quadrature_reference(f1, h1, beta)? * quadrature_reference(f2, h2, beta)?;
    Ok(FactorizationReport {
        weight_residual: residual,
        joint_value: value,
        joint_stderr: se,
        product_reference: reference,
        z_score: z_score(value, reference, se),
    })
}

/// Eigenpairs of H = hbar^2/(2m) D^T D + V(q) on the continuous quantum axis,
/// with D the grid's spectral derivative. Vectors are normalized with the
/// quantum weight. Returns the lowest `n` pairs.
pub fn quantum_eigenstates<F: Fn(f64) -> f64>(
    grid: &HybridGrid,
    m_q: f64,
    v: F,
    hbar: f64,
    n: usize,
) -> Result<Vec<(f64, Array1<Complex64>)>> {
    let d = grid.derivative_matrix_q()?;
    let q = grid.q_coords()?;
    let nq = q.len();
    if n == 0 || n > nq {
        return Err(HybridError::InvalidParameter(format!("asked for {n} eigenstates of a {nq}-point axis")));
    }
    let c = hbar * hbar / (2.0 * m_q);
    let dm = DMatrix::from_fn(nq, nq, |i, j| d[[i, j]]);
    let mut hm = dm.transpose() * &dm * c;
    for i in 0..nq {
        hm[(i, i)] += v(q[i]);
    }
    let eig = hm.symmetric_eigen();
    let mut order: Vec<usize> = (0..nq).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let w = grid.quantum_weight();
    Ok(order
        .into_iter()
        .take(n)
        .map(|idx| {
            let col = eig.eigenvectors.column(idx);
            let big = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let s = big.signum() / (col.norm_squared() * w).sqrt();
            (eig.eigenvalues[idx], col.iter().map(|&v| Complex64::new(s * v, 0.0)).collect())
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StationarityReport {
    /// max |P(t) - P(0)| over the window.
    pub dp_norm: f64,
    /// -hbar d(arg <psi(0)|psi(t)>)/dt, from the overlap at the end of the window.
    pub energy_estimate: f64,
    pub window: f64,
}

/// Evolves `e` for `window` and measures how far it is from stationary. The
/// phase rotation is read from the final overlap, so |E| window / hbar must
/// stay below pi.
pub fn stationarity_check(h: &EnsembleHamiltonian, e: &HybridEnsemble, window: f64, dt: f64) -> Result<StationarityReport> {
    let n_rec = 10usize;
    let steps = (window / dt).ceil() as usize;
    let opts = EvolveOptions { record_every: (steps / n_rec).max(1), ..Default::default() };
    let p0 = e.density();
    let mut dp = 0.0f64;
    // evolve chunk by chunk to sample P along the way
    let mut state = e.clone();
    let chunk = window / n_rec as f64;
    for _ in 0..n_rec {
        let ev = evolve(h, &state, chunk, dt.min(chunk), &[], &opts)?;
        state = ev.state;
        let p = state.density();
        dp = dp.max(p.iter().zip(p0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let g = e.grid();
    let overlap = g.integrate_complex(&(e.psi().mapv(|z| z.conj()) * state.psi()))?;
    Ok(StationarityReport { dp_norm: dp, energy_estimate: -e.hbar() * overlap.arg() / window, window })
}

/// Classical stationary ensemble of a rotor H = k^2/2m + v0 (1 - cos x) on the
/// periodic grid [0, 2 pi) at energy E > 2 v0: P ~ 1/|xdot|, S = W(x) with
/// W' = k(x). hbar is set to (1/2 pi) times the loop integral of k so that psi
/// is single valued. Returns the ensemble and its Hamiltonian. The classical
/// psi equation amplifies roundoff near the Nyquist wavenumber, so checks on
/// this ensemble should use coarse grids and short windows.
pub fn rotor_stationary_ensemble(grid: &HybridGrid, m: f64, v0: f64, energy: f64) -> Result<(HybridEnsemble, EnsembleHamiltonian)> {
    let two_pi = 2.0 * std::f64::consts::PI;
    if grid.n_quantum() != 1 || grid.x_coords()[0].abs() > 1e-12 || (grid.x_length() - two_pi).abs() > 1e-12 {
        return Err(HybridError::InvalidParameter("rotor ensembles live on a purely classical grid over [0, 2 pi)".into()));
    }
    if !(energy > 2.0 * v0.abs()) || !(m > 0.0) {
        return Err(HybridError::InvalidParameter(format!("rotor energy {energy} must exceed the barrier {}", 2.0 * v0.abs())));
    }
    let k = move |x: f64| (2.0 * m * (energy - v0 * (1.0 - x.cos()))).sqrt();
    // W(x) = int_0^x k by composite Simpson
    let w = |x: f64| -> f64 {
        let n = 2000;
        let h = x / n as f64;
        let mut s = k(0.0) + k(x);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * k(i as f64 * h);
        }
        s * h / 3.0
    };
    let hbar = w(two_pi) / two_pi;
    let psi = grid.complex_field(|_, x| Complex64::from_polar((m / k(x)).sqrt(), w(x) / hbar));
    let e = HybridEnsemble::from_psi(grid, psi, hbar)?;
    let hf = PhaseFunction::new(
        format!("rotor(m={m},v0={v0})"),
        move |x, p| p * p / (2.0 * m) + v0 * (1.0 - x.cos()),
        move |x, _| v0 * x.sin(),
        move |_, p| p / m,
    );
    Ok((e, EnsembleHamiltonian::Classical { h: hf }))
}

/// Thermal mixture over eigenvectors of a d-level Hamiltonian, each paired
/// with the classical factor `psi_c`, weighted by exp(-beta E_n).
pub fn quantum_thermal_mixture(
    grid: &HybridGrid,
    h: &QuantumOperator,
    beta: f64,
    psi_c: &Array1<Complex64>,
    hbar: f64,
) -> Result<Mixture> {
    if h.dim() != grid.n_quantum() || grid.is_continuous_quantum() {
        return Err(HybridError::DimensionMismatch { expected: grid.n_quantum(), found: h.dim() });
    }
    if !(beta > 0.0) {
        return Err(HybridError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let d = h.dim();
    let eig = DMatrix::from_fn(d, d, |i, j| h.matrix()[[i, j]]).symmetric_eigen();
    let emin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let boltz: Vec<f64> = eig.eigenvalues.iter().map(|e| (-beta * (e - emin)).exp()).collect();
    let z: f64 = boltz.iter().sum();
    let mut members = Vec::with_capacity(d);
    for n in 0..d {
        let v: Array1<Complex64> = eig.eigenvectors.column(n).iter().copied().collect();
        members.push((boltz[n] / z, HybridEnsemble::product(grid, &v, psi_c, hbar)?));
    }
    // weights summing to 1 - O(eps) are renormalized inside the tolerance of Mixture::new
    Mixture::new(members)
}

/// Mixture average of the quantum observable M in the Gibbs mixture of H.
pub fn quantum_thermal_average(
    grid: &HybridGrid,
    h: &QuantumOperator,
    m: &QuantumOperator,
    beta: f64,
    psi_c: &Array1<Complex64>,
    hbar: f64,
) -> Result<f64> {
    quantum_thermal_mixture(grid, h, beta, psi_c, hbar)?.expectation(&QuantumObservable::new(m.clone()))
}
