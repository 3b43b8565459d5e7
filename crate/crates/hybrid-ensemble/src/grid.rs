//! Joint configuration-space grid: quantum sector (discrete index or 1-d
//! coordinate) times a 1-d classical sector, with quadrature and derivatives.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayViewMut1, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{HybridError, Result};

pub type RealField = Array2<f64>;
pub type ComplexField = Array2<Complex64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantumSector {
    Discrete {
        d: usize,
    },
    Continuous {
        q_min: f64,
        q_max: f64,
        n_q: usize,
        periodic: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSector {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    #[serde(default = "default_periodic")]
    pub periodic: bool,
}

fn default_periodic() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DerivativeScheme {
    Spectral,
    FiniteDifference { order: u8 },
}

impl Default for DerivativeScheme {
    fn default() -> Self {
        DerivativeScheme::Spectral
    }
}

/// Serializable grid descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub quantum: QuantumSector,
    pub classical: ClassicalSector,
    #[serde(default)]
    pub scheme: DerivativeScheme,
}

type FftPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

/// One continuous, uniformly spaced axis.
#[derive(Clone)]
struct Axis1 {
    name: &'static str,
    n: usize,
    step: f64,
    periodic: bool,
    coords: Array1<f64>,
    fft: Option<FftPair>,
    // i*kappa with the Nyquist mode removed
    ik: Vec<Complex64>,
}

impl Axis1 {
    fn new(name: &'static str, min: f64, max: f64, n: usize, periodic: bool, spectral: bool) -> Self {
        let step = (max - min) / n as f64;
        let coords = Array1::from_iter((0..n).map(|i| min + i as f64 * step));
        let (fft, ik) = if spectral {
            let mut planner = FftPlanner::new();
            let fwd = planner.plan_fft_forward(n);
            let inv = planner.plan_fft_inverse(n);
            let len = max - min;
            let ik = (0..n)
                .map(|j| {
                    if n % 2 == 0 && j == n / 2 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                        Complex64::new(0.0, 2.0 * std::f64::consts::PI * m / len)
                    }
                })
                .collect();
            (Some((fwd, inv)), ik)
        } else {
            (None, Vec::new())
        };
        Axis1 { name, n, step, periodic, coords, fft, ik }
    }

    fn spectral_apply(&self, buf: &mut [Complex64], power: u32) {
        let (fwd, inv) = self.fft.as_ref().expect("spectral plans present");
        fwd.process(buf);
        let scale = 1.0 / self.n as f64;
        for (v, ik) in buf.iter_mut().zip(&self.ik) {
            *v *= ik.powu(power) * scale;
        }
        inv.process(buf);
    }

    fn fd_apply(&self, buf: &mut [Complex64], order: u8) {
        let n = self.n as isize;
        let src: Vec<Complex64> = buf.to_vec();
        let at = |i: isize| -> Complex64 {
            if (0..n).contains(&i) {
                src[i as usize]
            } else if self.periodic {
                src[i.rem_euclid(n) as usize]
            } else {
                Complex64::new(0.0, 0.0)
            }
        };
        let h = self.step;
        for i in 0..n {
            buf[i as usize] = match order {
                2 => (at(i + 1) - at(i - 1)) / (2.0 * h),
                _ => (-at(i + 2) + 8.0 * at(i + 1) - 8.0 * at(i - 1) + at(i - 2)) / (12.0 * h),
            };
        }
    }

    fn apply(&self, buf: &mut [Complex64], scheme: DerivativeScheme, power: u32) {
        match scheme {
            DerivativeScheme::Spectral => self.spectral_apply(buf, power),
            DerivativeScheme::FiniteDifference { order } => {
                for _ in 0..power {
                    self.fd_apply(buf, order);
                }
            }
        }
    }
}

/// Discretized joint configuration space. Cloning is cheap (FFT plans are shared).
#[derive(Clone)]
pub struct HybridGrid {
    spec: GridSpec,
    x: Axis1,
    q: Option<Axis1>,
}

impl fmt::Debug for HybridGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridGrid").field("spec", &self.spec).finish()
    }
}

impl PartialEq for HybridGrid {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl HybridGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        let spectral = spec.scheme == DerivativeScheme::Spectral;
        if let DerivativeScheme::FiniteDifference { order } = spec.scheme {
            if order != 2 && order != 4 {
                return Err(HybridError::InvalidGrid(format!(
                    "finite-difference order must be 2 or 4, got {order}"
                )));
            }
        }
        let c = spec.classical;
        if !(c.x_max > c.x_min) || !c.x_min.is_finite() || !c.x_max.is_finite() {
            return Err(HybridError::InvalidGrid(format!(
                "classical sector needs x_max > x_min, got [{}, {}]",
                c.x_min, c.x_max
            )));
        }
        if c.n_x < 8 {
            return Err(HybridError::InvalidGrid(format!("n_x must be >= 8, got {}", c.n_x)));
        }
        let x = Axis1::new("x", c.x_min, c.x_max, c.n_x, c.periodic, spectral);
        let q = match spec.quantum {
            QuantumSector::Discrete { d } => {
                if d < 1 {
                    return Err(HybridError::InvalidGrid("discrete sector needs d >= 1".into()));
                }
                None
            }
            QuantumSector::Continuous { q_min, q_max, n_q, periodic } => {
                if !(q_max > q_min) || !q_min.is_finite() || !q_max.is_finite() {
                    return Err(HybridError::InvalidGrid(format!(
                        "quantum sector needs q_max > q_min, got [{q_min}, {q_max}]"
                    )));
                }
                if n_q < 8 {
                    return Err(HybridError::InvalidGrid(format!("n_q must be >= 8, got {n_q}")));
                }
                if spectral && !n_q.is_power_of_two() {
                    return Err(HybridError::InvalidGrid(format!(
                        "n_q must be a power of two for spectral derivatives, got {n_q}"
                    )));
                }
                Some(Axis1::new("q", q_min, q_max, n_q, periodic, spectral))
            }
        };
        Ok(HybridGrid { spec, x, q })
    }

    /// Purely classical grid: a one-state quantum sector times the classical axis.
    pub fn classical(x_min: f64, x_max: f64, n_x: usize) -> Result<Self> {
        Self::new(GridSpec {
            quantum: QuantumSector::Discrete { d: 1 },
            classical: ClassicalSector { x_min, x_max, n_x, periodic: true },
            scheme: DerivativeScheme::Spectral,
        })
    }

    pub fn discrete(d: usize, x_min: f64, x_max: f64, n_x: usize) -> Result<Self> {
        Self::new(GridSpec {
            quantum: QuantumSector::Discrete { d },
            classical: ClassicalSector { x_min, x_max, n_x, periodic: true },
            scheme: DerivativeScheme::Spectral,
        })
    }

    pub fn continuous(q: (f64, f64, usize), x: (f64, f64, usize)) -> Result<Self> {
        Self::new(GridSpec {
            quantum: QuantumSector::Continuous { q_min: q.0, q_max: q.1, n_q: q.2, periodic: true },
            classical: ClassicalSector { x_min: x.0, x_max: x.1, n_x: x.2, periodic: true },
            scheme: DerivativeScheme::Spectral,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn scheme(&self) -> DerivativeScheme {
        self.spec.scheme
    }

    pub fn n_x(&self) -> usize {
        self.x.n
    }

    /// Number of quantum-sector points (d or n_q).
    pub fn n_quantum(&self) -> usize {
        match self.spec.quantum {
            QuantumSector::Discrete { d } => d,
            QuantumSector::Continuous { n_q, .. } => n_q,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_quantum(), self.n_x())
    }

    pub fn n_cells(&self) -> usize {
        self.n_quantum() * self.n_x()
    }

    pub fn is_continuous_quantum(&self) -> bool {
        self.q.is_some()
    }

    pub fn dx(&self) -> f64 {
        self.x.step
    }

    pub fn dq(&self) -> Result<f64> {
        self.q.as_ref().map(|a| a.step).ok_or(HybridError::DiscreteQuantumSector)
    }

    /// Quadrature measure along the quantum axis (1 for a discrete index).
    pub fn quantum_weight(&self) -> f64 {
        self.q.as_ref().map_or(1.0, |a| a.step)
    }

    /// Weight of one cell: dq*dx, or dx for a discrete quantum sector.
    pub fn cell_weight(&self) -> f64 {
        self.quantum_weight() * self.x.step
    }

    pub fn volume(&self) -> f64 {
        self.cell_weight() * self.n_cells() as f64
    }

    pub fn x_coords(&self) -> &Array1<f64> {
        &self.x.coords
    }

    pub fn q_coords(&self) -> Result<&Array1<f64>> {
        self.q.as_ref().map(|a| &a.coords).ok_or(HybridError::DiscreteQuantumSector)
    }

    pub fn x_length(&self) -> f64 {
        self.spec.classical.x_max - self.spec.classical.x_min
    }

    /// Coordinate value for quantum index `i` (the index itself when discrete).
    pub fn quantum_coordinate(&self, i: usize) -> f64 {
        self.q.as_ref().map_or(i as f64, |a| a.coords[i])
    }

    /// Real field from f(q, x); q is the index for a discrete sector.
    pub fn real_field<F: Fn(f64, f64) -> f64>(&self, f: F) -> RealField {
        let (nq, nx) = self.shape();
        Array2::from_shape_fn((nq, nx), |(i, j)| f(self.quantum_coordinate(i), self.x.coords[j]))
    }

    pub fn complex_field<F: Fn(f64, f64) -> Complex64>(&self, f: F) -> ComplexField {
        let (nq, nx) = self.shape();
        Array2::from_shape_fn((nq, nx), |(i, j)| f(self.quantum_coordinate(i), self.x.coords[j]))
    }

    pub fn check_shape<T>(&self, field: &Array2<T>) -> Result<()> {
        let found = field.dim();
        if found != self.shape() {
            return Err(HybridError::ShapeMismatch { expected: self.shape(), found });
        }
        Ok(())
    }

    /// Sum of weight*value over all cells.
    pub fn integrate(&self, field: &RealField) -> Result<f64> {
        self.check_shape(field)?;
        Ok(field.sum() * self.cell_weight())
    }

    pub fn integrate_complex(&self, field: &ComplexField) -> Result<Complex64> {
        self.check_shape(field)?;
        Ok(field.sum() * self.cell_weight())
    }

    /// Integral of a classical-sector function.
    pub fn integrate_classical(&self, f: &Array1<f64>) -> Result<f64> {
        if f.len() != self.n_x() {
            return Err(HybridError::DimensionMismatch { expected: self.n_x(), found: f.len() });
        }
        Ok(f.sum() * self.x.step)
    }

    /// Sum or integral of a quantum-sector function.
    pub fn integrate_quantum(&self, f: &Array1<f64>) -> Result<f64> {
        if f.len() != self.n_quantum() {
            return Err(HybridError::DimensionMismatch { expected: self.n_quantum(), found: f.len() });
        }
        Ok(f.sum() * self.quantum_weight())
    }

    fn x_axis_checked(&self) -> Result<&Axis1> {
        if self.spec.scheme == DerivativeScheme::Spectral && !self.x.periodic {
            return Err(HybridError::SpectralNonPeriodic { axis: "x" });
        }
        Ok(&self.x)
    }

    fn q_axis_checked(&self) -> Result<&Axis1> {
        let q = self.q.as_ref().ok_or(HybridError::DiscreteQuantumSector)?;
        if self.spec.scheme == DerivativeScheme::Spectral && !q.periodic {
            return Err(HybridError::SpectralNonPeriodic { axis: q.name });
        }
        Ok(q)
    }

    fn apply_along(&self, axis: &Axis1, ax: Axis, field: &ComplexField, power: u32) -> Result<ComplexField> {
        self.check_shape(field)?;
        let mut out = field.clone();
        let mut buf = vec![Complex64::new(0.0, 0.0); axis.n];
        for mut lane in out.lanes_mut(ax) {
            copy_in(&lane, &mut buf);
            axis.apply(&mut buf, self.spec.scheme, power);
            copy_out(&mut lane, &buf);
        }
        Ok(out)
    }

    pub fn d_dx(&self, field: &ComplexField) -> Result<ComplexField> {
        let a = self.x_axis_checked()?;
        self.apply_along(a, Axis(1), field, 1)
    }

    /// Second x-derivative, defined as d_dx composed with itself.
    pub fn laplacian_x(&self, field: &ComplexField) -> Result<ComplexField> {
        let a = self.x_axis_checked()?;
        self.apply_along(a, Axis(1), field, 2)
    }

    pub fn d_dq(&self, field: &ComplexField) -> Result<ComplexField> {
        let a = self.q_axis_checked()?;
        self.apply_along(a, Axis(0), field, 1)
    }

    pub fn laplacian_q(&self, field: &ComplexField) -> Result<ComplexField> {
        let a = self.q_axis_checked()?;
        self.apply_along(a, Axis(0), field, 2)
    }

    pub fn d_dx_real(&self, field: &RealField) -> Result<RealField> {
        Ok(self.d_dx(&to_complex(field))?.mapv(|z| z.re))
    }

    pub fn laplacian_x_real(&self, field: &RealField) -> Result<RealField> {
        Ok(self.laplacian_x(&to_complex(field))?.mapv(|z| z.re))
    }

    pub fn d_dq_real(&self, field: &RealField) -> Result<RealField> {
        Ok(self.d_dq(&to_complex(field))?.mapv(|z| z.re))
    }

    pub fn laplacian_q_real(&self, field: &RealField) -> Result<RealField> {
        Ok(self.laplacian_q(&to_complex(field))?.mapv(|z| z.re))
    }

    /// Derivative of a classical-sector function.
    pub fn d_dx_1d(&self, f: &Array1<Complex64>) -> Result<Array1<Complex64>> {
        let a = self.x_axis_checked()?;
        let mut buf = f.to_vec();
        if buf.len() != a.n {
            return Err(HybridError::DimensionMismatch { expected: a.n, found: buf.len() });
        }
        a.apply(&mut buf, self.spec.scheme, 1);
        Ok(Array1::from(buf))
    }

    /// Matrix of the first q-derivative in the grid basis (column j = D e_j).
    pub fn derivative_matrix_q(&self) -> Result<Array2<f64>> {
        let a = self.q_axis_checked()?;
        let n = a.n;
        let mut m = Array2::zeros((n, n));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            buf[j] = Complex64::new(1.0, 0.0);
            a.apply(&mut buf, self.spec.scheme, 1);
            for i in 0..n {
                m[[i, j]] = buf[i].re;
            }
        }
        Ok(m)
    }

    /// Translate every classical-sector lane by `shift` (f(x) -> f(x - shift)).
    /// Spectral grids translate exactly for band-limited data.
    /// Any number of rows is accepted.
    pub fn translate_x(&self, field: &ComplexField, shift: f64) -> Result<ComplexField> {
        let a = self.x_axis_checked()?;
        if field.ncols() != a.n {
            return Err(HybridError::ShapeMismatch { expected: (field.nrows(), a.n), found: field.dim() });
        }
        let mut out = field.clone();
        let mut buf = vec![Complex64::new(0.0, 0.0); a.n];
        let (fwd, inv) = match &a.fft {
            Some(p) => p.clone(),
            None => {
                let mut planner = FftPlanner::new();
                (planner.plan_fft_forward(a.n), planner.plan_fft_inverse(a.n))
            }
        };
        let len = self.x_length();
        let n = a.n;
        let phases: Vec<Complex64> = (0..n)
            .map(|j| {
                let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
                let kappa = 2.0 * std::f64::consts::PI * m / len;
                if n % 2 == 0 && j == n / 2 {
                    // symmetric treatment of the Nyquist mode keeps real data real
                    Complex64::new((kappa * shift).cos(), 0.0)
                } else {
                    Complex64::from_polar(1.0, -kappa * shift)
                }
            })
            .collect();
        for mut lane in out.lanes_mut(Axis(1)) {
            copy_in(&lane, &mut buf);
            fwd.process(&mut buf);
            for (v, ph) in buf.iter_mut().zip(&phases) {
                *v *= ph / n as f64;
            }
            inv.process(&mut buf);
            copy_out(&mut lane, &buf);
        }
        Ok(out)
    }

    pub fn translate_x_1d(&self, f: &Array1<Complex64>, shift: f64) -> Result<Array1<Complex64>> {
        let row = f.clone().insert_axis(Axis(0));
        Ok(self.translate_x(&row, shift)?.row(0).to_owned())
    }

    /// Band-limited interpolation of each quantum lane at classical position `x0`.
    pub fn interpolate_x(&self, field: &ComplexField, x0: f64) -> Result<Array1<Complex64>> {
        self.check_shape(field)?;
        let shifted = self.translate_x(field, self.x.coords[0] - x0)?;
        Ok(shifted.column(0).to_owned())
    }
}

fn copy_in(lane: &ArrayViewMut1<Complex64>, buf: &mut [Complex64]) {
    for (b, v) in buf.iter_mut().zip(lane.iter()) {
        *b = *v;
    }
}

fn copy_out(lane: &mut ArrayViewMut1<Complex64>, buf: &[Complex64]) {
    for (v, b) in lane.iter_mut().zip(buf) {
        *v = *b;
    }
}

pub fn to_complex(field: &RealField) -> ComplexField {
    field.mapv(|v| Complex64::new(v, 0.0))
}
