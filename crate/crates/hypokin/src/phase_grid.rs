//! Discrete phase space `T¹ × [-v_max, v_max]`.
//!
//! The x direction is periodic and differentiated spectrally. The velocity
//! direction is truncated, integrated with trapezoid or Gauss-Legendre
//! weights, and differentiated with a fourth-order stencil (uniform nodes)
//! or the Lagrange differentiation matrix (Gauss nodes).
//!
//! Fields are stored x-major: entry `(i, j)` of an `n_x × n_v` field sits at
//! `i * n_v + j`, so each x node owns a contiguous velocity profile.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    #[default]
    Uniform,
    Gauss,
}

/// Plain-data description of a grid, as it appears in configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n_x: usize,
    pub length_x: f64,
    pub n_v: usize,
    pub v_max: f64,
    pub quadrature: Quadrature,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_x: 16,
            length_x: 2.0 * PI,
            n_v: 64,
            v_max: 8.0,
            quadrature: Quadrature::Uniform,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Arc<PhaseGrid>> {
        build_grid(self.n_x, self.length_x, self.n_v, self.v_max, self.quadrature).map(Arc::new)
    }
}

pub struct PhaseGrid {
    spec: GridSpec,
    x_nodes: Vec<f64>,
    v_nodes: Vec<f64>,
    v_weights: Vec<f64>,
    dv: DMatrix<f64>,
    wavenumbers: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for PhaseGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhaseGrid").field("spec", &self.spec).finish()
    }
}

impl PartialEq for PhaseGrid {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

/// Builds a grid, rejecting sizes below which spectral derivatives and
/// quadrature stop meaning anything.
pub fn build_grid(
    n_x: usize,
    length_x: f64,
    n_v: usize,
    v_max: f64,
    quadrature: Quadrature,
) -> Result<PhaseGrid> {
    if n_x < 4 {
        return Err(Error::invalid("grid.n_x", format!("need at least 4 nodes, got {n_x}")));
    }
    if n_v < 8 {
        return Err(Error::invalid("grid.n_v", format!("need at least 8 nodes, got {n_v}")));
    }
    if !(v_max > 0.0 && v_max.is_finite()) {
        return Err(Error::invalid("grid.v_max", format!("must be positive, got {v_max}")));
    }
    if !(length_x > 0.0 && length_x.is_finite()) {
        return Err(Error::invalid("grid.length_x", format!("must be positive, got {length_x}")));
    }

    let dx = length_x / n_x as f64;
    let x_nodes = (0..n_x).map(|i| i as f64 * dx).collect();

    let (v_nodes, v_weights, dv) = match quadrature {
        Quadrature::Uniform => {
            let h = 2.0 * v_max / (n_v - 1) as f64;
            let nodes: Vec<f64> = (0..n_v).map(|j| -v_max + j as f64 * h).collect();
            let mut weights = vec![h; n_v];
            weights[0] = 0.5 * h;
            weights[n_v - 1] = 0.5 * h;
            (nodes, weights, fourth_order_stencil(n_v, h))
        }
        Quadrature::Gauss => {
            let (t, w) = gauss_legendre(n_v);
            let nodes: Vec<f64> = t.iter().map(|t| t * v_max).collect();
            let weights: Vec<f64> = w.iter().map(|w| w * v_max).collect();
            let dv = lagrange_differentiation(&t, &w) / v_max;
            (nodes, weights, dv)
        }
    };

    let wavenumbers = (0..n_x)
        .map(|m| {
            let k = 2.0 * PI / length_x;
            if 2 * m < n_x {
                k * m as f64
            } else if 2 * m == n_x {
                0.0
            } else {
                k * (m as f64 - n_x as f64)
            }
        })
        .collect();

    let mut planner = FftPlanner::new();
    Ok(PhaseGrid {
        spec: GridSpec {
            n_x,
            length_x,
            n_v,
            v_max,
            quadrature,
        },
        x_nodes,
        v_nodes,
        v_weights,
        dv,
        wavenumbers,
        fft: planner.plan_fft_forward(n_x),
        ifft: planner.plan_fft_inverse(n_x),
    })
}

fn fourth_order_stencil(n: usize, h: f64) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n, n);
    let s = 1.0 / (12.0 * h);
    let mut set = |row: usize, start: usize, coeffs: [f64; 5]| {
        for (k, c) in coeffs.iter().enumerate() {
            d[(row, start + k)] = c * s;
        }
    };
    set(0, 0, [-25.0, 48.0, -36.0, 16.0, -3.0]);
    set(1, 0, [-3.0, -10.0, 18.0, -6.0, 1.0]);
    for j in 2..n - 2 {
        set(j, j - 2, [1.0, -8.0, 0.0, 8.0, -1.0]);
    }
    set(n - 2, n - 5, [-1.0, 6.0, -18.0, 10.0, 3.0]);
    set(n - 1, n - 5, [3.0, -16.0, 36.0, -48.0, 25.0]);
    d
}

/// Gauss-Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let n = n as f64;
    (p1, n * (x * p1 - p0) / (x * x - 1.0))
}

fn lagrange_differentiation(t: &[f64], w: &[f64]) -> DMatrix<f64> {
    let n = t.len();
    let b: Vec<f64> = (0..n)
        .map(|j| {
            let s = ((1.0 - t[j] * t[j]) * w[j]).sqrt();
            if j % 2 == 0 {
                s
            } else {
                -s
            }
        })
        .collect();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let v = (b[j] / b[i]) / (t[i] - t[j]);
                d[(i, j)] = v;
                diag -= v;
            }
        }
        d[(i, i)] = diag;
    }
    d
}

impl PhaseGrid {
    pub fn spec(&self) -> GridSpec {
        self.spec
    }
    pub fn n_x(&self) -> usize {
        self.spec.n_x
    }
    pub fn n_v(&self) -> usize {
        self.spec.n_v
    }
    pub fn len(&self) -> usize {
        self.spec.n_x * self.spec.n_v
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn length_x(&self) -> f64 {
        self.spec.length_x
    }
    pub fn v_max(&self) -> f64 {
        self.spec.v_max
    }
    pub fn quadrature(&self) -> Quadrature {
        self.spec.quadrature
    }
    pub fn dx(&self) -> f64 {
        self.spec.length_x / self.spec.n_x as f64
    }
    pub fn x_nodes(&self) -> &[f64] {
        &self.x_nodes
    }
    pub fn v_nodes(&self) -> &[f64] {
        &self.v_nodes
    }
    pub fn v_weights(&self) -> &[f64] {
        &self.v_weights
    }
    /// Velocity differentiation matrix acting on one profile.
    pub fn dv_matrix(&self) -> &DMatrix<f64> {
        &self.dv
    }
    /// Angular wavenumber of each FFT bin; the Nyquist bin (even `n_x`) is 0.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }
    /// FFT bin of the Nyquist mode, if `n_x` is even.
    pub fn nyquist_bin(&self) -> Option<usize> {
        (self.spec.n_x % 2 == 0).then_some(self.spec.n_x / 2)
    }
    /// Poincaré constant of the torus for mean-free functions, `(L/2π)²`.
    pub fn poincare_constant(&self) -> f64 {
        (self.spec.length_x / (2.0 * PI)).powi(2)
    }
    pub fn weights_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.v_weights)
    }

    /// Velocity-only L² pairing `∑ⱼ wⱼ aⱼ bⱼ`.
    pub fn dot_v(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.v_weights)
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    /// Per-bin spectrum, stored `[m * n_v + j]` for bin `m` and velocity node `j`.
    pub fn to_spectrum(&self, values: &[f64]) -> Vec<Complex64> {
        let (nx, nv) = (self.n_x(), self.n_v());
        let mut out = vec![Complex64::new(0.0, 0.0); nx * nv];
        let mut buf = vec![Complex64::new(0.0, 0.0); nx];
        for j in 0..nv {
            for i in 0..nx {
                buf[i] = Complex64::new(values[i * nv + j], 0.0);
            }
            self.fft.process(&mut buf);
            for m in 0..nx {
                out[m * nv + j] = buf[m];
            }
        }
        out
    }

    /// Inverse of [`to_spectrum`](Self::to_spectrum), keeping the real part.
    pub fn from_spectrum(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let (nx, nv) = (self.n_x(), self.n_v());
        let scale = 1.0 / nx as f64;
        let mut out = vec![0.0; nx * nv];
        let mut buf = vec![Complex64::new(0.0, 0.0); nx];
        for j in 0..nv {
            for m in 0..nx {
                buf[m] = spectrum[m * nv + j];
            }
            self.ifft.process(&mut buf);
            for i in 0..nx {
                out[i * nv + j] = buf[i].re * scale;
            }
        }
        out
    }

    /// Multiplies bin `m` at velocity node `j` by `mult(m, j)`.
    pub fn apply_x_multiplier(
        &self,
        values: &[f64],
        mut mult: impl FnMut(usize, usize) -> Complex64,
    ) -> Vec<f64> {
        let nv = self.n_v();
        let mut spec = self.to_spectrum(values);
        for (idx, c) in spec.iter_mut().enumerate() {
            *c *= mult(idx / nv, idx % nv);
        }
        self.from_spectrum(&spec)
    }

    /// Periodic spectral x-derivative of a single real function of x.
    pub fn dx_scalar(&self, u: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        for (m, c) in buf.iter_mut().enumerate() {
            *c *= Complex64::new(0.0, self.wavenumbers[m]);
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.n_x() as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    pub(crate) fn fft_inplace(&self, buf: &mut [Complex64]) {
        self.fft.process(buf);
    }

    pub(crate) fn ifft_inplace(&self, buf: &mut [Complex64]) {
        self.ifft.process(buf);
    }
}

/// A real function `h(x, v)` sampled on a grid.
#[derive(Clone, Debug)]
pub struct DistributionField {
    grid: Arc<PhaseGrid>,
    values: Vec<f64>,
}

impl DistributionField {
    pub fn new(grid: &Arc<PhaseGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(
                "field.values",
                format!("expected {} entries, got {}", grid.len(), values.len()),
            ));
        }
        let field = DistributionField {
            grid: Arc::clone(grid),
            values,
        };
        field.check_finite(None)?;
        Ok(field)
    }

    pub fn zeros(grid: &Arc<PhaseGrid>) -> Self {
        DistributionField {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: &Arc<PhaseGrid>, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for &x in grid.x_nodes() {
            for &v in grid.v_nodes() {
                values.push(f(x, v));
            }
        }
        Self::new(grid, values)
    }

    /// Product `a(x) · b(v)`.
    pub fn separable(grid: &Arc<PhaseGrid>, a: &[f64], b: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for &ai in a {
            for &bj in b {
                values.push(ai * bj);
            }
        }
        Self::new(grid, values)
    }

    pub(crate) fn from_raw(grid: &Arc<PhaseGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        DistributionField {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.n_v() + j]
    }
    /// Velocity profile at x node `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let nv = self.grid.n_v();
        &self.values[i * nv..(i + 1) * nv]
    }

    /// Columns are x nodes, rows are velocity nodes.
    pub fn as_matrix(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.values, self.grid.n_v(), self.grid.n_x())
    }

    pub fn check_finite(&self, step: Option<usize>) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: "distribution field".into(),
                step,
            })
        }
    }

    pub fn same_grid(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        self.same_grid(other)?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// Applies a velocity-space matrix to the profile at every x node.
    pub fn map_velocity(&self, m: &DMatrix<f64>) -> Self {
        let out = m * self.as_matrix();
        Self::from_raw(&self.grid, out.as_slice().to_vec())
    }

    /// Multiplies every profile by the velocity function `g`.
    pub fn mul_velocity(&self, g: &[f64]) -> Self {
        let nv = self.grid.n_v();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(idx, h)| h * g[idx % nv])
            .collect();
        Self::from_raw(&self.grid, values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Spectral derivative in x. Resolved modes `|k| < n_x/2` are differentiated
/// exactly; the Nyquist mode of an even grid is mapped to zero.
pub fn grad_x(h: &DistributionField) -> DistributionField {
    let grid = h.grid();
    let k = grid.wavenumbers();
    let values = grid.apply_x_multiplier(h.values(), |m, _| Complex64::new(0.0, k[m]));
    DistributionField::from_raw(grid, values)
}

/// Derivative in v at every x node.
pub fn grad_v(h: &DistributionField) -> DistributionField {
    h.map_velocity(h.grid().dv_matrix())
}

/// `∑ᵢⱼ h g Δx wⱼ`.
pub fn inner_l2(h: &DistributionField, g: &DistributionField) -> Result<f64> {
    h.same_grid(g)?;
    Ok(inner_unchecked(h, g))
}

pub(crate) fn inner_unchecked(h: &DistributionField, g: &DistributionField) -> f64 {
    let grid = h.grid();
    let nv = grid.n_v();
    let w = grid.v_weights();
    let mut s = 0.0;
    for (a, b) in h.values.chunks_exact(nv).zip(g.values.chunks_exact(nv)) {
        for j in 0..nv {
            s += a[j] * b[j] * w[j];
        }
    }
    s * grid.dx()
}

pub fn norm_l2(h: &DistributionField) -> f64 {
    inner_unchecked(h, h).max(0.0).sqrt()
}

/// Plain (untwisted) H¹ norm.
pub fn norm_h1(h: &DistributionField) -> f64 {
    let gx = grad_x(h);
    let gv = grad_v(h);
    (inner_unchecked(h, h) + inner_unchecked(&gx, &gx) + inner_unchecked(&gv, &gv))
        .max(0.0)
        .sqrt()
}

/// x-average of each velocity node.
pub fn x_mean(h: &DistributionField) -> Vec<f64> {
    let nv = h.grid().n_v();
    let mut mean = vec![0.0; nv];
    for row in h.values.chunks_exact(nv) {
        for (m, r) in mean.iter_mut().zip(row) {
            *m += r;
        }
    }
    let n = h.grid().n_x() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}
