//! Periodic tensor grids, sampled fields and their discrete Fourier transforms.
//!
//! The transform approximates `û(ξ) = ∫ e^{-i<x,ξ>} u(x) dx` by a cell-volume
//! weighted DFT on the centered lattice `x = -L/2 + j h`, so that the discrete
//! Plancherel identity carries the `(2π)^n` factor exactly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, LazyLock, Mutex};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matops::SquareMatrix;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid needs at least one axis and at most {MAX_DIM}, got {0}")]
    BadDimension(usize),
    #[error("axis {axis}: point count {count} is not a power of two >= 2")]
    BadCount { axis: usize, count: usize },
    #[error("axis {axis}: box length {length} must be positive and finite")]
    BadLength { axis: usize, length: f64 },
    #[error("lengths and counts differ in size ({0} vs {1})")]
    AxisMismatch(usize, usize),
    #[error("expected {expected} values, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("non-finite sample at x = {point:?}")]
    NonFiniteSample { point: Vec<f64> },
    #[error("non-finite Fourier weight at xi = {xi:?}")]
    NonFiniteWeight { xi: Vec<f64> },
    #[error("resampling map is singular")]
    SingularMap,
    #[error("map dimension {0} does not match grid dimension {1}")]
    MapDimension(usize, usize),
    #[error("interpolation order must be 1, 3 or 5, got {0}")]
    BadOrder(usize),
    #[error("invalid FOUF data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FieldError>;

pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    lengths: Vec<f64>,
    counts: Vec<usize>,
}

/// Serialized form of a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "L")]
    pub lengths: Vec<f64>,
    #[serde(rename = "N")]
    pub counts: Vec<usize>,
}

impl TryFrom<GridSpec> for Grid {
    type Error = FieldError;
    fn try_from(g: GridSpec) -> Result<Self> {
        Grid::new(g.lengths, g.counts)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec { lengths: g.lengths, counts: g.counts }
    }
}

impl Grid {
    pub fn new(lengths: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if lengths.len() != counts.len() {
            return Err(FieldError::AxisMismatch(lengths.len(), counts.len()));
        }
        if lengths.is_empty() || lengths.len() > MAX_DIM {
            return Err(FieldError::BadDimension(lengths.len()));
        }
        for (axis, (&l, &c)) in lengths.iter().zip(&counts).enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(FieldError::BadLength { axis, length: l });
            }
            if c < 2 || !c.is_power_of_two() {
                return Err(FieldError::BadCount { axis, count: c });
            }
        }
        Ok(Self { lengths, counts })
    }

    /// Same length and count on every axis.
    pub fn cube(n: usize, length: f64, count: usize) -> Result<Self> {
        Self::new(vec![length; n], vec![count; n])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.counts[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Volume of a frequency cell, `prod 2π/L_j`.
    pub fn dual_cell_volume(&self) -> f64 {
        self.lengths.iter().map(|l| 2.0 * PI / l).product()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -0.5 * self.lengths[axis] + i as f64 * self.spacing(axis)
    }

    /// Signed integer frequency index of natural FFT slot `m`.
    pub fn wavenumber(&self, axis: usize, m: usize) -> i64 {
        let n = self.counts[axis];
        if m < n / 2 {
            m as i64
        } else {
            m as i64 - n as i64
        }
    }

    pub fn freq(&self, axis: usize, m: usize) -> f64 {
        2.0 * PI * self.wavenumber(axis, m) as f64 / self.lengths[axis]
    }

    pub fn coords(&self, axis: usize) -> Vec<f64> {
        (0..self.counts[axis]).map(|i| self.coord(axis, i)).collect()
    }

    pub fn freqs(&self, axis: usize) -> Vec<f64> {
        (0..self.counts[axis]).map(|m| self.freq(axis, m)).collect()
    }

    pub fn nyquist(&self, axis: usize) -> f64 {
        PI * self.counts[axis] as f64 / self.lengths[axis]
    }

    /// Multi-index of flat row-major index `idx` (last axis fastest).
    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.dim()).rev() {
            out[a] = idx % self.counts[a];
            idx /= self.counts[a];
        }
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.counts).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut m = vec![0; self.dim()];
        self.unravel(idx, &mut m);
        m.iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }

    /// Frequency vector at natural-order flat index `idx`.
    pub fn frequency(&self, idx: usize) -> Vec<f64> {
        let mut m = vec![0; self.dim()];
        self.unravel(idx, &mut m);
        m.iter().enumerate().map(|(a, &i)| self.freq(a, i)).collect()
    }

    /// All frequency vectors in natural order, flattened with stride `dim`.
    pub fn all_frequencies(&self) -> Vec<f64> {
        let n = self.dim();
        let axes: Vec<Vec<f64>> = (0..n).map(|a| self.freqs(a)).collect();
        let mut out = Vec::with_capacity(self.len() * n);
        let mut m = vec![0; n];
        for idx in 0..self.len() {
            self.unravel(idx, &mut m);
            for a in 0..n {
                out.push(axes[a][m[a]]);
            }
        }
        out
    }

    /// Same box with every count multiplied by `factor` (a power of two).
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.lengths.clone(), self.counts.iter().map(|c| c * factor).collect())
    }
}

/// Complex samples on a grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<Complex64>,
}

/// Spectral samples in natural FFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    grid: Grid,
    values: Vec<Complex64>,
}

macro_rules! sampled_impl {
    ($t:ty) => {
        impl $t {
            pub fn from_values(grid: Grid, values: Vec<Complex64>) -> Result<Self> {
                if values.len() != grid.len() {
                    return Err(FieldError::SizeMismatch { expected: grid.len(), got: values.len() });
                }
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(FieldError::NonFiniteSample { point: grid.point(i) });
                }
                Ok(Self { grid, values })
            }

            pub fn zeros(grid: &Grid) -> Self {
                Self { grid: grid.clone(), values: vec![Complex64::new(0.0, 0.0); grid.len()] }
            }

            pub fn grid(&self) -> &Grid {
                &self.grid
            }

            pub fn values(&self) -> &[Complex64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [Complex64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<Complex64> {
                self.values
            }

            pub fn scale(&mut self, c: f64) {
                self.values.iter_mut().for_each(|v| *v *= c);
            }

            pub fn scaled(&self, c: f64) -> Self {
                let mut out = self.clone();
                out.scale(c);
                out
            }

            /// `self += c * other`.
            pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
                if self.grid != other.grid {
                    return Err(FieldError::GridMismatch);
                }
                self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b * c);
                Ok(())
            }

            pub fn max_abs(&self) -> f64 {
                self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
            }

            /// Plain sum of squared moduli.
            pub fn sum_sq(&self) -> f64 {
                self.values.iter().map(|v| v.norm_sqr()).sum()
            }
        }
    };
}

sampled_impl!(Field);
sampled_impl!(Spectrum);

impl Field {
    pub fn from_real(grid: Grid, values: &[f64]) -> Result<Self> {
        Self::from_values(grid, values.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    /// Largest imaginary part in absolute value.
    pub fn max_imag(&self) -> f64 {
        self.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max)
    }

    /// Multiplies pointwise by an indicator.
    pub fn masked(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(FieldError::SizeMismatch { expected: self.values.len(), got: mask.len() });
        }
        let values = self
            .values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { Complex64::new(0.0, 0.0) })
            .collect();
        Ok(Self { grid: self.grid.clone(), values })
    }
}

impl Spectrum {
    /// `(prod 2π/L_j) * Σ|û|²`, which equals `(2π)^n ‖u‖²`.
    pub fn norm_sq(&self) -> f64 {
        self.grid.dual_cell_volume() * self.sum_sq()
    }

    /// Multiplies every mode by `w(ξ, slot)`.
    pub fn apply<W>(&mut self, w: W) -> Result<()>
    where
        W: Fn(&[f64]) -> Complex64 + Sync,
    {
        let grid = &self.grid;
        let n = grid.dim();
        let axes: Vec<Vec<f64>> = (0..n).map(|a| grid.freqs(a)).collect();
        let bad = self
            .values
            .par_iter_mut()
            .enumerate()
            .filter_map(|(idx, v)| {
                let mut m = [0usize; MAX_DIM];
                grid.unravel(idx, &mut m[..n]);
                let mut xi = [0.0; MAX_DIM];
                for a in 0..n {
                    xi[a] = axes[a][m[a]];
                }
                let wv = w(&xi[..n]);
                if !wv.is_finite() {
                    return Some(xi[..n].to_vec());
                }
                *v *= wv;
                None
            })
            .min_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        match bad {
            Some(xi) => Err(FieldError::NonFiniteWeight { xi }),
            None => Ok(()),
        }
    }
}

/// Samples `f` at every grid point.
pub fn sample_field<F>(grid: &Grid, f: F) -> Result<Field>
where
    F: Fn(&[f64]) -> Complex64 + Sync,
{
    let n = grid.dim();
    let axes: Vec<Vec<f64>> = (0..n).map(|a| grid.coords(a)).collect();
    let values: Vec<Complex64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let mut m = [0usize; MAX_DIM];
            grid.unravel(idx, &mut m[..n]);
            let mut x = [0.0; MAX_DIM];
            for a in 0..n {
                x[a] = axes[a][m[a]];
            }
            f(&x[..n])
        })
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FieldError::NonFiniteSample { point: grid.point(i) });
    }
    Ok(Field { grid: grid.clone(), values })
}

/// Real Gaussian white noise with unit variance per sample.
pub fn white_noise(grid: &Grid, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..grid.len())
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(x, 0.0)
        })
        .collect();
    Field { grid: grid.clone(), values }
}

static FFT_PLANS: LazyLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut plans = FFT_PLANS.lock().unwrap();
    plans
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

fn fft_nd(grid: &Grid, data: &mut [Complex64], inverse: bool) {
    let dims = grid.counts();
    for axis in 0..dims.len() {
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let plan = fft_plan(len, inverse);
        if inner == 1 {
            data.par_chunks_mut(len * 64).for_each(|chunk| plan.process(chunk));
        } else {
            data.par_chunks_mut(len * inner).for_each(|block| {
                let mut line = vec![Complex64::new(0.0, 0.0); len];
                let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
                for i in 0..inner {
                    for j in 0..len {
                        line[j] = block[j * inner + i];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for j in 0..len {
                        block[j * inner + i] = line[j];
                    }
                }
            });
        }
    }
}

/// Alternating sign `(-1)^{Σ m_a}` of a natural-order multi-index.
fn parity_sign(grid: &Grid, idx: usize) -> f64 {
    let mut s = 0usize;
    let mut rem = idx;
    for a in (0..grid.dim()).rev() {
        s += rem % grid.counts()[a];
        rem /= grid.counts()[a];
    }
    if s.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

pub fn dft(u: &Field) -> Spectrum {
    let grid = u.grid.clone();
    let mut data = u.values.clone();
    fft_nd(&grid, &mut data, false);
    let h = grid.cell_volume();
    data.par_iter_mut().enumerate().for_each(|(i, v)| *v *= h * parity_sign(&grid, i));
    Spectrum { grid, values: data }
}

pub fn idft(s: &Spectrum) -> Field {
    let grid = s.grid.clone();
    let c = 1.0 / (grid.cell_volume() * grid.len() as f64);
    let mut data: Vec<Complex64> =
        s.values.par_iter().enumerate().map(|(i, v)| v * (c * parity_sign(&grid, i))).collect();
    fft_nd(&grid, &mut data, true);
    Field { grid, values: data }
}

pub fn l2_norm(u: &Field) -> f64 {
    (u.grid.cell_volume() * u.sum_sq()).sqrt()
}

/// `∫ a conj(b)`.
pub fn l2_inner(a: &Field, b: &Field) -> Result<Complex64> {
    if a.grid != b.grid {
        return Err(FieldError::GridMismatch);
    }
    let s: Complex64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y.conj()).sum();
    Ok(s * a.grid.cell_volume())
}

/// Norm of the restriction of `u` to the points where `indicator` holds.
pub fn l2_norm_on(u: &Field, indicator: &[bool]) -> Result<f64> {
    if indicator.len() != u.values.len() {
        return Err(FieldError::SizeMismatch { expected: u.values.len(), got: indicator.len() });
    }
    let s: f64 = u.values.iter().zip(indicator).filter(|(_, &m)| m).map(|(v, _)| v.norm_sqr()).sum();
    Ok((u.grid.cell_volume() * s).sqrt())
}

/// `idft(w(ξ) dft(u))`.
pub fn apply_fourier_weight<W>(u: &Field, w: W) -> Result<Field>
where
    W: Fn(&[f64]) -> Complex64 + Sync,
{
    let mut spec = dft(u);
    spec.apply(w)?;
    Ok(idft(&spec))
}

/// Japanese bracket `(1 + |v|²)^{1/2}`.
pub fn bracket(v: &[f64]) -> f64 {
    (1.0 + v.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct InterpOrder(usize);

impl InterpOrder {
    pub const LINEAR: Self = Self(1);
    pub const CUBIC: Self = Self(3);
    pub const QUINTIC: Self = Self(5);

    pub fn new(order: usize) -> Result<Self> {
        match order {
            1 | 3 | 5 => Ok(Self(order)),
            o => Err(FieldError::BadOrder(o)),
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for InterpOrder {
    fn default() -> Self {
        Self::QUINTIC
    }
}

impl TryFrom<usize> for InterpOrder {
    type Error = FieldError;
    fn try_from(o: usize) -> Result<Self> {
        Self::new(o)
    }
}

impl From<InterpOrder> for usize {
    fn from(o: InterpOrder) -> usize {
        o.0
    }
}

pub const LEAK_WARN: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Resampled {
    pub field: Field,
    /// Fraction of the squared norm sitting in the boundary layer or mapped
    /// outside the box.
    pub leaked_fraction: f64,
    pub warning: Option<String>,
}

/// Lagrange weights for a stencil of `p + 1` nodes starting at offset `-(p-1)/2`.
fn lagrange_weights(order: usize, frac: f64, out: &mut [f64; 6]) {
    let m = order + 1;
    let first = -((order as i64 - 1) / 2);
    for j in 0..m {
        let xj = (first + j as i64) as f64;
        let mut w = 1.0;
        for k in 0..m {
            if k != j {
                let xk = (first + k as i64) as f64;
                w *= (frac - xk) / (xj - xk);
            }
        }
        out[j] = w;
    }
}

/// Samples of `y -> u(A y)` by tensor Lagrange interpolation with zero
/// extension outside the box.
pub fn resample_linear_map(u: &Field, a: &SquareMatrix, order: InterpOrder) -> Result<Resampled> {
    let grid = &u.grid;
    let n = grid.dim();
    if a.dim() != n {
        return Err(FieldError::MapDimension(a.dim(), n));
    }
    if a.determinant() == 0.0 {
        return Err(FieldError::SingularMap);
    }
    let leaked_fraction = leak_fraction(u, a, order)?;
    let warning = (leaked_fraction > LEAK_WARN).then(|| {
        format!("mass fraction {leaked_fraction:e} near the box boundary or mapped outside it")
    });
    if a.is_identity() {
        return Ok(Resampled { field: u.clone(), leaked_fraction, warning });
    }

    let p = order.get();
    let first = -((p as i64 - 1) / 2);
    let am: Vec<f64> = a.to_row_major();
    let counts = grid.counts().to_vec();
    let h: Vec<f64> = (0..n).map(|ax| grid.spacing(ax)).collect();
    let x0: Vec<f64> = (0..n).map(|ax| grid.coord(ax, 0)).collect();
    let strides: Vec<usize> = (0..n).map(|ax| counts[ax + 1..].iter().product()).collect();
    // Axes mapped to themselves need no interpolation.
    let fixed: Vec<bool> = (0..n).map(|ax| (0..n).all(|j| am[ax * n + j] == if j == ax { 1.0 } else { 0.0 })).collect();
    let widths: Vec<usize> = fixed.iter().map(|&f| if f { 1 } else { p + 1 }).collect();
    let stencil_total: usize = widths.iter().product();

    let values: Vec<Complex64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let mut mi = [0usize; MAX_DIM];
            grid.unravel(idx, &mut mi[..n]);
            let mut y = [0.0; MAX_DIM];
            for ax in 0..n {
                y[ax] = x0[ax] + mi[ax] as f64 * h[ax];
            }
            let mut base = [0i64; MAX_DIM];
            let mut weights = [[0.0; 6]; MAX_DIM];
            for ax in 0..n {
                if fixed[ax] {
                    base[ax] = mi[ax] as i64;
                    weights[ax][0] = 1.0;
                    continue;
                }
                let x: f64 = (0..n).map(|j| am[ax * n + j] * y[j]).sum();
                let s = (x - x0[ax]) / h[ax];
                let fl = s.floor();
                base[ax] = fl as i64 + first;
                lagrange_weights(p, s - fl, &mut weights[ax]);
            }
            let mut acc = Complex64::new(0.0, 0.0);
            'outer: for flat in 0..stencil_total {
                let mut rem = flat;
                let mut w = 1.0;
                let mut offset = 0usize;
                for ax in (0..n).rev() {
                    let j = rem % widths[ax];
                    rem /= widths[ax];
                    let i = base[ax] + j as i64;
                    if i < 0 || i >= counts[ax] as i64 {
                        continue 'outer;
                    }
                    w *= weights[ax][j];
                    offset += i as usize * strides[ax];
                }
                if w != 0.0 {
                    acc += u.values[offset] * w;
                }
            }
            acc
        })
        .collect();
    Ok(Resampled { field: Field { grid: grid.clone(), values }, leaked_fraction, warning })
}

fn leak_fraction(u: &Field, a: &SquareMatrix, order: InterpOrder) -> Result<f64> {
    let grid = &u.grid;
    let n = grid.dim();
    let total = u.sum_sq();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inv = a.inverse().map_err(|_| FieldError::SingularMap)?.to_row_major();
    let layer = order.get().div_ceil(2);
    let leaked: f64 = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let v = u.values[idx].norm_sqr();
            if v == 0.0 {
                return 0.0;
            }
            let mut mi = [0usize; MAX_DIM];
            grid.unravel(idx, &mut mi[..n]);
            let mut x = [0.0; MAX_DIM];
            let mut in_layer = false;
            for ax in 0..n {
                let c = grid.counts()[ax];
                if mi[ax] < layer || mi[ax] + layer >= c {
                    in_layer = true;
                }
                x[ax] = grid.coord(ax, mi[ax]);
            }
            let mut outside = false;
            for ax in 0..n {
                let y: f64 = (0..n).map(|j| inv[ax * n + j] * x[j]).sum();
                let half = 0.5 * grid.lengths()[ax];
                if y < -half || y >= half {
                    outside = true;
                }
            }
            if in_layer || outside {
                v
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(leaked / total)
}

const FOUF_MAGIC: &[u8; 4] = b"FOUF";
const FOUF_VERSION: u16 = 1;

pub fn write_fouf<W: Write>(u: &Field, mut w: W) -> Result<()> {
    w.write_all(FOUF_MAGIC)?;
    w.write_all(&FOUF_VERSION.to_le_bytes())?;
    w.write_all(&(u.grid.dim() as u16).to_le_bytes())?;
    for ax in 0..u.grid.dim() {
        w.write_all(&(u.grid.counts()[ax] as u32).to_le_bytes())?;
        w.write_all(&u.grid.lengths()[ax].to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(16 * u.values.len());
    for v in &u.values {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_fouf<R: Read>(mut r: R) -> Result<Field> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FOUF_MAGIC {
        return Err(FieldError::Format("bad magic".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != FOUF_VERSION {
        return Err(FieldError::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b2)?;
    let n = u16::from_le_bytes(b2) as usize;
    if n == 0 || n > MAX_DIM {
        return Err(FieldError::BadDimension(n));
    }
    let mut counts = Vec::with_capacity(n);
    let mut lengths = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        counts.push(u32::from_le_bytes(b4) as usize);
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        lengths.push(f64::from_le_bytes(b8));
    }
    let grid = Grid::new(lengths, counts)?;
    let mut raw = vec![0u8; 16 * grid.len()];
    r.read_exact(&mut raw)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(FieldError::Format("trailing bytes after field data".into()));
    }
    let values = raw
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    Field::from_values(grid, values)
}

pub fn save_fouf(u: &Field, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_fouf(u, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_fouf(path: &Path) -> Result<Field> {
    read_fouf(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// One row per grid point: coordinates, then real and imaginary parts.
pub fn write_csv<W: Write>(u: &Field, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n = u.grid.dim();
    let mut header: Vec<String> = (0..n).map(|a| format!("x{a}")).collect();
    header.push("re".into());
    header.push("im".into());
    out.write_record(&header)?;
    for (idx, v) in u.values.iter().enumerate() {
        let mut row: Vec<String> = u.grid.point(idx).iter().map(|x| format!("{x:e}")).collect();
        row.push(format!("{:e}", v.re));
        row.push(format!("{:e}", v.im));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(grid: &Grid) -> Field {
        sample_field(grid, |x| Complex64::new((-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp(), 0.0)).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![1.0], vec![3]).is_err());
        assert!(Grid::new(vec![0.0], vec![4]).is_err());
        assert!(Grid::new(vec![1.0, 2.0], vec![4]).is_err());
        let g = Grid::new(vec![40.0], vec![8]).unwrap();
        assert_eq!(g.coord(0, 0), -20.0);
        assert_eq!(g.wavenumber(0, 4), -4);
        assert_eq!(g.wavenumber(0, 3), 3);
    }

    #[test]
    fn constant_and_gaussian_samples() {
        let g = Grid::cube(2, 4.0, 8).unwrap();
        let one = sample_field(&g, |_| Complex64::new(1.0, 0.0)).unwrap();
        assert!(one.values().iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        assert!((l2_norm(&one) - 4.0).abs() < 1e-14);

        let g = Grid::cube(1, 40.0, 512).unwrap();
        let u = gaussian(&g);
        assert!(u.values()[0].re < 1e-80);
        let norm = l2_norm(&u);
        assert!((norm - PI.powf(0.25)).abs() < 1e-10);
        let all = vec![true; g.len()];
        assert_eq!(l2_norm_on(&u, &all).unwrap(), norm);
    }

    #[test]
    fn non_finite_samples_are_rejected() {
        let g = Grid::cube(1, 2.0, 4).unwrap();
        let err = sample_field(&g, |x| Complex64::new(1.0 / (x[0] + 1.0), 0.0)).unwrap_err();
        match err {
            FieldError::NonFiniteSample { point } => assert_eq!(point, vec![-1.0]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dft_of_gaussian() {
        let g = Grid::cube(1, 40.0, 512).unwrap();
        let spec = dft(&gaussian(&g));
        for (m, v) in spec.values().iter().enumerate() {
            let xi = g.freq(0, m);
            let exact = (2.0 * PI).sqrt() * (-0.5 * xi * xi).exp();
            assert!((v - exact).norm() < 1e-10, "xi={xi}");
        }
    }

    #[test]
    fn translated_samples_shift() {
        let g = Grid::cube(1, 8.0, 16).unwrap();
        let f = |x: f64| (-(x * x)).exp();
        let shifted = sample_field(&g, |x| Complex64::new(f(x[0] - 1.0), 0.0)).unwrap();
        let base = sample_field(&g, |x| Complex64::new(f(x[0]), 0.0)).unwrap();
        // h = 0.5 so a shift by 1 moves samples by two slots
        for i in 2..16 {
            assert_eq!(shifted.values()[i], base.values()[i - 2]);
        }
    }

    #[test]
    fn bracket_squared_weight_matches_derivative() {
        let g = Grid::cube(1, 40.0, 512).unwrap();
        let u = gaussian(&g);
        let out = apply_fourier_weight(&u, |xi| Complex64::new(1.0 + xi[0] * xi[0], 0.0)).unwrap();
        for (i, v) in out.values().iter().enumerate() {
            let x = g.coord(0, i);
            // (1 - d²/dx²) e^{-x²/2} = (2 - x²) e^{-x²/2}
            let exact = (2.0 - x * x) * (-0.5 * x * x).exp();
            assert!((v - exact).norm() < 1e-8);
        }
    }

    #[test]
    fn cutoff_is_idempotent() {
        let g = Grid::cube(2, 10.0, 32).unwrap();
        let u = white_noise(&g, 3);
        let cut = |xi: &[f64]| Complex64::new(if xi.iter().all(|x| x.abs() <= 3.0) { 1.0 } else { 0.0 }, 0.0);
        let once = apply_fourier_weight(&u, cut).unwrap();
        let twice = apply_fourier_weight(&once, cut).unwrap();
        let mut d = twice.clone();
        d.axpy(-1.0, &once).unwrap();
        assert!(l2_norm(&d) <= 1e-13 * l2_norm(&once));
    }

    #[test]
    fn non_finite_weight_names_frequency() {
        let g = Grid::cube(1, 2.0 * PI, 8).unwrap();
        let u = white_noise(&g, 1);
        let err = apply_fourier_weight(&u, |xi| Complex64::new(1.0 / xi[0], 0.0)).unwrap_err();
        assert!(matches!(err, FieldError::NonFiniteWeight { ref xi } if xi == &vec![0.0]));
    }

    #[test]
    fn identity_resample_is_exact_copy() {
        let g = Grid::cube(2, 10.0, 16).unwrap();
        let u = white_noise(&g, 9);
        let r = resample_linear_map(&u, &SquareMatrix::identity(2), InterpOrder::default()).unwrap();
        assert_eq!(r.field, u);
        assert!(r.warning.is_some());
    }

    #[test]
    fn dilation_resample() {
        let g = Grid::cube(1, 40.0, 512).unwrap();
        let u = gaussian(&g);
        let a = SquareMatrix::diagonal(&[2.0]).unwrap();
        let r = resample_linear_map(&u, &a, InterpOrder::QUINTIC).unwrap();
        assert!(r.warning.is_none());
        for (i, v) in r.field.values().iter().enumerate() {
            let x = g.coord(0, i);
            assert!((v.re - (-2.0 * x * x).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn resample_rejects_singular_map() {
        let g = Grid::cube(2, 10.0, 8).unwrap();
        let u = white_noise(&g, 1);
        assert!(resample_linear_map(&u, &SquareMatrix::zeros(2), InterpOrder::LINEAR).is_err());
        assert!(InterpOrder::new(4).is_err());
    }

    #[test]
    fn fouf_round_trip() {
        let g = Grid::new(vec![3.0, 5.0], vec![4, 8]).unwrap();
        let mut u = white_noise(&g, 2);
        u.values_mut()[3].im = -1.25;
        let mut buf = Vec::new();
        write_fouf(&u, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FOUF");
        assert_eq!(buf.len(), 4 + 2 + 2 + 2 * 12 + 16 * 32);
        let back = read_fouf(&buf[..]).unwrap();
        assert_eq!(back, u);
        buf[4] = 9;
        assert!(read_fouf(&buf[..]).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_point() {
        let g = Grid::cube(2, 2.0, 4).unwrap();
        let u = white_noise(&g, 5);
        let mut buf = Vec::new();
        write_csv(&u, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.starts_with("x0,x1,re,im"));
    }
}
