//! Exact Fourier-side evolution for fractional Ornstein-Uhlenbeck semigroups.
//!
//! For `P = ½ Tr^s(-Q∇²) + <Bx, ∇>` the semigroup acts as
//!
//! ```text
//! F[e^{-tP} u](ξ) = e^{Tr(B) t} exp(-½ ∫_0^t |Q^{1/2} e^{τB^T} ξ|^{2s} dτ) û(e^{tB^T} ξ)
//! ```
//!
//! and `F[u ∘ e^{-tB}] = e^{Tr(B) t} û(e^{tB^T} ·)`, so a plan shears the
//! field in physical space and multiplies by a precomputed decay weight.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{dft, idft, l2_norm, resample_linear_map, Field, FieldError, Grid, InterpOrder};
use crate::matops::{gauss_legendre, mat_exp, psd_sqrt, MatError, PsdMatrix, SquareMatrix};

#[derive(Debug, Error)]
pub enum PropError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("s must be positive and finite, got {0}")]
    BadExponent(f64),
    #[error("evolution time must be finite and >= 0, got {0}")]
    BadTime(f64),
    #[error("times must be nondecreasing")]
    UnorderedTimes,
    #[error("model dimension {model} does not match grid dimension {grid}")]
    Dimension { model: usize, grid: usize },
    #[error(
        "symbol quadrature did not converge at xi = {xi:?}; worst subinterval \
         [{lo:e}, {hi:e}] with estimated error {error:e}"
    )]
    Quadrature { xi: Vec<f64>, lo: f64, hi: f64, error: f64 },
    #[error("norm bound violated: |out| / |in| = {ratio:.12e} exceeds bound {bound:.12e}")]
    NormBound { ratio: f64, bound: f64 },
}

pub type Result<T> = std::result::Result<T, PropError>;

/// Drift `B`, diffusion `Q` and fractional order `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Model {
    pub b: SquareMatrix,
    pub q: PsdMatrix,
    pub s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(rename = "B")]
    pub b: SquareMatrix,
    #[serde(rename = "Q")]
    pub q: SquareMatrix,
    pub s: f64,
}

impl Model {
    pub fn new(b: SquareMatrix, q: &SquareMatrix, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(PropError::BadExponent(s));
        }
        if b.dim() != q.dim() {
            return Err(MatError::DimensionMismatch(b.dim(), q.dim()).into());
        }
        Ok(Self { b, q: psd_sqrt(q)?, s })
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        Self::new(spec.b.clone(), &spec.q, spec.s)
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec { b: self.b.clone(), q: self.q.base().clone(), s: self.s }
    }

    /// Fractional heat model: `B = 0`, `Q = 2^{1/s} I`.
    pub fn heat(n: usize, s: f64) -> Result<Self> {
        let q = SquareMatrix::identity(n).scaled(2f64.powf(1.0 / s));
        Self::new(SquareMatrix::zeros(n), &q, s)
    }

    /// Kolmogorov model in dimension `2d`.
    pub fn kolmogorov(d: usize, s: f64) -> Result<Self> {
        Self::new(
            crate::kalman::kolmogorov_drift(d),
            &crate::kalman::kolmogorov_diffusion(d, s),
            s,
        )
    }

    pub fn dim(&self) -> usize {
        self.b.dim()
    }

    pub fn trace_b(&self) -> f64 {
        self.b.trace()
    }

    /// Same diffusion with the drift sign flipped.
    pub fn reversed(&self) -> Self {
        Self { b: self.b.scaled(-1.0), q: self.q.clone(), s: self.s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `e^{-tP}`.
    Forward,
    /// `e^{-tP*}`.
    Adjoint,
    /// `e^{-tP_co}` with `P_co = P + ½Tr(B)`.
    Normalized,
    /// `e^{-tP_co*}`.
    NormalizedAdjoint,
}

impl Mode {
    fn uses_reversed_drift(self) -> bool {
        matches!(self, Mode::Adjoint | Mode::NormalizedAdjoint)
    }

    /// Scalar factor in front of the drift-`±B` forward evolution.
    fn scale(self, tr: f64, t: f64) -> f64 {
        match self {
            Mode::Forward => 1.0,
            Mode::Adjoint => (tr * t).exp(),
            Mode::Normalized => (-0.5 * tr * t).exp(),
            Mode::NormalizedAdjoint => (0.5 * tr * t).exp(),
        }
    }

    fn norm_bound(self, tr: f64, t: f64) -> f64 {
        match self {
            Mode::Forward | Mode::Adjoint => (0.5 * tr * t).exp(),
            Mode::Normalized | Mode::NormalizedAdjoint => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanOptions {
    pub quad_nodes: usize,
    pub quad_tol: f64,
    pub interp: InterpOrder,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { quad_nodes: 32, quad_tol: 1e-10, interp: InterpOrder::QUINTIC }
    }
}

pub const NORM_SLACK: f64 = 1e-8;
const MAX_BISECTIONS: usize = 48;
const PANEL_REACH: f64 = 0.5;
const TAYLOR_TERMS: usize = 24;

static NORM_CHECKS: AtomicUsize = AtomicUsize::new(0);
static NORM_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of norm-bound post-checks performed in this process.
pub fn norm_checks() -> usize {
    NORM_CHECKS.load(Ordering::Relaxed)
}

/// Number of norm-bound violations detected in this process.
pub fn norm_violations() -> usize {
    NORM_VIOLATIONS.load(Ordering::Relaxed)
}

/// Evaluates `∫_0^t |Q^{1/2} e^{τB^T} ξ|^{2s} dτ` for many `ξ`.
///
/// `[0, t]` is cut into panels short enough that a Taylor expansion of
/// `e^{σB^T}` around each panel start is exact to rounding. Each panel is
/// integrated by comparing Gauss-Legendre rules of order m and 2m, bisecting
/// where they disagree, after splitting at interior near-zeros of the
/// integrand (where `|v|^{2s}` has a kink).
pub struct SymbolIntegrator {
    n: usize,
    s: f64,
    t: f64,
    nodes: usize,
    tol: f64,
    /// Constant integrand factor when `B = 0`.
    root: Option<DMatrix<f64>>,
    /// `panels[p] = (start, len, [Q^{1/2} e^{a_p B^T} (B^T)^j / j!]_j)`.
    panels: Vec<(f64, f64, Vec<DMatrix<f64>>)>,
}

impl SymbolIntegrator {
    pub fn new(model: &Model, t: f64, nodes: usize, tol: f64) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(PropError::BadTime(t));
        }
        let n = model.dim();
        let root = model.q.sqrt().as_dmatrix().clone();
        let bt = model.b.transpose();
        let mut out = Self { n, s: model.s, t, nodes: nodes.max(2), tol, root: None, panels: Vec::new() };
        if model.b.is_zero() {
            out.root = Some(root);
            return Ok(out);
        }
        let reach = bt.norm1();
        let count = ((t * reach / PANEL_REACH).ceil() as usize).max(1);
        let len = t / count as f64;
        let btm = bt.as_dmatrix();
        for p in 0..count {
            let start = p as f64 * len;
            let anchor = &root * mat_exp(&bt, start)?.as_dmatrix();
            let mut terms = vec![anchor.clone()];
            let mut cur = anchor;
            for j in 1..TAYLOR_TERMS {
                cur = (&cur * btm) / j as f64;
                if cur.iter().all(|&x| x == 0.0) {
                    break;
                }
                terms.push(cur.clone());
            }
            out.panels.push((start, len, terms));
        }
        Ok(out)
    }

    pub fn integrate(&self, xi: &[f64]) -> Result<f64> {
        if self.t == 0.0 || xi.iter().all(|&x| x == 0.0) {
            return Ok(0.0);
        }
        let xv = nalgebra::DVector::from_column_slice(xi);
        if let Some(root) = &self.root {
            let v = root * xv;
            return Ok(self.t * v.norm_squared().powf(self.s));
        }
        let mut pieces = Vec::new();
        let mut total = 0.0;
        for (start, len, terms) in &self.panels {
            let coeffs: Vec<Vec<f64>> = terms.iter().map(|m| (m * &xv).iter().cloned().collect()).collect();
            let panel = Panel { coeffs, n: self.n, s: self.s };
            let (cuts, rough) = panel.split_at_minima(*len, self.nodes);
            total += rough;
            for (a, b) in cuts {
                pieces.push((*start, a, b, panel.clone()));
            }
        }
        if total == 0.0 {
            total = pieces.iter().map(|(_, a, b, p)| p.gl(*a, *b, 2 * self.nodes)).sum();
            if total == 0.0 {
                return Ok(0.0);
            }
        }
        let mut sum = 0.0;
        for (start, a, b, panel) in &pieces {
            let budget = self.tol * total * (b - a) / self.t;
            sum += panel.adaptive(*a, *b, self.nodes, budget, 0).map_err(|(lo, hi, error)| {
                PropError::Quadrature { xi: xi.to_vec(), lo: start + lo, hi: start + hi, error }
            })?;
        }
        Ok(sum)
    }
}

#[derive(Clone)]
struct Panel {
    coeffs: Vec<Vec<f64>>,
    n: usize,
    s: f64,
}

impl Panel {
    fn norm_sq(&self, sigma: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let mut v = 0.0;
            for c in self.coeffs.iter().rev() {
                v = v * sigma + c[i];
            }
            acc += v * v;
        }
        acc
    }

    fn integrand(&self, sigma: f64) -> f64 {
        self.norm_sq(sigma).powf(self.s)
    }

    /// Gauss-Legendre after the substitution `σ = a + (b-a)(3u² - 2u³)`,
    /// which flattens endpoint kinks of the integrand.
    fn gl(&self, a: f64, b: f64, m: usize) -> f64 {
        let len = b - a;
        gauss_legendre(m).integrate(0.0, 1.0, |u| {
            let phi = u * u * (3.0 - 2.0 * u);
            self.integrand(a + len * phi) * 6.0 * u * (1.0 - u) * len
        })
    }

    fn adaptive(&self, a: f64, b: f64, m: usize, budget: f64, depth: usize) -> std::result::Result<f64, (f64, f64, f64)> {
        let lo = self.gl(a, b, m);
        let hi = self.gl(a, b, 2 * m);
        let err = (hi - lo).abs();
        if err <= budget || err <= 4.0 * f64::EPSILON * hi.abs() {
            return Ok(hi);
        }
        if depth >= MAX_BISECTIONS {
            return Err((a, b, err));
        }
        let mid = 0.5 * (a + b);
        Ok(self.adaptive(a, mid, m, 0.5 * budget, depth + 1)?
            + self.adaptive(mid, b, m, 0.5 * budget, depth + 1)?)
    }

    /// Breaks `[0, len]` at interior local minima of `|v|²` that come close
    /// to zero. Also returns a trapezoid estimate of the panel integral.
    fn split_at_minima(&self, len: f64, m: usize) -> (Vec<(f64, f64)>, f64) {
        let samples = m;
        let xs: Vec<f64> = (0..=samples).map(|i| len * i as f64 / samples as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.norm_sq(x)).collect();
        let h = len / samples as f64;
        let rough = h * (ys.iter().map(|y| y.powf(self.s)).sum::<f64>() - 0.5 * (ys[0].powf(self.s) + ys[samples].powf(self.s)));
        let peak = ys.iter().cloned().fold(0.0, f64::max);
        let mut cuts = vec![0.0];
        for i in 0..=samples {
            let left = if i == 0 { f64::INFINITY } else { ys[i - 1] };
            let right = if i == samples { f64::INFINITY } else { ys[i + 1] };
            if ys[i] <= left && ys[i] <= right && ys[i] < 1e-2 * peak {
                let lo = xs[i.saturating_sub(1)];
                let hi = xs[(i + 1).min(samples)];
                let x = self.golden_min(lo, hi, 1e-12 * len);
                if x > 0.0 && x < len && x > *cuts.last().unwrap() {
                    cuts.push(x);
                }
            }
        }
        cuts.push(len);
        (cuts.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1])).collect(), rough)
    }

    fn golden_min(&self, mut a: f64, mut b: f64, width: f64) -> f64 {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let mut fc = self.norm_sq(c);
        let mut fd = self.norm_sq(d);
        for _ in 0..200 {
            if b - a <= width {
                break;
            }
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = self.norm_sq(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = self.norm_sq(d);
            }
        }
        0.5 * (a + b)
    }
}

/// `∫_0^t |Q^{1/2} e^{τB^T} ξ|^{2s} dτ` for one frequency.
pub fn symbol_integral(model: &Model, t: f64, xi: &[f64], opts: &PlanOptions) -> Result<f64> {
    SymbolIntegrator::new(model, t, opts.quad_nodes, opts.quad_tol)?.integrate(xi)
}

/// Precomputed decay weights and shear for one evolution time.
#[derive(Debug, Clone)]
pub struct PropagatorPlan {
    model: Model,
    t: f64,
    grid: Grid,
    mode: Mode,
    options: PlanOptions,
    decay: Vec<f64>,
    shear: SquareMatrix,
    scale: f64,
    bound: f64,
}

/// Output of a propagation with its diagnostics.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub field: Field,
    pub norm_ratio: f64,
    pub leaked_fraction: f64,
    pub warning: Option<String>,
}

pub fn build_plan(model: &Model, t: f64, grid: &Grid, mode: Mode, options: &PlanOptions) -> Result<PropagatorPlan> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(PropError::BadTime(t));
    }
    if model.dim() != grid.dim() {
        return Err(PropError::Dimension { model: model.dim(), grid: grid.dim() });
    }
    let drift_model = if mode.uses_reversed_drift() { model.reversed() } else { model.clone() };
    let shear = mat_exp(&drift_model.b, -t)?;
    let integrator = SymbolIntegrator::new(&drift_model, t, options.quad_nodes, options.quad_tol)?;
    let n = grid.dim();
    let freqs = grid.all_frequencies();
    // The weight is even in ξ, so only one of each ±ξ pair is integrated.
    let mirror: Vec<Option<usize>> = (0..grid.len()).map(|idx| mirror_index(grid, idx)).collect();
    let owners: Vec<usize> = (0..grid.len()).filter(|&i| mirror[i].is_none_or(|j| j >= i)).collect();
    let computed: Vec<f64> = owners
        .par_iter()
        .map(|&i| integrator.integrate(&freqs[i * n..(i + 1) * n]).map(|v| (-0.5 * v).exp().max(f64::MIN_POSITIVE)))
        .collect::<Result<_>>()?;
    let mut decay = vec![0.0; grid.len()];
    for (&i, &d) in owners.iter().zip(&computed) {
        decay[i] = d;
        if let Some(j) = mirror[i] {
            decay[j] = d;
        }
    }
    let tr = model.trace_b();
    Ok(PropagatorPlan {
        model: model.clone(),
        t,
        grid: grid.clone(),
        mode,
        options: *options,
        decay,
        shear,
        scale: mode.scale(tr, t),
        bound: mode.norm_bound(tr, t),
    })
}

/// Natural-order index of `-ξ`, if it lies on the grid.
fn mirror_index(grid: &Grid, idx: usize) -> Option<usize> {
    let n = grid.dim();
    let mut m = [0usize; crate::field::MAX_DIM];
    grid.unravel(idx, &mut m[..n]);
    for a in 0..n {
        let c = grid.counts()[a];
        if m[a] == c / 2 {
            return None;
        }
        m[a] = (c - m[a]) % c;
    }
    Some(grid.ravel(&m[..n]))
}

impl PropagatorPlan {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn options(&self) -> &PlanOptions {
        &self.options
    }

    /// Decay weights in natural FFT order.
    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn shear(&self) -> &SquareMatrix {
        &self.shear
    }

    pub fn norm_bound(&self) -> f64 {
        self.bound
    }

    pub fn propagate(&self, u: &Field) -> Result<Field> {
        Ok(self.propagate_with_diagnostics(u)?.field)
    }

    pub fn propagate_with_diagnostics(&self, u: &Field) -> Result<Propagation> {
        if u.grid() != &self.grid {
            return Err(FieldError::GridMismatch.into());
        }
        if self.t == 0.0 {
            return Ok(Propagation { field: u.clone(), norm_ratio: 1.0, leaked_fraction: 0.0, warning: None });
        }
        let (sheared, leaked_fraction, warning) = if self.shear.is_identity() {
            (u.clone(), 0.0, None)
        } else {
            let r = resample_linear_map(u, &self.shear, self.options.interp)?;
            (r.field, r.leaked_fraction, r.warning)
        };
        let mut spec = dft(&sheared);
        let scale = self.scale;
        spec.values_mut().par_iter_mut().zip(self.decay.par_iter()).for_each(|(v, &d)| *v *= d * scale);
        let field = idft(&spec);

        let before = l2_norm(u);
        let after = l2_norm(&field);
        NORM_CHECKS.fetch_add(1, Ordering::Relaxed);
        let norm_ratio = if before == 0.0 { 0.0 } else { after / before };
        if after > self.bound * before * (1.0 + NORM_SLACK) {
            NORM_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
            return Err(PropError::NormBound { ratio: norm_ratio, bound: self.bound });
        }
        Ok(Propagation { field, norm_ratio, leaked_fraction, warning })
    }
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub times: Vec<f64>,
    pub snapshots: Vec<Field>,
    /// Relative difference between chained and direct evolution at the final time.
    pub drift: Option<f64>,
}

/// Snapshots of the evolution of `u0` at nondecreasing `times`.
///
/// Each snapshot is computed from `u0` directly unless `chained` is set, in
/// which case increments are applied in sequence and the relative drift
/// against the direct result at the final time is reported.
pub fn evolve_path(
    model: &Model,
    grid: &Grid,
    mode: Mode,
    options: &PlanOptions,
    u0: &Field,
    times: &[f64],
    chained: bool,
) -> Result<PathResult> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(PropError::UnorderedTimes);
    }
    if let Some(&t) = times.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(PropError::BadTime(t));
    }
    let direct = |t: f64| -> Result<Field> { build_plan(model, t, grid, mode, options)?.propagate(u0) };
    if !chained {
        let snapshots = times.iter().map(|&t| direct(t)).collect::<Result<Vec<_>>>()?;
        return Ok(PathResult { times: times.to_vec(), snapshots, drift: None });
    }
    let mut plans: HashMap<u64, PropagatorPlan> = HashMap::new();
    let mut snapshots = Vec::with_capacity(times.len());
    let mut cur = u0.clone();
    let mut prev_t = 0.0;
    for &t in times {
        let dt = t - prev_t;
        let plan = match plans.entry(dt.to_bits()) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(build_plan(model, dt, grid, mode, options)?),
        };
        cur = plan.propagate(&cur)?;
        snapshots.push(cur.clone());
        prev_t = t;
    }
    let drift = match (times.last(), snapshots.last()) {
        (Some(&t), Some(last)) => {
            let reference = direct(t)?;
            let mut d = last.clone();
            d.axpy(-1.0, &reference)?;
            let scale = l2_norm(&reference);
            Some(if scale == 0.0 { l2_norm(&d) } else { l2_norm(&d) / scale })
        }
        _ => None,
    };
    Ok(PathResult { times: times.to_vec(), snapshots, drift })
}

/// Applies the symbol `½|Q^{1/2}ξ|^{2s} + drift` to `u`, returning `Pu`.
///
/// The drift term `Σ B_ij x_j ∂_i u` uses spectral differentiation.
pub fn apply_generator(model: &Model, u: &Field) -> Result<Field> {
    let n = model.dim();
    let grid = u.grid();
    if grid.dim() != n {
        return Err(PropError::Dimension { model: n, grid: grid.dim() });
    }
    let root = model.q.sqrt().as_dmatrix().clone();
    let s = model.s;
    let mut out = crate::field::apply_fourier_weight(u, |xi| {
        let v = &root * nalgebra::DVector::from_column_slice(xi);
        Complex64::new(0.5 * v.norm_squared().powf(s), 0.0)
    })?;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| model.b.get(i, j)).collect();
        if row.iter().all(|&c| c == 0.0) {
            continue;
        }
        let deriv = crate::field::apply_fourier_weight(u, |xi| Complex64::new(0.0, xi[i]))?;
        let mut m = vec![0usize; n];
        for (idx, v) in out.values_mut().iter_mut().enumerate() {
            grid.unravel(idx, &mut m);
            let bx: f64 = (0..n).map(|j| row[j] * grid.coord(j, m[j])).sum();
            *v += deriv.values()[idx] * bx;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{l2_inner, sample_field, white_noise};

    fn gauss_1d(grid: &Grid) -> Field {
        sample_field(grid, |x| Complex64::new((-0.5 * x[0] * x[0]).exp(), 0.0)).unwrap()
    }

    fn kolmogorov_oracle(s: f64, t: f64, xi: f64, eta: f64) -> f64 {
        // ∫_0^t 2 |η+τξ|^{2s} dτ with Q = 2^{1/s} diag(0,1)
        let p = 2.0 * s;
        let f = |x: f64| x.abs().powf(p) * x / (p + 1.0);
        let inner = if xi == 0.0 { t * eta.abs().powf(p) } else { (f(eta + t * xi) - f(eta)) / xi };
        2.0 * inner
    }

    #[test]
    fn symbol_integral_basic_cases() {
        let opts = PlanOptions::default();
        let heat = Model::new(SquareMatrix::zeros(2), &SquareMatrix::identity(2), 0.7).unwrap();
        assert_eq!(symbol_integral(&heat, 1.0, &[0.0, 0.0], &opts).unwrap(), 0.0);
        let v = symbol_integral(&heat, 2.5, &[3.0, 4.0], &opts).unwrap();
        assert!((v - 2.5 * 5f64.powf(1.4)).abs() < 1e-12 * v);
        assert_eq!(symbol_integral(&heat, 0.0, &[3.0, 4.0], &opts).unwrap(), 0.0);
    }

    #[test]
    fn symbol_integral_kolmogorov_closed_form() {
        let opts = PlanOptions::default();
        for &s in &[0.3, 0.75, 1.0, 1.6] {
            let m = Model::kolmogorov(1, s).unwrap();
            for &(xi, eta) in &[(1.0, 0.5), (-7.0, 2.0), (40.0, -13.0), (0.0, 3.0), (5.0, 0.0), (1e-3, 1e-2)] {
                for &t in &[0.05, 0.3, 1.0, 3.0] {
                    let got = symbol_integral(&m, t, &[xi, eta], &opts).unwrap();
                    let want = kolmogorov_oracle(s, t, xi, eta);
                    assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300), "s={s} t={t} ({xi},{eta}) {got} {want}");
                }
            }
        }
    }

    #[test]
    fn t_zero_plan_is_identity() {
        let grid = Grid::cube(2, 10.0, 16).unwrap();
        let model = Model::kolmogorov(1, 0.75).unwrap();
        let plan = build_plan(&model, 0.0, &grid, Mode::Forward, &PlanOptions::default()).unwrap();
        assert!(plan.decay().iter().all(|&d| d == 1.0));
        assert!(plan.shear().is_identity());
        let u = white_noise(&grid, 4);
        assert_eq!(plan.propagate(&u).unwrap(), u);
    }

    #[test]
    fn heat_plan_decay_is_heat_multiplier() {
        let grid = Grid::cube(1, 20.0, 64).unwrap();
        let model = Model::new(SquareMatrix::zeros(1), &SquareMatrix::diagonal(&[2.0]).unwrap(), 1.0).unwrap();
        let plan = build_plan(&model, 0.3, &grid, Mode::Forward, &PlanOptions::default()).unwrap();
        for (m, &d) in plan.decay().iter().enumerate() {
            let xi = grid.freq(0, m);
            assert!((d - (-0.3 * xi * xi).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn heat_gaussian_closed_form() {
        let grid = Grid::cube(1, 40.0, 512).unwrap();
        let model = Model::heat(1, 1.0).unwrap();
        let t = 0.5;
        let out = build_plan(&model, t, &grid, Mode::Forward, &PlanOptions::default()).unwrap().propagate(&gauss_1d(&grid)).unwrap();
        let c = 1.0 + 2.0 * t;
        let exact = sample_field(&grid, |x| Complex64::new(c.powf(-0.5) * (-x[0] * x[0] / (2.0 * c)).exp(), 0.0)).unwrap();
        let mut d = out.clone();
        d.axpy(-1.0, &exact).unwrap();
        assert!(l2_norm(&d) / l2_norm(&exact) < 1e-8);
        assert!(out.max_imag() < 1e-12);
    }

    #[test]
    fn modes_are_dual_for_pure_multiplier() {
        let grid = Grid::cube(2, 12.0, 32).unwrap();
        let model = Model::new(SquareMatrix::zeros(2), &SquareMatrix::from_row_major(2, &[2.0, 0.5, 0.5, 1.0]).unwrap(), 0.8).unwrap();
        let opts = PlanOptions::default();
        let fwd = build_plan(&model, 0.4, &grid, Mode::Forward, &opts).unwrap();
        let adj = build_plan(&model, 0.4, &grid, Mode::Adjoint, &opts).unwrap();
        let u = white_noise(&grid, 1);
        let v = white_noise(&grid, 2);
        let lhs = l2_inner(&fwd.propagate(&u).unwrap(), &v).unwrap();
        let rhs = l2_inner(&u, &adj.propagate(&v).unwrap()).unwrap();
        assert!((lhs - rhs).norm() <= 1e-8 * l2_norm(&u) * l2_norm(&v));
    }

    #[test]
    fn trace_scalars_of_modes() {
        let tr = 2.0;
        let t = 0.5;
        assert_eq!(Mode::Forward.scale(tr, t), 1.0);
        assert!((Mode::Adjoint.scale(tr, t) - 1f64.exp()).abs() < 1e-15);
        assert!((Mode::Normalized.scale(tr, t) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(Mode::Normalized.norm_bound(tr, t), 1.0);
        assert!((Mode::Forward.norm_bound(tr, t) - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn chained_path_matches_direct() {
        let grid = Grid::cube(2, 32.0, 256).unwrap();
        let model = Model::kolmogorov(1, 0.75).unwrap();
        let u0 = sample_field(&grid, |x| Complex64::new((-(x[0] * x[0] + x[1] * x[1])).exp(), 0.0)).unwrap();
        let times: Vec<f64> = (1..=8).map(|i| 0.05 * i as f64).collect();
        let path = evolve_path(&model, &grid, Mode::Forward, &PlanOptions::default(), &u0, &times, true).unwrap();
        assert!(path.drift.unwrap() < 1e-3, "drift {}", path.drift.unwrap());
        let norms: Vec<f64> = path.snapshots.iter().map(l2_norm).collect();
        let mut prev = l2_norm(&u0);
        for nrm in norms {
            assert!(nrm <= prev * (1.0 + 1e-8));
            prev = nrm;
        }
        let single = evolve_path(&model, &grid, Mode::Forward, &PlanOptions::default(), &u0, &[0.0], false).unwrap();
        assert_eq!(single.snapshots[0], u0);
        assert!(evolve_path(&model, &grid, Mode::Forward, &PlanOptions::default(), &u0, &[0.2, 0.1], false).is_err());
    }

    #[test]
    fn negative_time_is_rejected() {
        let grid = Grid::cube(1, 4.0, 8).unwrap();
        let model = Model::heat(1, 1.0).unwrap();
        assert!(build_plan(&model, -0.1, &grid, Mode::Forward, &PlanOptions::default()).is_err());
    }

    #[test]
    fn generator_on_heat_gaussian() {
        // ½ (2^{1/s} ξ²)^s with s = 1 is ξ², so Pu = -u'' for the Gaussian.
        let grid = Grid::cube(1, 40.0, 512).unwrap();
        let model = Model::heat(1, 1.0).unwrap();
        let pu = apply_generator(&model, &gauss_1d(&grid)).unwrap();
        for (i, v) in pu.values().iter().enumerate() {
            let x = grid.coord(0, i);
            assert!((v.re - (1.0 - x * x) * (-0.5 * x * x).exp()).abs() < 1e-9);
        }
    }
}
