//! Smoothing diagnostics: the `M^s_t` functional, Gevrey seminorm rates,
//! subelliptic ratios and randomized checks of elementary power inequalities.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::field::{apply_fourier_weight, bracket, dft, idft, l2_norm, Field, FieldError, Grid, Spectrum};
use crate::kalman::{analyze_structure, KalmanError, KalmanStructure};
use crate::matops::SquareMatrix;
use crate::propagator::{apply_generator, build_plan, Mode, Model, PlanOptions, PropError, PropagatorPlan, SymbolIntegrator};

#[derive(Debug, Error)]
pub enum RegError {
    #[error(transparent)]
    Prop(#[from] PropError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error("the Kalman rank condition fails, so the denominator of M^s_t can vanish on the sphere")]
    NotKalman,
    #[error("flag index k = {k} exceeds r = {r}")]
    IndexTooLarge { k: usize, r: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RegError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square of the residuals.
    pub residual: f64,
    pub points: usize,
}

/// Ordinary least squares fit of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Some(LinearFit { slope, intercept, residual: (ss / n as f64).sqrt(), points: n })
}

/// Fit of `log y` against `log x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value <= limit }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value >= limit }
    }
}

/// Values over a set of abscissae with a fitted slope and its verdict.
#[derive(Debug, Clone, Serialize)]
pub struct ScanReport {
    pub name: String,
    pub abscissa: String,
    pub abscissae: Vec<f64>,
    pub values: Vec<f64>,
    /// Points entering the fit.
    pub included: Vec<bool>,
    pub fit: Option<LinearFit>,
    pub theoretical_slope: Option<f64>,
    pub tolerance: Option<f64>,
    pub checks: Vec<Check>,
    pub verdict: bool,
    pub columns: BTreeMap<String, Vec<f64>>,
    pub notes: Vec<String>,
}

impl ScanReport {
    pub fn new(name: &str, abscissa: &str, abscissae: Vec<f64>, values: Vec<f64>) -> Self {
        let n = abscissae.len();
        Self {
            name: name.into(),
            abscissa: abscissa.into(),
            abscissae,
            values,
            included: vec![true; n],
            fit: None,
            theoretical_slope: None,
            tolerance: None,
            checks: Vec::new(),
            verdict: false,
            columns: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// Sets the verdict from the slope tolerance and every check.
    pub fn finalize(&mut self) {
        let slope_ok = match (self.fit, self.theoretical_slope, self.tolerance) {
            (Some(f), Some(th), Some(tol)) => (f.slope - th).abs() <= tol,
            (None, Some(_), Some(_)) => false,
            _ => true,
        };
        self.verdict = slope_ok && self.checks.iter().all(|c| c.pass);
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per abscissa: abscissa, value, included flag, extra columns.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![self.abscissa.clone(), "value".into(), "included".into()];
        header.extend(self.columns.keys().cloned());
        out.write_record(&header)?;
        for i in 0..self.abscissae.len() {
            let mut row = vec![format!("{:e}", self.abscissae[i]), format!("{:e}", self.values[i]), self.included[i].to_string()];
            for col in self.columns.values() {
                row.push(col.get(i).map(|v| format!("{v:e}")).unwrap_or_default());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SphereOptions {
    pub samples: usize,
    pub starts: usize,
    pub stall: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SphereOptions {
    fn default() -> Self {
        Self { samples: 4096, starts: 16, stall: 1e-8, max_iter: 4000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MstResult {
    pub t: f64,
    pub s: f64,
    pub value: f64,
    pub argmax: Vec<f64>,
    pub samples: usize,
    pub refinements: usize,
    /// Best value over the sample before refinement.
    pub sampled_value: f64,
}

/// Quasi-uniform directions on the unit sphere (antipodal pairs collapsed).
pub fn sphere_points(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0]],
        2 => (0..count)
            .map(|i| {
                let th = std::f64::consts::PI * (i as f64 + 0.5) / count as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    vec![r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / nrm).collect()
                })
                .collect()
        }
    }
}

struct MstEvaluator {
    num: SymbolIntegrator,
    den: SymbolIntegrator,
    s: f64,
}

impl MstEvaluator {
    fn new(model: &Model, t: f64, opts: &PlanOptions) -> Result<Self> {
        let mut quad = model.clone();
        quad.s = 1.0;
        Ok(Self {
            num: SymbolIntegrator::new(&quad, t, opts.quad_nodes, opts.quad_tol)?,
            den: SymbolIntegrator::new(model, t, opts.quad_nodes, opts.quad_tol)?,
            s: model.s,
        })
    }

    /// Ratio at direction `xi / |xi|`.
    fn eval(&self, xi: &[f64]) -> Result<f64> {
        let nrm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm == 0.0 || !nrm.is_finite() {
            return Ok(0.0);
        }
        let unit: Vec<f64> = xi.iter().map(|x| x / nrm).collect();
        let num = self.num.integrate(&unit)?;
        let den = self.den.integrate(&unit)?;
        if den == 0.0 {
            return Err(RegError::NotKalman);
        }
        Ok(num.sqrt() * den.powf(-1.0 / (2.0 * self.s)))
    }
}

/// `M^s_t`: supremum over the unit sphere of the ratio of the `L²` and
/// `L^{2s}` time averages of `|Q^{1/2} e^{τB^T} ξ|`.
pub fn mst(model: &Model, t: f64, sphere: &SphereOptions, opts: &PlanOptions) -> Result<MstResult> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(RegError::Invalid(format!("t must be positive, got {t}")));
    }
    let ks = analyze_structure(&model.b, &model.q, None)?;
    if !ks.holds {
        return Err(RegError::NotKalman);
    }
    let n = model.dim();
    let ev = MstEvaluator::new(model, t, opts)?;
    let pts = sphere_points(n, sphere.samples.max(1), sphere.seed);
    let vals: Vec<f64> = pts.par_iter().map(|p| ev.eval(p)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    let best_idx = order[0];
    let sampled_value = vals[best_idx];
    let mut best = (sampled_value, pts[best_idx].clone());
    let mut refinements = 0;
    if n > 1 {
        let step = (std::f64::consts::PI / pts.len() as f64).max(1e-6);
        let starts: Vec<usize> = order.iter().take(sphere.starts.max(1)).cloned().collect();
        let refined: Vec<(f64, Vec<f64>, usize)> = starts
            .par_iter()
            .map(|&i| nelder_mead_max(&ev, &pts[i], vals[i], step, sphere.stall, sphere.max_iter))
            .collect::<Result<_>>()?;
        for (v, x, it) in refined {
            refinements += it;
            if v > best.0 {
                best = (v, x);
            }
        }
    }
    let nrm = best.1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut argmax: Vec<f64> = best.1.iter().map(|x| x / nrm).collect();
    // fix the sign of the antipodal pair
    if let Some(first) = argmax.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            argmax.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(MstResult { t, s: model.s, value: best.0, argmax, samples: pts.len(), refinements, sampled_value })
}

fn nelder_mead_max(
    ev: &MstEvaluator,
    start: &[f64],
    start_val: f64,
    step: f64,
    stall: f64,
    max_iter: usize,
) -> Result<(f64, Vec<f64>, usize)> {
    let n = start.len();
    let f = |x: &[f64]| -> Result<f64> { ev.eval(x).map(|v| -v) };
    let mut simplex: Vec<(f64, Vec<f64>)> = vec![(-start_val, start.to_vec())];
    for i in 0..n {
        let mut x = start.to_vec();
        x[i] += step;
        simplex.push((f(&x)?, x));
    }
    let mut iters = 0;
    while iters < max_iter {
        simplex.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let best = simplex[0].0;
        let worst = simplex[n].0;
        if (worst - best).abs() <= stall * best.abs() {
            break;
        }
        iters += 1;
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|p| p.1[j]).sum::<f64>() / n as f64).collect();
        let along = |c: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + c * (simplex[n].1[j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr)?;
        if fr < simplex[0].0 {
            let xe = along(-2.0);
            let fe = f(&xe)?;
            simplex[n] = if fe < fr { (fe, xe) } else { (fr, xr) };
        } else if fr < simplex[n - 1].0 {
            simplex[n] = (fr, xr);
        } else {
            let (xc, fc) = if fr < simplex[n].0 {
                let x = along(-0.5);
                let v = f(&x)?;
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x)?;
                (x, v)
            };
            if fc < simplex[n].0.min(fr) {
                simplex[n] = (fc, xc);
            } else {
                let x0 = simplex[0].1.clone();
                for p in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..n).map(|j| x0[j] + 0.5 * (p.1[j] - x0[j])).collect();
                    *p = (f(&x)?, x);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let (v, x) = simplex.swap_remove(0);
    Ok((-v, x, iters))
}

pub const JENSEN_SLACK: f64 = 1e-10;

/// `M^s_t` over `times` with a log-log slope fit and the one-sided Jensen check.
pub fn mst_scan(model: &Model, times: &[f64], tolerance: f64, sphere: &SphereOptions, opts: &PlanOptions) -> Result<ScanReport> {
    let s = model.s;
    let expo = 0.5 - 0.5 / s;
    let results: Vec<MstResult> = times.iter().map(|&t| mst(model, t, sphere, opts)).collect::<Result<_>>()?;
    let values: Vec<f64> = results.iter().map(|r| r.value).collect();
    let mut rep = ScanReport::new("mst", "t", times.to_vec(), values.clone());
    rep.fit = loglog_fit(times, &values);
    rep.theoretical_slope = Some(expo);
    rep.tolerance = Some(tolerance);
    let mut violations = 0usize;
    let mut excess = Vec::with_capacity(times.len());
    for (&t, &m) in times.iter().zip(&values) {
        let bound = t.powf(expo);
        // M <= bound for s >= 1 and M >= bound for s <= 1
        let e = if s >= 1.0 { m / bound - 1.0 } else { 1.0 - m / bound };
        if s != 1.0 && e > JENSEN_SLACK {
            violations += 1;
        }
        if s == 1.0 && (m / bound - 1.0).abs() > JENSEN_SLACK {
            violations += 1;
        }
        excess.push(e);
    }
    rep.columns.insert("jensen_bound".into(), times.iter().map(|t| t.powf(expo)).collect());
    rep.columns.insert("jensen_excess".into(), excess);
    rep.checks.push(Check::at_most("jensen_violations", violations as f64, 0.0));
    rep.finalize();
    Ok(rep)
}

/// Which Fourier weight defines the anisotropic seminorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GevreyWeight {
    /// `<ℙ_k ξ>^q`.
    Projection,
    /// `<Q^{1/2} (B^T)^k ξ>^q`.
    Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GevreyOptions {
    pub weight: GevreyWeight,
    pub power_iters: usize,
    pub tolerance: f64,
    /// Points whose maximizing frequency exceeds this fraction of the
    /// Nyquist frequency on some axis are excluded from the fit.
    pub nyquist_fraction: f64,
}

impl Default for GevreyOptions {
    fn default() -> Self {
        Self { weight: GevreyWeight::Projection, power_iters: 30, tolerance: 0.05, nyquist_fraction: 0.5 }
    }
}

pub const BOUNDED_RATIO_LIMIT: f64 = 10.0;

fn weight_matrix(model: &Model, ks: &KalmanStructure, k: usize, kind: GevreyWeight) -> DMatrix<f64> {
    match kind {
        GevreyWeight::Projection => ks.projection(k).as_dmatrix().clone(),
        GevreyWeight::Matrix => {
            let bt = model.b.transpose();
            let mut m = model.q.sqrt().as_dmatrix().clone();
            for _ in 0..k {
                m = &m * bt.as_dmatrix();
            }
            m
        }
    }
}

fn bracket_weight(m: &DMatrix<f64>, q: f64) -> impl Fn(&[f64]) -> Complex64 + Sync + '_ {
    move |xi: &[f64]| {
        if q == 0.0 {
            return Complex64::new(1.0, 0.0);
        }
        let v = m * DVector::from_column_slice(xi);
        Complex64::new(bracket(v.as_slice()).powf(q), 0.0)
    }
}

/// Worst-case amplification estimate of `u -> W e^{-tP} u` by power
/// iteration on `T^*T`. Returns the best Rayleigh-type ratio and the final
/// iterate's spectrum.
pub fn power_amplification<T, A>(apply: T, adjoint: A, seed: &Field, iters: usize) -> Result<(f64, Field)>
where
    T: Fn(&Field) -> Result<Field>,
    A: Fn(&Field) -> Result<Field>,
{
    let mut v = seed.clone();
    let n0 = l2_norm(&v);
    if n0 == 0.0 {
        return Ok((0.0, v));
    }
    v.scale(1.0 / n0);
    let mut best = 0.0_f64;
    for _ in 0..iters.max(1) {
        let tv = apply(&v)?;
        best = best.max(l2_norm(&tv));
        let mut w = adjoint(&tv)?;
        let nw = l2_norm(&w);
        if nw == 0.0 {
            break;
        }
        w.scale(1.0 / nw);
        v = w;
    }
    Ok((best, v))
}

/// Frequency of the largest spectral coefficient, as a fraction of the
/// Nyquist frequency on each axis (maximum over axes).
fn peak_nyquist_fraction(v: &Field) -> f64 {
    let spec = dft(v);
    let grid = spec.grid();
    let (idx, _) = spec
        .values()
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, z)| if z.norm() > acc.1 { (i, z.norm()) } else { acc });
    let xi = grid.frequency(idx);
    (0..grid.dim()).map(|a| xi[a].abs() / grid.nyquist(a)).fold(0.0, f64::max)
}

/// Gevrey smoothing scan of `<W D>^q e^{-tP}` over `times`.
///
/// The fitted slope is that of the worst-case amplification, estimated by
/// power iteration seeded with `u0`; the seminorm of `u0` itself enters the
/// bounded-ratio check and is reported as a column together with its own
/// (informational) slope.
#[allow(clippy::too_many_arguments)]
pub fn gevrey_scan(
    model: &Model,
    ks: &KalmanStructure,
    k: usize,
    q: f64,
    u0: &Field,
    times: &[f64],
    gopts: &GevreyOptions,
    opts: &PlanOptions,
) -> Result<ScanReport> {
    let r = ks.r.ok_or(RegError::NotKalman)?;
    if k > r {
        return Err(RegError::IndexTooLarge { k, r });
    }
    if !(q >= 0.0) || !q.is_finite() {
        return Err(RegError::Invalid(format!("q must be >= 0, got {q}")));
    }
    if times.iter().any(|&t| !(t > 0.0)) {
        return Err(RegError::Invalid("scan times must be positive".into()));
    }
    let s = model.s;
    let rate = 1.0 / (2.0 * s) + k as f64;
    let wm = weight_matrix(model, ks, k, gopts.weight);
    let weight = bracket_weight(&wm, q);
    let grid = u0.grid().clone();
    let u_norm = l2_norm(u0);
    let tr = model.trace_b();

    let mut amplification = Vec::new();
    let mut seminorms = Vec::new();
    let mut peak = Vec::new();
    for &t in times {
        let fwd = build_plan(model, t, &grid, Mode::Forward, opts)?;
        let adj = build_plan(model, t, &grid, Mode::Adjoint, opts)?;
        let apply = |u: &Field| -> Result<Field> { Ok(apply_fourier_weight(&fwd.propagate(u)?, &weight)?) };
        let adjoint = |u: &Field| -> Result<Field> { Ok(adj.propagate(&apply_fourier_weight(u, &weight)?)?) };
        seminorms.push(l2_norm(&apply(u0)?));
        let (amp, v) = power_amplification(apply, adjoint, u0, gopts.power_iters)?;
        amplification.push(amp);
        peak.push(peak_nyquist_fraction(&v));
    }

    let mut rep = ScanReport::new("gevrey", "t", times.to_vec(), amplification.clone());
    rep.included = peak.iter().map(|&p| p <= gopts.nyquist_fraction).collect();
    let excluded = rep.included.iter().filter(|b| !**b).count();
    if excluded > 0 {
        rep.notes.push(format!("{excluded} point(s) excluded: maximizing frequency beyond {} of Nyquist", gopts.nyquist_fraction));
    }
    let (fx, fy): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&amplification)
        .zip(&rep.included)
        .filter(|(_, inc)| **inc)
        .map(|((t, a), _)| (*t, *a))
        .unzip();
    rep.fit = loglog_fit(&fx, &fy);
    rep.theoretical_slope = Some(-q * rate);
    rep.tolerance = Some(gopts.tolerance);

    let ratios: Vec<f64> = times
        .iter()
        .zip(&seminorms)
        .map(|(&t, &sn)| sn * t.powf(q * rate) * (-0.5 * tr * t).exp() / u_norm)
        .collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let max_ratio = sorted.last().cloned().unwrap_or(0.0);
    rep.checks.push(Check::at_most("bounded_ratio", if median > 0.0 { max_ratio / median } else { f64::INFINITY }, BOUNDED_RATIO_LIMIT));
    if let Some(f) = loglog_fit(times, &seminorms) {
        rep.notes.push(format!("seed seminorm slope {:.4} (informational)", f.slope));
    }
    rep.columns.insert("seed_seminorm".into(), seminorms);
    rep.columns.insert("bound_ratio".into(), ratios);
    rep.columns.insert("peak_nyquist_fraction".into(), peak);
    rep.finalize();
    Ok(rep)
}

/// Seminorm `|<W D>^q e^{-tP} u|` for a single plan.
pub fn gevrey_seminorm(plan: &PropagatorPlan, ks: &KalmanStructure, k: usize, q: f64, kind: GevreyWeight, u: &Field) -> Result<f64> {
    let wm = weight_matrix(plan.model(), ks, k, kind);
    let out = plan.propagate(u)?;
    Ok(l2_norm(&apply_fourier_weight(&out, bracket_weight(&wm, q))?))
}

#[derive(Debug, Clone, Serialize)]
pub struct SubellipticSample {
    pub index: usize,
    pub excluded: bool,
    pub boundary_fraction: f64,
    pub subelliptic_ratio: f64,
    pub drift_ratio: f64,
    pub refined_subelliptic_ratio: Option<f64>,
    pub refined_drift_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubellipticReport {
    pub orders: Vec<f64>,
    pub samples: Vec<SubellipticSample>,
    pub max_subelliptic: f64,
    pub max_drift: f64,
    pub refined_max_subelliptic: f64,
    pub refined_max_drift: f64,
    /// Relative change of the maxima under refinement.
    pub subelliptic_change: f64,
    pub drift_change: f64,
    pub notes: Vec<String>,
}

pub const SUPPORT_TOL: f64 = 1e-10;

/// Fraction of the squared norm within `layer` cells of the box boundary.
pub fn boundary_fraction(u: &Field, layer: usize) -> f64 {
    let grid = u.grid();
    let total = u.sum_sq();
    if total == 0.0 {
        return 0.0;
    }
    let n = grid.dim();
    let mut m = vec![0; n];
    let mut edge = 0.0;
    for (idx, v) in u.values().iter().enumerate() {
        grid.unravel(idx, &mut m);
        if (0..n).any(|a| m[a] < layer || m[a] + layer >= grid.counts()[a]) {
            edge += v.norm_sqr();
        }
    }
    edge / total
}

/// Spectral interpolation onto a grid with `factor` times more points per axis.
pub fn refine_spectral(u: &Field, factor: usize) -> Result<Field> {
    let coarse = u.grid();
    let fine = coarse.refined(factor)?;
    let spec = dft(u);
    let mut out = Spectrum::zeros(&fine);
    let n = coarse.dim();
    let mut mc = vec![0; n];
    let mut mf = vec![0; n];
    for (idx, v) in spec.values().iter().enumerate() {
        coarse.unravel(idx, &mut mc);
        for a in 0..n {
            let k = coarse.wavenumber(a, mc[a]);
            let nf = fine.counts()[a] as i64;
            mf[a] = k.rem_euclid(nf) as usize;
        }
        out.values_mut()[fine.ravel(&mf)] = *v;
    }
    Ok(idft(&out))
}

fn subelliptic_ratios(model: &Model, ks: &KalmanStructure, orders: &[f64], u: &Field) -> Result<(f64, f64)> {
    let pu = apply_generator(model, u)?;
    let denom = l2_norm(&pu) + l2_norm(u);
    let mut sum = 0.0;
    for (k, &order) in orders.iter().enumerate() {
        let p = ks.projection(k).as_dmatrix().clone();
        sum += l2_norm(&apply_fourier_weight(u, bracket_weight(&p, order))?);
    }
    let drift = drift_term(&model.b, u)?;
    Ok((sum / denom, l2_norm(&drift) / denom))
}

/// `<Bx, ∇> u` by spectral differentiation.
pub fn drift_term(b: &SquareMatrix, u: &Field) -> Result<Field> {
    let grid = u.grid();
    let n = grid.dim();
    let mut out = Field::zeros(grid);
    let mut m = vec![0; n];
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| b.get(i, j)).collect();
        if row.iter().all(|&c| c == 0.0) {
            continue;
        }
        let d = apply_fourier_weight(u, |xi| Complex64::new(0.0, xi[i]))?;
        for (idx, v) in out.values_mut().iter_mut().enumerate() {
            grid.unravel(idx, &mut m);
            let bx: f64 = (0..n).map(|j| row[j] * grid.coord(j, m[j])).sum();
            *v += d.values()[idx] * bx;
        }
    }
    Ok(out)
}

/// Subelliptic and drift ratios over a family of fields, with a
/// resolution-stability figure from refined copies of each field.
pub fn subelliptic_report(
    model: &Model,
    ks: &KalmanStructure,
    fields: &[Field],
    refined: Option<&[Field]>,
) -> Result<SubellipticReport> {
    let r = ks.r.ok_or(RegError::NotKalman)?;
    let s = model.s;
    let orders: Vec<f64> = (0..=r).map(|k| 2.0 * s / (1.0 + 2.0 * k as f64 * s)).collect();
    if let Some(rf) = refined {
        if rf.len() != fields.len() {
            return Err(RegError::Invalid("refined family has a different length".into()));
        }
    }
    let mut notes = Vec::new();
    let samples: Vec<SubellipticSample> = fields
        .par_iter()
        .enumerate()
        .map(|(i, u)| -> Result<SubellipticSample> {
            let bf = boundary_fraction(u, 3);
            if bf > SUPPORT_TOL {
                return Ok(SubellipticSample {
                    index: i,
                    excluded: true,
                    boundary_fraction: bf,
                    subelliptic_ratio: f64::NAN,
                    drift_ratio: f64::NAN,
                    refined_subelliptic_ratio: None,
                    refined_drift_ratio: None,
                });
            }
            let (sr, dr) = subelliptic_ratios(model, ks, &orders, u)?;
            let fine = match refined {
                Some(rf) => rf[i].clone(),
                None => refine_spectral(u, 2)?,
            };
            let (rs, rd) = subelliptic_ratios(model, ks, &orders, &fine)?;
            Ok(SubellipticSample {
                index: i,
                excluded: false,
                boundary_fraction: bf,
                subelliptic_ratio: sr,
                drift_ratio: dr,
                refined_subelliptic_ratio: Some(rs),
                refined_drift_ratio: Some(rd),
            })
        })
        .collect::<Result<_>>()?;
    for smp in samples.iter().filter(|s| s.excluded) {
        notes.push(format!("sample {} excluded: boundary mass fraction {:e}", smp.index, smp.boundary_fraction));
    }
    let kept: Vec<&SubellipticSample> = samples.iter().filter(|s| !s.excluded).collect();
    let max_of = |f: &dyn Fn(&SubellipticSample) -> f64| kept.iter().map(|s| f(s)).fold(0.0, f64::max);
    let max_subelliptic = max_of(&|s| s.subelliptic_ratio);
    let max_drift = max_of(&|s| s.drift_ratio);
    let refined_max_subelliptic = max_of(&|s| s.refined_subelliptic_ratio.unwrap_or(0.0));
    let refined_max_drift = max_of(&|s| s.refined_drift_ratio.unwrap_or(0.0));
    let change = |a: f64, b: f64| if a == 0.0 { 0.0 } else { (b - a).abs() / a };
    Ok(SubellipticReport {
        orders,
        subelliptic_change: change(max_subelliptic, refined_max_subelliptic),
        drift_change: change(max_drift, refined_max_drift),
        samples,
        max_subelliptic,
        max_drift,
        refined_max_subelliptic,
        refined_max_drift,
        notes,
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct InequalityReport {
    pub samples: usize,
    pub power_sum_violations: usize,
    pub reverse_violations: usize,
    pub difference_violations: usize,
    pub worst_excess: f64,
}

impl InequalityReport {
    pub fn violations(&self) -> usize {
        self.power_sum_violations + self.reverse_violations + self.difference_violations
    }
}

pub const INEQ_SLACK: f64 = 1e-12;

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// `(a_1+...+a_r)^q <= r^{(q-1)_+} Σ a_i^q`; returns the scaled excess.
pub fn power_sum_excess(a: &[f64], q: f64) -> f64 {
    let r = a.len() as f64;
    let lhs = a.iter().sum::<f64>().powf(q);
    let rhs = r.powf(pos(q - 1.0)) * a.iter().map(|x| x.powf(q)).sum::<f64>();
    (lhs - rhs) / lhs.max(rhs).max(1.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `2^{-(q-1)_+}|ξ|^q - |η|^q <= |ξ-η|^q`; returns the scaled excess.
pub fn reverse_excess(xi: &[f64], eta: &[f64], q: f64) -> f64 {
    let d: Vec<f64> = xi.iter().zip(eta).map(|(a, b)| a - b).collect();
    let a = norm(xi).powf(q);
    let b = norm(eta).powf(q);
    let lhs = 2f64.powf(-pos(q - 1.0)) * a - b;
    let rhs = norm(&d).powf(q);
    (lhs - rhs) / a.max(b).max(rhs).max(1.0)
}

/// Difference bound for `||ξ|^q - |η|^q|`; returns the scaled excess.
pub fn difference_excess(xi: &[f64], eta: &[f64], q: f64) -> f64 {
    let d: Vec<f64> = xi.iter().zip(eta).map(|(a, b)| a - b).collect();
    let nx = norm(xi);
    let ne = norm(eta);
    let nd = norm(&d);
    let lhs = (nx.powf(q) - ne.powf(q)).abs();
    let rhs = if q > 1.0 {
        q * 2f64.powf(pos(q - 2.0)) * (nd.powf(q) + nx.powf(q - 1.0).min(ne.powf(q - 1.0)) * nd)
    } else {
        nd.powf(q)
    };
    (lhs - rhs) / lhs.max(rhs).max(1.0)
}

/// Randomized checks of the three power inequalities.
pub fn inequality_oracles(samples: usize, seed: u64) -> InequalityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = InequalityReport { samples, ..Default::default() };
    let scale = |rng: &mut ChaCha8Rng| 10f64.powf(rng.random_range(-3.0..3.0));
    for _ in 0..samples {
        let q: f64 = rng.random_range(1e-6..=5.0);
        let r = rng.random_range(1..=8);
        let a: Vec<f64> = (0..r).map(|_| rng.random::<f64>() * scale(&mut rng)).collect();
        let e1 = power_sum_excess(&a, q);
        let n = rng.random_range(1..=4);
        let sx = scale(&mut rng);
        let se = if rng.random_bool(0.5) { sx } else { scale(&mut rng) };
        let xi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x * sx).collect();
        let eta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x * se).collect();
        let e2 = reverse_excess(&xi, &eta, q);
        let e3 = difference_excess(&xi, &eta, q);
        if e1 > INEQ_SLACK {
            rep.power_sum_violations += 1;
        }
        if e2 > INEQ_SLACK {
            rep.reverse_violations += 1;
        }
        if e3 > INEQ_SLACK {
            rep.difference_violations += 1;
        }
        rep.worst_excess = rep.worst_excess.max(e1).max(e2).max(e3);
    }
    rep
}

/// White noise on `grid`, used as rough seed data for scans.
pub fn rough_seed(grid: &Grid, seed: u64) -> Field {
    crate::field::white_noise(grid, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample_field;

    #[test]
    fn linear_fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope - 2.5).abs() < 1e-14);
        assert!((f.intercept + 1.0).abs() < 1e-13);
        assert!(f.residual < 1e-14);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn mst_of_isotropic_heat_is_power_of_t() {
        let model = Model::new(SquareMatrix::zeros(2), &SquareMatrix::identity(2), 0.7).unwrap();
        for t in [0.01, 0.3, 2.0] {
            let m = mst(&model, t, &SphereOptions { samples: 64, ..Default::default() }, &PlanOptions::default()).unwrap();
            assert!((m.value - t.powf(0.5 - 0.5 / 0.7)).abs() < 1e-10 * m.value);
            assert!((norm(&m.argmax) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mst_with_s_one_is_one() {
        let model = Model::kolmogorov(1, 1.0).unwrap();
        let m = mst(&model, 0.3, &SphereOptions { samples: 256, ..Default::default() }, &PlanOptions::default()).unwrap();
        assert!((m.value - 1.0).abs() < 1e-10);
        assert!(m.value >= m.sampled_value);
    }

    #[test]
    fn mst_rejects_non_kalman() {
        let model = Model::new(SquareMatrix::identity(2), &SquareMatrix::diagonal(&[1.0, 0.0]).unwrap(), 0.8).unwrap();
        assert!(matches!(mst(&model, 0.1, &SphereOptions::default(), &PlanOptions::default()), Err(RegError::NotKalman)));
    }

    #[test]
    fn gevrey_with_q_zero_is_plain_norm() {
        let grid = Grid::cube(1, 20.0, 128).unwrap();
        let model = Model::heat(1, 0.75).unwrap();
        let ks = analyze_structure(&model.b, &model.q, None).unwrap();
        let u = rough_seed(&grid, 3);
        let plan = build_plan(&model, 0.1, &grid, Mode::Forward, &PlanOptions::default()).unwrap();
        let sn = gevrey_seminorm(&plan, &ks, 0, 0.0, GevreyWeight::Projection, &u).unwrap();
        assert!((sn - l2_norm(&plan.propagate(&u).unwrap())).abs() < 1e-12 * sn);
        assert!(gevrey_scan(&model, &ks, 1, 1.0, &u, &[0.1], &GevreyOptions::default(), &PlanOptions::default()).is_err());
    }

    #[test]
    fn power_iteration_finds_multiplier_peak() {
        // sup_ξ <ξ> e^{-t|ξ|^{1.5}} for the heat model, compared with a dense sweep
        let grid = Grid::cube(1, 40.0, 1024).unwrap();
        let model = Model::heat(1, 0.75).unwrap();
        let t = 0.01;
        let plan = build_plan(&model, t, &grid, Mode::Forward, &PlanOptions::default()).unwrap();
        let w = |xi: &[f64]| Complex64::new(bracket(xi), 0.0);
        let apply = |u: &Field| -> Result<Field> { Ok(apply_fourier_weight(&plan.propagate(u)?, w)?) };
        let (amp, _) = power_amplification(apply, apply, &rough_seed(&grid, 1), 60).unwrap();
        let sup = grid.freqs(0).iter().map(|&x| bracket(&[x]) * (-t * x.abs().powf(1.5)).exp()).fold(0.0, f64::max);
        assert!(amp <= sup * (1.0 + 1e-12));
        assert!(amp >= 0.97 * sup, "{amp} {sup}");
    }

    #[test]
    fn subelliptic_v0_spectrum_reduces_to_elliptic_term() {
        // B = 0: only V_0 = R^n, so the sum has the single k = 0 term.
        let grid = Grid::cube(1, 40.0, 256).unwrap();
        let model = Model::heat(1, 1.0).unwrap();
        let ks = analyze_structure(&model.b, &model.q, None).unwrap();
        let u = sample_field(&grid, |x| Complex64::new((-0.5 * x[0] * x[0]).exp(), 0.0)).unwrap();
        let rep = subelliptic_report(&model, &ks, std::slice::from_ref(&u), None).unwrap();
        assert_eq!(rep.orders, vec![2.0]);
        let elliptic = l2_norm(&apply_fourier_weight(&u, |xi| Complex64::new(1.0 + xi[0] * xi[0], 0.0)).unwrap());
        let pu = apply_generator(&model, &u).unwrap();
        let expect = elliptic / (l2_norm(&pu) + l2_norm(&u));
        assert!((rep.max_subelliptic - expect).abs() < 1e-12 * expect);
        assert_eq!(rep.max_drift, 0.0);
        assert!(rep.subelliptic_change < 1e-10);
    }

    #[test]
    fn spectral_refinement_preserves_band_limited_samples() {
        let grid = Grid::cube(1, 20.0, 64).unwrap();
        let u = sample_field(&grid, |x| Complex64::new((-0.5 * x[0] * x[0]).exp(), 0.0)).unwrap();
        let fine = refine_spectral(&u, 2).unwrap();
        for i in 0..64 {
            assert!((fine.values()[2 * i] - u.values()[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn inequality_edge_cases() {
        assert!(power_sum_excess(&[3.7], 2.3).abs() < 1e-15);
        let xi = [3.0, -1.0];
        let eta = [0.5, 2.0];
        assert!(difference_excess(&xi, &eta, 1.0) <= 0.0);
        assert!(reverse_excess(&xi, &eta, 1.0) <= 0.0);
        let rep = inequality_oracles(2000, 11);
        assert_eq!(rep.violations(), 0, "{rep:?}");
    }

    #[test]
    fn scan_report_csv() {
        let mut rep = ScanReport::new("x", "t", vec![1.0, 2.0], vec![3.0, 4.0]);
        rep.columns.insert("extra".into(), vec![5.0, 6.0]);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,value,included,extra\n"));
        assert_eq!(s.lines().count(), 3);
    }
}
