//! Observation sets and null-control diagnostics: thickness, spectral and
//! dissipation scans, observability probes, penalized HUM and the non-thick
//! counterexample family.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{
    dft, idft, l2_inner, l2_norm, l2_norm_on, sample_field, white_noise, Field, FieldError, Grid, Spectrum, MAX_DIM,
};
use crate::kalman::KalmanStructure;
use crate::propagator::{build_plan, Mode, Model, PlanOptions, PropError, PropagatorPlan};
use crate::regularity::{linear_fit, power_amplification, Check, LinearFit, RegError, Result as RegResult, ScanReport};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Prop(#[from] PropError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error("axis {axis}: window side {side} exceeds box length {length}")]
    WindowTooLarge { axis: usize, side: f64, length: f64 },
    #[error("Kovrijkine constant K = {0} is below e")]
    SmallK(f64),
    #[error("observation set is empty")]
    EmptySet,
    #[error("set appears thick at this resolution")]
    NoGaps,
    #[error("optimality identity off by {0:.3e} (limit {IDENTITY_TOL})")]
    Identity(f64),
    #[error("bitmap {path}: {got} bytes, grid has {expected} points")]
    Bitmap { path: PathBuf, got: usize, expected: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ControlError>;

/// Relative tolerance on `‖f(T)‖ = ε‖g_T‖`.
pub const IDENTITY_TOL: f64 = 0.05;

/// Analytic or file description of an observation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OmegaShape {
    Full,
    /// `{x : (x_axis - offset) mod period < width}`.
    Stripes {
        #[serde(default)]
        axis: usize,
        period: f64,
        width: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Euclidean ball.
    Blob { center: Vec<f64>, radius: f64 },
    /// Complement of the cubes `|x - c|_∞ < w/2`.
    Gaps { centers: Vec<Vec<f64>>, widths: Vec<f64> },
    /// One byte per grid point, row-major, nonzero inside.
    Bitmap { path: PathBuf },
}

/// Configuration form of a thick-set description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaSpec {
    pub shape: OmegaShape,
    pub gamma: f64,
    pub a: Vec<f64>,
}

impl OmegaSpec {
    /// Rasterizes the shape; relative bitmap paths resolve against `base`.
    pub fn build(&self, grid: &Grid, base: &Path) -> Result<ThickSetSpec> {
        let indicator = rasterize(&self.shape, grid, base)?;
        ThickSetSpec::new(grid.clone(), indicator, self.gamma, self.a.clone())
    }
}

fn rasterize(shape: &OmegaShape, grid: &Grid, base: &Path) -> Result<Vec<bool>> {
    let n = grid.dim();
    let points = || (0..grid.len()).map(|i| grid.point(i));
    Ok(match shape {
        OmegaShape::Full => vec![true; grid.len()],
        OmegaShape::Stripes { axis, period, width, offset } => {
            if *axis >= n || !(*period > 0.0) || !(*width >= 0.0) {
                return Err(ControlError::Invalid("stripes need axis < dim, period > 0, width >= 0".into()));
            }
            let eps = 1e-12 * period;
            points().map(|x| (x[*axis] - offset).rem_euclid(*period) < width - eps).collect()
        }
        OmegaShape::Blob { center, radius } => {
            if center.len() != n {
                return Err(ControlError::Invalid(format!("blob center needs {n} coordinates")));
            }
            points().map(|x| x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= radius * radius).collect()
        }
        OmegaShape::Gaps { centers, widths } => {
            if centers.len() != widths.len() || centers.iter().any(|c| c.len() != n) {
                return Err(ControlError::Invalid("gaps need one width per center of full dimension".into()));
            }
            points()
                .map(|x| {
                    !centers.iter().zip(widths).any(|(c, w)| x.iter().zip(c).all(|(a, b)| (a - b).abs() < 0.5 * w))
                })
                .collect()
        }
        OmegaShape::Bitmap { path } => {
            let full = if path.is_absolute() { path.clone() } else { base.join(path) };
            let bytes = std::fs::read(&full)?;
            if bytes.len() != grid.len() {
                return Err(ControlError::Bitmap { path: full, got: bytes.len(), expected: grid.len() });
            }
            bytes.iter().map(|&b| b != 0).collect()
        }
    })
}

/// Observation set on a grid with its thickness parameters `(γ, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThickSetSpec {
    pub grid: Grid,
    pub indicator: Vec<bool>,
    pub gamma: f64,
    pub a: Vec<f64>,
}

impl ThickSetSpec {
    pub fn new(grid: Grid, indicator: Vec<bool>, gamma: f64, a: Vec<f64>) -> Result<Self> {
        if indicator.len() != grid.len() {
            return Err(FieldError::SizeMismatch { expected: grid.len(), got: indicator.len() }.into());
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ControlError::Invalid(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if a.len() != grid.dim() {
            return Err(ControlError::Invalid(format!("window needs {} sides, got {}", grid.dim(), a.len())));
        }
        for (axis, (&side, &length)) in a.iter().zip(grid.lengths()).enumerate() {
            if !(side > 0.0) || !side.is_finite() {
                return Err(ControlError::Invalid(format!("window side {side} on axis {axis}")));
            }
            if side > length * (1.0 + 1e-12) {
                return Err(ControlError::WindowTooLarge { axis, side, length });
            }
        }
        Ok(Self { grid, indicator, gamma, a })
    }

    pub fn full(grid: &Grid, gamma: f64, a: Vec<f64>) -> Result<Self> {
        Self::new(grid.clone(), vec![true; grid.len()], gamma, a)
    }

    pub fn count(&self) -> usize {
        self.indicator.iter().filter(|b| **b).count()
    }

    /// `|ω ∩ box|`.
    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.grid.cell_volume()
    }

    /// Window side in cells on each axis.
    pub fn window_cells(&self) -> Vec<usize> {
        self.a.iter().enumerate().map(|(ax, &side)| ((side / self.grid.spacing(ax)).round() as usize).max(1)).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThicknessReport {
    pub gamma: f64,
    pub window_cells: Vec<usize>,
    pub min_fraction: f64,
    pub thick: bool,
    /// Lower corner of a window attaining the minimum.
    pub worst_corner: Vec<f64>,
}

/// Periodic window sums of `values` with `widths[a]` cells along each axis,
/// indexed by the window's lower corner.
fn window_sums(grid: &Grid, values: &[u32], widths: &[usize]) -> Vec<u32> {
    let counts = grid.counts();
    let mut cur = values.to_vec();
    for (ax, &w) in widths.iter().enumerate() {
        let c = counts[ax];
        let stride: usize = counts[ax + 1..].iter().product();
        let mut next = vec![0u32; cur.len()];
        let lines = cur.len() / c;
        for line in 0..lines {
            let outer = line / stride;
            let inner = line % stride;
            let start = outer * c * stride + inner;
            let at = |i: usize| start + (i % c) * stride;
            let mut s: u32 = (0..w).map(|i| cur[at(i)]).sum();
            for i in 0..c {
                next[at(i)] = s;
                s = s + cur[at(i + w)] - cur[at(i)];
            }
        }
        cur = next;
    }
    cur
}

/// Minimum covered fraction over all grid-aligned periodic windows.
pub fn thickness_check(spec: &ThickSetSpec) -> ThicknessReport {
    let widths = spec.window_cells();
    let ones: Vec<u32> = spec.indicator.iter().map(|&b| b as u32).collect();
    let sums = window_sums(&spec.grid, &ones, &widths);
    let (idx, &min) = sums.iter().enumerate().min_by_key(|(_, v)| **v).expect("grid is nonempty");
    let total: usize = widths.iter().product();
    let min_fraction = min as f64 / total as f64;
    ThicknessReport {
        gamma: spec.gamma,
        window_cells: widths,
        min_fraction,
        thick: min_fraction >= spec.gamma,
        worst_corner: spec.grid.point(idx),
    }
}

/// `(ln[(K^n/γ)^{nK}])_+ + (ln[(K^n/γ)^{2K(a_1+…+a_n)}])_+ + 1`.
pub fn kovrijkine_c1(gamma: f64, a: &[f64], k: f64) -> Result<f64> {
    if !(k >= std::f64::consts::E) {
        return Err(ControlError::SmallK(k));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ControlError::Invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if a.is_empty() || a.iter().any(|&x| !(x > 0.0)) {
        return Err(ControlError::Invalid("window sides must be positive".into()));
    }
    let n = a.len() as f64;
    let base = n * k.ln() - gamma.ln();
    let sum: f64 = a.iter().sum();
    Ok((n * k * base).max(0.0) + (2.0 * k * sum * base).max(0.0) + 1.0)
}

/// Natural-order mask of the frequencies with `|ξ_j| <= k` on every axis.
pub fn band_mask(grid: &Grid, k: f64) -> Vec<bool> {
    let n = grid.dim();
    let tol = 1e-12 * k.abs().max(1.0);
    (0..grid.len()).map(|i| grid.frequency(i).iter().take(n).all(|x| x.abs() <= k + tol)).collect()
}

fn spectral_mask(u: &Field, mask: &[bool], keep: bool) -> Field {
    let mut spec = dft(u);
    for (v, &m) in spec.values_mut().iter_mut().zip(mask) {
        if m != keep {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    idft(&spec)
}

/// `π_k u`.
pub fn band_project(u: &Field, k: f64) -> Field {
    spectral_mask(u, &band_mask(u.grid(), k), true)
}

/// `(1 - π_k) u`.
pub fn tail_project(u: &Field, k: f64) -> Field {
    spectral_mask(u, &band_mask(u.grid(), k), false)
}

/// Random field with independent complex Gaussian modes on `[-k, k]^n`.
pub fn random_band_limited<R: Rng>(grid: &Grid, mask: &[bool], rng: &mut R) -> Field {
    let values = mask
        .iter()
        .map(|&m| {
            if m {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(re, im)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    idft(&Spectrum::from_values(grid.clone(), values).expect("mask matches grid"))
}

/// `‖u‖ / ‖u‖_{L²(ω)}`.
pub fn restriction_ratio(u: &Field, omega: &ThickSetSpec) -> Result<f64> {
    let inside = l2_norm_on(u, &omega.indicator)?;
    if inside == 0.0 {
        return Err(ControlError::EmptySet);
    }
    Ok(l2_norm(u) / inside)
}

/// Largest `‖π_k u‖ / ‖π_k u‖_{L²(ω)}` over random band-limited fields for
/// each `k`, with `log(max ratio)` fitted against `k`.
pub fn spectral_ratio_scan(omega: &ThickSetSpec, ks: &[f64], samples: usize, kovrijkine_k: f64, seed: u64) -> Result<ScanReport> {
    if omega.count() == 0 {
        return Err(ControlError::EmptySet);
    }
    if samples == 0 || ks.iter().any(|&k| !(k >= 0.0)) {
        return Err(ControlError::Invalid("need samples >= 1 and k >= 0".into()));
    }
    let thickness = thickness_check(omega);
    let c1 = kovrijkine_c1(omega.gamma, &omega.a, kovrijkine_k)?;
    let grid = &omega.grid;
    let stats: Vec<(f64, f64, f64)> = ks
        .par_iter()
        .enumerate()
        .map(|(i, &k)| -> Result<(f64, f64, f64)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mask = band_mask(grid, k);
            let (mut max, mut min, mut sum) = (0.0_f64, f64::INFINITY, 0.0);
            let mut drawn = 0;
            let mut rejected = 0;
            while drawn < samples {
                let u = random_band_limited(grid, &mask, &mut rng);
                match restriction_ratio(&u, omega) {
                    Ok(r) => {
                        max = max.max(r);
                        min = min.min(r);
                        sum += r;
                        drawn += 1;
                    }
                    Err(ControlError::EmptySet) if rejected < 100 => rejected += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((max, min, sum / samples as f64))
        })
        .collect::<Result<_>>()?;
    let max: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let logs: Vec<f64> = max.iter().map(|r| r.ln()).collect();
    let mut rep = ScanReport::new("spectral", "k", ks.to_vec(), max.clone());
    rep.fit = linear_fit(ks, &logs);
    let empirical = ks.iter().zip(&logs).filter(|(k, _)| **k > 0.0).map(|(k, l)| l / k).fold(0.0_f64, f64::max);
    let min_ratio = stats.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    rep.checks.push(Check::at_least("min_ratio", min_ratio, 1.0 - 1e-12));
    rep.checks.push(Check::at_most("empirical_constant", empirical, c1));
    if let Some(f) = rep.fit {
        rep.checks.push(Check::at_most("log_growth_slope", f.slope, c1));
    }
    rep.checks.push(Check::at_least("min_window_fraction", thickness.min_fraction, omega.gamma));
    if !thickness.thick {
        rep.notes.push(format!("set is not ({}, a)-thick: min window fraction {:.4}", omega.gamma, thickness.min_fraction));
    }
    rep.notes.push(format!("kovrijkine_c1 = {c1:.6e} with K = {kovrijkine_k}"));
    rep.columns.insert("log_max_ratio".into(), logs);
    rep.columns.insert("min_ratio".into(), stats.iter().map(|s| s.1).collect());
    rep.columns.insert("mean_ratio".into(), stats.iter().map(|s| s.2).collect());
    rep.finalize();
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DissipationOptions {
    pub power_iters: usize,
    /// Tails below this value are excluded from the fits.
    pub floor: f64,
    /// Limit on the fit residual relative to the range of `log tail`.
    pub residual_limit: f64,
}

impl Default for DissipationOptions {
    fn default() -> Self {
        Self { power_iters: 30, floor: 1e-14, residual_limit: 0.05 }
    }
}

/// Fit of `log tail` against `t^m` at one `k`.
#[derive(Debug, Clone, Serialize)]
pub struct TailFit {
    pub k: f64,
    pub fit: Option<LinearFit>,
    /// Largest absolute residual over the range of `log tail`.
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DissipationReport {
    pub m: f64,
    pub ks: Vec<f64>,
    pub times: Vec<f64>,
    /// Worst-case `‖(1-π_k) e^{-tP_co}‖`, indexed `[k][t]`.
    pub tail: Vec<Vec<f64>>,
    /// `‖(1-π_k) e^{-tP_co} u_0‖ / ‖u_0‖`.
    pub seed_tail: Vec<Vec<f64>>,
    /// Largest decay weight on the tail frequencies.
    pub multiplier_sup: Vec<Vec<f64>>,
    pub included: Vec<Vec<bool>>,
    pub time_fits: Vec<TailFit>,
    /// Slope of `log tail` against `k^{2s}` at each time.
    pub k_slopes: Vec<Option<f64>>,
    /// Largest relative deviation of `slope_{k2}/slope_{k1}` from `(k2/k1)^{2s}`.
    pub slope_ratio_error: Option<f64>,
    /// `min -log(tail) / (t^m k^{2s})` over included points.
    pub c2_envelope: Option<f64>,
    pub checks: Vec<Check>,
    pub verdict: bool,
    pub notes: Vec<String>,
}

impl DissipationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "t", "tail", "seed_tail", "multiplier_sup", "included"])?;
        for (i, k) in self.ks.iter().enumerate() {
            for (j, t) in self.times.iter().enumerate() {
                out.write_record([
                    format!("{k:e}"),
                    format!("{t:e}"),
                    format!("{:e}", self.tail[i][j]),
                    format!("{:e}", self.seed_tail[i][j]),
                    format!("{:e}", self.multiplier_sup[i][j]),
                    self.included[i][j].to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// High-frequency tails of the normalized evolution.
///
/// The worst case over unit data is estimated by power iteration seeded with
/// `u0`; `m = 1 + 2rs`.
pub fn dissipation_scan(
    model: &Model,
    ks: &KalmanStructure,
    u0: &Field,
    k_values: &[f64],
    times: &[f64],
    dopts: &DissipationOptions,
    opts: &PlanOptions,
) -> Result<DissipationReport> {
    let r = ks.r.ok_or(RegError::NotKalman)?;
    let grid = u0.grid().clone();
    if times.iter().any(|&t| !(t >= 0.0)) || k_values.iter().any(|&k| !(k > 0.0)) {
        return Err(ControlError::Invalid("times must be >= 0 and k > 0".into()));
    }
    if let Some(k) = k_values.iter().find(|&&k| (0..grid.dim()).all(|a| k >= grid.nyquist(a))) {
        return Err(ControlError::Invalid(format!("k = {k} leaves no tail below the Nyquist frequency")));
    }
    let s = model.s;
    let m = 1.0 + 2.0 * r as f64 * s;
    let u_norm = l2_norm(u0);
    if u_norm == 0.0 {
        return Err(ControlError::Invalid("seed field is zero".into()));
    }
    let masks: Vec<Vec<bool>> = k_values.iter().map(|&k| band_mask(&grid, k)).collect();
    let nk = k_values.len();
    let mut tail = vec![vec![0.0; times.len()]; nk];
    let mut seed_tail = tail.clone();
    let mut sup = tail.clone();
    for (j, &t) in times.iter().enumerate() {
        let fwd = build_plan(model, t, &grid, Mode::Normalized, opts)?;
        let adj = build_plan(model, t, &grid, Mode::NormalizedAdjoint, opts)?;
        let evolved = fwd.propagate(u0)?;
        for (i, mask) in masks.iter().enumerate() {
            seed_tail[i][j] = l2_norm(&spectral_mask(&evolved, mask, false)) / u_norm;
            sup[i][j] = fwd.decay().iter().zip(mask).filter(|(_, m)| !**m).map(|(d, _)| *d).fold(0.0, f64::max);
            tail[i][j] = if t == 0.0 {
                1.0
            } else {
                power_amplification(
                    |u: &Field| -> RegResult<Field> { Ok(spectral_mask(&fwd.propagate(u)?, mask, false)) },
                    |u: &Field| -> RegResult<Field> { Ok(adj.propagate(&spectral_mask(u, mask, false))?) },
                    u0,
                    dopts.power_iters,
                )?
                .0
            };
        }
    }

    let mut notes = Vec::new();
    let included: Vec<Vec<bool>> = tail.iter().map(|row| row.iter().map(|&v| v >= dopts.floor).collect()).collect();
    let excluded: usize = included.iter().flatten().filter(|b| !**b).count();
    if excluded > 0 {
        notes.push(format!("{excluded} point(s) below the floor {:e} excluded", dopts.floor));
    }
    let tm: Vec<f64> = times.iter().map(|t| t.powf(m)).collect();
    let time_fits: Vec<TailFit> = (0..nk)
        .map(|i| {
            let (x, y): (Vec<f64>, Vec<f64>) =
                (0..times.len()).filter(|&j| included[i][j]).map(|j| (tm[j], tail[i][j].ln())).unzip();
            let fit = linear_fit(&x, &y);
            let range = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y.iter().cloned().fold(f64::INFINITY, f64::min);
            let relative_residual = match fit {
                Some(f) if range > 0.0 => {
                    x.iter().zip(&y).map(|(a, b)| (b - f.intercept - f.slope * a).abs()).fold(0.0, f64::max) / range
                }
                _ => f64::INFINITY,
            };
            TailFit { k: k_values[i], fit, relative_residual }
        })
        .collect();
    let k2s: Vec<f64> = k_values.iter().map(|k| k.powf(2.0 * s)).collect();
    let k_slopes: Vec<Option<f64>> = (0..times.len())
        .map(|j| {
            let (x, y): (Vec<f64>, Vec<f64>) =
                (0..nk).filter(|&i| included[i][j]).map(|i| (k2s[i], tail[i][j].ln())).unzip();
            linear_fit(&x, &y).map(|f| f.slope)
        })
        .collect();
    let slope_ratio_error = time_fits
        .windows(2)
        .filter_map(|w| match (w[0].fit, w[1].fit) {
            (Some(a), Some(b)) if a.slope != 0.0 => {
                let expected = (w[1].k / w[0].k).powf(2.0 * s);
                Some((b.slope / a.slope / expected - 1.0).abs())
            }
            _ => None,
        })
        .reduce(f64::max);
    let c2_envelope = (0..nk)
        .flat_map(|i| (0..times.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| included[i][j] && times[j] > 0.0)
        .map(|(i, j)| -tail[i][j].ln() / (tm[j] * k2s[i]))
        .reduce(f64::min);

    let mut checks = Vec::new();
    let worst_residual = time_fits.iter().map(|f| f.relative_residual).fold(0.0, f64::max);
    checks.push(Check::at_most("time_fit_residual", worst_residual, dopts.residual_limit));
    let slopes: Vec<f64> = times.iter().zip(&k_slopes).filter(|(t, _)| **t > 0.0).filter_map(|(_, s)| *s).collect();
    checks.push(Check::at_most("max_k_slope", slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0.0));
    let growth_violations = slopes.windows(2).filter(|w| w[1] > w[0]).count();
    checks.push(Check::at_most("k_slope_growth_violations", growth_violations as f64, 0.0));
    let verdict = checks.iter().all(|c| c.pass);
    Ok(DissipationReport {
        m,
        ks: k_values.to_vec(),
        times: times.to_vec(),
        tail,
        seed_tail,
        multiplier_sup: sup,
        included,
        time_fits,
        k_slopes,
        slope_ratio_error,
        c2_envelope,
        checks,
        verdict,
        notes,
    })
}

/// Trapezoid nodes `j T / nt` and weights on `[0, T]`.
pub fn trapezoid(horizon: f64, nt: usize) -> (Vec<f64>, Vec<f64>) {
    let h = horizon / nt as f64;
    let nodes = (0..=nt).map(|j| j as f64 * h).collect();
    let weights = (0..=nt).map(|j| if j == 0 || j == nt { 0.5 * h } else { h }).collect();
    (nodes, weights)
}

/// Normalized evolutions at the trapezoid nodes and the control Gramian
/// `Λ g = ∫_0^T e^{-τP_co} 1_ω e^{-τP_co*} g dτ`.
pub struct GramianOperator {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    forward: Vec<PropagatorPlan>,
    adjoint: Vec<PropagatorPlan>,
    indicator: Vec<bool>,
}

impl GramianOperator {
    pub fn new(model: &Model, horizon: f64, omega: &ThickSetSpec, nt: usize, opts: &PlanOptions) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ControlError::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if nt == 0 {
            return Err(ControlError::Invalid("nt must be positive".into()));
        }
        let (nodes, weights) = trapezoid(horizon, nt);
        let build = |mode: Mode| -> Result<Vec<PropagatorPlan>> {
            nodes.par_iter().map(|&t| Ok(build_plan(model, t, &omega.grid, mode, opts)?)).collect()
        };
        Ok(Self {
            forward: build(Mode::Normalized)?,
            adjoint: build(Mode::NormalizedAdjoint)?,
            nodes,
            weights,
            indicator: omega.indicator.clone(),
        })
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// `e^{-t_j P_co} u`.
    pub fn forward(&self, j: usize, u: &Field) -> Result<Field> {
        Ok(self.forward[j].propagate(u)?)
    }

    /// `e^{-t_j P_co*} u`.
    pub fn adjoint(&self, j: usize, u: &Field) -> Result<Field> {
        Ok(self.adjoint[j].propagate(u)?)
    }

    pub fn mask(&self, u: &Field) -> Result<Field> {
        Ok(u.masked(&self.indicator)?)
    }

    pub fn apply(&self, g: &Field) -> Result<Field> {
        let parts: Vec<Field> = (0..self.nodes.len())
            .into_par_iter()
            .map(|j| {
                let mut v = self.forward(j, &self.mask(&self.adjoint(j, g)?)?)?;
                v.scale(self.weights[j]);
                Ok(v)
            })
            .collect::<Result<_>>()?;
        let mut out = Field::zeros(g.grid());
        for p in &parts {
            out.axpy(1.0, p)?;
        }
        Ok(out)
    }

    /// `Σ_j w_j d_j(ξ)²` from the decay weights of the forward plans, in
    /// natural FFT order. This is `Λ` itself when `ω` is the whole box and
    /// `B = 0`.
    pub fn fourier_diagonal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.indicator.len()];
        for (p, w) in self.forward.iter().zip(&self.weights) {
            for (o, d) in out.iter_mut().zip(p.decay()) {
                *o += w * d * d;
            }
        }
        out
    }

    /// `∫_0^T ‖1_ω e^{-τP_co*} g‖² dτ` by the same rule.
    pub fn observed_energy(&self, g: &Field) -> Result<f64> {
        (0..self.nodes.len()).map(|j| Ok(self.weights[j] * l2_norm_on(&self.adjoint(j, g)?, &self.indicator)?.powi(2))).sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservabilityEstimate {
    pub horizon: f64,
    pub c_est: f64,
    pub best_probe: String,
    pub probe_ratios: Vec<(String, f64)>,
    /// Set for `s <= 1/2`, outside the range of the rate estimates.
    pub exploratory: bool,
}

/// Lower bound on the observability constant from probe data `g_0`:
/// `‖e^{-TP_co} g_0‖² / ∫_0^T ‖e^{-tP_co} g_0‖²_{L²(ω)} dt`.
pub fn observability_lower_bound(
    model: &Model,
    horizon: f64,
    omega: &ThickSetSpec,
    nt: usize,
    probe_count: usize,
    reseed_rounds: usize,
    seed: u64,
    opts: &PlanOptions,
) -> Result<ObservabilityEstimate> {
    if omega.count() == 0 {
        return Err(ControlError::EmptySet);
    }
    if !(horizon > 0.0) || nt == 0 {
        return Err(ControlError::Invalid("need T > 0 and nt >= 1".into()));
    }
    let grid = &omega.grid;
    let (nodes, weights) = trapezoid(horizon, nt);
    let plans: Vec<PropagatorPlan> =
        nodes.par_iter().map(|&t| build_plan(model, t, grid, Mode::Normalized, opts)).collect::<std::result::Result<_, _>>()?;
    let ratio = |g: &Field| -> Result<f64> {
        let mut energy = 0.0;
        let mut terminal = 0.0;
        for (j, p) in plans.iter().enumerate() {
            let v = p.propagate(g)?;
            energy += weights[j] * l2_norm_on(&v, &omega.indicator)?.powi(2);
            if j == nt {
                terminal = l2_norm(&v).powi(2);
            }
        }
        if energy == 0.0 {
            return Err(ControlError::EmptySet);
        }
        Ok(terminal / energy)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes: Vec<(String, Field)> = Vec::new();
    for i in 0..probe_count.max(1) {
        if i % 2 == 0 {
            probes.push((format!("white_noise_{i}"), white_noise(grid, rng.random())));
        } else {
            let center: Vec<f64> = grid.lengths().iter().map(|l| (rng.random::<f64>() - 0.5) * l).collect();
            let width = grid.lengths().iter().cloned().fold(f64::INFINITY, f64::min) * rng.random_range(0.01..0.1);
            let g = sample_field(grid, |x| {
                let d2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
                Complex64::new((-0.5 * d2 / (width * width)).exp(), 0.0)
            })?;
            probes.push((format!("gaussian_{i}"), g));
        }
    }
    let ratios: Vec<Result<f64>> = probes.par_iter().map(|(_, g)| ratio(g)).collect();
    let mut probe_ratios = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for (i, r) in ratios.into_iter().enumerate() {
        let r = match r {
            Ok(v) => v,
            Err(ControlError::EmptySet) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        probe_ratios.push((probes[i].0.clone(), r));
        if best.is_none_or(|(b, _)| r > b) {
            best = Some((r, i));
        }
    }
    let (mut c_est, bi) = best.unwrap();
    let mut best_probe = probes[bi].0.clone();
    let mut current = probes[bi].1.clone();
    let outside: Vec<bool> = omega.indicator.iter().map(|b| !b).collect();
    for round in 0..reseed_rounds {
        // Move the argmax probe off the observation set and smooth it once.
        let moved = plans[1].propagate(&current.masked(&outside)?)?.masked(&outside)?;
        if l2_norm(&moved) == 0.0 {
            break;
        }
        let r = ratio(&moved)?;
        let name = format!("reseed_{round}");
        probe_ratios.push((name.clone(), r));
        if r > c_est {
            c_est = r;
            best_probe = name;
            current = moved;
        } else {
            break;
        }
    }
    Ok(ObservabilityEstimate { horizon, c_est, best_probe, probe_ratios, exploratory: model.s <= 0.5 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgOptions {
    pub max_iter: usize,
    /// Residual tolerance relative to the right-hand side.
    pub tol: f64,
    /// Iterations without energy decrease that count as stagnation.
    pub plateau: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-6, plateau: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct HumProblem {
    pub model: Model,
    pub horizon: f64,
    pub omega: ThickSetSpec,
    pub f0: Field,
    pub epsilon: f64,
    pub nt: usize,
    pub cg: CgOptions,
    pub plan: PlanOptions,
}

#[derive(Debug, Clone)]
pub struct HumSolution {
    pub times: Vec<f64>,
    /// `1_ω g(t_i)` at the trapezoid nodes.
    pub control: Vec<Field>,
    pub terminal: Field,
    pub g_terminal: Field,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub stagnated: bool,
    pub objective: f64,
    /// `|‖f(T)‖ - ε‖g_T‖| / max(‖f(T)‖, ε‖g_T‖)`.
    pub identity_residual: f64,
    pub f0_norm: f64,
    pub terminal_norm: f64,
    pub exploratory: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HumSummary {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub stagnated: bool,
    pub objective: f64,
    pub identity_residual: f64,
    pub f0_norm: f64,
    pub terminal_norm: f64,
    pub g_terminal_norm: f64,
    pub terminal_ratio: f64,
    pub exploratory: bool,
}

impl HumSolution {
    pub fn summary(&self) -> HumSummary {
        HumSummary {
            iterations: self.iterations,
            residual: self.residual,
            converged: self.converged,
            stagnated: self.stagnated,
            objective: self.objective,
            identity_residual: self.identity_residual,
            f0_norm: self.f0_norm,
            terminal_norm: self.terminal_norm,
            g_terminal_norm: l2_norm(&self.g_terminal),
            terminal_ratio: if self.f0_norm > 0.0 { self.terminal_norm / self.f0_norm } else { 0.0 },
            exploratory: self.exploratory,
        }
    }
}

struct CgOutcome {
    x: Field,
    iterations: usize,
    residual: f64,
    converged: bool,
    stagnated: bool,
}

/// Preconditioned conjugate gradients for a Hermitian positive definite
/// operator. The residual tested against `opts.tol` is the unpreconditioned
/// one, relative to `‖b‖`.
fn conjugate_gradient<A, M>(apply: A, precondition: M, b: &Field, opts: &CgOptions) -> Result<CgOutcome>
where
    A: Fn(&Field) -> Result<Field>,
    M: Fn(&Field) -> Result<Field>,
{
    let b_norm = l2_norm(b);
    let mut x = Field::zeros(b.grid());
    if b_norm == 0.0 {
        return Ok(CgOutcome { x, iterations: 0, residual: 0.0, converged: true, stagnated: false });
    }
    let mut r = b.clone();
    let mut z = precondition(&r)?;
    let mut p = z.clone();
    let mut rz = l2_inner(&r, &z)?.re;
    let mut rel = 1.0;
    // Energy `½<Ax, x> - Re<b, x>` relative to its start; CG lowers it
    // every step, unlike the residual norm.
    let mut energy = 0.0;
    let mut history: VecDeque<f64> = VecDeque::new();
    for it in 1..=opts.max_iter {
        let ap = apply(&p)?;
        let pap = l2_inner(&p, &ap)?.re;
        if !(pap > 0.0) || !(rz > 0.0) {
            return Ok(CgOutcome { x, iterations: it - 1, residual: rel, converged: false, stagnated: true });
        }
        let alpha = rz / pap;
        energy -= 0.5 * rz * alpha;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        rel = l2_norm(&r) / b_norm;
        if rel <= opts.tol {
            return Ok(CgOutcome { x, iterations: it, residual: rel, converged: true, stagnated: false });
        }
        history.push_back(energy);
        if history.len() > opts.plateau {
            let earlier = history.pop_front().unwrap();
            if earlier - energy <= 1e-13 * energy.abs() {
                return Ok(CgOutcome { x, iterations: it, residual: rel, converged: false, stagnated: true });
            }
        }
        z = precondition(&r)?;
        let rz_new = l2_inner(&r, &z)?.re;
        let beta = rz_new / rz;
        let mut next = z.clone();
        next.axpy(beta, &p)?;
        p = next;
        rz = rz_new;
    }
    Ok(CgOutcome { x, iterations: opts.max_iter, residual: rel, converged: false, stagnated: false })
}

/// Penalized HUM: solves `(Λ + εI) g_T = -e^{-TP_co} f_0` and rebuilds the
/// controlled terminal state by Duhamel's formula on the same time grid.
pub fn hum_solve(problem: &HumProblem) -> Result<HumSolution> {
    let HumProblem { model, horizon, omega, f0, epsilon, nt, cg, plan } = problem;
    if !(*epsilon > 0.0) || !epsilon.is_finite() {
        return Err(ControlError::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if *nt < 32 {
        return Err(ControlError::Invalid(format!("nt must be at least 32, got {nt}")));
    }
    if f0.grid() != &omega.grid {
        return Err(FieldError::GridMismatch.into());
    }
    let gram = GramianOperator::new(model, *horizon, omega, *nt, plan)?;
    let nt = *nt;
    let free = gram.forward(nt, f0)?;
    let rhs = free.scaled(-1.0);
    let theta = std::env::var("THETA").ok().and_then(|v| v.parse().ok()).unwrap_or(omega.count() as f64 / omega.grid.len() as f64);
    let diag: Vec<f64> = gram.fourier_diagonal().iter().map(|d| 1.0 / (theta * d + epsilon)).collect();
    let out = conjugate_gradient(
        |g| {
            let mut v = gram.apply(g)?;
            v.axpy(*epsilon, g)?;
            Ok(v)
        },
        |r| {
            let mut spec = dft(r);
            spec.values_mut().iter_mut().zip(&diag).for_each(|(v, d)| *v *= d);
            Ok(idft(&spec))
        },
        &rhs,
        cg,
    )?;
    let g_t = out.x;

    // g(t_i) = e^{-(T - t_i)P_co*} g_T and T - t_i is node nt - i.
    let control: Vec<Field> =
        (0..=nt).into_par_iter().map(|i| gram.mask(&gram.adjoint(nt - i, &g_t)?)).collect::<Result<_>>()?;
    let mut terminal = free;
    let pieces: Vec<Field> = (0..=nt)
        .into_par_iter()
        .map(|i| Ok(gram.forward(nt - i, &control[i])?.scaled(gram.weights[i])))
        .collect::<Result<_>>()?;
    for p in &pieces {
        terminal.axpy(1.0, p)?;
    }
    let g0 = gram.adjoint(nt, &g_t)?;
    let control_energy: f64 = control.iter().zip(&gram.weights).map(|(u, w)| w * l2_norm(u).powi(2)).sum();
    let objective = 0.5 * control_energy + 0.5 * epsilon * l2_norm(&g_t).powi(2) + l2_inner(f0, &g0)?.re;
    let terminal_norm = l2_norm(&terminal);
    let penalty_norm = epsilon * l2_norm(&g_t);
    let scale = terminal_norm.max(penalty_norm);
    let identity_residual = if scale == 0.0 { 0.0 } else { (terminal_norm - penalty_norm).abs() / scale };
    if out.converged && identity_residual > IDENTITY_TOL {
        return Err(ControlError::Identity(identity_residual));
    }
    Ok(HumSolution {
        times: gram.nodes.clone(),
        control,
        terminal,
        g_terminal: g_t,
        iterations: out.iterations,
        residual: out.residual,
        converged: out.converged,
        stagnated: out.stagnated,
        objective,
        identity_residual,
        f0_norm: l2_norm(f0),
        terminal_norm,
        exploratory: model.s <= 0.5,
    })
}

/// Chebyshev distance in cells from each point to `indicator`, with
/// periodic wrap. Points of the set have distance 0.
fn distance_to_set(grid: &Grid, indicator: &[bool]) -> Vec<usize> {
    let n = grid.dim();
    let counts = grid.counts();
    let mut dist = vec![usize::MAX; grid.len()];
    let mut queue = VecDeque::new();
    for (i, &b) in indicator.iter().enumerate() {
        if b {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    let offsets: Vec<[i64; MAX_DIM]> = (0..3usize.pow(n as u32))
        .map(|mut c| {
            let mut o = [0i64; MAX_DIM];
            for slot in o.iter_mut().take(n) {
                *slot = (c % 3) as i64 - 1;
                c /= 3;
            }
            o
        })
        .filter(|o| o.iter().any(|&v| v != 0))
        .collect();
    let mut m = [0usize; MAX_DIM];
    let mut nb = [0usize; MAX_DIM];
    while let Some(i) = queue.pop_front() {
        grid.unravel(i, &mut m[..n]);
        for o in &offsets {
            for a in 0..n {
                nb[a] = ((m[a] as i64 + o[a]).rem_euclid(counts[a] as i64)) as usize;
            }
            let j = grid.ravel(&nb[..n]);
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// Centers of the connected components of the complement of `ω`, ordered
/// by inscribed-cube size (smallest first).
pub fn detect_gaps(omega: &ThickSetSpec) -> Result<Vec<Vec<f64>>> {
    let grid = &omega.grid;
    if omega.count() == 0 {
        return Err(ControlError::EmptySet);
    }
    let n = grid.dim();
    let counts = grid.counts();
    let dist = distance_to_set(grid, &omega.indicator);
    let mut label = vec![usize::MAX; grid.len()];
    let mut gaps: Vec<(usize, usize)> = Vec::new();
    let mut m = [0usize; MAX_DIM];
    let mut nb = [0usize; MAX_DIM];
    for start in 0..grid.len() {
        if omega.indicator[start] || label[start] != usize::MAX {
            continue;
        }
        let id = gaps.len();
        let mut deepest = (dist[start], start);
        label[start] = id;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            if dist[i] > deepest.0 {
                deepest = (dist[i], i);
            }
            grid.unravel(i, &mut m[..n]);
            for a in 0..n {
                for step in [1, counts[a] - 1] {
                    nb[..n].copy_from_slice(&m[..n]);
                    nb[a] = (m[a] + step) % counts[a];
                    let j = grid.ravel(&nb[..n]);
                    if !omega.indicator[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        gaps.push(deepest);
    }
    if gaps.is_empty() {
        return Err(ControlError::NoGaps);
    }
    gaps.sort();
    Ok(gaps.iter().map(|&(_, i)| grid.point(i)).collect())
}

/// Observability ratios of translated heat profiles
/// `ĝ_k(t, ξ) = e^{-i<x_k, ξ>} e^{-(1+t)|ξ|^{2s}}` moving into the gaps of `ω`.
///
/// `centers[i]` is used for `k_values[i]`; without centers the gaps of `ω`
/// are detected and the `k`-th smallest is used for `k = 1, 2, ...`.
pub fn nonthick_counterexample(
    s: f64,
    omega: &ThickSetSpec,
    horizon: f64,
    k_values: &[usize],
    centers: Option<&[Vec<f64>]>,
    nt: usize,
    min_drop: f64,
) -> Result<ScanReport> {
    if !(s > 0.0) || !(horizon > 0.0) || nt == 0 || k_values.is_empty() {
        return Err(ControlError::Invalid("need s > 0, T > 0, nt >= 1 and at least one k".into()));
    }
    let grid = &omega.grid;
    let n = grid.dim();
    let chosen: Vec<Vec<f64>> = match centers {
        Some(c) => {
            if c.len() != k_values.len() || c.iter().any(|x| x.len() != n) {
                return Err(ControlError::Invalid("need one center of full dimension per k".into()));
            }
            c.to_vec()
        }
        None => {
            let gaps = detect_gaps(omega)?;
            k_values
                .iter()
                .map(|&k| {
                    gaps.get(k.wrapping_sub(1)).cloned().ok_or_else(|| {
                        ControlError::Invalid(format!("only {} gap(s) detected, k = {k} requested", gaps.len()))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let (nodes, weights) = trapezoid(horizon, nt);
    let freqs = grid.all_frequencies();
    let profile = |center: &[f64], t: f64| -> Field {
        let values = (0..grid.len())
            .map(|i| {
                let xi = &freqs[i * n..(i + 1) * n];
                let phase: f64 = xi.iter().zip(center).map(|(a, b)| a * b).sum();
                let amp = (-(1.0 + t) * xi.iter().map(|x| x * x).sum::<f64>().powf(s)).exp();
                Complex64::from_polar(amp, -phase)
            })
            .collect();
        idft(&Spectrum::from_values(grid.clone(), values).expect("sized to grid"))
    };
    let rows: Vec<(f64, f64)> = chosen
        .par_iter()
        .map(|c| -> Result<(f64, f64)> {
            let mut energy = 0.0;
            for (t, w) in nodes.iter().zip(&weights) {
                energy += w * l2_norm_on(&profile(c, *t), &omega.indicator)?.powi(2);
            }
            let terminal = l2_norm(&profile(c, horizon)).powi(2);
            Ok((energy / terminal, terminal.sqrt()))
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let terminal: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ks: Vec<f64> = k_values.iter().map(|&k| k as f64).collect();
    let mut rep = ScanReport::new("counterexample", "k", ks, ratios.clone());
    let increases = ratios.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
    rep.checks.push(Check::at_most("monotone_violations", increases as f64, 0.0));
    let drop = ratios[0] / ratios[ratios.len() - 1];
    rep.checks.push(Check::at_least("total_drop", drop, min_drop));
    let tmax = terminal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tmin = terminal.iter().cloned().fold(f64::INFINITY, f64::min);
    rep.checks.push(Check::at_most("terminal_norm_spread", (tmax - tmin) / tmax, 1e-10));
    if s <= 0.5 {
        rep.notes.push("s <= 1/2: exploratory".into());
    }
    rep.columns.insert("terminal_norm".into(), terminal);
    for a in 0..n {
        rep.columns.insert(format!("center_{a}"), chosen.iter().map(|c| c[a]).collect());
    }
    rep.finalize();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stripes_grid() -> Grid {
        Grid::new(vec![40.0], vec![512]).unwrap()
    }

    fn stripes(gamma: f64) -> ThickSetSpec {
        let grid = stripes_grid();
        let shape = OmegaShape::Stripes { axis: 0, period: 2.5, width: 0.78125, offset: 0.0 };
        OmegaSpec { shape, gamma, a: vec![2.5] }.build(&grid, Path::new(".")).unwrap()
    }

    #[test]
    fn stripe_rasterization_counts_cells() {
        let om = stripes(0.3);
        assert_eq!(om.count(), 16 * 10);
        let rep = thickness_check(&om);
        assert_eq!(rep.window_cells, vec![32]);
        assert_eq!(rep.min_fraction, 10.0 / 32.0);
        assert!(rep.thick);
        assert!(!thickness_check(&stripes(0.32)).thick);
    }

    #[test]
    fn full_set_is_thick_for_every_window() {
        let grid = Grid::new(vec![8.0, 4.0], vec![32, 16]).unwrap();
        for a in [vec![0.25, 0.25], vec![3.0, 1.0], vec![8.0, 4.0]] {
            let rep = thickness_check(&ThickSetSpec::full(&grid, 1.0, a).unwrap());
            assert_eq!(rep.min_fraction, 1.0);
            assert!(rep.thick);
        }
    }

    #[test]
    fn small_blob_is_not_thick() {
        let grid = Grid::new(vec![32.0, 32.0], vec![64, 64]).unwrap();
        let spec = OmegaSpec { shape: OmegaShape::Blob { center: vec![0.0, 0.0], radius: 2.0 }, gamma: 1e-6, a: vec![4.0, 4.0] };
        let rep = thickness_check(&spec.build(&grid, Path::new(".")).unwrap());
        assert_eq!(rep.min_fraction, 0.0);
        assert!(!rep.thick);
    }

    #[test]
    fn window_sums_match_brute_force() {
        let grid = Grid::new(vec![1.0, 1.0], vec![8, 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<u32> = (0..grid.len()).map(|_| rng.random_range(0..2)).collect();
        let w = [3usize, 5];
        let sums = window_sums(&grid, &vals, &w);
        for i in 0..8 {
            for j in 0..16 {
                let mut s = 0;
                for a in 0..w[0] {
                    for b in 0..w[1] {
                        s += vals[((i + a) % 8) * 16 + (j + b) % 16];
                    }
                }
                assert_eq!(sums[i * 16 + j], s);
            }
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let grid = stripes_grid();
        let err = ThickSetSpec::full(&grid, 0.5, vec![41.0]).unwrap_err();
        assert!(matches!(err, ControlError::WindowTooLarge { .. }));
    }

    #[test]
    fn kovrijkine_constant() {
        let e = std::f64::consts::E;
        assert_relative_eq!(kovrijkine_c1(1.0, &[1.0], e).unwrap(), 3.0 * e + 1.0, epsilon = 1e-14);
        // Direct evaluation of the printed powers, in floating point.
        let (gamma, a) = (0.3, 5.0);
        let base: f64 = e / gamma;
        let direct = base.powf(e).ln().max(0.0) + base.powf(2.0 * e * a).ln().max(0.0) + 1.0;
        assert_relative_eq!(kovrijkine_c1(gamma, &[a], e).unwrap(), direct, max_relative = 1e-13);
        let mut prev = 0.0;
        for g in [1.0, 0.5, 0.1, 1e-3, 1e-9] {
            let c = kovrijkine_c1(g, &[a], e).unwrap();
            assert!(c > prev);
            prev = c;
        }
        assert!(matches!(kovrijkine_c1(0.5, &[1.0], 2.0), Err(ControlError::SmallK(_))));
    }

    #[test]
    fn projections_form_a_monotone_family() {
        let grid = Grid::new(vec![10.0, 6.0], vec![32, 16]).unwrap();
        let u = white_noise(&grid, 1);
        let v = white_noise(&grid, 2);
        let p = band_project(&u, 3.0);
        let pp = band_project(&p, 3.0);
        let mut d = pp.clone();
        d.axpy(-1.0, &p).unwrap();
        assert!(l2_norm(&d) < 1e-12 * l2_norm(&p));
        let lhs = l2_inner(&band_project(&u, 3.0), &v).unwrap();
        let rhs = l2_inner(&u, &band_project(&v, 3.0)).unwrap();
        assert!((lhs - rhs).norm() < 1e-12 * l2_norm(&u) * l2_norm(&v));
        let mut nested = band_project(&band_project(&u, 5.0), 2.0);
        nested.axpy(-1.0, &band_project(&u, 2.0)).unwrap();
        assert!(l2_norm(&nested) < 1e-12 * l2_norm(&u));
        let mut split = band_project(&u, 2.0);
        split.axpy(1.0, &tail_project(&u, 2.0)).unwrap();
        split.axpy(-1.0, &u).unwrap();
        assert!(l2_norm(&split) < 1e-12 * l2_norm(&u));
    }

    #[test]
    fn full_box_spectral_ratio_is_one() {
        let grid = stripes_grid();
        let om = ThickSetSpec::full(&grid, 1.0, vec![2.5]).unwrap();
        let rep = spectral_ratio_scan(&om, &[1.0, 4.0, 8.0], 10, std::f64::consts::E, 0).unwrap();
        for v in &rep.values {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_ratio_closed_form() {
        let om = stripes(0.3);
        let u = Field::from_real(om.grid.clone(), &vec![1.7; om.grid.len()]).unwrap();
        let expected = (om.grid.volume() / om.measure()).sqrt();
        assert_relative_eq!(restriction_ratio(&u, &om).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn dissipation_at_time_zero_is_the_seed_tail() {
        let model = Model::heat(1, 0.75).unwrap();
        let ks = crate::kalman::analyze_structure(&model.b, &model.q, None).unwrap();
        let grid = stripes_grid();
        let u = white_noise(&grid, 4);
        let rep = dissipation_scan(&model, &ks, &u, &[2.0, 5.0], &[0.0, 0.1], &DissipationOptions::default(), &PlanOptions::default()).unwrap();
        for (i, k) in [2.0, 5.0].iter().enumerate() {
            let direct = l2_norm(&tail_project(&u, *k)) / l2_norm(&u);
            assert_relative_eq!(rep.seed_tail[i][0], direct, max_relative = 1e-12);
            assert!(rep.tail[i][1] <= rep.multiplier_sup[i][1] * (1.0 + 1e-8));
        }
    }

    #[test]
    fn gramian_is_hermitian_and_nonnegative() {
        let model = Model::heat(1, 0.75).unwrap();
        let om = stripes(0.3);
        let gram = GramianOperator::new(&model, 1.0, &om, 32, &PlanOptions::default()).unwrap();
        for seed in 0..3 {
            let g = white_noise(&om.grid, 10 + seed);
            let h = white_noise(&om.grid, 20 + seed);
            let lg = gram.apply(&g).unwrap();
            let lh = gram.apply(&h).unwrap();
            let a = l2_inner(&lg, &h).unwrap();
            let b = l2_inner(&g, &lh).unwrap();
            assert!((a - b).norm() <= 1e-8 * a.norm().max(1e-300));
            let q = l2_inner(&lg, &g).unwrap();
            assert!(q.re >= 0.0 && q.im.abs() <= 1e-10 * q.re);
            assert_relative_eq!(q.re, gram.observed_energy(&g).unwrap(), max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_initial_state_needs_no_control() {
        let model = Model::heat(1, 0.75).unwrap();
        let om = stripes(0.3);
        let problem = HumProblem {
            model,
            horizon: 1.0,
            f0: Field::zeros(&om.grid),
            omega: om,
            epsilon: 1e-6,
            nt: 32,
            cg: CgOptions::default(),
            plan: PlanOptions::default(),
        };
        let sol = hum_solve(&problem).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.terminal_norm, 0.0);
        assert!(sol.control.iter().all(|u| u.max_abs() == 0.0));
    }

    #[test]
    fn full_box_observability_is_at_most_inverse_horizon() {
        let model = Model::heat(1, 0.75).unwrap();
        let grid = stripes_grid();
        let om = ThickSetSpec::full(&grid, 1.0, vec![2.5]).unwrap();
        for t in [0.5, 1.0] {
            let est = observability_lower_bound(&model, t, &om, 32, 4, 2, 9, &PlanOptions::default()).unwrap();
            assert!(est.c_est <= (1.0 / t) * (1.0 + 1e-12), "{}", est.c_est);
        }
    }

    #[test]
    fn observability_cost_decreases_with_horizon() {
        let model = Model::heat(1, 0.75).unwrap();
        let om = stripes(0.3);
        let short = observability_lower_bound(&model, 0.5, &om, 64, 6, 3, 5, &PlanOptions::default()).unwrap();
        let long = observability_lower_bound(&model, 1.0, &om, 64, 6, 3, 5, &PlanOptions::default()).unwrap();
        assert!(short.c_est > long.c_est, "{} vs {}", short.c_est, long.c_est);
    }

    #[test]
    fn gaps_are_found_in_size_order() {
        let grid = Grid::new(vec![64.0], vec![256]).unwrap();
        let spec = OmegaSpec {
            shape: OmegaShape::Gaps { centers: vec![vec![10.0], vec![-20.0], vec![0.0]], widths: vec![8.0, 2.0, 4.0] },
            gamma: 0.1,
            a: vec![1.0],
        };
        let om = spec.build(&grid, Path::new(".")).unwrap();
        let gaps = detect_gaps(&om).unwrap();
        assert_eq!(gaps.len(), 3);
        assert!((gaps[0][0] + 20.0).abs() <= 1.0);
        assert!(gaps[1][0].abs() <= 1.0);
        assert!((gaps[2][0] - 10.0).abs() <= 1.0);
        let full = ThickSetSpec::full(&grid, 1.0, vec![1.0]).unwrap();
        assert!(matches!(detect_gaps(&full), Err(ControlError::NoGaps)));
    }

    #[test]
    fn full_box_counterexample_ratio_is_constant() {
        let grid = Grid::new(vec![64.0], vec![1024]).unwrap();
        let om = ThickSetSpec::full(&grid, 1.0, vec![1.0]).unwrap();
        let centers: Vec<Vec<f64>> = (0..4).map(|i| vec![4.0 * i as f64]).collect();
        let rep = nonthick_counterexample(0.75, &om, 1.0, &[1, 2, 3, 4], Some(&centers), 32, 10.0).unwrap();
        for v in &rep.values {
            assert_relative_eq!(*v, rep.values[0], max_relative = 1e-10);
        }
    }
}
