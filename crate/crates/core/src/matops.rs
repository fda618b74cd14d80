//! Dense linear-algebra kernels shared by every other module.
//!
//! Matrices here are small (n <= 64) and dense. The matrix exponential uses
//! scaling and squaring with diagonal Padé approximants, the PSD square root
//! goes through a symmetric eigendecomposition, and Gramians are integrated
//! with Gauss-Legendre rules refined by node doubling.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix dimension must be at least 1")]
    Empty,
    #[error("row {row} has {got} entries, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:e} < -{tolerance:e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },
    #[error("matrix exponential overflows double range (norm {norm:e})")]
    Overflow { norm: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("argument must be finite and positive, got {0}")]
    NonPositive(f64),
    #[error("non-finite scalar argument {0}")]
    NonFiniteScalar(f64),
    #[error(
        "gramian quadrature not converged after {doublings} doublings \
         ({nodes} nodes, relative change {change:e})"
    )]
    GramianNotConverged { doublings: usize, nodes: usize, change: f64 },
    #[error("matrix is singular")]
    Singular,
}

pub type Result<T> = std::result::Result<T, MatError>;

/// Real n x n matrix with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SquareMatrix(DMatrix<f64>);

impl SquareMatrix {
    pub fn from_dmatrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 {
            return Err(MatError::Empty);
        }
        if m.nrows() != m.ncols() {
            return Err(MatError::DimensionMismatch(m.nrows(), m.ncols()));
        }
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if !m[(i, j)].is_finite() {
                    return Err(MatError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self(m))
    }

    /// Builds a matrix from row-major entries.
    pub fn from_row_major(n: usize, entries: &[f64]) -> Result<Self> {
        if n == 0 {
            return Err(MatError::Empty);
        }
        if entries.len() != n * n {
            return Err(MatError::Ragged { row: 0, got: entries.len(), expected: n * n });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(MatError::Empty);
        }
        let mut flat = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MatError::Ragged { row: i, got: row.len(), expected: n });
            }
            flat.extend_from_slice(row);
        }
        Self::from_row_major(n, &flat)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::from_dmatrix(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        norm1(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn is_identity(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| self.0[(i, j)] == if i == j { 1.0 } else { 0.0 }))
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        self.0.clone().try_inverse().map(Self).ok_or(MatError::Singular)
    }

    pub fn mul(&self, other: &SquareMatrix) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(MatError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(Self(&self.0 * &other.0))
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.0[(i, j)] * v[j]).sum()).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.0[(i, j)]).collect()).collect()
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.to_rows().into_iter().flatten().collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SquareMatrix {
    type Error = MatError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<SquareMatrix> for Vec<Vec<f64>> {
    fn from(m: SquareMatrix) -> Self {
        m.to_rows()
    }
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Symmetric positive semidefinite matrix together with its PSD square root.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsdMatrix {
    base: SquareMatrix,
    sqrt: SquareMatrix,
    eigenvalues: Vec<f64>,
    eig_tol: f64,
}

impl PsdMatrix {
    pub fn base(&self) -> &SquareMatrix {
        &self.base
    }

    pub fn sqrt(&self) -> &SquareMatrix {
        &self.sqrt
    }

    pub fn eig_tol(&self) -> f64 {
        self.eig_tol
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Clamped eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    /// Product of the clamped eigenvalues.
    pub fn determinant(&self) -> f64 {
        self.eigenvalues.iter().product()
    }

    /// Whether every clamped eigenvalue is strictly positive.
    pub fn is_nonsingular(&self) -> bool {
        self.min_eigenvalue() > 0.0
    }
}

impl<'de> Deserialize<'de> for PsdMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = SquareMatrix::deserialize(d)?;
        psd_sqrt(&m).map_err(serde::de::Error::custom)
    }
}

/// Relative asymmetry `|Q - Q^T|_F / |Q|_F` (zero for the zero matrix).
pub fn asymmetry(q: &SquareMatrix) -> f64 {
    let m = q.as_dmatrix();
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

pub const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric eigendecomposition based square root of a PSD matrix.
///
/// Eigenvalues below `n * eps * lambda_max` are clamped to zero; anything more
/// negative than that threshold is rejected.
pub fn psd_sqrt(q: &SquareMatrix) -> Result<PsdMatrix> {
    let asym = asymmetry(q);
    if asym > SYMMETRY_TOL {
        return Err(MatError::NotSymmetric { asymmetry: asym });
    }
    build_psd(q, false)
}

/// Same as [`psd_sqrt`] but symmetrizes first and tolerates negative
/// eigenvalues down to `-eig_tol`; used for quadrature outputs.
pub(crate) fn psd_from_numeric(q: &DMatrix<f64>) -> Result<PsdMatrix> {
    let sym = SquareMatrix::from_dmatrix((q + q.transpose()) * 0.5)?;
    build_psd(&sym, true)
}

fn build_psd(q: &SquareMatrix, rebuild_base: bool) -> Result<PsdMatrix> {
    let n = q.dim();
    let sym = (q.as_dmatrix() + q.as_dmatrix().transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let eig_tol = n as f64 * f64::EPSILON * lambda_max;
    let mut clamped: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut changed = false;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -eig_tol {
            return Err(MatError::NotPsd { eigenvalue: l, tolerance: eig_tol });
        }
        let c = if l < eig_tol { 0.0 } else { l };
        if c != l {
            changed = true;
        }
        clamped.push((c, i));
    }
    let v = &eig.eigenvectors;
    let mut root = DMatrix::zeros(n, n);
    let mut rebuilt = DMatrix::zeros(n, n);
    for &(l, i) in &clamped {
        if l == 0.0 {
            continue;
        }
        let col = v.column(i);
        let outer = &col * col.transpose();
        root += &outer * l.sqrt();
        if rebuild_base && changed {
            rebuilt += &outer * l;
        }
    }
    let root = (&root + root.transpose()) * 0.5;
    let base = if rebuild_base && changed { (&rebuilt + rebuilt.transpose()) * 0.5 } else { sym };
    let mut eigenvalues: Vec<f64> = clamped.iter().map(|&(l, _)| l).collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(PsdMatrix {
        base: SquareMatrix::from_dmatrix(base)?,
        sqrt: SquareMatrix::from_dmatrix(root)?,
        eigenvalues,
        eig_tol,
    })
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// 1-norm thresholds below which the [m/m] approximant is accurate to unit roundoff.
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;
const MAX_SQUARINGS: i32 = 1100;

/// `exp(t A)` by scaling and squaring.
pub fn mat_exp(a: &SquareMatrix, t: f64) -> Result<SquareMatrix> {
    if !t.is_finite() {
        return Err(MatError::NonFiniteScalar(t));
    }
    let n = a.dim();
    let ta = a.as_dmatrix() * t;
    let norm = norm1(&ta);
    if norm == 0.0 {
        return Ok(SquareMatrix::identity(n));
    }
    let id = DMatrix::<f64>::identity(n, n);

    for &(m, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match m {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let r = pade_low(&ta, coeffs, &id)?;
            return finish(r, norm);
        }
    }

    let squarings = (norm / THETA13).log2().ceil().max(0.0) as i32;
    if squarings > MAX_SQUARINGS {
        return Err(MatError::Overflow { norm });
    }
    let scaled = &ta * 2f64.powi(-squarings);
    let mut r = pade13(&scaled, &id)?;
    for _ in 0..squarings {
        r = &r * &r;
        if r.iter().any(|x| !x.is_finite()) {
            return Err(MatError::Overflow { norm });
        }
    }
    finish(r, norm)
}

fn finish(r: DMatrix<f64>, norm: f64) -> Result<SquareMatrix> {
    if r.iter().any(|x| !x.is_finite()) {
        return Err(MatError::Overflow { norm });
    }
    SquareMatrix::from_dmatrix(r)
}

fn pade_low(a: &DMatrix<f64>, b: &[f64], id: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a2 = a * a;
    let mut power = id.clone();
    let mut u_inner = DMatrix::zeros(a.nrows(), a.ncols());
    let mut v = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..b.len() / 2 {
        v += &power * b[2 * k];
        u_inner += &power * b[2 * k + 1];
        power = &power * &a2;
    }
    let u = a * u_inner;
    solve_pade(&u, &v)
}

fn pade13(a: &DMatrix<f64>, id: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + id * b[1]);
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + id * b[0];
    solve_pade(&u, &v)
}

fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p).ok_or(MatError::Singular)
}

/// Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    fn compute(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Nodes mapped to `[a, b]` with scaled weights.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(&x, &w)| (mid + half * x, w * half))
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

static GL_CACHE: LazyLock<Mutex<HashMap<usize, Arc<GaussLegendre>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Cached `n`-point Gauss-Legendre rule.
pub fn gauss_legendre(n: usize) -> Arc<GaussLegendre> {
    let n = n.max(1);
    let mut cache = GL_CACHE.lock().unwrap();
    cache.entry(n).or_insert_with(|| Arc::new(GaussLegendre::compute(n))).clone()
}

pub const GRAMIAN_NODES: usize = 32;
pub const GRAMIAN_TOL: f64 = 1e-10;
const GRAMIAN_DOUBLINGS: usize = 4;

/// Controllability Gramian `Q_t = int_0^t e^{-sB} Q e^{-sB^T} ds`.
pub fn gramian(b: &SquareMatrix, q: &PsdMatrix, t: f64, nodes: usize) -> Result<PsdMatrix> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(MatError::NonPositive(t));
    }
    if b.dim() != q.dim() {
        return Err(MatError::DimensionMismatch(b.dim(), q.dim()));
    }
    let minus_b = b.scaled(-1.0);
    let qm = q.base().as_dmatrix();
    let integrate = |m: usize| -> Result<DMatrix<f64>> {
        let rule = gauss_legendre(m);
        let mut acc = DMatrix::zeros(b.dim(), b.dim());
        for (s, w) in rule.mapped(0.0, t) {
            let e = mat_exp(&minus_b, s)?.into_dmatrix();
            acc += (&e * qm * e.transpose()) * w;
        }
        Ok(acc)
    };
    let mut m = nodes.max(2);
    let mut prev = integrate(m)?;
    let mut change = f64::INFINITY;
    for _ in 0..=GRAMIAN_DOUBLINGS {
        m *= 2;
        let next = integrate(m)?;
        let scale = next.norm();
        change = if scale == 0.0 { 0.0 } else { (&next - &prev).norm() / scale };
        if change <= GRAMIAN_TOL {
            return psd_from_numeric(&next);
        }
        prev = next;
    }
    Err(MatError::GramianNotConverged { doublings: GRAMIAN_DOUBLINGS, nodes: m, change })
}

/// Orthonormal basis (columns) for the column space of `m`, using singular
/// values above `tol`. Returns the basis and the singular values.
pub fn range_basis(m: &DMatrix<f64>, tol: f64) -> (Vec<DVector<f64>>, Vec<f64>) {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut basis = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            basis.push(u.column(i).into_owned());
        }
    }
    (basis, svd.singular_values.iter().cloned().collect())
}

/// Orthonormal basis of the kernel of `m` (an `r x n` matrix), using
/// singular values at or below `tol`.
pub fn kernel_basis(m: &DMatrix<f64>, tol: f64) -> Vec<DVector<f64>> {
    let n = m.ncols();
    // Pad to at least n rows so the SVD exposes a full set of right vectors.
    let padded = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut out = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol {
            out.push(vt.row(i).transpose().into_owned());
        }
    }
    out
}

/// Orthogonal projection `U U^T` onto the span of orthonormal `basis`.
pub fn projection(n: usize, basis: &[DVector<f64>]) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for v in basis {
        p += v * v.transpose();
    }
    (&p + p.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: &[&[f64]]) -> SquareMatrix {
        SquareMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let e = mat_exp(&SquareMatrix::zeros(2), 7.0).unwrap();
        assert!(e.is_identity());
    }

    #[test]
    fn exp_of_diagonal() {
        let e = mat_exp(&SquareMatrix::diagonal(&[1.0, -2.0]).unwrap(), 1.0).unwrap();
        assert_relative_eq!(e.get(0, 0), 1f64.exp(), max_relative = 1e-14);
        assert_relative_eq!(e.get(1, 1), (-2f64).exp(), max_relative = 1e-14);
        assert_eq!(e.get(0, 1), 0.0);
    }

    #[test]
    fn exp_of_kolmogorov_transpose_is_polynomial() {
        let bt = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        for tau in [0.1, 1.0, 3.7, -2.0] {
            let e = mat_exp(&bt, tau).unwrap();
            assert_relative_eq!(e.get(0, 0), 1.0, epsilon = 1e-14);
            assert_relative_eq!(e.get(1, 0), tau, max_relative = 1e-13);
            assert_relative_eq!(e.get(1, 1), 1.0, epsilon = 1e-14);
            assert!(e.get(0, 1).abs() < 1e-15);
        }
    }

    #[test]
    fn exp_of_rotation_generator() {
        let j = m(&[&[0.0, -1.0], &[1.0, 0.0]]);
        for t in [0.3, 2.0, 25.0, 49.0] {
            let e = mat_exp(&j, t).unwrap();
            assert_relative_eq!(e.get(0, 0), t.cos(), epsilon = 1e-12);
            assert_relative_eq!(e.get(1, 0), t.sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn exp_matches_symmetric_eigen_route() {
        let a = m(&[&[1.0, 0.5, -0.3], &[0.5, -2.0, 0.7], &[-0.3, 0.7, 0.4]]);
        for t in [0.01, 1.0, 5.0, 12.0] {
            let e = mat_exp(&a, t).unwrap();
            let eig = SymmetricEigen::new(a.as_dmatrix().clone());
            let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (l * t).exp()));
            let oracle = &eig.eigenvectors * d * eig.eigenvectors.transpose();
            let err = (e.as_dmatrix() - &oracle).norm() / oracle.norm();
            assert!(err < 1e-12, "t={t} err={err}");
        }
    }

    #[test]
    fn exp_overflow_is_reported() {
        let a = SquareMatrix::diagonal(&[1.0, 1.0]).unwrap();
        assert!(matches!(mat_exp(&a, 1e5), Err(MatError::Overflow { .. })));
        assert!(mat_exp(&a, f64::NAN).is_err());
    }

    #[test]
    fn sqrt_of_scalar_matrix() {
        let q = SquareMatrix::diagonal(&[4.0, 4.0]).unwrap();
        let p = psd_sqrt(&q).unwrap();
        assert_relative_eq!(p.sqrt().get(0, 0), 2.0, max_relative = 1e-15);
        assert_relative_eq!(p.sqrt().get(1, 1), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn sqrt_of_kolmogorov_diffusion() {
        let s: f64 = 1.0;
        let c = 2f64.powf(1.0 / s);
        let p = psd_sqrt(&SquareMatrix::diagonal(&[0.0, c]).unwrap()).unwrap();
        assert_eq!(p.sqrt().get(0, 0), 0.0);
        assert_relative_eq!(p.sqrt().get(1, 1), 2f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn sqrt_squares_back() {
        let q = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let p = psd_sqrt(&q).unwrap();
        let sq = p.sqrt().mul(p.sqrt()).unwrap();
        assert!((sq.as_dmatrix() - q.as_dmatrix()).norm() < 1e-12);
        // eigen oracle: eigenvalues 1 and 3 with vectors (1,-1)/sqrt2, (1,1)/sqrt2
        let a = (1.0 + 3f64.sqrt()) / 2.0;
        let b = (3f64.sqrt() - 1.0) / 2.0;
        assert_relative_eq!(p.sqrt().get(0, 0), a, max_relative = 1e-14);
        assert_relative_eq!(p.sqrt().get(0, 1), b, max_relative = 1e-13);
    }

    #[test]
    fn sqrt_rejects_bad_inputs() {
        let asym = m(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(psd_sqrt(&asym), Err(MatError::NotSymmetric { .. })));
        let neg = SquareMatrix::diagonal(&[1.0, -0.5]).unwrap();
        assert!(matches!(psd_sqrt(&neg), Err(MatError::NotPsd { .. })));
    }

    #[test]
    fn gramian_with_zero_drift_is_linear_in_time() {
        let q = psd_sqrt(&m(&[&[2.0, 0.5], &[0.5, 1.0]])).unwrap();
        let g = gramian(&SquareMatrix::zeros(2), &q, 3.0, GRAMIAN_NODES).unwrap();
        let expected = q.base().as_dmatrix() * 3.0;
        assert!((g.base().as_dmatrix() - expected).norm() < 1e-13);
    }

    #[test]
    fn gramian_of_kolmogorov_model() {
        // e^{-sB} Q e^{-sB^T} with B = [[0,1],[0,0]], Q = 2 diag(0,1) is
        // 2 [[s^2, -s],[-s, 1]]; its antiderivative is the polynomial below.
        let b = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let q = psd_sqrt(&SquareMatrix::diagonal(&[0.0, 2.0]).unwrap()).unwrap();
        for t in [0.01, 0.5, 2.0] {
            let g = gramian(&b, &q, t, GRAMIAN_NODES).unwrap();
            let expected = [[2.0 * t * t * t / 3.0, -t * t], [-t * t, 2.0 * t]];
            for i in 0..2 {
                for j in 0..2 {
                    assert_relative_eq!(g.base().get(i, j), expected[i][j], max_relative = 1e-12);
                }
            }
            assert!(g.determinant() > 0.0);
        }
    }

    #[test]
    fn gramian_rejects_nonpositive_time() {
        let q = psd_sqrt(&SquareMatrix::identity(2)).unwrap();
        assert!(gramian(&SquareMatrix::zeros(2), &q, 0.0, 32).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(8);
        let v = rule.integrate(0.0, 2.0, |x| x.powi(15));
        assert_relative_eq!(v, 2f64.powi(16) / 16.0, max_relative = 1e-14);
        assert_relative_eq!(rule.weights.iter().sum::<f64>(), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn matrices_round_trip_through_json() {
        let a = m(&[&[1.0, 2.5], &[-3.0, 0.0]]);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[[1.0,2.5],[-3.0,0.0]]");
        let back: SquareMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<SquareMatrix>("[[1.0],[2.0,3.0]]").is_err());
    }
}
