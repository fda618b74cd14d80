//! Kalman rank structure of a drift/diffusion pair.
//!
//! For `(B, Q)` the nested spaces `V_k = Ran Q^{1/2} + ... + Ran B^k Q^{1/2}`
//! are computed from singular value decompositions, together with the
//! orthogonal projections onto them and their increments.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::matops::{kernel_basis, projection, range_basis, MatError, PsdMatrix, SquareMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KalmanError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("rank tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error(
        "range and kernel characterizations disagree at k = {k}: \
         range dimension {range_dim}, kernel dimension {kernel_dim}, mismatch {mismatch:e}"
    )]
    Inconsistent { k: usize, range_dim: usize, kernel_dim: usize, mismatch: f64 },
    #[error("projection invariant violated: {0}")]
    Invariant(String),
    #[error("Kalman rank condition does not hold")]
    NotKalman,
    #[error("s must be positive, got {0}")]
    BadExponent(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct KalmanStructure {
    pub n: usize,
    pub holds: bool,
    pub r: Option<usize>,
    pub rank_tol: f64,
    /// Dimension of `V_k` for each computed k.
    pub dims: Vec<usize>,
    /// Orthonormal basis vectors of `V_k`.
    pub bases: Vec<Vec<Vec<f64>>>,
    pub proj: Vec<SquareMatrix>,
    pub incr: Vec<SquareMatrix>,
}

const PROJ_TOL: f64 = 1e-12;
const SUBSPACE_TOL: f64 = 1e-8;

impl KalmanStructure {
    /// Number of flags stored (`r + 1` when the condition holds).
    pub fn levels(&self) -> usize {
        self.proj.len()
    }

    pub fn projection(&self, k: usize) -> &SquareMatrix {
        &self.proj[k]
    }

    pub fn increment(&self, k: usize) -> &SquareMatrix {
        &self.incr[k]
    }

    pub fn basis_matrix(&self, k: usize) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> =
            self.bases[k].iter().map(|v| DVector::from_column_slice(v)).collect();
        if cols.is_empty() {
            DMatrix::zeros(self.n, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    }

    /// Checks the projection algebra and returns the largest defect found.
    pub fn check_invariants(&self) -> Result<f64, KalmanError> {
        let n = self.n;
        let mut worst = 0.0_f64;
        let mut check = |what: &str, k: usize, m: DMatrix<f64>, tol: f64| -> Result<(), KalmanError> {
            let d = m.amax();
            worst = worst.max(d);
            if d > tol {
                return Err(KalmanError::Invariant(format!("{what} at k = {k}: defect {d:e}")));
            }
            Ok(())
        };
        let id = DMatrix::<f64>::identity(n, n);
        let mut sum = DMatrix::<f64>::zeros(n, n);
        for k in 0..self.levels() {
            let p = self.proj[k].as_dmatrix();
            check("asymmetric projection", k, p - p.transpose(), PROJ_TOL)?;
            check("non-idempotent projection", k, p * p - p, PROJ_TOL)?;
            if k + 1 < self.levels() {
                let next = self.proj[k + 1].as_dmatrix();
                check("flags not nested", k, p * next - p, PROJ_TOL)?;
            }
            for j in 0..k {
                let prod = self.incr[j].as_dmatrix() * self.incr[k].as_dmatrix();
                check("increments not orthogonal", k, prod, PROJ_TOL)?;
            }
            sum += self.incr[k].as_dmatrix();
        }
        if let Some(last) = self.proj.last() {
            check("increments do not sum to the last flag", self.levels() - 1, &sum - last.as_dmatrix(), PROJ_TOL)?;
            if self.holds {
                check("last flag is not the identity", self.levels() - 1, last.as_dmatrix() - &id, PROJ_TOL)?;
            }
        }
        Ok(worst)
    }
}

/// Builds the Kalman flag of `(B, Q)`.
///
/// `rank_tol = None` selects `n^2 * eps * sigma_max` of the full block matrix.
pub fn analyze_structure(
    b: &SquareMatrix,
    q: &PsdMatrix,
    rank_tol: Option<f64>,
) -> Result<KalmanStructure, KalmanError> {
    let n = b.dim();
    if q.dim() != n {
        return Err(MatError::DimensionMismatch(n, q.dim()).into());
    }
    let root = q.sqrt().as_dmatrix();
    let bm = b.as_dmatrix();

    let mut blocks: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut cur = root.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = bm * &cur;
    }
    let full = hstack(&blocks);
    let sigma_max = full.clone().singular_values().max();
    let tol = match rank_tol {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return Err(KalmanError::BadTolerance(t)),
        None => (n * n) as f64 * f64::EPSILON * sigma_max,
    };

    let mut dims = Vec::new();
    let mut bases: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut r = None;
    for k in 0..n {
        let truncated = hstack(&blocks[..=k]);
        let (direct, _) = range_basis(&truncated, tol);
        let dim = direct.len();

        // Extend V_{k-1} by the part of the new blocks orthogonal to it.
        let basis = match bases.last() {
            None => direct.clone(),
            Some(prev) => {
                let p = projection(n, prev);
                let resid = (DMatrix::identity(n, n) - &p) * &truncated;
                let (extra, _) = range_basis(&resid, tol);
                let want = dim.saturating_sub(prev.len());
                let mut out = prev.clone();
                for v in extra.into_iter().take(want) {
                    let mut w = v.clone();
                    for u in &out {
                        w -= u * u.dot(&w);
                    }
                    let norm = w.norm();
                    out.push(w / norm);
                }
                if out.len() != dim {
                    return Err(KalmanError::Inconsistent {
                        k,
                        range_dim: dim,
                        kernel_dim: n - out.len(),
                        mismatch: f64::NAN,
                    });
                }
                out
            }
        };

        cross_check(k, &truncated, &basis, tol)?;
        dims.push(dim);
        bases.push(basis);
        if dim == n {
            r = Some(k);
            break;
        }
    }

    let proj: Vec<DMatrix<f64>> = bases.iter().map(|bs| projection(n, bs)).collect();
    let mut incr = Vec::with_capacity(proj.len());
    for k in 0..proj.len() {
        incr.push(if k == 0 { proj[0].clone() } else { &proj[k] - &proj[k - 1] });
    }
    let holds = r.is_some();
    let to_sq = |m: DMatrix<f64>| SquareMatrix::from_dmatrix(m);
    let structure = KalmanStructure {
        n,
        holds,
        r,
        rank_tol: tol,
        dims,
        bases: bases
            .iter()
            .map(|bs| bs.iter().map(|v| v.iter().cloned().collect()).collect())
            .collect(),
        proj: proj.into_iter().map(to_sq).collect::<Result<_, _>>()?,
        incr: incr.into_iter().map(to_sq).collect::<Result<_, _>>()?,
    };
    structure.check_invariants()?;
    Ok(structure)
}

fn hstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let mut out = DMatrix::zeros(n, n * blocks.len());
    for (j, blk) in blocks.iter().enumerate() {
        out.view_mut((0, j * n), (n, blk.ncols())).copy_from(blk);
    }
    out
}

// The orthogonal complement of V_k must equal the intersection of the
// kernels of Q^{1/2}(B^T)^j, j <= k, computed from the stacked transposes.
fn cross_check(k: usize, truncated: &DMatrix<f64>, basis: &[DVector<f64>], tol: f64) -> Result<(), KalmanError> {
    let n = truncated.nrows();
    let stacked = truncated.transpose();
    let kernel = kernel_basis(&stacked, tol);
    let range_dim = basis.len();
    if range_dim + kernel.len() != n {
        return Err(KalmanError::Inconsistent { k, range_dim, kernel_dim: kernel.len(), mismatch: f64::NAN });
    }
    let mut mismatch = 0.0_f64;
    for v in &kernel {
        for u in basis {
            mismatch = mismatch.max(u.dot(v).abs());
        }
        mismatch = mismatch.max((&stacked * v).amax() - tol);
    }
    if mismatch > SUBSPACE_TOL {
        return Err(KalmanError::Inconsistent { k, range_dim, kernel_dim: kernel.len(), mismatch });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentTable {
    pub s: f64,
    pub r: usize,
    /// `1/(2s) + k`: the seminorm of order q blows up like `t^{-q(1/(2s)+k)}`.
    pub smoothing: Vec<f64>,
    /// `2s / (1 + 2ks)`.
    pub subelliptic_orders: Vec<f64>,
    pub gamma: f64,
    pub dissipation_m: f64,
    /// `(1+2rs)/(2s-1)`, absent when `s <= 1/2`.
    pub observability_cost: Option<f64>,
    pub subelliptic_loss: f64,
}

pub fn characteristic_exponents(ks: &KalmanStructure, s: f64) -> Result<ExponentTable, KalmanError> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(KalmanError::BadExponent(s));
    }
    let r = ks.r.ok_or(KalmanError::NotKalman)?;
    Ok(exponents_for(r, s))
}

pub fn exponents_for(r: usize, s: f64) -> ExponentTable {
    let rf = r as f64;
    let m = 1.0 + 2.0 * rf * s;
    ExponentTable {
        s,
        r,
        smoothing: (0..=r).map(|k| 1.0 / (2.0 * s) + k as f64).collect(),
        subelliptic_orders: (0..=r).map(|k| 2.0 * s / (1.0 + 2.0 * k as f64 * s)).collect(),
        gamma: 1.0 / (2.0 * s) + rf,
        dissipation_m: m,
        observability_cost: if s > 0.5 { Some(m / (2.0 * s - 1.0)) } else { None },
        subelliptic_loss: 2.0 * rf * s / m,
    }
}

/// Kolmogorov drift `[[0, I], [0, 0]]` in dimension `2d`.
pub fn kolmogorov_drift(d: usize) -> SquareMatrix {
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        m[(i, d + i)] = 1.0;
    }
    SquareMatrix::from_dmatrix(m).expect("finite entries")
}

/// Kolmogorov diffusion `2^{1/s} diag(0, I)` in dimension `2d`.
pub fn kolmogorov_diffusion(d: usize, s: f64) -> SquareMatrix {
    let c = 2f64.powf(1.0 / s);
    let diag: Vec<f64> = (0..2 * d).map(|i| if i < d { 0.0 } else { c }).collect();
    SquareMatrix::diagonal(&diag).expect("finite entries")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::psd_sqrt;

    #[test]
    fn positive_definite_q_gives_r_zero() {
        let b = SquareMatrix::from_row_major(2, &[0.3, -1.0, 2.0, 0.1]).unwrap();
        let q = psd_sqrt(&SquareMatrix::diagonal(&[1.0, 3.0]).unwrap()).unwrap();
        let ks = analyze_structure(&b, &q, None).unwrap();
        assert!(ks.holds);
        assert_eq!(ks.r, Some(0));
        assert!((ks.proj[0].as_dmatrix() - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn kolmogorov_flag() {
        for d in 1..=2 {
            let q = psd_sqrt(&kolmogorov_diffusion(d, 0.75)).unwrap();
            let ks = analyze_structure(&kolmogorov_drift(d), &q, None).unwrap();
            assert_eq!(ks.r, Some(1));
            let mut vblock = DMatrix::zeros(2 * d, 2 * d);
            for i in d..2 * d {
                vblock[(i, i)] = 1.0;
            }
            assert!((ks.proj[0].as_dmatrix() - vblock).amax() < 1e-12);
            assert!((ks.proj[1].as_dmatrix() - DMatrix::identity(2 * d, 2 * d)).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_diffusion_is_not_kalman() {
        let q = psd_sqrt(&SquareMatrix::zeros(3)).unwrap();
        let ks = analyze_structure(&SquareMatrix::identity(3), &q, None).unwrap();
        assert!(!ks.holds);
        assert_eq!(ks.r, None);
        assert_eq!(ks.dims, vec![0, 0, 0]);
        assert!(characteristic_exponents(&ks, 1.0).is_err());
    }

    #[test]
    fn chain_of_length_three() {
        // Shift drift fed through the last coordinate needs r = 2.
        let b = SquareMatrix::from_row_major(3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let q = psd_sqrt(&SquareMatrix::diagonal(&[0.0, 0.0, 1.0]).unwrap()).unwrap();
        let ks = analyze_structure(&b, &q, None).unwrap();
        assert_eq!(ks.r, Some(2));
        assert_eq!(ks.dims, vec![1, 2, 3]);
    }

    #[test]
    fn exponent_tables() {
        let heat = exponents_for(0, 1.0);
        assert_eq!(heat.smoothing, vec![0.5]);
        assert_eq!(heat.subelliptic_orders, vec![2.0]);
        assert_eq!(heat.dissipation_m, 1.0);
        assert_eq!(heat.observability_cost, Some(1.0));

        let s = 0.6;
        let kol = exponents_for(1, s);
        assert_eq!(kol.subelliptic_orders, vec![2.0 * s, 2.0 * s / (1.0 + 2.0 * s)]);

        let t = exponents_for(1, 0.75);
        assert_eq!(t.dissipation_m, 2.5);
        assert_eq!(t.observability_cost, Some(5.0));
        assert!((t.subelliptic_loss - 0.6).abs() < 1e-15);
        assert_eq!(exponents_for(1, 0.5).observability_cost, None);
    }

    #[test]
    fn rejects_nonpositive_s() {
        let q = psd_sqrt(&SquareMatrix::identity(1)).unwrap();
        let ks = analyze_structure(&SquareMatrix::zeros(1), &q, None).unwrap();
        assert!(characteristic_exponents(&ks, 0.0).is_err());
        assert!(characteristic_exponents(&ks, -1.0).is_err());
    }
}
