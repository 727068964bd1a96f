//! Thin SVD via one-sided Jacobi with cyclic sweeps.
//!
//! The factorization runs to full column rank, then truncates; the discarded
//! tail of squared singular values is returned alongside the factors so that
//! callers get the exact Frobenius reconstruction error for free.

use super::{Matrix, Scalar, SvdResult};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// Relative off-diagonal threshold: 1e-12 on the 64-bit path, clamped to a
/// few epsilons for narrower scalars.
fn rotation_tol<T: Scalar>() -> T {
    let base = T::from(1e-12).unwrap();
    let floor = T::epsilon() * T::from(8.0).unwrap();
    if floor > base {
        floor
    } else {
        base
    }
}

/// Rank-`t` thin SVD of `a`.
///
/// Deterministic: fixed sweep order, a sign convention that makes the
/// largest-magnitude entry of each left singular vector nonnegative, and a
/// stable descending sort of the singular values.
pub fn thin_svd<T: Scalar>(a: &Matrix<T>, t: usize) -> Result<SvdResult<T>> {
    let min_dim = a.rows().min(a.cols());
    if t == 0 || t > min_dim {
        return Err(Error::Shape(format!(
            "svd rank {} out of range for {}x{} matrix",
            t,
            a.rows(),
            a.cols()
        )));
    }
    let (u, sigma, vt) = if a.rows() >= a.cols() {
        jacobi_tall(a)?
    } else {
        // A = (A^T)^T = (U' S V'^T)^T = V' S U'^T
        let (u_t, sigma, vt_t) = jacobi_tall(&a.transpose())?;
        (vt_t.transpose(), sigma, u_t.transpose())
    };

    let discarded = sigma[t..]
        .iter()
        .map(|&s| s * s)
        .fold(T::zero(), |acc, x| acc + x);

    let u_thin = u.col_block(0, t);
    let mut vt_thin = Matrix::zeros(t, vt.cols());
    for i in 0..t {
        vt_thin.row_mut(i).copy_from_slice(vt.row(i));
    }
    Ok(SvdResult {
        u: u_thin,
        sigma: sigma[..t].to_vec(),
        vt: vt_thin,
        discarded_sq_sum: discarded,
    })
}

/// Full SVD of a tall (or square) matrix, m >= n: returns (U m x n, sigma
/// descending, V^T n x n).
fn jacobi_tall<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);

    // Work on columns: columns of `work` converge to sigma_j * u_j. Applying
    // the same row rotations to an identity matrix accumulates V^T (its row j
    // is the right singular vector paired with work row j).
    let mut work = a.transpose(); // n x m: row j holds column j of A
    let mut vt_acc = Matrix::<T>::identity(n);
    let tol = rotation_tol::<T>();

    let mut converged = n < 2;
    let mut sweeps = 0usize;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (app, aqq, apq) = {
                    let cp = work.row(p);
                    let cq = work.row(q);
                    let mut app = T::zero();
                    let mut aqq = T::zero();
                    let mut apq = T::zero();
                    for i in 0..m {
                        app += cp[i] * cp[i];
                        aqq += cq[i] * cq[i];
                        apq += cp[i] * cq[i];
                    }
                    (app, aqq, apq)
                };
                if app == T::zero() || aqq == T::zero() {
                    continue;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                // Classic two-sided-symmetric rotation applied to the Gram
                // pair: tan(2 angle) = 2 apq / (app - aqq).
                let tau = (aqq - app) / (apq + apq);
                let t = {
                    let s = if tau >= T::zero() { T::one() } else { -T::one() };
                    s / (tau.abs() + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut work, p, q, c, s);
                rotate_rows(&mut vt_acc, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NonConvergence { sweeps });
    }

    // Column norms are the singular values; sort descending, stable in the
    // original column index for exact ties.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = (0..n)
        .map(|j| work.row(j).iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b).sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let tiny = T::epsilon() * T::from(m as f64).unwrap();
    let mut u = Matrix::<T>::zeros(m, n);
    let mut vt = Matrix::<T>::zeros(n, n);
    let mut sigma = vec![T::zero(); n];
    let mut rank = 0usize;
    for (slot, &j) in order.iter().enumerate() {
        sigma[slot] = norms[j];
        if norms[j] > tiny {
            rank = slot + 1;
            let inv = T::one() / norms[j];
            for i in 0..m {
                u.set(i, slot, work.row(j)[i] * inv);
            }
        }
        vt.row_mut(slot).copy_from_slice(vt_acc.row(j));
    }

    complete_basis(&mut u, rank);
    fix_signs(&mut u, &mut vt);
    Ok((u, sigma, vt))
}

/// Plane rotation of rows p and q: (rp, rq) <- (c rp - s rq, s rp + c rq).
fn rotate_rows<T: Scalar>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let cols = m.cols();
    let (lo, hi) = (p.min(q), p.max(q));
    let (head, tail) = m.data_mut().split_at_mut(hi * cols);
    let row_lo = &mut head[lo * cols..(lo + 1) * cols];
    let row_hi = &mut tail[..cols];
    let (rp, rq) = if lo == p { (row_lo, row_hi) } else { (row_hi, row_lo) };
    for i in 0..cols {
        let xp = rp[i];
        let xq = rq[i];
        rp[i] = c * xp - s * xq;
        rq[i] = s * xp + c * xq;
    }
}

/// Fill columns beyond the numerical rank with an orthonormal completion so
/// U always has orthonormal columns. Deterministic: walks the canonical basis
/// and Gram-Schmidts the first vector with enough residual mass.
fn complete_basis<T: Scalar>(u: &mut Matrix<T>, rank: usize) {
    let m = u.rows();
    let n = u.cols();
    // Among the axes not yet consumed, some residual norm^2 stays >= 1/(2m)
    // against any partial orthonormal basis, so this threshold cannot
    // exhaust the axis supply.
    let threshold = (T::one() / T::from(4 * m).unwrap()).sqrt();
    let mut next_axis = 0usize;
    for col in rank..n {
        loop {
            assert!(next_axis < m, "basis completion exhausted axes");
            let mut cand = vec![T::zero(); m];
            cand[next_axis] = T::one();
            next_axis += 1;
            for prev in 0..col {
                let mut proj = T::zero();
                for i in 0..m {
                    proj += cand[i] * u.get(i, prev);
                }
                for i in 0..m {
                    cand[i] = cand[i] - proj * u.get(i, prev);
                }
            }
            let norm = cand.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b).sqrt();
            if norm > threshold {
                let inv = T::one() / norm;
                for i in 0..m {
                    u.set(i, col, cand[i] * inv);
                }
                break;
            }
        }
    }
}

/// Force the largest-magnitude entry of each U column nonnegative, flipping
/// the matching V^T row to preserve the product.
fn fix_signs<T: Scalar>(u: &mut Matrix<T>, vt: &mut Matrix<T>) {
    let m = u.rows();
    for col in 0..u.cols() {
        let mut best = T::zero();
        let mut best_val = T::zero();
        for i in 0..m {
            let v = u.get(i, col);
            if v.abs() > best {
                best = v.abs();
                best_val = v;
            }
        }
        if best_val < T::zero() {
            for i in 0..m {
                let v = u.get(i, col);
                u.set(i, col, -v);
            }
            if col < vt.rows() {
                for j in 0..vt.cols() {
                    let v = vt.get(col, j);
                    vt.set(col, j, -v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(values: &[f64]) -> Matrix<f64> {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (1u64 << 31) as f64 - 0.5
        };
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| next()).collect()).unwrap()
    }

    #[test]
    fn diagonal_full_rank() {
        let svd = thin_svd(&diag(&[3.0, 2.0, 1.0]), 3).unwrap();
        assert_eq!(svd.sigma.len(), 3);
        assert!((svd.sigma[0] - 3.0).abs() < 1e-12);
        assert!((svd.sigma[1] - 2.0).abs() < 1e-12);
        assert!((svd.sigma[2] - 1.0).abs() < 1e-12);
        assert!(svd.discarded_sq_sum.abs() < 1e-20);
    }

    #[test]
    fn diagonal_truncated_discards_tail() {
        let svd = thin_svd(&diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        assert!((svd.discarded_sq_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_out_of_range() {
        let a = Matrix::<f64>::zeros(3, 2);
        assert!(thin_svd(&a, 3).is_err());
        assert!(thin_svd(&a, 0).is_err());
    }

    #[test]
    fn orthonormality_and_reconstruction() {
        let a = lcg_matrix(12, 8, 7);
        let svd = thin_svd(&a, 8).unwrap();
        // U^T U = I within 1e-10
        for p in 0..8 {
            for q in 0..8 {
                let mut s = 0.0;
                for i in 0..12 {
                    s += svd.u.get(i, p) * svd.u.get(i, q);
                }
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-10, "UtU[{p},{q}] = {s}");
            }
        }
        for p in 0..8 {
            for q in 0..8 {
                let mut s = 0.0;
                for j in 0..8 {
                    s += svd.vt.get(p, j) * svd.vt.get(q, j);
                }
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-10, "VVt[{p},{q}] = {s}");
            }
        }
        let err = a.sub(&svd.reconstruct()).unwrap().frob_sq();
        assert!(err < 1e-20, "full-rank reconstruction error {err}");
    }

    #[test]
    fn wide_matrix_via_transpose() {
        let a = lcg_matrix(5, 9, 11);
        let svd = thin_svd(&a, 5).unwrap();
        let err = a.sub(&svd.reconstruct()).unwrap().frob_sq();
        assert!(err < 1e-20, "wide full-rank reconstruction error {err}");
    }

    #[test]
    fn truncation_error_matches_discarded_tail() {
        let a = lcg_matrix(12, 8, 23);
        for t in [2usize, 4, 6] {
            let svd = thin_svd(&a, t).unwrap();
            let err = a.sub(&svd.reconstruct()).unwrap().frob_sq();
            let rel = (err - svd.discarded_sq_sum).abs() / svd.discarded_sq_sum;
            assert!(rel < 1e-10, "t={t}: err {err} vs discarded {}", svd.discarded_sq_sum);
        }
    }

    #[test]
    fn monotone_in_rank() {
        let a = lcg_matrix(10, 10, 31);
        let mut last = f64::INFINITY;
        for t in 1..=10 {
            let d = thin_svd(&a, t).unwrap().discarded_sq_sum;
            assert!(d <= last + 1e-12);
            last = d;
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let a = lcg_matrix(9, 6, 99);
        let s1 = thin_svd(&a, 4).unwrap();
        let s2 = thin_svd(&a, 4).unwrap();
        assert_eq!(s1.u.data(), s2.u.data());
        assert_eq!(s1.vt.data(), s2.vt.data());
        assert_eq!(s1.sigma, s2.sigma);
    }

    #[test]
    fn sign_convention_largest_entry_nonnegative() {
        let a = lcg_matrix(8, 5, 41);
        let svd = thin_svd(&a, 5).unwrap();
        for col in 0..5 {
            let mut best = 0.0f64;
            let mut val = 0.0f64;
            for i in 0..8 {
                if svd.u.get(i, col).abs() > best {
                    best = svd.u.get(i, col).abs();
                    val = svd.u.get(i, col);
                }
            }
            assert!(val >= 0.0);
        }
    }

    #[test]
    fn zero_matrix_completes_basis() {
        let a = Matrix::<f64>::zeros(4, 3);
        let svd = thin_svd(&a, 3).unwrap();
        assert!(svd.sigma.iter().all(|&s| s == 0.0));
        for p in 0..3 {
            for q in 0..3 {
                let mut s = 0.0;
                for i in 0..4 {
                    s += svd.u.get(i, p) * svd.u.get(i, q);
                }
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-12);
            }
        }
    }
}
