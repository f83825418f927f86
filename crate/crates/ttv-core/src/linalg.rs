//! Dense SVD used by the TT and Tucker factorizations.
//!
//! One-sided Jacobi (Hestenes) SVD: plane rotations orthogonalize the
//! columns of the working matrix until every pair is numerically orthogonal;
//! column norms are then the singular values. Chosen over iterative
//! bidiagonalization kernels because it converges to high relative accuracy
//! on rank-deficient unfoldings, which the TT sweep produces constantly, and
//! its fixed sweep order makes results reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Svd {
    /// Left singular vectors, `[rows x k]`, k = min(rows, cols).
    pub u: Tensor,
    /// Singular values in descending order, length k.
    pub sigma: Vec<f64>,
    /// Right singular vectors transposed, `[k x cols]`.
    pub vt: Tensor,
}

/// Thin SVD of a rank-2 tensor. Singular values come back sorted descending.
pub fn svd(m: &Tensor) -> Result<Svd> {
    if m.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "svd needs a rank-2 tensor, got {:?}",
            m.shape()
        )));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if rows >= cols {
        svd_tall(m)
    } else {
        // factorize the transpose and swap the roles of U and V
        let f = svd_tall(&m.transposed()?)?;
        Ok(Svd {
            u: f.vt.transposed()?,
            sigma: f.sigma,
            vt: f.u.transposed()?,
        })
    }
}

/// One-sided Jacobi on `a` with rows >= cols.
///
/// Works on `W = a^T` so that the columns being orthogonalized are
/// contiguous rows; `a = U S V^T` falls out as `W_i = sigma_i * u_i^T` with
/// `V` accumulated from the rotations.
fn svd_tall(a: &Tensor) -> Result<Svd> {
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    debug_assert!(rows >= cols);
    let n = cols;

    let mut w = a.transposed()?.into_data(); // n rows of length `rows`
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }

    const MAX_SWEEPS: usize = 60;
    const TOL: f64 = 1e-15;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for t in 0..rows {
                    let wp = w[p * rows + t];
                    let wq = w[q * rows + t];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || gamma.abs() <= TOL * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let wp = w[p * rows + k];
                    let wq = w[q * rows + k];
                    w[p * rows + k] = c * wp - s * wq;
                    w[q * rows + k] = s * wp + c * wq;
                }
                for k in 0..n {
                    let vp = vt[p * n + k];
                    let vq = vt[q * n + k];
                    vt[p * n + k] = c * vp - s * vq;
                    vt[q * n + k] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // singular values = row norms of W; sort descending
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|i| w[i * rows..(i + 1) * rows].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut sigma = Vec::with_capacity(n);
    let mut u = vec![0.0; rows * n];
    let mut vt_sorted = vec![0.0; n * a.shape()[1]];
    for (slot, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for r in 0..rows {
                u[r * n + slot] = w[src * rows + r] / s;
            }
        }
        vt_sorted[slot * n..(slot + 1) * n].copy_from_slice(&vt[src * n..(src + 1) * n]);
    }

    Ok(Svd {
        u: Tensor::new(vec![rows, n], u)?,
        sigma,
        vt: Tensor::new(vec![n, n], vt_sorted)?,
    })
}

/// Smallest rank whose retained squared singular mass is at least
/// `(1 - tol^2)` of the total, clamped to `[1, max_rank]`. `tol <= 0` means
/// exact mode: keep everything above machine noise relative to sigma[0].
pub fn truncation_rank(sigma: &[f64], tol: f64, max_rank: Option<usize>) -> usize {
    let cap = max_rank.unwrap_or(sigma.len()).min(sigma.len()).max(1);
    let smax = sigma.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 1;
    }
    if tol <= 0.0 {
        let thresh = smax * 1e-14;
        let r = sigma.iter().take_while(|s| **s > thresh).count().max(1);
        return r.min(cap);
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let target = (1.0 - tol * tol) * total;
    let mut kept = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        kept += s * s;
        if kept >= target || *s == 0.0 {
            return (i + 1).min(cap);
        }
    }
    cap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn check_factorization(m: &Tensor, f: &Svd, tol: f64) {
        let k = f.sigma.len();
        let mut us = f.u.clone();
        for i in 0..us.shape()[0] {
            for j in 0..k {
                let v = us.at(&[i, j]) * f.sigma[j];
                us.set(&[i, j], v);
            }
        }
        let back = us.matmul(&f.vt).unwrap();
        assert!(m.max_abs_diff(&back) < tol, "residual {}", m.max_abs_diff(&back));
        for w in f.sigma.windows(2) {
            assert!(w[0] >= w[1], "sigma not sorted: {:?}", f.sigma);
        }
        // orthonormal columns of U
        let utu = f.u.transposed().unwrap().matmul(&f.u).unwrap();
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((utu.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = RngState::new(17);
        for shape in [[6, 4], [4, 6], [8, 8], [1, 5], [5, 1]] {
            let m = rng.normal_tensor(&shape, 1.0);
            let f = svd(&m).unwrap();
            check_factorization(&m, &f, 1e-12);
        }
    }

    #[test]
    fn svd_handles_rank_deficient_wide_matrices() {
        // the shape of unfolding that appears in every TT sweep
        let mut rng = RngState::new(18);
        let u = rng.normal_tensor(&[6, 2], 1.0);
        let v = rng.normal_tensor(&[2, 96], 1.0);
        let m = u.matmul(&v).unwrap();
        let f = svd(&m).unwrap();
        check_factorization(&m, &f, 1e-12);
        assert!(f.sigma[1] > 1e-3);
        assert!(f.sigma[2] < 1e-12 * f.sigma[0], "sigma {:?}", &f.sigma[..4]);
    }

    #[test]
    fn svd_of_zero_matrix() {
        let m = Tensor::zeros(&[3, 5]);
        let f = svd(&m).unwrap();
        assert!(f.sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn svd_known_diagonal() {
        let mut m = Tensor::zeros(&[3, 3]);
        m.set(&[0, 0], 3.0);
        m.set(&[1, 1], -5.0);
        m.set(&[2, 2], 1.0);
        let f = svd(&m).unwrap();
        assert!((f.sigma[0] - 5.0).abs() < 1e-12);
        assert!((f.sigma[1] - 3.0).abs() < 1e-12);
        assert!((f.sigma[2] - 1.0).abs() < 1e-12);
        check_factorization(&m, &f, 1e-12);
    }

    #[test]
    fn truncation_rank_rules() {
        let sigma = [2.0, 1.0, 1e-9, 0.0];
        // keep every numerically meaningful value at tol 0
        assert_eq!(truncation_rank(&sigma, 0.0, None), 3);
        // a loose tolerance drops the tail
        assert_eq!(truncation_rank(&sigma, 1e-3, None), 2);
        // cap wins
        assert_eq!(truncation_rank(&sigma, 0.0, Some(1)), 1);
        // degenerate all-zero spectrum
        assert_eq!(truncation_rank(&[0.0, 0.0], 0.0, None), 1);
    }
}
