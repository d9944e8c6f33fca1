use std::cmp::Ordering;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const SVD_TOL: f64 = 1e-12;
const SVD_MAX_SWEEPS: usize = 100;

/// `a · b` for 2-D tensors. Inner products accumulate left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ`, the natural product for weights stored as `[out × in]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out.push(dot(arow, brow));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (s, p) = a.dims2()?;
    let (s2, q) = b.dims2()?;
    if s != s2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; p * q];
    for row in 0..s {
        let arow = &ad[row * p..(row + 1) * p];
        let brow = &bd[row * q..(row + 1) * q];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * q..(i + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![p, q], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ridge least squares: `argmin_W ‖R − X·W‖² + λ‖W‖²`.
///
/// Forms the normal equations `(XᵀX + λI) W = XᵀR` and solves them by LU
/// with partial pivoting. At `λ = 0` a rank-deficient `X` is reported as
/// [`Error::Singular`].
pub fn solve_least_squares(x: &Tensor, r: &Tensor, lambda: f64) -> Result<Tensor> {
    let (s, p) = x.dims2()?;
    let (s2, _) = r.dims2()?;
    if s != s2 {
        return Err(Error::ShapeMismatch {
            op: "solve_least_squares",
            left: x.shape().to_vec(),
            right: r.shape().to_vec(),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let mut gram = matmul_tn(x, x)?;
    for i in 0..p {
        let v = gram.get(i, i) + lambda;
        gram.set(i, i, v);
    }
    let rhs = matmul_tn(x, r)?;
    lu_solve(gram, rhs)
}

/// Solves `A · X = B` for square `A` by Gaussian elimination with partial pivoting.
pub fn lu_solve(mut a: Tensor, mut b: Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims2()?;
    let (bn, q) = b.dims2()?;
    if n != n2 || bn != n {
        return Err(Error::ShapeMismatch {
            op: "lu_solve",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let scale = a.max_abs();
    if scale == 0.0 {
        return Err(Error::Singular("zero matrix".into()));
    }
    let tol = scale * 1e-12;
    for col in 0..n {
        let (piv, pmag) = (col..n)
            .map(|i| (i, a.get(i, col).abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmag <= tol {
            return Err(Error::Singular(format!(
                "pivot {pmag:e} at column {col} below tolerance {tol:e}"
            )));
        }
        if piv != col {
            swap_rows(&mut a, piv, col);
            swap_rows(&mut b, piv, col);
        }
        let d = a.get(col, col);
        for i in col + 1..n {
            let f = a.get(i, col) / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a.get(i, j) - f * a.get(col, j);
                a.set(i, j, v);
            }
            for j in 0..q {
                let v = b.get(i, j) - f * b.get(col, j);
                b.set(i, j, v);
            }
        }
    }
    let mut x = Tensor::zeros(&[n, q]);
    for i in (0..n).rev() {
        for j in 0..q {
            let mut acc = b.get(i, j);
            for k in i + 1..n {
                acc -= a.get(i, k) * x.get(k, j);
            }
            x.set(i, j, acc / a.get(i, i));
        }
    }
    Ok(x)
}

fn swap_rows(t: &mut Tensor, i: usize, j: usize) {
    let c = t.cols();
    let data = t.data_mut();
    for k in 0..c {
        data.swap(i * c + k, j * c + k);
    }
}

/// Rank-`r` truncated singular value decomposition `W ≈ U · diag(S) · V`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `[p × r]`, orthonormal columns (zero columns for null singular values).
    pub u: Tensor,
    /// Descending, nonnegative.
    pub s: Vec<f64>,
    /// `[r × q]`, orthonormal rows.
    pub v: Tensor,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut us = self.u.clone();
        let r = self.s.len();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *v *= s;
            }
        }
        debug_assert_eq!(us.cols(), r);
        matmul(&us, &self.v)
    }
}

/// Best rank-`r` Frobenius approximation via one-sided Jacobi rotations.
pub fn truncated_svd(w: &Tensor, r: usize) -> Result<TruncatedSvd> {
    let (p, q) = w.dims2()?;
    if r == 0 || r > p.min(q) {
        return Err(Error::param(format!(
            "svd rank {r} out of range 1..={} for {p}x{q}",
            p.min(q)
        )));
    }
    if p >= q {
        let (u, s, v) = jacobi_svd(w)?;
        truncate(u, s, v, r)
    } else {
        // A = (Aᵀ)ᵀ = V' Σ U'ᵀ
        let (u_t, s, v_t) = jacobi_svd(&w.transpose()?)?;
        truncate(v_t.transpose()?, s, u_t.transpose()?, r)
    }
}

/// Thin SVD of a tall matrix `[p × q]`, `p >= q`. Returns `(U[p×q], S, Vt[q×q])`
/// sorted by descending singular value.
fn jacobi_svd(a: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (p, q) = a.dims2()?;
    let at = a.transpose()?;
    let mut cols: Vec<Vec<f64>> = (0..q).map(|j| at.row(j).to_vec()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dot(c, c).sqrt()))
        .collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));

    let mut u = Tensor::zeros(&[p, q]);
    let mut vt = Tensor::zeros(&[q, q]);
    let mut s = Vec::with_capacity(q);
    let smax = order.first().map_or(0.0, |o| o.1);
    for (k, &(j, sigma)) in order.iter().enumerate() {
        let null = sigma <= smax * f64::EPSILON * (p.max(q) as f64) || sigma == 0.0;
        s.push(if null { 0.0 } else { sigma });
        if !null {
            for i in 0..p {
                u.set(i, k, cols[j][i] / sigma);
            }
        }
        vt.row_mut(k).copy_from_slice(&vcols[j]);
    }
    Ok((u, s, vt))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn truncate(u: Tensor, s: Vec<f64>, vt: Tensor, r: usize) -> Result<TruncatedSvd> {
    Ok(TruncatedSvd {
        u: u.slice_cols(0, r)?,
        s: s[..r].to_vec(),
        v: vt.slice_rows(0, r)?,
    })
}

/// Indices of the `k` largest-magnitude entries; ties go to the lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::param(format!(
            "top-k with k={k} out of range 1..={}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // Stable sort keeps lower indices first among equal magnitudes.
    idx.sort_by(|&a, &b| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .unwrap_or(Ordering::Equal)
    });
    idx.truncate(k);
    Ok(idx)
}
