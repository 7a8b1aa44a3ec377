//! Dense row-major matrices and a truncated SVD.
//!
//! Everything downstream (outlier scoring, gradient projection, the models
//! themselves) runs on these primitives. Matrices are small (desk scale is
//! at most a few hundred per side), so the SVD is a one-sided Jacobi over
//! column pairs: deterministic, no external solver, accurate to near machine
//! precision at these sizes.

use crate::error::{Error, Result};

/// Dense 2-D array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data; rejects empty shapes, length mismatches
    /// and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix shape");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // empty shapes are rejected at construction
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Elementwise in-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "add_scaled",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a * b`; dimensions must agree (`a.cols == b.rows`).
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order keeps the inner loop contiguous over both b and out rows.
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})^T * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Per-column Euclidean norms: entry `j` is `sqrt(sum_i x[i,j]^2)`.
pub fn column_l2_norms(x: &Matrix) -> Vec<f64> {
    let mut sq = vec![0.0; x.cols];
    for i in 0..x.rows {
        for (s, v) in sq.iter_mut().zip(x.row(i)) {
            *s += v * v;
        }
    }
    sq.iter().map(|s| s.sqrt()).collect()
}

/// Rank-r factorization `u * diag(s) * v^T` with orthonormal `u` (m x r)
/// and `v` (n x r), singular values non-increasing.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u * diag(s) * v^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &sv) in self.s.iter().enumerate() {
                let v = us.at(i, j) * sv;
                us.set(i, j, v);
            }
        }
        matmul_nt(&us, &self.v).expect("factor shapes agree")
    }
}

/// Best rank-r approximation factors of `m`.
///
/// Computes the full decomposition by one-sided Jacobi and truncates, so the
/// discarded spectrum is available to callers via [`singular_values`].
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<TruncatedSvd> {
    let p = m.rows.min(m.cols);
    if r == 0 || r > p {
        return Err(Error::Rank { rank: r, rows: m.rows, cols: m.cols });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("truncated_svd input"));
    }
    let (u, s, v) = jacobi_svd(m);
    let take = |mat: &Matrix| {
        Matrix::from_fn(mat.rows(), r, |i, j| mat.at(i, j))
    };
    Ok(TruncatedSvd { u: take(&u), s: s[..r].to_vec(), v: take(&v) })
}

/// All singular values of `m`, non-increasing.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::NonFinite("singular_values input"));
    }
    Ok(jacobi_svd(m).1)
}

/// Full thin SVD by one-sided Jacobi on the tall orientation.
///
/// Returns (u: rows x p, s: p, v: cols x p) with p = min(rows, cols).
fn jacobi_svd(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let transposed = m.rows < m.cols;
    let b = if transposed { m.transpose() } else { m.clone() };
    let (rows, p) = (b.rows, b.cols);
    // Columns of b are orthogonalized in place; rotations accumulate into v.
    let v = Matrix::identity(p);
    // Column-major scratch views for cheap pair updates.
    let mut bcols: Vec<Vec<f64>> = (0..p).map(|j| (0..rows).map(|i| b.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..p).map(|j| (0..p).map(|i| v.at(i, j)).collect()).collect();

    let tol = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (&bcols[i], &bcols[j]);
                    let mut a = 0.0;
                    let mut b2 = 0.0;
                    let mut g = 0.0;
                    for k in 0..rows {
                        a += ci[k] * ci[k];
                        b2 += cj[k] * cj[k];
                        g += ci[k] * cj[k];
                    }
                    (a, b2, g)
                };
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = bcols.split_at_mut(j);
                let (ci, cj) = (&mut left[i], &mut right[0]);
                for k in 0..rows {
                    let x = ci[k];
                    let y = cj[k];
                    ci[k] = c * x - s * y;
                    cj[k] = s * x + c * y;
                }
                let (vleft, vright) = vcols.split_at_mut(j);
                let (vi, vj) = (&mut vleft[i], &mut vright[0]);
                for k in 0..p {
                    let x = vi[k];
                    let y = vj[k];
                    vi[k] = c * x - s * y;
                    vj[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut norms: Vec<f64> = bcols
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &c| norms[c].partial_cmp(&norms[a]).unwrap().then(a.cmp(&c)));

    let sigma_max = order.first().map(|&k| norms[k]).unwrap_or(0.0);
    let deficient_cut = sigma_max * 1e-13;

    let mut u = Matrix::zeros(rows, p);
    let mut vperm = Matrix::zeros(p, p);
    let mut s = vec![0.0; p];
    let mut u_filled: Vec<Vec<f64>> = Vec::with_capacity(p);
    for (slot, &k) in order.iter().enumerate() {
        s[slot] = norms[k];
        let ucol: Vec<f64> = if norms[k] > deficient_cut && norms[k] > 0.0 {
            bcols[k].iter().map(|v| v / norms[k]).collect()
        } else {
            // Rank-deficient: extend with an orthonormal completion so u
            // keeps orthonormal columns even past the numerical rank.
            norms[k] = 0.0;
            s[slot] = 0.0;
            complete_basis(rows, &u_filled)
        };
        for (r_idx, val) in ucol.iter().enumerate() {
            u.set(r_idx, slot, *val);
        }
        for r_idx in 0..p {
            vperm.set(r_idx, slot, vcols[k][r_idx]);
        }
        u_filled.push(ucol);
    }

    if transposed {
        (vperm, s, u)
    } else {
        (u, s, vperm)
    }
}

/// Unit vector orthogonal to all `existing` columns, found by projecting out
/// canonical basis candidates. Deterministic.
fn complete_basis(dim: usize, existing: &[Vec<f64>]) -> Vec<f64> {
    for cand in 0..dim {
        let mut v = vec![0.0; dim];
        v[cand] = 1.0;
        for col in existing {
            let dot: f64 = v.iter().zip(col).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(col) {
                *vi -= dot * ci;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for vi in &mut v {
                *vi /= norm;
            }
            return v;
        }
    }
    // Unreachable for existing.len() < dim; keep a defined fallback.
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}
