use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be nonzero");
        CMat { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = CMat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = f(r, c);
            }
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} entries cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(CMat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Complex64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[Complex64]) {
        assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    /// Conjugate (Hermitian) transpose.
    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn matmul(&self, rhs: &CMat) -> Result<CMat> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let rhs_row = rhs.row(k);
                let out_row = out.row_mut(r);
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        if v.len() != self.cols {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn scale(&self, s: Complex64) -> CMat {
        CMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn sub(&self, rhs: &CMat) -> Result<CMat> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::dim("matrix shapes differ".to_string()));
        }
        Ok(CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = Complex64;

    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &CMat) -> Result<CMat> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim(format!("cannot invert a {}x{} matrix", a.rows(), a.cols())));
    }
    let mut work = a.clone();
    let mut inv = CMat::identity(n);
    let scale = a.as_slice().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(Error::RankDeficient("zero matrix".into()));
    }

    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| work[(i, col)].norm().total_cmp(&work[(j, col)].norm()))
            .expect("nonempty range");
        if work[(pivot, col)].norm() <= scale * 1e-15 {
            return Err(Error::RankDeficient(format!("zero pivot in column {col}")));
        }
        if pivot != col {
            for c in 0..n {
                let tmp = work[(col, c)];
                work[(col, c)] = work[(pivot, c)];
                work[(pivot, c)] = tmp;
                let tmp = inv[(col, c)];
                inv[(col, c)] = inv[(pivot, c)];
                inv[(pivot, c)] = tmp;
            }
        }
        let p = work[(col, col)].inv();
        for c in 0..n {
            work[(col, c)] *= p;
            inv[(col, c)] *= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = work[(r, col)];
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for c in 0..n {
                let wv = work[(col, c)];
                let iv = inv[(col, c)];
                work[(r, c)] -= f * wv;
                inv[(r, c)] -= f * iv;
            }
        }
    }
    Ok(inv)
}

/// 1-norm condition number `||A||_1 ||A^-1||_1`; infinite for singular input.
pub fn cond_1norm(a: &CMat) -> f64 {
    match inverse(a) {
        Ok(inv) => a.norm_1() * inv.norm_1(),
        Err(_) => f64::INFINITY,
    }
}

/// Minimizes `||A x - b||^2 + ridge ||x||^2` with a Householder QR of the
/// ridge-augmented, column-equilibrated system.
pub fn lstsq(a: &CMat, b: &[Complex64], ridge: f64) -> Result<Vec<Complex64>> {
    let (m, p) = (a.rows(), a.cols());
    if b.len() != m {
        return Err(Error::dim(format!("rhs length {} does not match {m} rows", b.len())));
    }
    if m < p {
        return Err(Error::dim(format!("underdetermined system ({m} rows < {p} unknowns)")));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be finite and nonnegative, got {ridge}")));
    }

    // Column scaling only conditions the factorization; the ridge rows carry
    // the same scaling so the minimizer is unchanged.
    let col_scale: Vec<f64> = (0..p)
        .map(|c| {
            let n = (0..m).map(|r| a[(r, c)].norm_sqr()).sum::<f64>().sqrt();
            if n > 0.0 {
                1.0 / n
            } else {
                1.0
            }
        })
        .collect();

    let extra = if ridge > 0.0 { p } else { 0 };
    let rows = m + extra;
    let mut work = vec![Complex64::new(0.0, 0.0); rows * p];
    let mut rhs = vec![Complex64::new(0.0, 0.0); rows];
    for r in 0..m {
        for c in 0..p {
            work[r * p + c] = a[(r, c)] * col_scale[c];
        }
        rhs[r] = b[r];
    }
    let sqrt_ridge = ridge.sqrt();
    for c in 0..extra {
        work[(m + c) * p + c] = Complex64::new(sqrt_ridge * col_scale[c], 0.0);
    }

    let mut diag = vec![0.0; p];
    for j in 0..p {
        let norm = (j..rows).map(|r| work[r * p + j].norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            diag[j] = 0.0;
            continue;
        }
        let x0 = work[j * p + j];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { Complex64::new(1.0, 0.0) };
        let alpha = -phase * norm;
        let mut v: Vec<Complex64> = (j..rows).map(|r| work[r * p + j]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            diag[j] = alpha.norm();
            continue;
        }
        for z in v.iter_mut() {
            *z /= vnorm;
        }
        for c in j..p {
            let dot: Complex64 = v.iter().enumerate().map(|(i, vi)| vi.conj() * work[(j + i) * p + c]).sum();
            for (i, vi) in v.iter().enumerate() {
                work[(j + i) * p + c] -= 2.0 * vi * dot;
            }
        }
        let dot: Complex64 = v.iter().enumerate().map(|(i, vi)| vi.conj() * rhs[j + i]).sum();
        for (i, vi) in v.iter().enumerate() {
            rhs[j + i] -= 2.0 * vi * dot;
        }
        diag[j] = work[j * p + j].norm();
    }

    let max_diag = diag.iter().cloned().fold(0.0, f64::max);
    let tol = max_diag * 1e-12 * rows.max(p) as f64;
    if let Some(j) = diag.iter().position(|&d| d <= tol) {
        return Err(Error::RankDeficient(format!("column {j} is linearly dependent")));
    }

    let mut x = vec![Complex64::new(0.0, 0.0); p];
    for j in (0..p).rev() {
        let mut acc = rhs[j];
        for c in j + 1..p {
            acc -= work[j * p + c] * x[c];
        }
        x[j] = acc / work[j * p + j];
    }
    for (xj, s) in x.iter_mut().zip(&col_scale) {
        *xj *= *s;
    }
    Ok(x)
}
