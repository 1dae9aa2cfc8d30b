//! Dense Cholesky factorisation for the Schur complement.
//!
//! Near the optimum of degenerate SDPs the Schur complement is singular to
//! working precision. When a pivot collapses the factorisation is retried
//! with a growing relative diagonal shift; callers refine the solution
//! against the unshifted operator.

use nalgebra::{DMatrix, DVector};

const PIVOT_RATIO: f64 = 1e-14;
const FIRST_SHIFT: f64 = 1e-13;
const MAX_SHIFT: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct DenseCholesky {
    n: usize,
    /// Row-major lower triangle, row `i` occupies `l[i*n .. i*n + i + 1]`.
    l: Vec<f64>,
    /// Relative diagonal shift that was applied, zero if none.
    pub shift: f64,
}

impl DenseCholesky {
    /// Factors a symmetric matrix, shifting the diagonal by a multiple of
    /// itself if needed. Returns `None` for non-finite input or when even the
    /// largest shift fails.
    pub fn factor(a: &DMatrix<f64>) -> Option<Self> {
        let mut shift = 0.0;
        loop {
            match Self::try_factor(a, shift) {
                Ok(c) => return Some(c),
                Err(false) => return None,
                Err(true) => {
                    shift = if shift == 0.0 { FIRST_SHIFT } else { shift * 100.0 };
                    if shift > MAX_SHIFT {
                        return None;
                    }
                }
            }
        }
    }

    /// `Err(true)` signals a collapsed pivot, `Err(false)` non-finite data.
    fn try_factor(a: &DMatrix<f64>, shift: f64) -> Result<Self, bool> {
        let n = a.nrows();
        let mut l = vec![0.0; n * n];
        // column-major input, symmetric: row i of the lower triangle is column i
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = a[(j, i)];
            }
            l[i * n + i] *= 1.0 + shift;
        }
        for i in 0..n {
            let (done, rest) = l.split_at_mut(i * n);
            let row_i = &mut rest[..=i];
            for j in 0..i {
                let row_j = &done[j * n..j * n + j + 1];
                let dot: f64 = dot(&row_i[..j], &row_j[..j]);
                row_i[j] = (row_i[j] - dot) / row_j[j];
            }
            let orig = row_i[i];
            let d = orig - dot(&row_i[..i], &row_i[..i]);
            if !d.is_finite() {
                return Err(false);
            }
            if d <= PIVOT_RATIO * orig.abs().max(f64::MIN_POSITIVE) {
                return Err(true);
            }
            row_i[i] = d.sqrt();
        }
        Ok(DenseCholesky { n, l, shift })
    }

    /// `L^-1 b`
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x = b.clone();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i + 1];
            let s = dot(&row[..i], &x.as_slice()[..i]);
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// `L^-T b`
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut x = b.clone();
        for i in (0..n).rev() {
            let row = &self.l[i * n..i * n + i + 1];
            x[i] /= row[i];
            let xi = x[i];
            for (k, &v) in row[..i].iter().enumerate() {
                x[k] -= v * xi;
            }
        }
        x
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `L^-1 B` column by column.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col = self.solve_lower(&b.column(c).into_owned());
            out.set_column(c, &col);
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorises
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}
