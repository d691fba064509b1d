//! Small dense/sparse kernels shared by the pure operations and the tape.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Zip};

/// Numerically stable softmax of every row.
pub fn row_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

/// `z`-th power by repeated multiplication; `z = 0` gives the identity.
pub fn matrix_power(m: &Array2<f64>, z: usize) -> Array2<f64> {
    let mut acc = Array2::eye(m.nrows());
    for _ in 0..z {
        acc = acc.dot(m);
    }
    acc
}

/// Compressed sparse row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn from_dense(m: &Array2<f64>) -> Self {
        let n = m.nrows();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        offsets.push(0);
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        Self {
            n,
            offsets,
            cols,
            vals,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }
}

/// A fixed square operator applied on the left of node-feature blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum MixMatrix {
    Dense(Array2<f64>),
    Sparse(Csr),
}

impl MixMatrix {
    /// Stores `m` sparsely when at most a quarter of its entries are nonzero.
    pub fn new(m: Array2<f64>) -> Self {
        let nnz = m.iter().filter(|v| **v != 0.0).count();
        if nnz * 4 <= m.len() {
            MixMatrix::Sparse(Csr::from_dense(&m))
        } else {
            MixMatrix::Dense(m)
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MixMatrix::Dense(m) => m.nrows(),
            MixMatrix::Sparse(c) => c.n,
        }
    }

    /// `out = M · x`
    pub fn apply_into(&self, x: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
        match self {
            MixMatrix::Dense(m) => general_mat_mul(1.0, m, &x, 0.0, &mut out),
            MixMatrix::Sparse(c) => {
                out.fill(0.0);
                for i in 0..c.n {
                    let mut row = out.row_mut(i);
                    for p in c.offsets[i]..c.offsets[i + 1] {
                        row.scaled_add(c.vals[p], &x.row(c.cols[p]));
                    }
                }
            }
        }
    }

    /// `out = Mᵀ · x`
    pub fn apply_transpose_into(&self, x: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
        match self {
            MixMatrix::Dense(m) => general_mat_mul(1.0, &m.t(), &x, 0.0, &mut out),
            MixMatrix::Sparse(c) => {
                out.fill(0.0);
                for i in 0..c.n {
                    let src = x.row(i);
                    for p in c.offsets[i]..c.offsets[i + 1] {
                        out.row_mut(c.cols[p]).scaled_add(c.vals[p], &src);
                    }
                }
            }
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        self.apply_into(x, out.view_mut());
        out
    }
}

pub(crate) fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0f64, |acc, x, y| acc.max((x - y).abs()))
}
