//! Minimal compressed-sparse-column matrices for the interior-point solvers.

/// Sparse matrix in compressed sparse column format.
///
/// Row indices are sorted and unique within each column.
#[derive(Clone, Debug)]
pub struct CscMat {
    pub n_rows: usize,
    pub n_cols: usize,
    pub colptr: Vec<usize>,
    pub rowind: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMat {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        CscMat {
            n_rows,
            n_cols,
            colptr: vec![0; n_cols + 1],
            rowind: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.rowind.len()
    }

    /// Builds a matrix from (row, col, value) triplets. Duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_cols];
        for (r, c, v) in triplets {
            debug_assert!(r < n_rows && c < n_cols);
            cols[c].push((r, v));
        }
        let mut colptr = Vec::with_capacity(n_cols + 1);
        let mut rowind = Vec::new();
        let mut values = Vec::new();
        colptr.push(0);
        for col in cols.iter_mut() {
            col.sort_unstable_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for &(r, v) in col.iter() {
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    rowind.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            colptr.push(rowind.len());
        }
        CscMat {
            n_rows,
            n_cols,
            colptr,
            rowind,
            values,
        }
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.colptr[j];
        let hi = self.colptr[j + 1];
        self.rowind[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// y += alpha * A * x
    pub fn gaxpy(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for j in 0..self.n_cols {
            let xj = alpha * x[j];
            if xj == 0.0 {
                continue;
            }
            for (i, v) in self.col(j) {
                y[i] += v * xj;
            }
        }
    }

    /// y += alpha * A^T * x
    pub fn gaxpy_t(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_rows);
        debug_assert_eq!(y.len(), self.n_cols);
        for j in 0..self.n_cols {
            let mut acc = 0.0;
            for (i, v) in self.col(j) {
                acc += v * x[i];
            }
            y[j] += alpha * acc;
        }
    }

    /// y += alpha * A * x interpreting the stored upper triangle as a
    /// symmetric matrix (entries with row < col are mirrored).
    pub fn symmetric_gaxpy(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(self.n_rows, self.n_cols);
        for j in 0..self.n_cols {
            for (i, v) in self.col(j) {
                debug_assert!(i <= j, "matrix must be upper triangular");
                y[i] += alpha * v * x[j];
                if i != j {
                    y[j] += alpha * v * x[i];
                }
            }
        }
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
