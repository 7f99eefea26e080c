//! Sparse LDL^T factorization for symmetric quasi-definite matrices.
//!
//! The matrix is stored as its upper triangle in CSC form. Columns are
//! ordered once with approximate minimum degree; the symbolic analysis is
//! reused across numeric refactorizations with the same pattern, which is
//! what the interior-point loops need.

use crate::sparse::CscMat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdlError {
    #[error("zero pivot in LDL^T factorization at column {0}")]
    ZeroPivot(usize),
    #[error("matrix must be square upper-triangular, got entry ({0},{1})")]
    NotUpper(usize, usize),
    #[error("fill-reducing ordering failed")]
    Ordering,
}

pub struct LdlSolver {
    n: usize,
    /// perm[k] = original index of the k-th pivot.
    perm: Vec<usize>,
    iperm: Vec<usize>,
    /// Permuted upper-triangular pattern.
    bp: Vec<usize>,
    bi: Vec<usize>,
    /// Maps each nonzero of the caller's matrix to its slot in the permuted one.
    entry_map: Vec<usize>,
    bx: Vec<f64>,
    // Elimination tree and column counts of L.
    parent: Vec<isize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // Workspaces for the numeric factorization.
    ws_y: Vec<f64>,
    ws_marker: Vec<bool>,
    ws_yidx: Vec<usize>,
    ws_elim: Vec<usize>,
    ws_next: Vec<usize>,
    ws_rhs: Vec<f64>,
}

impl LdlSolver {
    /// Symbolic setup for the pattern of `a` (upper triangle, square).
    /// Every diagonal entry should be present so refactorization can always
    /// write a pivot.
    pub fn new(a: &CscMat) -> Result<Self, LdlError> {
        assert_eq!(a.n_rows, a.n_cols);
        let n = a.n_rows;
        for j in 0..n {
            for (i, _) in a.col(j) {
                if i > j {
                    return Err(LdlError::NotUpper(i, j));
                }
            }
        }
        let (perm, iperm) = amd_order(n, a)?;

        // Permuted pattern with provenance so numeric values can be scattered
        // into place on every refactorization.
        let nnz = a.nnz();
        let mut tagged: Vec<(usize, usize, usize)> = Vec::with_capacity(nnz); // (col, row, src)
        let mut src = 0;
        for j in 0..n {
            for (i, _) in a.col(j) {
                let (pi, pj) = (iperm[i], iperm[j]);
                let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
                tagged.push((c, r, src));
                src += 1;
            }
        }
        tagged.sort_unstable();
        let mut bp = vec![0usize; n + 1];
        let mut bi = Vec::with_capacity(nnz);
        let mut entry_map = vec![0usize; nnz];
        for &(c, r, s) in &tagged {
            // Patterns coming from the solvers are duplicate-free, so each
            // (r, c) appears once.
            entry_map[s] = bi.len();
            bi.push(r);
            bp[c + 1] += 1;
        }
        for j in 0..n {
            bp[j + 1] += bp[j];
        }

        let (parent, lnz) = etree(n, &bp, &bi)?;
        let mut lp = vec![0usize; n + 1];
        for j in 0..n {
            lp[j + 1] = lp[j] + lnz[j];
        }
        let lnnz = lp[n];

        Ok(LdlSolver {
            n,
            perm,
            iperm,
            bp,
            bi,
            entry_map,
            bx: vec![0.0; nnz],
            parent,
            lp,
            li: vec![0; lnnz],
            lx: vec![0.0; lnnz],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            ws_y: vec![0.0; n],
            ws_marker: vec![false; n],
            ws_yidx: vec![0; n],
            ws_elim: vec![0; n],
            ws_next: vec![0; n],
            ws_rhs: vec![0.0; n],
        })
    }

    /// Numeric factorization for new values laid out exactly like the pattern
    /// passed to [`LdlSolver::new`].
    pub fn factor(&mut self, values: &[f64]) -> Result<(), LdlError> {
        assert_eq!(values.len(), self.entry_map.len());
        for (s, &slot) in self.entry_map.iter().enumerate() {
            self.bx[slot] = values[s];
        }
        let n = self.n;
        self.ws_next.copy_from_slice(&self.lp[..n]);
        for v in self.ws_y.iter_mut() {
            *v = 0.0;
        }
        for m in self.ws_marker.iter_mut() {
            *m = false;
        }

        for k in 0..n {
            let mut nnz_y = 0usize;
            let mut dk = 0.0;
            for p in self.bp[k]..self.bp[k + 1] {
                let i = self.bi[p];
                let v = self.bx[p];
                if i == k {
                    dk += v;
                    continue;
                }
                self.ws_y[i] += v;
                if !self.ws_marker[i] {
                    self.ws_marker[i] = true;
                    self.ws_elim[0] = i;
                    let mut nnz_e = 1usize;
                    let mut node = self.parent[i];
                    while node != -1 && (node as usize) < k {
                        let nu = node as usize;
                        if self.ws_marker[nu] {
                            break;
                        }
                        self.ws_marker[nu] = true;
                        self.ws_elim[nnz_e] = nu;
                        nnz_e += 1;
                        node = self.parent[nu];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.ws_yidx[nnz_y] = self.ws_elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for t in (0..nnz_y).rev() {
                let c = self.ws_yidx[t];
                let yv = self.ws_y[c];
                let stop = self.ws_next[c];
                for q in self.lp[c]..stop {
                    self.ws_y[self.li[q]] -= self.lx[q] * yv;
                }
                let lkc = yv * self.dinv[c];
                self.li[stop] = k;
                self.lx[stop] = lkc;
                dk -= yv * lkc;
                self.ws_next[c] += 1;
                self.ws_y[c] = 0.0;
                self.ws_marker[c] = false;
            }
            if dk == 0.0 || !dk.is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.d[k] = dk;
            self.dinv[k] = 1.0 / dk;
        }
        Ok(())
    }

    /// Solves A x = b in place using the current factorization.
    pub fn solve(&mut self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let x = &mut self.ws_rhs;
        for k in 0..self.n {
            x[k] = b[self.perm[k]];
        }
        // L y = b
        for j in 0..self.n {
            let xj = x[j];
            if xj != 0.0 {
                for q in self.lp[j]..self.lp[j + 1] {
                    x[self.li[q]] -= self.lx[q] * xj;
                }
            }
        }
        for j in 0..self.n {
            x[j] *= self.dinv[j];
        }
        // L^T z = y
        for j in (0..self.n).rev() {
            let mut acc = x[j];
            for q in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[q] * x[self.li[q]];
            }
            x[j] = acc;
        }
        for k in 0..self.n {
            b[self.perm[k]] = x[k];
        }
    }

    /// Signs of the pivots, for inertia checks: (positive, negative).
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&v| v > 0.0).count();
        (pos, self.n - pos)
    }

    pub fn l_nnz(&self) -> usize {
        self.li.len()
    }

    pub fn iperm(&self) -> &[usize] {
        &self.iperm
    }
}

/// Elimination tree and per-column counts of L for an upper CSC pattern.
fn etree(n: usize, bp: &[usize], bi: &[usize]) -> Result<(Vec<isize>, Vec<usize>), LdlError> {
    let mut work = vec![usize::MAX; n];
    let mut parent = vec![-1isize; n];
    let mut lnz = vec![0usize; n];
    for j in 0..n {
        work[j] = j;
        for p in bp[j]..bp[j + 1] {
            let mut i = bi[p];
            if i > j {
                return Err(LdlError::NotUpper(i, j));
            }
            while work[i] != j {
                if parent[i] == -1 {
                    parent[i] = j as isize;
                }
                lnz[i] += 1;
                work[i] = j;
                i = parent[i] as usize;
            }
        }
    }
    Ok((parent, lnz))
}

fn amd_order(n: usize, a: &CscMat) -> Result<(Vec<usize>, Vec<usize>), LdlError> {
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let control = amd::Control::default();
    match amd::order::<usize>(n, &a.colptr, &a.rowind, &control) {
        Ok((p, pinv, _info)) => Ok((p, pinv)),
        Err(_) => Err(LdlError::Ordering),
    }
}
