//! Sparse convex quadratic programming via ADMM operator splitting.
//!
//! Solves
//! ```text
//!     minimize   ½ xᵀP x + qᵀx
//!     subject to l ≤ A x ≤ u
//! ```
//! with `P` symmetric positive semidefinite.  Each iteration solves one
//! quasi-definite KKT system whose sparse LDLᵀ factorization is cached across
//! iterations (refreshed only when the step parameter ρ changes), projects the
//! auxiliary variable onto the bound box, and over-relaxes the update.  Ruiz
//! equilibration conditions the data, residual balancing adapts ρ, divergence
//! of the iterates yields primal/dual infeasibility certificates, and an
//! active-set polish step refines solved problems to near machine precision.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use thiserror::Error;

/// Bound magnitudes at or above this value are treated as infinite.
pub const QP_INF: f64 = 1e30;

const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// ρ multiplier for equality rows (l == u), which want aggressive enforcement.
const RHO_EQ_SCALE: f64 = 1e3;
/// Residual-ratio threshold beyond which ρ is re-balanced.
const RHO_ADAPT_RATIO: f64 = 5.0;
const DIV_GUARD: f64 = 1e-30;

/// Errors from problem construction, factorization, or the dump format.
#[derive(Debug, Error)]
pub enum QpError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("lower bound exceeds upper bound at row {0}")]
    BoundsOrder(usize),
    #[error("cost matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("triplet index ({0}, {1}) out of bounds")]
    TripletIndex(usize, usize),
    #[error("KKT factorization hit a zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("parse error at line {0}: {1}")]
    Parse(usize, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Compressed sparse column storage
// ---------------------------------------------------------------------------

/// Compressed-sparse-column matrix with sorted, deduplicated row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_ind: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_ind: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_ind: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from (row, col, value) triplets; duplicate coordinates are
    /// summed, explicit zeros are kept (they pin the sparsity pattern).
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, QpError> {
        for &(r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(QpError::TripletIndex(r, c));
            }
            if !v.is_finite() {
                return Err(QpError::NonFinite("triplet value"));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_ind = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut i = 0;
        while i < sorted.len() {
            let (r, c, mut v) = sorted[i];
            let mut j = i + 1;
            while j < sorted.len() && sorted[j].0 == r && sorted[j].1 == c {
                v += sorted[j].2;
                j += 1;
            }
            row_ind.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            i = j;
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_ind,
            values,
        })
    }

    /// Dense conversion helper; exact zeros are dropped.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut trip = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    trip.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &trip).expect("finite dense input")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[(self.row_ind[p], j)] += self.values[p];
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// y = A·x
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols, "matvec dimension");
        let mut y = DVector::zeros(self.nrows);
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_ind[p]] += self.values[p] * xj;
            }
        }
        y
    }

    /// y = Aᵀ·x
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows, "matvec dimension");
        let mut y = DVector::zeros(self.ncols);
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[p] * x[self.row_ind[p]];
            }
            y[j] = acc;
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                trip.push((j, self.row_ind[p], self.values[p]));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, &trip).expect("transpose of valid matrix")
    }

    /// Entry lookup by binary search within a column.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        match self.row_ind[lo..hi].binary_search(&row) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_ind[p];
                if (self.values[p] - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    fn col_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.ncols];
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[j] = out[j].max(self.values[p].abs());
            }
        }
        out
    }

    fn row_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.nrows];
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_ind[p];
                out[i] = out[i].max(self.values[p].abs());
            }
        }
        out
    }

    /// Per-row list of (col, value); used by the polish step.
    fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.nrows];
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_ind[p]].push((j, self.values[p]));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Problem, settings, solution
// ---------------------------------------------------------------------------

/// Sparse convex QP data: ½xᵀPx + qᵀx subject to l ≤ Ax ≤ u.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p_mat: CscMatrix,
    pub q_vec: DVector<f64>,
    pub a_mat: CscMatrix,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Validates dimensions, finiteness, symmetry of `p_mat`, and bound order.
    /// Infinite bounds are mapped onto the ±`QP_INF` sentinels.
    pub fn new(
        p_mat: CscMatrix,
        q_vec: DVector<f64>,
        a_mat: CscMatrix,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = p_mat.nrows;
        if n == 0 {
            return Err(QpError::Dimension {
                what: "variable count",
                expected: 1,
                got: 0,
            });
        }
        if p_mat.ncols != n {
            return Err(QpError::Dimension {
                what: "p_mat columns",
                expected: n,
                got: p_mat.ncols,
            });
        }
        if q_vec.len() != n {
            return Err(QpError::Dimension {
                what: "q_vec length",
                expected: n,
                got: q_vec.len(),
            });
        }
        if a_mat.ncols != n {
            return Err(QpError::Dimension {
                what: "a_mat columns",
                expected: n,
                got: a_mat.ncols,
            });
        }
        let m = a_mat.nrows;
        if lower.len() != m {
            return Err(QpError::Dimension {
                what: "lower length",
                expected: m,
                got: lower.len(),
            });
        }
        if upper.len() != m {
            return Err(QpError::Dimension {
                what: "upper length",
                expected: m,
                got: upper.len(),
            });
        }
        if p_mat.values.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("p_mat"));
        }
        if q_vec.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q_vec"));
        }
        if a_mat.values.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("a_mat"));
        }
        if lower.iter().any(|v| v.is_nan()) || upper.iter().any(|v| v.is_nan()) {
            return Err(QpError::NonFinite("bounds"));
        }
        if !p_mat.is_symmetric(1e-12) {
            // locate one offending pair for the error message
            for j in 0..n {
                for p in p_mat.col_ptr[j]..p_mat.col_ptr[j + 1] {
                    let i = p_mat.row_ind[p];
                    if (p_mat.values[p] - p_mat.get(j, i)).abs() > 1e-12 {
                        return Err(QpError::NotSymmetric(i, j));
                    }
                }
            }
            return Err(QpError::NotSymmetric(0, 0));
        }
        let lower = lower.map(|v| v.clamp(-QP_INF, QP_INF));
        let upper = upper.map(|v| v.clamp(-QP_INF, QP_INF));
        for i in 0..m {
            if lower[i] > upper[i] {
                return Err(QpError::BoundsOrder(i));
            }
        }
        Ok(Self {
            p_mat,
            q_vec,
            a_mat,
            lower,
            upper,
        })
    }

    /// Dense-input convenience constructor for tests and small problems.
    pub fn from_dense(
        p: &DMatrix<f64>,
        q: &DVector<f64>,
        a: &DMatrix<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> Result<Self, QpError> {
        Self::new(
            CscMatrix::from_dense(p),
            q.clone(),
            CscMatrix::from_dense(a),
            lower.clone(),
            upper.clone(),
        )
    }

    pub fn num_vars(&self) -> usize {
        self.p_mat.nrows
    }

    pub fn num_constraints(&self) -> usize {
        self.a_mat.nrows
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.p_mat.mul_vec(x)) + self.q_vec.dot(x)
    }
}

/// ADMM parameters; defaults follow the usual operator-splitting choices.
#[derive(Debug, Clone)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    pub max_iter: usize,
    pub check_interval: usize,
    pub adaptive_rho: bool,
    pub scaling_iters: usize,
    pub polish: bool,
    pub polish_delta: f64,
    pub polish_refine_iters: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-5,
            eps_rel: 1e-5,
            eps_prim_inf: 1e-5,
            eps_dual_inf: 1e-5,
            max_iter: 20_000,
            check_interval: 25,
            adaptive_rho: true,
            scaling_iters: 10,
            polish: true,
            polish_delta: 1e-7,
            polish_refine_iters: 3,
        }
    }
}

/// Solve outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::PrimalInfeasible => "primal_infeasible",
            QpStatus::DualInfeasible => "dual_infeasible",
        };
        f.write_str(s)
    }
}

/// Primal/dual solution with the residuals at termination.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub objective: f64,
    pub polished: bool,
}

// ---------------------------------------------------------------------------
// Fill-reducing ordering and LDLᵀ factorization
// ---------------------------------------------------------------------------

const UNKNOWN: usize = usize::MAX;

/// Reverse Cuthill–McKee ordering over an undirected adjacency structure;
/// returns `perm` with `perm[new] = old`.
fn rcm_ordering(n: usize, adj: &[Vec<usize>]) -> Vec<usize> {
    let deg: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    loop {
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (deg[i], i));
        let Some(start) = start else { break };
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (deg[w], w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Elimination tree and per-column fill counts of the Cholesky factor of an
/// upper-triangular CSC matrix.
struct LdlSymbolic {
    etree: Vec<usize>,
    l_colptr: Vec<usize>,
}

fn ldl_symbolic(upper: &CscMatrix) -> Result<LdlSymbolic, QpError> {
    let n = upper.ncols;
    let mut etree = vec![UNKNOWN; n];
    let mut lnz = vec![0usize; n];
    let mut work = vec![UNKNOWN; n];
    for j in 0..n {
        work[j] = j;
        for p in upper.col_ptr[j]..upper.col_ptr[j + 1] {
            let mut i = upper.row_ind[p];
            debug_assert!(i <= j, "matrix must be upper triangular");
            while i < j && work[i] != j {
                if etree[i] == UNKNOWN {
                    etree[i] = j;
                }
                lnz[i] += 1;
                work[i] = j;
                i = etree[i];
            }
        }
    }
    let mut l_colptr = vec![0usize; n + 1];
    for i in 0..n {
        l_colptr[i + 1] = l_colptr[i] + lnz[i];
    }
    Ok(LdlSymbolic { etree, l_colptr })
}

/// Strictly-lower-triangular factor L and diagonal D with K = L·D·Lᵀ.
struct LdlFactor {
    l_colptr: Vec<usize>,
    l_rowind: Vec<usize>,
    l_values: Vec<f64>,
    d_inv: Vec<f64>,
}

/// Up-looking LDLᵀ of an upper-triangular CSC matrix with full diagonal.
/// Works for symmetric quasi-definite inputs without pivoting.
fn ldl_numeric(upper: &CscMatrix, sym: &LdlSymbolic) -> Result<LdlFactor, QpError> {
    let n = upper.ncols;
    let total = sym.l_colptr[n];
    let mut l_rowind = vec![0usize; total];
    let mut l_values = vec![0.0; total];
    let mut d = vec![0.0; n];
    let mut d_inv = vec![0.0; n];
    let mut next_in_col = sym.l_colptr[..n].to_vec();
    let mut y_vals = vec![0.0; n];
    let mut y_marked = vec![false; n];
    let mut y_idx = vec![0usize; n];
    let mut elim = vec![0usize; n];
    for k in 0..n {
        let lo = upper.col_ptr[k];
        let hi = upper.col_ptr[k + 1];
        if hi == lo || upper.row_ind[hi - 1] != k {
            return Err(QpError::ZeroPivot(k));
        }
        d[k] = upper.values[hi - 1];
        let mut nnz_y = 0usize;
        for p in lo..hi - 1 {
            let i = upper.row_ind[p];
            y_vals[i] = upper.values[p];
            if !y_marked[i] {
                y_marked[i] = true;
                elim[0] = i;
                let mut nnz_e = 1usize;
                let mut next = sym.etree[i];
                while next != UNKNOWN && next < k {
                    if y_marked[next] {
                        break;
                    }
                    y_marked[next] = true;
                    elim[nnz_e] = next;
                    nnz_e += 1;
                    next = sym.etree[next];
                }
                while nnz_e > 0 {
                    nnz_e -= 1;
                    y_idx[nnz_y] = elim[nnz_e];
                    nnz_y += 1;
                }
            }
        }
        while nnz_y > 0 {
            let cidx = y_idx[nnz_y - 1];
            let stop = next_in_col[cidx];
            let yv = y_vals[cidx];
            for p in sym.l_colptr[cidx]..stop {
                y_vals[l_rowind[p]] -= l_values[p] * yv;
            }
            l_rowind[stop] = k;
            let lkj = yv * d_inv[cidx];
            l_values[stop] = lkj;
            d[k] -= yv * lkj;
            next_in_col[cidx] = stop + 1;
            y_vals[cidx] = 0.0;
            y_marked[cidx] = false;
            nnz_y -= 1;
        }
        if d[k] == 0.0 {
            return Err(QpError::ZeroPivot(k));
        }
        d_inv[k] = 1.0 / d[k];
    }
    Ok(LdlFactor {
        l_colptr: sym.l_colptr.clone(),
        l_rowind,
        l_values,
        d_inv,
    })
}

impl LdlFactor {
    /// In-place solve of L·D·Lᵀ x = b.
    fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.d_inv.len();
        for j in 0..n {
            let xj = b[j];
            if xj != 0.0 {
                for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                    b[self.l_rowind[p]] -= self.l_values[p] * xj;
                }
            }
        }
        for j in 0..n {
            b[j] *= self.d_inv[j];
        }
        for j in (0..n).rev() {
            let mut xj = b[j];
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                xj -= self.l_values[p] * b[self.l_rowind[p]];
            }
            b[j] = xj;
        }
    }
}

/// Symmetric permutation of an upper-triangular matrix; the result is again
/// upper triangular under `pinv[old] = new`.
fn permute_upper(upper: &CscMatrix, pinv: &[usize]) -> CscMatrix {
    let mut trip = Vec::with_capacity(upper.nnz());
    for j in 0..upper.ncols {
        for p in upper.col_ptr[j]..upper.col_ptr[j + 1] {
            let i = upper.row_ind[p];
            let (a, b) = (pinv[i], pinv[j]);
            let (r, c) = if a <= b { (a, b) } else { (b, a) };
            trip.push((r, c, upper.values[p]));
        }
    }
    CscMatrix::from_triplets(upper.nrows, upper.ncols, &trip).expect("permutation of valid matrix")
}

/// Adjacency of the symmetric pattern of an upper-triangular matrix.
fn upper_adjacency(upper: &CscMatrix) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); upper.ncols];
    for j in 0..upper.ncols {
        for p in upper.col_ptr[j]..upper.col_ptr[j + 1] {
            let i = upper.row_ind[p];
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// One-shot fill-reduced LDLᵀ solve context for a fixed symmetric matrix.
struct PermutedLdl {
    perm: Vec<usize>,
    fac: LdlFactor,
    work: Vec<f64>,
}

impl PermutedLdl {
    fn new(upper: &CscMatrix) -> Result<Self, QpError> {
        let adj = upper_adjacency(upper);
        let perm = rcm_ordering(upper.ncols, &adj);
        let mut pinv = vec![0usize; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        let permuted = permute_upper(upper, &pinv);
        let sym = ldl_symbolic(&permuted)?;
        let fac = ldl_numeric(&permuted, &sym)?;
        Ok(Self {
            perm,
            fac,
            work: vec![0.0; upper.ncols],
        })
    }

    fn solve(&mut self, rhs: &[f64], out: &mut [f64]) {
        for (new, &old) in self.perm.iter().enumerate() {
            self.work[new] = rhs[old];
        }
        self.fac.solve_in_place(&mut self.work);
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = self.work[new];
        }
    }
}

// ---------------------------------------------------------------------------
// KKT assembly with value-source tracking
// ---------------------------------------------------------------------------

/// Where a KKT nonzero draws its value from; lists let duplicates share slots.
#[derive(Debug, Clone, Copy)]
enum KktSource {
    PVal(usize),
    AVal(usize),
    Sigma,
    RhoInv(usize),
}

/// Permuted upper-triangular KKT matrix
/// `[[P + σI, Aᵀ], [A, −diag(1/ρ)]]` whose values can be refreshed in place
/// when ρ changes, keeping the symbolic factorization valid.
struct KktMap {
    mat: CscMatrix,
    sources: Vec<Vec<KktSource>>,
    perm: Vec<usize>,
}

impl KktMap {
    fn build(p_scaled: &CscMatrix, a_scaled: &CscMatrix) -> Self {
        let n = p_scaled.ncols;
        let m = a_scaled.nrows;
        let dim = n + m;
        let mut trip: Vec<(usize, usize, KktSource)> = Vec::new();
        for j in 0..n {
            for p in p_scaled.col_ptr[j]..p_scaled.col_ptr[j + 1] {
                let i = p_scaled.row_ind[p];
                if i <= j {
                    trip.push((i, j, KktSource::PVal(p)));
                }
            }
        }
        for i in 0..n {
            trip.push((i, i, KktSource::Sigma));
        }
        for j in 0..n {
            for p in a_scaled.col_ptr[j]..a_scaled.col_ptr[j + 1] {
                trip.push((j, n + a_scaled.row_ind[p], KktSource::AVal(p)));
            }
        }
        for r in 0..m {
            trip.push((n + r, n + r, KktSource::RhoInv(r)));
        }
        let mut adj = vec![Vec::new(); dim];
        for &(i, j, _) in &trip {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        let perm = rcm_ordering(dim, &adj);
        let mut pinv = vec![0usize; dim];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        let mut permuted: Vec<(usize, usize, KktSource)> = trip
            .into_iter()
            .map(|(i, j, s)| {
                let (a, b) = (pinv[i], pinv[j]);
                if a <= b {
                    (a, b, s)
                } else {
                    (b, a, s)
                }
            })
            .collect();
        permuted.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
        let mut col_ptr = vec![0usize; dim + 1];
        let mut row_ind = Vec::new();
        let mut sources: Vec<Vec<KktSource>> = Vec::new();
        let mut i = 0;
        while i < permuted.len() {
            let (r, c, _) = permuted[i];
            let mut srcs = Vec::new();
            let mut j = i;
            while j < permuted.len() && permuted[j].0 == r && permuted[j].1 == c {
                srcs.push(permuted[j].2);
                j += 1;
            }
            row_ind.push(r);
            sources.push(srcs);
            col_ptr[c + 1] += 1;
            i = j;
        }
        for c in 0..dim {
            col_ptr[c + 1] += col_ptr[c];
        }
        let values = vec![0.0; row_ind.len()];
        KktMap {
            mat: CscMatrix {
                nrows: dim,
                ncols: dim,
                col_ptr,
                row_ind,
                values,
            },
            sources,
            perm,
        }
    }

    fn refresh(&mut self, p_scaled: &CscMatrix, a_scaled: &CscMatrix, sigma: f64, rho: &[f64]) {
        for (slot, srcs) in self.sources.iter().enumerate() {
            let mut v = 0.0;
            for s in srcs {
                v += match *s {
                    KktSource::PVal(p) => p_scaled.values[p],
                    KktSource::AVal(p) => a_scaled.values[p],
                    KktSource::Sigma => sigma,
                    KktSource::RhoInv(r) => -1.0 / rho[r],
                };
            }
            self.mat.values[slot] = v;
        }
    }
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

fn limit_scaling(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

fn scale_bound(b: f64, s: f64) -> f64 {
    if b.abs() >= QP_INF {
        b
    } else {
        (s * b).clamp(-QP_INF, QP_INF)
    }
}

/// Persistent solver: holds the scaling, the KKT factorization, and the
/// iterates, so repeated solves of same-pattern problems stay warm.
pub struct QpSolver {
    prob: QpProblem,
    set: QpSettings,
    n: usize,
    m: usize,
    // Ruiz scaling: x = d ∘ x̄, y = (e ∘ ȳ)/c, z = z̄ ⊘ e
    d: DVector<f64>,
    e: DVector<f64>,
    cost_scale: f64,
    p_s: CscMatrix,
    q_s: DVector<f64>,
    a_s: CscMatrix,
    l_s: DVector<f64>,
    u_s: DVector<f64>,
    rho_bar: f64,
    rho: Vec<f64>,
    kkt: KktMap,
    sym: LdlSymbolic,
    fac: LdlFactor,
    // scaled iterates
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
}

impl QpSolver {
    pub fn new(prob: QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        let n = prob.num_vars();
        let m = prob.num_constraints();
        let mut p_s = prob.p_mat.clone();
        let mut q_s = prob.q_vec.clone();
        let mut a_s = prob.a_mat.clone();
        let mut l_s = prob.lower.clone();
        let mut u_s = prob.upper.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut cost_scale = 1.0;
        for _ in 0..settings.scaling_iters {
            let col_p = p_s.col_inf_norms();
            let col_a = a_s.col_inf_norms();
            let row_a = a_s.row_inf_norms();
            let mut dd = vec![1.0; n];
            for j in 0..n {
                dd[j] = 1.0 / limit_scaling(col_p[j].max(col_a[j])).sqrt();
            }
            let mut ee = vec![1.0; m];
            for i in 0..m {
                ee[i] = 1.0 / limit_scaling(row_a[i]).sqrt();
            }
            for j in 0..n {
                for p in p_s.col_ptr[j]..p_s.col_ptr[j + 1] {
                    p_s.values[p] *= dd[p_s.row_ind[p]] * dd[j];
                }
                q_s[j] *= dd[j];
            }
            for j in 0..n {
                for p in a_s.col_ptr[j]..a_s.col_ptr[j + 1] {
                    a_s.values[p] *= ee[a_s.row_ind[p]] * dd[j];
                }
            }
            for i in 0..m {
                l_s[i] = scale_bound(l_s[i], ee[i]);
                u_s[i] = scale_bound(u_s[i], ee[i]);
                e[i] *= ee[i];
            }
            for j in 0..n {
                d[j] *= dd[j];
            }
            // cost normalization
            let col_p2 = p_s.col_inf_norms();
            let mean_p = if n > 0 {
                col_p2.iter().sum::<f64>() / n as f64
            } else {
                0.0
            };
            let g = 1.0 / limit_scaling(mean_p.max(inf_norm(&q_s)));
            for v in &mut p_s.values {
                *v *= g;
            }
            q_s *= g;
            cost_scale *= g;
        }
        let rho_bar = settings.rho;
        let rho = Self::rho_vector(rho_bar, &prob.lower, &prob.upper);
        let mut kkt = KktMap::build(&p_s, &a_s);
        kkt.refresh(&p_s, &a_s, settings.sigma, &rho);
        let sym = ldl_symbolic(&kkt.mat)?;
        let fac = ldl_numeric(&kkt.mat, &sym)?;
        Ok(Self {
            n,
            m,
            d,
            e,
            cost_scale,
            p_s,
            q_s,
            a_s,
            l_s,
            u_s,
            rho_bar,
            rho,
            kkt,
            sym,
            fac,
            x: DVector::zeros(n),
            y: DVector::zeros(m),
            z: DVector::zeros(m),
            prob,
            set: settings,
        })
    }

    /// Per-row step parameters: equality rows get a stiff ρ, rows with both
    /// bounds infinite get the loosest.
    fn rho_vector(rho_bar: f64, lower: &DVector<f64>, upper: &DVector<f64>) -> Vec<f64> {
        (0..lower.len())
            .map(|i| {
                if lower[i] <= -QP_INF && upper[i] >= QP_INF {
                    RHO_MIN
                } else if lower[i] == upper[i] {
                    (rho_bar * RHO_EQ_SCALE).clamp(RHO_MIN, RHO_MAX)
                } else {
                    rho_bar.clamp(RHO_MIN, RHO_MAX)
                }
            })
            .collect()
    }

    /// Seeds the iterates from an unscaled primal/dual guess.
    pub fn warm_start(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        assert_eq!(x.len(), self.n, "warm start x length");
        assert_eq!(y.len(), self.m, "warm start y length");
        for j in 0..self.n {
            self.x[j] = x[j] / self.d[j];
        }
        for i in 0..self.m {
            self.y[i] = y[i] * self.cost_scale / self.e[i];
        }
        let ax = self.a_s.mul_vec(&self.x);
        for i in 0..self.m {
            self.z[i] = ax[i].clamp(self.l_s[i], self.u_s[i]);
        }
    }

    /// Replaces the linear cost; scaling and factorization are reused.
    pub fn update_linear_cost(&mut self, q: &DVector<f64>) -> Result<(), QpError> {
        if q.len() != self.n {
            return Err(QpError::Dimension {
                what: "q_vec length",
                expected: self.n,
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q_vec"));
        }
        self.prob.q_vec = q.clone();
        for j in 0..self.n {
            self.q_s[j] = q[j] * self.d[j] * self.cost_scale;
        }
        Ok(())
    }

    /// Replaces the bounds; equality/inequality row classes must not change
    /// if the cached ρ vector is to stay meaningful, so it is recomputed.
    pub fn update_bounds(&mut self, lower: &DVector<f64>, upper: &DVector<f64>) -> Result<(), QpError> {
        if lower.len() != self.m || upper.len() != self.m {
            return Err(QpError::Dimension {
                what: "bounds length",
                expected: self.m,
                got: lower.len().max(upper.len()),
            });
        }
        if lower.iter().any(|v| v.is_nan()) || upper.iter().any(|v| v.is_nan()) {
            return Err(QpError::NonFinite("bounds"));
        }
        let lower = lower.map(|v| v.clamp(-QP_INF, QP_INF));
        let upper = upper.map(|v| v.clamp(-QP_INF, QP_INF));
        for i in 0..self.m {
            if lower[i] > upper[i] {
                return Err(QpError::BoundsOrder(i));
            }
        }
        for i in 0..self.m {
            self.l_s[i] = scale_bound(lower[i], self.e[i]);
            self.u_s[i] = scale_bound(upper[i], self.e[i]);
        }
        self.prob.lower = lower;
        self.prob.upper = upper;
        self.rho = Self::rho_vector(self.rho_bar, &self.prob.lower, &self.prob.upper);
        self.kkt
            .refresh(&self.p_s, &self.a_s, self.set.sigma, &self.rho);
        self.fac = ldl_numeric(&self.kkt.mat, &self.sym)?;
        Ok(())
    }

    fn unscaled_iterates(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let x = DVector::from_fn(self.n, |j, _| self.x[j] * self.d[j]);
        let y = DVector::from_fn(self.m, |i, _| self.y[i] * self.e[i] / self.cost_scale);
        let z = DVector::from_fn(self.m, |i, _| {
            if self.z[i].abs() >= QP_INF {
                self.z[i]
            } else {
                self.z[i] / self.e[i]
            }
        });
        (x, y, z)
    }

    /// Unscaled primal/dual residuals and their relative scales.
    fn residuals(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> (f64, f64, f64, f64) {
        let ax = self.prob.a_mat.mul_vec(x);
        let px = self.prob.p_mat.mul_vec(x);
        let aty = self.prob.a_mat.tr_mul_vec(y);
        let prim = inf_norm(&(&ax - z));
        let dual = inf_norm(&(&px + &self.prob.q_vec + &aty));
        let prim_scale = inf_norm(&ax).max(inf_norm(z));
        let dual_scale = inf_norm(&px)
            .max(inf_norm(&aty))
            .max(inf_norm(&self.prob.q_vec));
        (prim, dual, prim_scale, dual_scale)
    }

    fn primal_infeasibility_certificate(&self, dy: &DVector<f64>) -> bool {
        let nrm = inf_norm(dy);
        if nrm <= DIV_GUARD {
            return false;
        }
        let eps = self.set.eps_prim_inf * nrm;
        let mut support = 0.0;
        for i in 0..self.m {
            let dp = dy[i].max(0.0);
            let dm = dy[i].min(0.0);
            if self.prob.upper[i] >= QP_INF {
                if dp > eps {
                    return false;
                }
            } else {
                support += self.prob.upper[i] * dp;
            }
            if self.prob.lower[i] <= -QP_INF {
                if dm < -eps {
                    return false;
                }
            } else {
                support += self.prob.lower[i] * dm;
            }
        }
        support <= -eps && inf_norm(&self.prob.a_mat.tr_mul_vec(dy)) <= eps
    }

    fn dual_infeasibility_certificate(&self, dx: &DVector<f64>) -> bool {
        let nrm = inf_norm(dx);
        if nrm <= DIV_GUARD {
            return false;
        }
        let eps = self.set.eps_dual_inf * nrm;
        if self.prob.q_vec.dot(dx) > -eps {
            return false;
        }
        if inf_norm(&self.prob.p_mat.mul_vec(dx)) > eps {
            return false;
        }
        let adx = self.prob.a_mat.mul_vec(dx);
        for i in 0..self.m {
            if self.prob.upper[i] < QP_INF && adx[i] > eps {
                return false;
            }
            if self.prob.lower[i] > -QP_INF && adx[i] < -eps {
                return false;
            }
        }
        true
    }

    /// Runs ADMM from the current iterates.
    pub fn solve(&mut self) -> Result<QpSolution, QpError> {
        let n = self.n;
        let m = self.m;
        let set = self.set.clone();
        let mut rhs = vec![0.0; n + m];
        let mut sol = vec![0.0; n + m];
        let mut work = vec![0.0; n + m];
        let mut status = QpStatus::MaxIter;
        let mut iterations = set.max_iter;
        let mut last_prim = f64::INFINITY;
        let mut last_dual = f64::INFINITY;
        for iter in 1..=set.max_iter {
            // x-update: regularized KKT solve
            for j in 0..n {
                rhs[j] = set.sigma * self.x[j] - self.q_s[j];
            }
            for i in 0..m {
                rhs[n + i] = self.z[i] - self.y[i] / self.rho[i];
            }
            for (new, &old) in self.kkt.perm.iter().enumerate() {
                work[new] = rhs[old];
            }
            self.fac.solve_in_place(&mut work);
            for (new, &old) in self.kkt.perm.iter().enumerate() {
                sol[old] = work[new];
            }
            // over-relaxed updates
            let mut dx_inf = 0.0f64;
            for j in 0..n {
                let x_next = set.alpha * sol[j] + (1.0 - set.alpha) * self.x[j];
                dx_inf = dx_inf.max((x_next - self.x[j]).abs());
                rhs[j] = x_next; // reuse rhs as x_next staging
            }
            let mut dy = DVector::zeros(m);
            for i in 0..m {
                let nu = sol[n + i];
                let zt = self.z[i] + (nu - self.y[i]) / self.rho[i];
                let zr = set.alpha * zt + (1.0 - set.alpha) * self.z[i];
                let z_next = (zr + self.y[i] / self.rho[i]).clamp(self.l_s[i], self.u_s[i]);
                let y_next = self.y[i] + self.rho[i] * (zr - z_next);
                dy[i] = y_next - self.y[i];
                self.z[i] = z_next;
                self.y[i] = y_next;
            }
            let mut dx = DVector::zeros(n);
            for j in 0..n {
                dx[j] = rhs[j] - self.x[j];
                self.x[j] = rhs[j];
            }
            if iter == 1 || iter % set.check_interval == 0 {
                let (x_u, y_u, z_u) = self.unscaled_iterates();
                let (prim, dual, prim_scale, dual_scale) = self.residuals(&x_u, &y_u, &z_u);
                last_prim = prim;
                last_dual = dual;
                let eps_prim = set.eps_abs + set.eps_rel * prim_scale;
                let eps_dual = set.eps_abs + set.eps_rel * dual_scale;
                if prim <= eps_prim && dual <= eps_dual {
                    status = QpStatus::Solved;
                    iterations = iter;
                    break;
                }
                // unscale the iterate deltas for the certificates
                let dy_u = DVector::from_fn(m, |i, _| dy[i] * self.e[i] / self.cost_scale);
                if self.primal_infeasibility_certificate(&dy_u) {
                    status = QpStatus::PrimalInfeasible;
                    iterations = iter;
                    break;
                }
                let dx_u = DVector::from_fn(n, |j, _| dx[j] * self.d[j]);
                if self.dual_infeasibility_certificate(&dx_u) {
                    status = QpStatus::DualInfeasible;
                    iterations = iter;
                    break;
                }
                if set.adaptive_rho && iter % set.check_interval == 0 {
                    let rel_prim = prim / prim_scale.max(DIV_GUARD);
                    let rel_dual = dual / dual_scale.max(DIV_GUARD);
                    let ratio = (rel_prim.max(DIV_GUARD) / rel_dual.max(DIV_GUARD)).sqrt();
                    if ratio > RHO_ADAPT_RATIO || ratio < 1.0 / RHO_ADAPT_RATIO {
                        self.rho_bar = (self.rho_bar * ratio).clamp(RHO_MIN, RHO_MAX);
                        self.rho =
                            Self::rho_vector(self.rho_bar, &self.prob.lower, &self.prob.upper);
                        self.kkt
                            .refresh(&self.p_s, &self.a_s, set.sigma, &self.rho);
                        self.fac = ldl_numeric(&self.kkt.mat, &self.sym)?;
                    }
                }
            }
        }
        let (x_u, y_u, z_u) = self.unscaled_iterates();
        if status == QpStatus::MaxIter {
            let (prim, dual, _, _) = self.residuals(&x_u, &y_u, &z_u);
            last_prim = prim;
            last_dual = dual;
        }
        let mut solution = QpSolution {
            objective: self.prob.objective(&x_u),
            x: x_u,
            y: y_u,
            status,
            iterations,
            primal_res: last_prim,
            dual_res: last_dual,
            polished: false,
        };
        if status == QpStatus::Solved && set.polish {
            if let Some((xp, yp, prim, dual)) = self.polish(&solution) {
                solution.objective = self.prob.objective(&xp);
                solution.x = xp;
                solution.y = yp;
                solution.primal_res = prim;
                solution.dual_res = dual;
                solution.polished = true;
            }
        }
        let _ = z_u;
        Ok(solution)
    }

    /// Active-set refinement: pins the constraints the duals mark active,
    /// solves the equality-constrained KKT system with light regularization
    /// and iterative refinement, and keeps the result only if both residuals
    /// improve on the ADMM solution.
    fn polish(&self, admm: &QpSolution) -> Option<(DVector<f64>, DVector<f64>, f64, f64)> {
        let n = self.n;
        let m = self.m;
        let prob = &self.prob;
        let (_, _, z_u) = self.unscaled_iterates();
        let mut active: Vec<(usize, f64)> = Vec::new();
        for i in 0..m {
            let l = prob.lower[i];
            let u = prob.upper[i];
            // A bound is considered active when its slack is smaller than the
            // multiplier pushing toward it; plain dual-sign tests misclassify
            // inactive rows whose multipliers carry ADMM noise.
            if l == u {
                active.push((i, l));
            } else if l > -QP_INF && z_u[i] - l < -admm.y[i] {
                active.push((i, l));
            } else if u < QP_INF && u - z_u[i] < admm.y[i] {
                active.push((i, u));
            }
        }
        let ma = active.len();
        let dim = n + ma;
        let delta = self.set.polish_delta;
        let rows = prob.a_mat.rows();
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..n {
            for p in prob.p_mat.col_ptr[j]..prob.p_mat.col_ptr[j + 1] {
                let i = prob.p_mat.row_ind[p];
                if i <= j {
                    trip.push((i, j, prob.p_mat.values[p]));
                }
            }
        }
        for j in 0..n {
            trip.push((j, j, delta));
        }
        for (k, &(ri, _)) in active.iter().enumerate() {
            for &(j, v) in &rows[ri] {
                trip.push((j, n + k, v));
            }
        }
        for k in 0..ma {
            trip.push((n + k, n + k, -delta));
        }
        let kkt = CscMatrix::from_triplets(dim, dim, &trip).ok()?;
        let mut ldl = PermutedLdl::new(&kkt).ok()?;
        let mut rhs = vec![0.0; dim];
        for j in 0..n {
            rhs[j] = -prob.q_vec[j];
        }
        for (k, &(_, b)) in active.iter().enumerate() {
            rhs[n + k] = b;
        }
        let mut sol = vec![0.0; dim];
        ldl.solve(&rhs, &mut sol);
        // iterative refinement against the unregularized KKT system
        let mut resid = vec![0.0; dim];
        let mut corr = vec![0.0; dim];
        for _ in 0..self.set.polish_refine_iters {
            let x_pol = DVector::from_fn(n, |j, _| sol[j]);
            let mut y_full = DVector::zeros(m);
            for (k, &(ri, _)) in active.iter().enumerate() {
                y_full[ri] = sol[n + k];
            }
            let px = prob.p_mat.mul_vec(&x_pol);
            let aty = prob.a_mat.tr_mul_vec(&y_full);
            let ax = prob.a_mat.mul_vec(&x_pol);
            for j in 0..n {
                resid[j] = -prob.q_vec[j] - px[j] - aty[j];
            }
            for (k, &(ri, b)) in active.iter().enumerate() {
                resid[n + k] = b - ax[ri];
            }
            ldl.solve(&resid, &mut corr);
            for t in 0..dim {
                sol[t] += corr[t];
            }
        }
        let x_pol = DVector::from_fn(n, |j, _| sol[j]);
        if x_pol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut y_pol = DVector::zeros(m);
        for (k, &(ri, _)) in active.iter().enumerate() {
            y_pol[ri] = sol[n + k];
        }
        let ax = prob.a_mat.mul_vec(&x_pol);
        let z_pol = DVector::from_fn(m, |i, _| ax[i].clamp(prob.lower[i], prob.upper[i]));
        let prim = inf_norm(&(&ax - &z_pol));
        let dual = inf_norm(
            &(&prob.p_mat.mul_vec(&x_pol) + &prob.q_vec + prob.a_mat.tr_mul_vec(&y_pol)),
        );
        if prim <= admm.primal_res && dual <= admm.dual_res {
            Some((x_pol, y_pol, prim, dual))
        } else {
            None
        }
    }
}

/// One-shot convenience wrapper around [`QpSolver`].
pub fn solve_qp(
    problem: QpProblem,
    settings: QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(problem, settings)?;
    if let Some((x0, y0)) = warm {
        solver.warm_start(x0, y0);
    }
    solver.solve()
}

// ---------------------------------------------------------------------------
// Plain-text triplet dump format
// ---------------------------------------------------------------------------

fn fmt_bound(b: f64) -> String {
    if b >= QP_INF {
        "inf".to_string()
    } else if b <= -QP_INF {
        "-inf".to_string()
    } else {
        format!("{b}")
    }
}

fn parse_bound(tok: &str, line: usize) -> Result<f64, QpError> {
    match tok {
        "inf" => Ok(QP_INF),
        "-inf" => Ok(-QP_INF),
        _ => tok
            .parse::<f64>()
            .map_err(|e| QpError::Parse(line, e.to_string())),
    }
}

/// Writes a problem as a line-oriented sparse-triplet text document; decimal
/// values are shortest round-trip representations, so load is bit-exact.
pub fn dump_problem(prob: &QpProblem, out: &mut dyn Write) -> Result<(), QpError> {
    writeln!(out, "qp 1")?;
    writeln!(out, "dims {} {}", prob.num_vars(), prob.num_constraints())?;
    writeln!(out, "p {}", prob.p_mat.nnz())?;
    for j in 0..prob.p_mat.ncols {
        for p in prob.p_mat.col_ptr[j]..prob.p_mat.col_ptr[j + 1] {
            writeln!(out, "{} {} {}", prob.p_mat.row_ind[p], j, prob.p_mat.values[p])?;
        }
    }
    writeln!(out, "q")?;
    for v in prob.q_vec.iter() {
        writeln!(out, "{v}")?;
    }
    writeln!(out, "a {}", prob.a_mat.nnz())?;
    for j in 0..prob.a_mat.ncols {
        for p in prob.a_mat.col_ptr[j]..prob.a_mat.col_ptr[j + 1] {
            writeln!(out, "{} {} {}", prob.a_mat.row_ind[p], j, prob.a_mat.values[p])?;
        }
    }
    writeln!(out, "bounds")?;
    for i in 0..prob.num_constraints() {
        writeln!(out, "{} {}", fmt_bound(prob.lower[i]), fmt_bound(prob.upper[i]))?;
    }
    Ok(())
}

struct LineCursor {
    lines: Vec<String>,
    pos: usize,
}

impl LineCursor {
    fn next(&mut self, expect: &'static str) -> Result<(String, usize), QpError> {
        while self.pos < self.lines.len() && self.lines[self.pos].trim().is_empty() {
            self.pos += 1;
        }
        if self.pos >= self.lines.len() {
            return Err(QpError::Parse(self.pos + 1, format!("expected {expect}")));
        }
        self.pos += 1;
        Ok((self.lines[self.pos - 1].clone(), self.pos))
    }

    fn read_matrix(
        &mut self,
        tag: &'static str,
        nrows: usize,
        ncols: usize,
    ) -> Result<CscMatrix, QpError> {
        let (head, ln) = self.next(tag)?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        if toks.len() != 2 || toks[0] != tag {
            return Err(QpError::Parse(ln, format!("expected {tag} header")));
        }
        let nnz: usize = toks[1]
            .parse()
            .map_err(|_| QpError::Parse(ln, "bad nnz".to_string()))?;
        let mut trip = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let (row, ln) = self.next("triplet")?;
            let t: Vec<&str> = row.split_whitespace().collect();
            if t.len() != 3 {
                return Err(QpError::Parse(ln, "expected `row col value`".to_string()));
            }
            let r: usize = t[0]
                .parse()
                .map_err(|_| QpError::Parse(ln, "bad row".to_string()))?;
            let c: usize = t[1]
                .parse()
                .map_err(|_| QpError::Parse(ln, "bad col".to_string()))?;
            let v: f64 = t[2]
                .parse()
                .map_err(|_| QpError::Parse(ln, "bad value".to_string()))?;
            trip.push((r, c, v));
        }
        CscMatrix::from_triplets(nrows, ncols, &trip)
    }
}

/// Reads a problem written by [`dump_problem`].
pub fn load_problem(input: &mut dyn BufRead) -> Result<QpProblem, QpError> {
    let mut lines = Vec::new();
    let mut buf = String::new();
    loop {
        buf.clear();
        if input.read_line(&mut buf)? == 0 {
            break;
        }
        lines.push(buf.trim_end().to_string());
    }
    let mut cur = LineCursor { lines, pos: 0 };
    let (header, _) = cur.next("header")?;
    if header.trim() != "qp 1" {
        return Err(QpError::Parse(1, format!("unknown header: {header}")));
    }
    let (dims, ln) = cur.next("dims")?;
    let toks: Vec<&str> = dims.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "dims" {
        return Err(QpError::Parse(ln, "expected dims line".to_string()));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| QpError::Parse(ln, "bad n".to_string()))?;
    let m: usize = toks[2]
        .parse()
        .map_err(|_| QpError::Parse(ln, "bad m".to_string()))?;
    let p_mat = cur.read_matrix("p", n, n)?;
    let (qh, ln) = cur.next("q")?;
    if qh.trim() != "q" {
        return Err(QpError::Parse(ln, "expected q header".to_string()));
    }
    let mut q = DVector::zeros(n);
    for j in 0..n {
        let (row, ln) = cur.next("q value")?;
        q[j] = row
            .trim()
            .parse()
            .map_err(|e: std::num::ParseFloatError| QpError::Parse(ln, e.to_string()))?;
    }
    let a_mat = cur.read_matrix("a", m, n)?;
    let (bh, ln) = cur.next("bounds")?;
    if bh.trim() != "bounds" {
        return Err(QpError::Parse(ln, "expected bounds header".to_string()));
    }
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for i in 0..m {
        let (row, ln) = cur.next("bound pair")?;
        let t: Vec<&str> = row.split_whitespace().collect();
        if t.len() != 2 {
            return Err(QpError::Parse(ln, "expected `lower upper`".to_string()));
        }
        lower[i] = parse_bound(t[0], ln)?;
        upper[i] = parse_bound(t[1], ln)?;
    }
    QpProblem::new(p_mat, q, a_mat, lower, upper)
}
