//! Sparse matrices and direct solvers.
//!
//! Storage is compressed sparse row with sorted, unique column indices.
//! Factorizations are delegated to `faer`: a symmetric indefinite
//! supernodal LBL^T (with LU as fallback) for the saddle-point systems, and
//! sparse Cholesky for the SPD smoothing operators. Every solve re-checks the residual
//! `||Ax - b|| <= 1e-10 * max(1, ||b||)` and applies up to two steps of
//! iterative refinement before giving up.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Once};

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::solvers::Solve;
use faer::perm::PermRef;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, IntranodeLbltRef, SymbolicCholesky,
    SymmetricOrdering,
};
use faer::sparse::linalg::solvers::{Llt, Lu, SymbolicLlt, SymbolicLu};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};

use crate::error::SolveError;

/// Relative residual tolerance for every solve.
pub const RESIDUAL_TOL: f64 = 1e-10;
const MAX_REFINEMENT_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed in
    /// input order so the result is bitwise reproducible.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) out of bounds");
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        // bucket by row, stable
        let mut next = counts.clone();
        let mut bucket = vec![(0usize, 0.0f64); triplets.len()];
        for &(i, j, v) in triplets {
            bucket[next[i]] = (j, v);
            next[i] += 1;
        }
        let mut row_offsets = Vec::with_capacity(nrows + 1);
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_offsets.push(0);
        for i in 0..nrows {
            let row = &mut bucket[counts[i]..counts[i + 1]];
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut sum = 0.0;
                while k < row.len() && row[k].0 == j {
                    sum += row[k].1;
                    k += 1;
                }
                col_indices.push(j);
                values.push(sum);
            }
            row_offsets.push(col_indices.len());
        }
        SparseMatrix {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from dense row-major data, dropping exact zeros.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut triplets = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(nrows, ncols, &triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Position of entry `(i, j)` in the value array, if structurally present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_offsets[i];
        let cols = &self.col_indices[start..self.row_offsets[i + 1]];
        cols.binary_search(&j).ok().map(|k| start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.col_indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                col_indices[next[j]] = i;
                values[next[j]] = v;
                next[j] += 1;
            }
        }
        SparseMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_offsets: counts,
            col_indices,
            values,
        }
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry, over rows not
    /// listed in `skip_rows` (and their mirrored columns).
    pub fn asymmetry(&self, skip_rows: &[bool]) -> f64 {
        let scale = self
            .values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..self.nrows {
            if skip_rows.get(i).copied().unwrap_or(false) {
                continue;
            }
            for (j, v) in self.row(i) {
                if skip_rows.get(j).copied().unwrap_or(false) {
                    continue;
                }
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    /// Content hash of pattern and values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.pattern_hash_into(&mut h);
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn pattern_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.pattern_hash_into(&mut h);
        h.finish()
    }

    fn pattern_hash_into(&self, h: &mut DefaultHasher) {
        self.nrows.hash(h);
        self.ncols.hash(h);
        self.row_offsets.hash(h);
        self.col_indices.hash(h);
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect()
}

fn configure_faer() {
    static ONCE: Once = Once::new();
    // Sequential kernels keep results bitwise reproducible.
    ONCE.call_once(|| faer::set_global_parallelism(Par::Seq));
}

enum Factor {
    Lu(Lu<usize, f64>),
    Llt(Llt<usize, f64>),
    Lblt(Lblt),
}

struct Lblt {
    symbolic: Arc<SymbolicCholesky<usize>>,
    values: Vec<f64>,
    subdiag: Vec<f64>,
    perm_fwd: Vec<usize>,
    perm_inv: Vec<usize>,
}

impl Lblt {
    fn factor(&self) -> IntranodeLbltRef<'_, usize, f64> {
        let n = self.subdiag.len();
        IntranodeLbltRef::new(
            &self.symbolic,
            &self.values,
            &self.subdiag,
            PermRef::new_checked(&self.perm_fwd, &self.perm_inv, n),
        )
    }
}

/// A numeric factorization bound to the matrix it was computed from.
pub struct Factorization {
    matrix: Arc<SparseMatrix>,
    factor: Factor,
}

/// Column-compressed copy of a CSR matrix, as faer expects.
struct Csc {
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Csc {
    fn from_csr(a: &SparseMatrix) -> Self {
        let t = a.transpose();
        Csc {
            col_ptr: t.row_offsets,
            row_idx: t.col_indices,
            values: t.values,
        }
    }

    fn symbolic(&self, n: usize) -> SymbolicSparseColMatRef<'_, usize> {
        SymbolicSparseColMatRef::new_checked(n, n, &self.col_ptr, None, &self.row_idx)
    }

    fn numeric(&self, n: usize) -> SparseColMatRef<'_, usize, f64> {
        SparseColMatRef::new(self.symbolic(n), &self.values)
    }
}

#[derive(Clone)]
enum Symbolic {
    Lu(SymbolicLu<usize>),
    Llt(SymbolicLlt<usize>),
    Lblt(Arc<SymbolicCholesky<usize>>),
}

fn check_square(a: &SparseMatrix) -> Result<(), SolveError> {
    if a.nrows != a.ncols {
        return Err(SolveError::Dimension {
            rows: a.nrows,
            cols: a.ncols,
            rhs: a.nrows,
        });
    }
    Ok(())
}

impl Factorization {
    /// LU with partial pivoting; suitable for indefinite systems.
    pub fn lu(a: Arc<SparseMatrix>) -> Result<Self, SolveError> {
        Self::lu_with(a, None).map(|(f, _)| f)
    }

    /// Sparse Cholesky; `a` must be symmetric positive definite.
    pub fn cholesky(a: Arc<SparseMatrix>) -> Result<Self, SolveError> {
        Self::cholesky_with(a, None).map(|(f, _)| f)
    }

    fn lu_with(
        a: Arc<SparseMatrix>,
        symbolic: Option<SymbolicLu<usize>>,
    ) -> Result<(Self, SymbolicLu<usize>), SolveError> {
        configure_faer();
        check_square(&a)?;
        let n = a.nrows;
        let csc = Csc::from_csr(&a);
        let symbolic = match symbolic {
            Some(s) => s,
            None => SymbolicLu::try_new(csc.symbolic(n))
                .map_err(|e| SolveError::Singular(format!("{e:?}")))?,
        };
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), csc.numeric(n))
            .map_err(|e| SolveError::Singular(format!("{e:?}")))?;
        Ok((
            Factorization {
                matrix: a,
                factor: Factor::Lu(lu),
            },
            symbolic,
        ))
    }

    fn cholesky_with(
        a: Arc<SparseMatrix>,
        symbolic: Option<SymbolicLlt<usize>>,
    ) -> Result<(Self, SymbolicLlt<usize>), SolveError> {
        configure_faer();
        check_square(&a)?;
        let n = a.nrows;
        let csc = Csc::from_csr(&a);
        let symbolic = match symbolic {
            Some(s) => s,
            None => SymbolicLlt::try_new(csc.symbolic(n), Side::Lower)
                .map_err(|e| SolveError::Singular(format!("{e:?}")))?,
        };
        let llt = Llt::try_new_with_symbolic(symbolic.clone(), csc.numeric(n), Side::Lower)
            .map_err(|e| SolveError::Singular(format!("not positive definite: {e:?}")))?;
        Ok((
            Factorization {
                matrix: a,
                factor: Factor::Llt(llt),
            },
            symbolic,
        ))
    }

    /// Symmetric indefinite LBL^T with AMD ordering and pivoting inside
    /// supernodes. Only the lower triangle of `a` is read. Pivoting does not
    /// cross supernode boundaries, so callers should be ready to fall back
    /// to LU when the solve fails.
    pub fn symmetric_indefinite(a: Arc<SparseMatrix>) -> Result<Self, SolveError> {
        Self::lblt_with(a, None).map(|(f, _)| f)
    }

    fn lblt_with(
        a: Arc<SparseMatrix>,
        symbolic: Option<Arc<SymbolicCholesky<usize>>>,
    ) -> Result<(Self, Arc<SymbolicCholesky<usize>>), SolveError> {
        configure_faer();
        check_square(&a)?;
        let n = a.nrows;
        let csc = Csc::from_csr(&a);
        let symbolic = match symbolic {
            Some(s) => s,
            None => Arc::new(
                factorize_symbolic_cholesky(
                    csc.symbolic(n),
                    Side::Lower,
                    SymmetricOrdering::Amd,
                    CholeskySymbolicParams {
                        // the simplicial path does not pivot
                        supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
                        ..Default::default()
                    },
                )
                .map_err(|e| SolveError::Singular(format!("{e:?}")))?,
            ),
        };
        let mut values = vec![0.0; symbolic.len_val()];
        let mut subdiag = vec![0.0; n];
        let mut perm_fwd = vec![0usize; n];
        let mut perm_inv = vec![0usize; n];
        let req =
            symbolic.factorize_numeric_intranode_lblt_scratch::<f64>(Par::Seq, Default::default());
        let mut mem = MemBuffer::new(req);
        symbolic.factorize_numeric_intranode_lblt(
            &mut values,
            &mut subdiag,
            &mut perm_fwd,
            &mut perm_inv,
            csc.numeric(n),
            Side::Lower,
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        );
        if values.iter().chain(&subdiag).any(|v| !v.is_finite()) {
            return Err(SolveError::Singular("non-finite LBL^T factor".into()));
        }
        Ok((
            Factorization {
                matrix: a,
                factor: Factor::Lblt(Lblt {
                    symbolic: symbolic.clone(),
                    values,
                    subdiag,
                    perm_fwd,
                    perm_inv,
                }),
            },
            symbolic,
        ))
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    fn apply_inverse(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        let view = MatMut::from_column_major_slice_mut(rhs, n, 1);
        match &self.factor {
            Factor::Lu(lu) => lu.solve_in_place(view),
            Factor::Llt(llt) => llt.solve_in_place(view),
            Factor::Lblt(f) => {
                let req = f.symbolic.solve_in_place_scratch::<f64>(1, Par::Seq);
                let mut mem = MemBuffer::new(req);
                f.factor().solve_in_place_with_conj(
                    Conj::No,
                    view,
                    Par::Seq,
                    MemStack::new(&mut mem),
                );
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
        let a = &*self.matrix;
        if b.len() != a.nrows {
            return Err(SolveError::Dimension {
                rows: a.nrows,
                cols: a.ncols,
                rhs: b.len(),
            });
        }
        let tolerance = RESIDUAL_TOL * norm2(b).max(1.0);
        let mut x = b.to_vec();
        self.apply_inverse(&mut x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::Singular("non-finite solution".into()));
        }
        let mut r = residual(a, &x, b);
        let mut res = norm2(&r);
        for _ in 0..MAX_REFINEMENT_STEPS {
            if res <= tolerance {
                break;
            }
            self.apply_inverse(&mut r);
            for (xi, di) in x.iter_mut().zip(&r) {
                *xi += di;
            }
            r = residual(a, &x, b);
            res = norm2(&r);
        }
        if !res.is_finite() {
            return Err(SolveError::Singular("non-finite residual".into()));
        }
        if res > tolerance {
            return Err(SolveError::Residual {
                residual: res,
                tolerance,
            });
        }
        debug_assert!(norm2(&residual(a, &x, b)) <= tolerance);
        Ok(x)
    }
}

/// One-shot LU solve of `a x = b`.
pub fn solve(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, SolveError> {
    if b.len() != a.nrows() {
        return Err(SolveError::Dimension {
            rows: a.nrows(),
            cols: a.ncols(),
            rhs: b.len(),
        });
    }
    Factorization::lu(Arc::new(a.clone()))?.solve(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Lu,
    Cholesky,
    /// Symmetric indefinite LBL^T; falls back to LU if it fails.
    SymmetricIndefinite,
}

/// Direct solver that caches numeric factorizations by matrix content and
/// symbolic analyses by sparsity pattern.
pub struct DirectSolver {
    capacity: usize,
    numeric: Vec<(u64, FactorKind, Arc<Factorization>)>,
    symbolic: HashMap<(u64, FactorKind), Symbolic>,
    // patterns on which LBL^T failed once; these go straight to LU
    lu_fallback: HashSet<u64>,
    factorizations: usize,
}

impl Default for DirectSolver {
    fn default() -> Self {
        Self::new(4)
    }
}

impl DirectSolver {
    /// `capacity` bounds the number of numeric factorizations kept alive.
    pub fn new(capacity: usize) -> Self {
        DirectSolver {
            capacity: capacity.max(1),
            numeric: Vec::new(),
            symbolic: HashMap::new(),
            lu_fallback: HashSet::new(),
            factorizations: 0,
        }
    }

    /// Number of numeric factorizations computed so far.
    pub fn factorization_count(&self) -> usize {
        self.factorizations
    }

    pub fn factorize(
        &mut self,
        a: &Arc<SparseMatrix>,
        kind: FactorKind,
    ) -> Result<Arc<Factorization>, SolveError> {
        let key = a.fingerprint();
        if let Some(pos) = self
            .numeric
            .iter()
            .position(|(k, fk, f)| *k == key && *fk == kind && *f.matrix == **a)
        {
            let entry = self.numeric.remove(pos);
            let f = entry.2.clone();
            self.numeric.push(entry);
            return Ok(f);
        }
        let pattern = (a.pattern_fingerprint(), kind);
        let cached = self.symbolic.get(&pattern).cloned();
        let factor = match kind {
            FactorKind::Lu => {
                let sym = match cached {
                    Some(Symbolic::Lu(s)) => Some(s),
                    _ => None,
                };
                let (f, s) = Factorization::lu_with(a.clone(), sym)?;
                self.symbolic.insert(pattern, Symbolic::Lu(s));
                f
            }
            FactorKind::Cholesky => {
                let sym = match cached {
                    Some(Symbolic::Llt(s)) => Some(s),
                    _ => None,
                };
                let (f, s) = Factorization::cholesky_with(a.clone(), sym)?;
                self.symbolic.insert(pattern, Symbolic::Llt(s));
                f
            }
            FactorKind::SymmetricIndefinite => {
                let sym = match cached {
                    Some(Symbolic::Lblt(s)) => Some(s),
                    _ => None,
                };
                let (f, s) = Factorization::lblt_with(a.clone(), sym)?;
                self.symbolic.insert(pattern, Symbolic::Lblt(s));
                f
            }
        };
        self.factorizations += 1;
        let f = Arc::new(factor);
        if self.numeric.len() == self.capacity {
            self.numeric.remove(0);
        }
        self.numeric.push((key, kind, f.clone()));
        Ok(f)
    }

    pub fn solve(
        &mut self,
        a: &Arc<SparseMatrix>,
        kind: FactorKind,
        b: &[f64],
    ) -> Result<Vec<f64>, SolveError> {
        let pattern = a.pattern_fingerprint();
        let kind = if kind == FactorKind::SymmetricIndefinite && self.lu_fallback.contains(&pattern)
        {
            FactorKind::Lu
        } else {
            kind
        };
        let attempt = self.factorize(a, kind).and_then(|f| f.solve(b));
        match attempt {
            Err(e) if kind == FactorKind::SymmetricIndefinite => {
                log::warn!("LBL^T solve failed ({e}), switching this pattern to LU");
                let key = a.fingerprint();
                self.numeric
                    .retain(|(k, fk, _)| !(*k == key && *fk == kind));
                self.lu_fallback.insert(pattern);
                self.factorize(a, FactorKind::Lu)?.solve(b)
            }
            other => other,
        }
    }
}
