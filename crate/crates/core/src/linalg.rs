//! Dense linear algebra shared by the estimators.
//!
//! Everything here is a pure function over immutable inputs. Rank decisions use a
//! singular-value threshold of [`RANK_TOL`] relative to `max(1, σ_max)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOL: f64 = 1e-10;
/// Tolerance for `P·P = P`.
pub const IDEMPOTENT_TOL: f64 = 1e-8;
/// Tolerance for `P = Pᵀ`.
pub const SYMMETRIC_TOL: f64 = 1e-10;
/// Tolerance for `B·Bᵀ = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Rows of representations in a `dim`-dimensional hidden space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
}

impl EmbeddingMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        Self::from_rows_with_dim(rows, dim)
    }

    /// Like [`from_rows`](Self::from_rows) but accepts zero rows.
    pub fn from_rows_with_dim(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
        }
        let data = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        let (a, b) = (self.rows(), other.rows());
        let data = DMatrix::from_fn(a + b, self.dim(), |i, j| {
            if i < a {
                self.data[(i, j)]
            } else {
                other.data[(i - a, j)]
            }
        });
        Ok(EmbeddingMatrix { data })
    }

    /// Right-multiplies every row by a symmetric projector: `X ← X·P`.
    pub fn project(&self, p: &Projector) -> Result<EmbeddingMatrix> {
        if p.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: p.dim() });
        }
        Ok(EmbeddingMatrix { data: &self.data * p.matrix() })
    }
}

/// Orthonormal basis (rows) of an estimated bias subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSubspace {
    basis: DMatrix<f64>,
}

impl BiasSubspace {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        if basis.ncols() == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if basis.nrows() > basis.ncols() {
            return Err(Error::KTooLarge { k: basis.nrows(), max: basis.ncols() });
        }
        check_finite(&basis)?;
        let gram = &basis * basis.transpose();
        let dev = max_abs(&(gram - DMatrix::identity(basis.nrows(), basis.nrows())));
        if dev > ORTHONORMAL_TOL {
            return Err(Error::NotOrthonormal(dev));
        }
        Ok(Self { basis })
    }

    pub fn empty(dim: usize) -> Self {
        Self { basis: DMatrix::zeros(0, dim) }
    }

    pub fn k(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn direction(&self, j: usize) -> DVector<f64> {
        self.basis.row(j).transpose()
    }

    /// The complementary projector `I − BᵀB`.
    pub fn removal_projector(&self) -> Projector {
        let d = self.dim();
        let m = DMatrix::identity(d, d) - self.basis.transpose() * &self.basis;
        Projector::from_raw(symmetrize(m))
    }
}

/// Symmetric idempotent linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    matrix: DMatrix<f64>,
}

impl Projector {
    /// Validates the projector invariants on an arbitrary square matrix.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::NotProjector(format!(
                "matrix is {}x{}, not square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        check_finite(&matrix)?;
        let asym = max_abs(&(&matrix - matrix.transpose()));
        if asym >= SYMMETRIC_TOL {
            return Err(Error::NotProjector(format!("‖P − Pᵀ‖_max = {asym:e}")));
        }
        let idem = max_abs(&(&matrix * &matrix - &matrix));
        if idem >= IDEMPOTENT_TOL {
            return Err(Error::NotProjector(format!("‖P·P − P‖_max = {idem:e}")));
        }
        Ok(Self { matrix })
    }

    pub(crate) fn from_raw(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        Ok(&self.matrix * v)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        max_abs(&(&self.matrix - DMatrix::identity(self.dim(), self.dim()))) <= tol
    }

    /// Numerical rank (trace of an exact projector).
    pub fn rank(&self) -> usize {
        numerical_rank(&self.matrix)
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn rank_cutoff(sigma_max: f64) -> f64 {
    RANK_TOL * sigma_max.max(1.0)
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let cut = rank_cutoff(smax);
    sv.iter().filter(|&&s| s > cut).count()
}

/// Flips `v` so that its largest-magnitude coordinate is positive (ties: lowest index).
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let eig = SymmetricEigen::new(m.clone());
    let mut pairs: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, eig.eigenvectors.column(i).into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Subtracts the column means. Returns the centered matrix and the mean vector.
pub fn mean_center(m: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, DVector<f64>)> {
    if m.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mean: DVector<f64> = m.data.row_mean().transpose();
    let mut out = m.data.clone();
    for mut row in out.row_iter_mut() {
        for (x, mu) in row.iter_mut().zip(mean.iter()) {
            *x -= mu;
        }
    }
    Ok((EmbeddingMatrix { data: out }, mean))
}

/// Top-`k` principal directions of `m` (assumed centered by the caller), from the
/// eigendecomposition of the sample covariance with divisor `rows − 1`.
pub fn pca_top_k(m: &EmbeddingMatrix, k: usize) -> Result<BiasSubspace> {
    let max = m.rows().min(m.dim());
    if k > max {
        return Err(Error::KTooLarge { k, max });
    }
    if k == 0 {
        return Ok(BiasSubspace::empty(m.dim()));
    }
    let rank = numerical_rank(&m.data);
    if rank < k {
        return Err(Error::RankDeficient { k, rank });
    }
    let divisor = (m.rows().max(2) - 1) as f64;
    let cov = symmetrize(m.data.transpose() * &m.data / divisor);
    let eig = symmetric_eigen_desc(&cov);
    let mut basis = DMatrix::zeros(k, m.dim());
    for (j, (_, v)) in eig.into_iter().take(k).enumerate() {
        let mut v = v.normalize();
        fix_sign(&mut v);
        basis.set_row(j, &v.transpose());
    }
    Ok(BiasSubspace { basis })
}

/// `v − Σ_j ⟨v, b_j⟩ b_j`.
pub fn subspace_remove(v: &DVector<f64>, s: &BiasSubspace) -> Result<DVector<f64>> {
    if v.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: v.len() });
    }
    let mut out = v.clone();
    for b in s.basis.row_iter() {
        let coef = b.dot(&v.transpose());
        for (o, bj) in out.iter_mut().zip(b.iter()) {
            *o -= coef * bj;
        }
    }
    Ok(out)
}

/// Orthonormal basis (columns) for the row space of `w`, possibly empty.
fn rowspace_basis(w: &DMatrix<f64>) -> DMatrix<f64> {
    let d = w.ncols();
    if w.nrows() == 0 || max_abs(w) == 0.0 {
        return DMatrix::zeros(d, 0);
    }
    let svd = w.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rank_cutoff(smax);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cut)
        .collect();
    DMatrix::from_fn(d, keep.len(), |i, j| v_t[(keep[j], i)])
}

fn projector_onto(basis: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(basis * basis.transpose())
}

/// Orthogonal projector onto the row space of `w` (`c × d`).
pub fn rowspace_projector(w: &DMatrix<f64>) -> Result<Projector> {
    if w.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    check_finite(w)?;
    if max_abs(w) == 0.0 {
        return Err(Error::ZeroClassifier);
    }
    Ok(Projector::from_raw(projector_onto(&rowspace_basis(w))))
}

/// `I − rowspace_projector(w)`.
pub fn nullspace_projector(w: &DMatrix<f64>) -> Result<Projector> {
    let row = rowspace_projector(w)?;
    let d = w.ncols();
    Ok(Projector::from_raw(symmetrize(DMatrix::identity(d, d) - row.matrix)))
}

/// Projector onto the intersection of the ranges of `ps`.
///
/// The intersection is the orthogonal complement of the span of all `I − P_i`, so the
/// result is `I − rowspace(stack(I − P_i))`, which is exactly symmetric and idempotent
/// whether or not the inputs commute. An empty list gives the identity.
pub fn compose_projectors(dim: usize, ps: &[Projector]) -> Result<Projector> {
    for p in ps {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: p.dim() });
        }
    }
    if ps.is_empty() {
        return Ok(Projector::identity(dim));
    }
    let id = DMatrix::<f64>::identity(dim, dim);
    let mut stacked = DMatrix::zeros(dim * ps.len(), dim);
    for (n, p) in ps.iter().enumerate() {
        stacked.view_mut((n * dim, 0), (dim, dim)).copy_from(&(&id - &p.matrix));
    }
    let removed = projector_onto(&rowspace_basis(&stacked));
    Ok(Projector::from_raw(symmetrize(id - removed)))
}

/// Writes a matrix in the text format: a `rows cols` line, then one row per line,
/// 17 significant digits per entry.
pub fn write_matrix(m: &DMatrix<f64>) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let mut first = true;
        for x in row.iter() {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{}", fmt_f64(*x)).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parses the text format written by [`write_matrix`]. Returns the matrix and the
/// number of lines consumed.
pub fn parse_matrix_lines<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<DMatrix<f64>> {
    let header = lines
        .by_ref()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse("missing matrix header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("header {header:?}: {e}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Parse(format!("expected `rows cols`, got {header:?}")));
    };
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("expected {rows} rows, got {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("row {i}: {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(Error::Parse(format!("row {i} has {} entries, expected {cols}", vals.len())));
        }
        for (j, v) in vals.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    parse_matrix_lines(&mut text.lines())
}
