//! Dense symmetric-matrix primitives: PSD-cone projection, trace half-space
//! projection, Kronecker products, spectral norms and column-major `vec`.
//!
//! Everything here is a pure function of its inputs. Dimensions in this crate
//! are tiny (a handful of rows), so full eigendecompositions are used freely.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Absolute tolerance below which an asymmetric input is silently resymmetrized.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: max |M - M^T| = {max_asymmetry:e} exceeds {SYMMETRY_TOL:e}")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix has non-finite entries")]
    NonFinite,
}

/// A real symmetric matrix.
///
/// The wrapped matrix is exactly symmetric: constructors either verify the
/// input against [`SYMMETRY_TOL`] and average it with its transpose, or
/// symmetrize unconditionally (the `*_symmetrized` constructors, used for
/// results of arithmetic that is symmetric in exact arithmetic).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, MatError> {
        if m.nrows() != m.ncols() {
            return Err(MatError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        if m.nrows() == 0 {
            return Err(MatError::InvalidParameter("symmetric matrix must have dim >= 1".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(MatError::NonFinite);
        }
        let asym = max_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(MatError::NotSymmetric { max_asymmetry: asym });
        }
        Ok(Self::from_symmetrized(m))
    }

    /// Returns `(M + M^T) / 2` without checking how asymmetric `m` was.
    ///
    /// Panics if `m` is not square.
    pub fn from_symmetrized(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "symmetrizing a non-square matrix");
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self(DMatrix::identity(n, n) * s)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Block-diagonal `[[a, 0], [0, b]]`.
    pub fn block_diag(a: &SymMatrix, b: &SymMatrix) -> Self {
        let (p, q) = (a.dim(), b.dim());
        let mut m = DMatrix::zeros(p + q, p + q);
        m.view_mut((0, 0), (p, p)).copy_from(&a.0);
        m.view_mut((p, p), (q, q)).copy_from(&b.0);
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Frobenius inner product `Tr(A^T B)`.
    pub fn dot(&self, other: &SymMatrix) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn distance(&self, other: &SymMatrix) -> f64 {
        (&self.0 - &other.0).norm()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().expect("dim >= 1")
    }

    /// Leading principal `r x r` block.
    pub fn top_left(&self, r: usize) -> SymMatrix {
        Self(self.0.view((0, 0), (r, r)).into_owned())
    }

    /// Trailing principal block starting at row/column `r`.
    pub fn bottom_right(&self, r: usize) -> SymMatrix {
        let n = self.dim();
        Self(self.0.view((r, r), (n - r, n - r)).into_owned())
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        Self(&self.0 - &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        Self(&self.0 * s)
    }

    /// `M X M^T` for an arbitrary (possibly rectangular) `M`.
    pub fn congruence(&self, m: &DMatrix<f64>) -> SymMatrix {
        Self::from_symmetrized(m * &self.0 * m.transpose())
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Frobenius-nearest positive semidefinite matrix: eigenvalues clamped at 0.
pub fn psd_project(m: &SymMatrix) -> SymMatrix {
    let eig = SymmetricEigen::new(m.0.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return m.clone();
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, &l) in clamped.iter().enumerate() {
        scaled.column_mut(j).scale_mut(l);
    }
    SymMatrix::from_symmetrized(scaled * u.transpose())
}

/// Projection onto the half-space `{ Tr(X) <= nu }`.
///
/// The result may leave the PSD cone; intersections are handled by Dykstra.
pub fn trace_halfspace_project(m: &SymMatrix, nu: f64) -> Result<SymMatrix, MatError> {
    if !(nu > 0.0) {
        return Err(MatError::InvalidParameter(format!("trace bound must be positive, got {nu}")));
    }
    Ok(trace_halfspace_project_unchecked(m, nu))
}

pub(crate) fn trace_halfspace_project_unchecked(m: &SymMatrix, nu: f64) -> SymMatrix {
    let tr = m.trace();
    if tr <= nu {
        return m.clone();
    }
    let n = m.dim();
    let shift = (tr - nu) / n as f64;
    let mut out = m.0.clone();
    for i in 0..n {
        out[(i, i)] -= shift;
    }
    SymMatrix(out)
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>, MatError> {
    if v.len() != rows * cols {
        return Err(MatError::DimensionMismatch {
            expected: format!("{} entries for {rows}x{cols}", rows * cols),
            got: format!("{}", v.len()),
        });
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Spectral radius of a square real matrix (modulus of the largest eigenvalue).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Symmetric square root factor `F` with `F F^T = S` for PSD `S`; negative
/// eigenvalues (round-off) are clamped to zero.
pub fn psd_sqrt_factor(s: &SymMatrix) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.0.clone());
    let mut f = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        f.column_mut(j).scale_mut(l.max(0.0).sqrt());
    }
    f
}
