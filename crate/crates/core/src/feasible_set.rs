//! Per-agent covariance feasible set
//! `{ Σ ⪰ 0, Tr Σ <= ν, Σ_xx = Ĉ Σ Ĉ^T + W }` and Dykstra projection onto it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::matops::{kron, SymMatrix};

/// Largest accepted condition number of `E E^T`.
pub const MAX_CONDITION: f64 = 1e10;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 50_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeasibleSetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate estimate: cond(E E^T) = {condition:e} exceeds {MAX_CONDITION:e}")]
    DegenerateEstimate { condition: f64 },
    #[error("Dykstra did not converge in {iterations} cycles (gaps: psd {psd:e}, trace {trace:e}, affine {affine:e})",
        psd = .gaps.psd, trace = .gaps.trace, affine = .gaps.affine)]
    NotConverged { iterations: usize, gaps: FeasibilityGaps, last: Box<SymMatrix> },
    #[error("input is not feasible for the source set (gaps: psd {psd:e}, trace {trace:e}, affine {affine:e})",
        psd = .0.psd, trace = .0.trace, affine = .0.affine)]
    InfeasibleInput(FeasibilityGaps),
}

/// Constraint violations of a candidate covariance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeasibilityGaps {
    /// `max(0, -lambda_min)`.
    pub psd: f64,
    /// `max(0, Tr - nu)`.
    pub trace: f64,
    /// `||Σ_xx - Ĉ Σ Ĉ^T - W||_F`.
    pub affine: f64,
}

impl FeasibilityGaps {
    pub fn max(&self) -> f64 {
        self.psd.max(self.trace).max(self.affine)
    }
}

/// `E = D ⊗ D - Ĉ ⊗ Ĉ` with `D = [I 0]`, `w = vec(W)`, and a cached
/// Cholesky factor of `E E^T`.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    e: DMatrix<f64>,
    w: DVector<f64>,
    gram: Cholesky<f64, Dyn>,
    condition: f64,
}

impl AffineOperator {
    pub fn new(c_hat: &DMatrix<f64>, w: &SymMatrix) -> Result<Self, FeasibleSetError> {
        let (d, n) = c_hat.shape();
        let sel = DMatrix::<f64>::identity(d, n);
        let e = kron(&sel, &sel) - kron(c_hat, c_hat);
        let eet = &e * e.transpose();
        let eig = SymmetricEigen::new(eet.clone());
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(FeasibleSetError::DegenerateEstimate { condition });
        }
        let gram = Cholesky::new(eet).ok_or(FeasibleSetError::DegenerateEstimate { condition })?;
        let w = DVector::from_column_slice(w.as_matrix().as_slice());
        Ok(Self { e, w, gram, condition })
    }

    /// The `d^2 x n^2` matrix `E`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `(E E^T)^{-1} r` via the cached factor.
    pub fn solve_gram(&self, r: &DVector<f64>) -> DVector<f64> {
        self.gram.solve(r)
    }
}

/// Euclidean projection of `p` onto `{v : E v = w}` for a full-row-rank `E`.
pub fn affine_projection(e: &DMatrix<f64>, w: &DVector<f64>, p: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = Cholesky::new(e * e.transpose())?;
    let y = chol.solve(&(e * p - w));
    Some(p - e.transpose() * y)
}

/// Which of the three constraint sets Dykstra cycles over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Constraints {
    pub psd: bool,
    pub trace: bool,
    pub affine: bool,
}

impl Default for Constraints {
    fn default() -> Self {
        Self { psd: true, trace: true, affine: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DykstraSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub constraints: Constraints,
}

impl Default for DykstraSettings {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iters: DEFAULT_MAX_ITERS, constraints: Constraints::default() }
    }
}

/// Dykstra increments carried between projections.
#[derive(Debug, Clone)]
pub struct DykstraWarmStart {
    increments: [DMatrix<f64>; 3],
}

impl DykstraWarmStart {
    pub fn zeros(n: usize) -> Self {
        Self { increments: [DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)] }
    }
}

#[derive(Debug, Clone)]
pub struct DykstraOutcome {
    pub point: SymMatrix,
    /// Completed cycles over the active sets.
    pub iterations: usize,
    pub gaps: FeasibilityGaps,
}

/// `S = { Σ ⪰ 0, Tr Σ <= ν, Σ_xx = Ĉ Σ Ĉ^T + W }`.
#[derive(Debug, Clone)]
pub struct FeasibleSet {
    c_hat: DMatrix<f64>,
    w: SymMatrix,
    nu: f64,
    d: usize,
    n: usize,
    op: AffineOperator,
}

impl FeasibleSet {
    pub fn build(c_hat: DMatrix<f64>, w: SymMatrix, nu: f64) -> Result<Self, FeasibleSetError> {
        let (d, n) = c_hat.shape();
        if d == 0 || n < d {
            return Err(FeasibleSetError::DimensionMismatch(format!("Ĉ must be d x n with n >= d >= 1, got {d}x{n}")));
        }
        if w.dim() != d {
            return Err(FeasibleSetError::DimensionMismatch(format!("W must be {d}x{d}")));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(FeasibleSetError::InvalidParameter(format!("nu must be positive, got {nu}")));
        }
        if c_hat.iter().any(|v| !v.is_finite()) {
            return Err(FeasibleSetError::InvalidParameter("Ĉ has non-finite entries".into()));
        }
        if w.min_eigenvalue() < -1e-12 {
            return Err(FeasibleSetError::InvalidParameter("W must be PSD".into()));
        }
        let op = AffineOperator::new(&c_hat, &w)?;
        Ok(Self { c_hat, w, nu, d, n, op })
    }

    pub fn c_hat(&self) -> &DMatrix<f64> {
        &self.c_hat
    }

    pub fn w(&self) -> &SymMatrix {
        &self.w
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    pub fn operator(&self) -> &AffineOperator {
        &self.op
    }

    /// `Σ_xx - Ĉ Σ Ĉ^T - W`.
    fn affine_residual(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d;
        s.view((0, 0), (d, d)) - &self.c_hat * s * self.c_hat.transpose() - self.w.as_matrix()
    }

    fn affine_in_place(&self, s: &mut DMatrix<f64>) {
        let d = self.d;
        let r = self.affine_residual(s);
        let y = self.op.solve_gram(&DVector::from_column_slice(r.as_slice()));
        let y = DMatrix::from_column_slice(d, d, y.as_slice());
        // E^T vec(Y) = vec(D^T Y D - Ĉ^T Y Ĉ)
        let corr = self.c_hat.transpose() * &y * &self.c_hat;
        *s += corr;
        let mut top = s.view_mut((0, 0), (d, d));
        top -= &y;
    }

    pub fn feasibility_violation(&self, sigma: &SymMatrix) -> FeasibilityGaps {
        let s = sigma.as_matrix();
        FeasibilityGaps {
            psd: (-sigma.min_eigenvalue()).max(0.0),
            trace: (sigma.trace() - self.nu).max(0.0),
            affine: self.affine_residual(s).norm(),
        }
    }
}

/// Euclidean projection onto the affine constraint, resymmetrised.
pub fn project_affine(set: &FeasibleSet, sigma: &SymMatrix) -> SymMatrix {
    let mut s = sigma.as_matrix().clone();
    set.affine_in_place(&mut s);
    SymMatrix::from_symmetrized(s)
}

pub fn feasibility_violation(set: &FeasibleSet, sigma: &SymMatrix) -> FeasibilityGaps {
    set.feasibility_violation(sigma)
}

fn psd_in_place(s: &mut DMatrix<f64>) {
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return;
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(lam.max(0.0));
    }
    *s = scaled * eig.eigenvectors.transpose();
}

fn trace_in_place(s: &mut DMatrix<f64>, nu: f64) {
    let tr = s.trace();
    if tr > nu {
        let shift = (tr - nu) / s.nrows() as f64;
        for i in 0..s.nrows() {
            s[(i, i)] -= shift;
        }
    }
}

fn symmetrize(s: &mut DMatrix<f64>) {
    let n = s.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

/// Dykstra's alternating projections with default warm state.
pub fn dykstra_project(
    set: &FeasibleSet,
    sigma: &SymMatrix,
    tol: f64,
    max_iters: usize,
) -> Result<SymMatrix, FeasibleSetError> {
    let settings = DykstraSettings { tol, max_iters, ..DykstraSettings::default() };
    dykstra_project_with(set, sigma, &settings, None).map(|o| o.point)
}

/// Projects `sigma` onto the active constraint sets, cycling PSD cone, trace
/// half-space, affine set. A warm start reuses increments from a previous
/// call; the iterate starts at `sigma - sum(increments)`.
pub fn dykstra_project_with(
    set: &FeasibleSet,
    sigma: &SymMatrix,
    settings: &DykstraSettings,
    warm: Option<&mut DykstraWarmStart>,
) -> Result<DykstraOutcome, FeasibleSetError> {
    let n = set.n;
    if sigma.dim() != n {
        return Err(FeasibleSetError::DimensionMismatch(format!("Σ must be {n}x{n}, got {0}x{0}", sigma.dim())));
    }
    let mut local;
    let warm = match warm {
        Some(w) => {
            if w.increments[0].nrows() != n {
                *w = DykstraWarmStart::zeros(n);
            }
            w
        }
        None => {
            local = DykstraWarmStart::zeros(n);
            &mut local
        }
    };
    let c = settings.constraints;
    let z = sigma.as_matrix();
    let mut x = z.clone();
    for (p, on) in warm.increments.iter_mut().zip([c.psd, c.trace, c.affine]) {
        if on {
            x -= &*p;
        } else {
            p.fill(0.0);
        }
    }
    let gaps_of = |x: &DMatrix<f64>| {
        let s = SymMatrix::from_symmetrized(x.clone());
        let g = set.feasibility_violation(&s);
        FeasibilityGaps {
            psd: if c.psd { g.psd } else { 0.0 },
            trace: if c.trace { g.trace } else { 0.0 },
            affine: if c.affine { g.affine } else { 0.0 },
        }
    };
    let mut y = DMatrix::zeros(n, n);
    let mut prev = x.clone();
    let mut increment = DMatrix::zeros(n, n);
    for it in 1..=settings.max_iters {
        let mut drift = 0.0;
        for (i, on) in [c.psd, c.trace, c.affine].into_iter().enumerate() {
            if !on {
                continue;
            }
            y.copy_from(&x);
            y += &warm.increments[i];
            x.copy_from(&y);
            match i {
                0 => psd_in_place(&mut x),
                1 => trace_in_place(&mut x, set.nu),
                _ => set.affine_in_place(&mut x),
            }
            increment.copy_from(&y);
            increment -= &x;
            drift += (&increment - &warm.increments[i]).norm();
            warm.increments[i].copy_from(&increment);
        }
        symmetrize(&mut x);
        let change = (&x - &prev).norm().max(drift);
        if change <= settings.tol {
            let gaps = gaps_of(&x);
            if gaps.max() <= 10.0 * settings.tol {
                return Ok(DykstraOutcome { point: SymMatrix::from_symmetrized(x), iterations: it, gaps });
            }
        }
        prev.copy_from(&x);
    }
    let gaps = gaps_of(&x);
    Err(FeasibleSetError::NotConverged {
        iterations: settings.max_iters,
        gaps,
        last: Box::new(SymMatrix::from_symmetrized(x)),
    })
}

/// `||Σ - Π_{S2}(Σ)||_F` for `Σ` feasible in `S1`.
pub fn cross_set_distance(s1: &FeasibleSet, s2: &FeasibleSet, sigma: &SymMatrix) -> Result<f64, FeasibleSetError> {
    let gaps = s1.feasibility_violation(sigma);
    if gaps.max() > 1e-6 {
        return Err(FeasibleSetError::InfeasibleInput(gaps));
    }
    let projected = dykstra_project(s2, sigma, DEFAULT_TOL, DEFAULT_MAX_ITERS)?;
    Ok(sigma.distance(&projected))
}
