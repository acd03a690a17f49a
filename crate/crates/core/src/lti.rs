//! The true LTI plant `x' = A x + B u + w`, strong-stability certificates and
//! steady-state covariance computations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::matops::{psd_sqrt_factor, spectral_norm, spectral_radius, SymMatrix};

/// Fixed-point iteration budget for the discrete Lyapunov equation.
pub const LYAPUNOV_MAX_ITERS: usize = 1_000_000;
/// Frobenius residual at which the Lyapunov iteration stops.
pub const LYAPUNOV_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LtiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("noise covariance violates W >= sigma^2 I: min eigenvalue {min_eig} < sigma^2 = {sigma2}")]
    NoiseTooSmall { min_eig: f64, sigma2: f64 },
    #[error("||[A B]||_F = {norm} exceeds the configured bound {theta}")]
    DynamicsNormTooLarge { norm: f64, theta: f64 },
    #[error("closed loop is not stable (spectral radius {spectral_radius}); steady state diverges")]
    Divergent { spectral_radius: f64 },
    #[error("Lyapunov iteration did not reach residual {LYAPUNOV_TOL:e} within {LYAPUNOV_MAX_ITERS} iterations (last residual {residual:e})")]
    LyapunovNotConverged { residual: f64 },
    #[error("eps = {eps} is outside the regime eps <= gamma / (4 kappa^2) = {limit}")]
    OutOfRegime { eps: f64, limit: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// The plant shared by every agent.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    w: SymMatrix,
    sigma2: f64,
    theta: f64,
    noise_factor: DMatrix<f64>,
}

impl LtiSystem {
    /// `sigma2` is the lower bound `W >= sigma2 I` and `theta` bounds
    /// `||[A B]||_F`; both are checked here.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: SymMatrix,
        sigma2: f64,
        theta: f64,
    ) -> Result<Self, LtiError> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(LtiError::DimensionMismatch(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != d || b.ncols() == 0 {
            return Err(LtiError::DimensionMismatch(format!("B must be {d}xk with k >= 1, got {}x{}", b.nrows(), b.ncols())));
        }
        if w.dim() != d {
            return Err(LtiError::DimensionMismatch(format!("W must be {d}x{d}, got {0}x{0}", w.dim())));
        }
        if sigma2 < 0.0 || !sigma2.is_finite() {
            return Err(LtiError::InvalidParameter(format!("sigma^2 must be >= 0, got {sigma2}")));
        }
        let min_eig = w.min_eigenvalue();
        if min_eig < sigma2 - 1e-10 {
            return Err(LtiError::NoiseTooSmall { min_eig, sigma2 });
        }
        let norm = stack(&a, &b).norm();
        if norm > theta {
            return Err(LtiError::DynamicsNormTooLarge { norm, theta });
        }
        let noise_factor = psd_sqrt_factor(&w);
        Ok(Self { a, b, w, sigma2, theta, noise_factor })
    }

    /// Same noise model and bounds, different dynamics. The norm bound is not
    /// re-checked: perturbed copies are used for estimates and sensitivity
    /// experiments.
    pub fn with_dynamics(&self, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, LtiError> {
        Self::new(a, b, self.w.clone(), self.sigma2, f64::INFINITY).map(|mut s| {
            s.theta = self.theta;
            s
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `n = d + k`.
    pub fn joint_dim(&self) -> usize {
        self.state_dim() + self.input_dim()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn w(&self) -> &SymMatrix {
        &self.w
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `[A B]`, a `d x n` matrix.
    pub fn ab(&self) -> DMatrix<f64> {
        stack(&self.a, &self.b)
    }

    pub fn closed_loop(&self, k: &LinearPolicy) -> DMatrix<f64> {
        &self.a + &self.b * &k.0
    }

    /// Draws `w ~ N(0, W)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.state_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.noise_factor * z
    }

    /// `A x + B u + w` for a given noise realisation.
    pub fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }
}

pub(crate) fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    c.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    c.view_mut((0, a.ncols()), (b.nrows(), b.ncols())).copy_from(b);
    c
}

/// One noisy plant transition, `A x + B u + w` with `w ~ N(0, W)`.
pub fn step<R: Rng + ?Sized>(
    sys: &LtiSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, LtiError> {
    if x.len() != sys.state_dim() || u.len() != sys.input_dim() {
        return Err(LtiError::DimensionMismatch(format!(
            "expected x in R^{} and u in R^{}, got {} and {}",
            sys.state_dim(),
            sys.input_dim(),
            x.len(),
            u.len()
        )));
    }
    let w = sys.sample_noise(rng);
    Ok(sys.propagate(x, u, &w))
}

/// Linear state feedback `u = K x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy(DMatrix<f64>);

impl LinearPolicy {
    pub fn new(k: DMatrix<f64>) -> Result<Self, LtiError> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(LtiError::InvalidParameter("policy gain has non-finite entries".into()));
        }
        Ok(Self(k))
    }

    /// `scale * I` for a `k x d` gain (rectangular identity when `k != d`).
    pub fn scaled_identity(k: usize, d: usize, scale: f64) -> Self {
        Self(DMatrix::identity(k, d) * scale)
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        spectral_norm(&self.0)
    }

    pub fn act(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }
}

/// Witness `A + B K = H L H^{-1}` of `(kappa, gamma)`-strong stability.
#[derive(Debug, Clone)]
pub struct StabilityCert {
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub kappa: f64,
    pub gamma: f64,
}

impl StabilityCert {
    pub fn condition_number(&self) -> f64 {
        match self.h.clone().try_inverse() {
            Some(inv) => spectral_norm(&self.h) * spectral_norm(&inv),
            None => f64::INFINITY,
        }
    }

    /// Checks every certificate inequality against `sys` and `k`.
    pub fn verify(&self, sys: &LtiSystem, k: &LinearPolicy) -> Result<(), String> {
        let Some(h_inv) = self.h.clone().try_inverse() else {
            return Err("H is singular".into());
        };
        if k.norm() > self.kappa + 1e-9 {
            return Err(format!("||K|| = {} > kappa = {}", k.norm(), self.kappa));
        }
        let l_norm = spectral_norm(&self.l);
        if l_norm > 1.0 - self.gamma + 1e-9 {
            return Err(format!("||L|| = {l_norm} > 1 - gamma = {}", 1.0 - self.gamma));
        }
        let cond = spectral_norm(&self.h) * spectral_norm(&h_inv);
        if cond > self.kappa + 1e-9 {
            return Err(format!("||H|| ||H^-1|| = {cond} > kappa = {}", self.kappa));
        }
        let m = sys.closed_loop(k);
        let recon = &self.h * &self.l * &h_inv;
        let err = (&m - recon).norm();
        if err > 1e-8 * m.norm().max(1.0) {
            return Err(format!("A + BK differs from H L H^-1 by {err:e}"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityRejection {
    #[error("invalid targets: need kappa >= 1 and 0 < gamma <= 1 (kappa = {kappa}, gamma = {gamma})")]
    InvalidTargets { kappa: f64, gamma: f64 },
    #[error("||K|| = {norm} exceeds kappa = {kappa}")]
    GainTooLarge { norm: f64, kappa: f64 },
    #[error(
        "no certificate found (spectral radius {spectral_radius}, best ||L|| {best_l_norm}, cond(H) {condition}); \
         the construction (identity, then real block diagonalisation) is incomplete, so this does not prove the \
         policy is not strongly stable"
    )]
    NoCertificate { spectral_radius: f64, best_l_norm: f64, condition: f64 },
}

/// Searches for `(H, L)` witnessing `(kappa, gamma)`-strong stability.
///
/// First tries `H = I` (enough whenever `||A + BK|| <= 1 - gamma`), then a
/// real block diagonalisation of `A + BK` built from its real Schur form, with
/// each complex-pair block rotated into `[[a, b], [-b, a]]` form so its norm is
/// the eigenvalue modulus. Any returned certificate is valid; a rejection only
/// means this construction failed.
pub fn certify_strong_stability(
    sys: &LtiSystem,
    k: &LinearPolicy,
    kappa: f64,
    gamma: f64,
) -> Result<StabilityCert, StabilityRejection> {
    if !(kappa >= 1.0) || !(gamma > 0.0 && gamma <= 1.0) {
        return Err(StabilityRejection::InvalidTargets { kappa, gamma });
    }
    let norm = k.norm();
    if norm > kappa {
        return Err(StabilityRejection::GainTooLarge { norm, kappa });
    }
    let m = sys.closed_loop(k);
    let d = m.nrows();
    let m_norm = spectral_norm(&m);
    if m_norm <= 1.0 - gamma {
        let cert = StabilityCert { h: DMatrix::identity(d, d), l: m, kappa, gamma };
        debug_assert!(spectral_radius(&cert.l) <= 1.0 - gamma + 1e-9);
        return Ok(cert);
    }
    let rho = spectral_radius(&m);
    let reject = |best_l_norm: f64, condition: f64| StabilityRejection::NoCertificate {
        spectral_radius: rho,
        best_l_norm,
        condition,
    };
    if rho > 1.0 - gamma {
        return Err(reject(m_norm, 1.0));
    }
    let Some(h) = block_diagonalizer(&m) else {
        return Err(reject(m_norm, f64::INFINITY));
    };
    let Some(h_inv) = h.clone().try_inverse() else {
        return Err(reject(m_norm, f64::INFINITY));
    };
    let l = &h_inv * &m * &h;
    let l_norm = spectral_norm(&l);
    let cond = spectral_norm(&h) * spectral_norm(&h_inv);
    if l_norm <= 1.0 - gamma && cond <= kappa {
        Ok(StabilityCert { h, l, kappa, gamma })
    } else {
        Err(reject(l_norm, cond))
    }
}

/// Builds the certificate for a perturbed plant from a certificate for the
/// nominal one: same `H`, `L2 = L + H^{-1} [(A2 - A1) + (B2 - B1) K] H`, and
/// `gamma2 = gamma - 2 kappa^2 eps`.
pub fn transfer_certificate(
    cert: &StabilityCert,
    nominal: &LtiSystem,
    perturbed: &LtiSystem,
    k: &LinearPolicy,
    eps: f64,
) -> Option<StabilityCert> {
    let h_inv = cert.h.clone().try_inverse()?;
    let delta = (perturbed.a() - nominal.a()) + (perturbed.b() - nominal.b()) * k.gain();
    let l2 = &cert.l + &h_inv * delta * &cert.h;
    Some(StabilityCert {
        h: cert.h.clone(),
        l: l2,
        kappa: cert.kappa,
        gamma: cert.gamma - 2.0 * cert.kappa * cert.kappa * eps,
    })
}

/// Similarity `H` that block-diagonalises `m` (1x1 and canonical 2x2 blocks).
fn block_diagonalizer(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let (q, mut t) = m.clone().schur().unpack();
    let scale = t.norm().max(1e-300);

    // block partition of the quasi-triangular factor
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > 1e-13 * scale {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }

    // Y^{-1} T Y block diagonal (successive Sylvester eliminations).
    let mut y = DMatrix::<f64>::identity(n, n);
    let nb = blocks.len();
    for jb in 1..nb {
        for ib in 0..jb {
            let (ri, pi) = blocks[ib];
            let (rj, pj) = blocks[jb];
            let tij = t.view((ri, rj), (pi, pj)).into_owned();
            if tij.norm() <= 1e-15 * scale {
                continue;
            }
            let tii = t.view((ri, ri), (pi, pi)).into_owned();
            let tjj = t.view((rj, rj), (pj, pj)).into_owned();
            // (I ⊗ Tii - Tjj^T ⊗ I) vec(Z) = -vec(Tij)
            let sys = DMatrix::<f64>::identity(pj, pj).kronecker(&tii)
                - tjj.transpose().kronecker(&DMatrix::<f64>::identity(pi, pi));
            let rhs = -DVector::from_column_slice(tij.as_slice());
            let z = sys.lu().solve(&rhs)?;
            let z = DMatrix::from_column_slice(pi, pj, z.as_slice());
            if z.iter().any(|v| !v.is_finite()) {
                return None;
            }
            // apply the similarity S = I + E_ij(Z): T <- S^{-1} T S
            let mut s = DMatrix::<f64>::identity(n, n);
            s.view_mut((ri, rj), (pi, pj)).copy_from(&z);
            let mut s_inv = DMatrix::<f64>::identity(n, n);
            s_inv.view_mut((ri, rj), (pi, pj)).copy_from(&(-&z));
            t = &s_inv * &t * &s;
            y = &y * &s;
        }
    }

    // canonicalise each block and normalise its columns
    let mut c = DMatrix::<f64>::identity(n, n);
    for &(r, p) in &blocks {
        if p == 2 {
            let (a, b, cc, dd) = (t[(r, r)], t[(r, r + 1)], t[(r + 1, r)], t[(r + 1, r + 1)]);
            let tr = a + dd;
            let det = a * dd - b * cc;
            let disc = tr * tr / 4.0 - det;
            let s = if disc < 0.0 {
                // eigenvector of alpha + i beta is (b, lambda - a)
                let alpha = tr / 2.0;
                let beta = (-disc).sqrt();
                if b.abs() < 1e-300 {
                    return None;
                }
                DMatrix::from_row_slice(2, 2, &[b, 0.0, alpha - a, beta])
            } else {
                let l1 = tr / 2.0 + disc.sqrt();
                let l2 = tr / 2.0 - disc.sqrt();
                let ev = |l: f64| {
                    if b.abs() > 1e-300 {
                        (b, l - a)
                    } else {
                        (l - dd, cc)
                    }
                };
                let (v1, v2) = (ev(l1), ev(l2));
                DMatrix::from_row_slice(2, 2, &[v1.0, v2.0, v1.1, v2.1])
            };
            let norm = s.column(0).norm().max(s.column(1).norm());
            if !(norm > 0.0) {
                return None;
            }
            c.view_mut((r, r), (2, 2)).copy_from(&(s / norm));
        }
    }
    let mut h = q * y * c;
    // both columns of a 2x2 block share one scale to keep the block canonical
    for &(r, p) in &blocks {
        let nrm = (0..p).map(|o| h.column(r + o).norm()).fold(0.0, f64::max);
        if nrm > 0.0 {
            for o in 0..p {
                h.column_mut(r + o).scale_mut(1.0 / nrm);
            }
        }
    }
    Some(h)
}

/// Fixed point of `X = M X M^T + W`.
pub fn lyapunov_fixed_point(m: &DMatrix<f64>, w: &SymMatrix) -> Result<SymMatrix, LtiError> {
    let rho = spectral_radius(m);
    if rho >= 1.0 {
        return Err(LtiError::Divergent { spectral_radius: rho });
    }
    let mt = m.transpose();
    let wm = w.as_matrix();
    let mut x = wm.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..LYAPUNOV_MAX_ITERS {
        let next = m * &x * &mt + wm;
        // residual of the new iterate is M (next - x) M^T
        let diff = &next - &x;
        residual = (m * diff * &mt).norm();
        x = next;
        if residual <= LYAPUNOV_TOL {
            return Ok(SymMatrix::from_symmetrized(x));
        }
    }
    Err(LtiError::LyapunovNotConverged { residual })
}

/// Steady-state state covariance under `u = K x`.
pub fn steady_state_covariance(sys: &LtiSystem, k: &LinearPolicy) -> Result<SymMatrix, LtiError> {
    lyapunov_fixed_point(&sys.closed_loop(k), sys.w())
}

/// Joint state-action covariance `[[X, X K^T], [K X, K X K^T]]` of `u = K x`.
pub fn joint_covariance(k: &LinearPolicy, x: &SymMatrix) -> SymMatrix {
    let (kd, d) = k.0.shape();
    let kx = &k.0 * x.as_matrix();
    let mut s = DMatrix::zeros(d + kd, d + kd);
    s.view_mut((0, 0), (d, d)).copy_from(x.as_matrix());
    s.view_mut((d, 0), (kd, d)).copy_from(&kx);
    s.view_mut((0, d), (d, kd)).copy_from(&kx.transpose());
    s.view_mut((d, d), (kd, kd)).copy_from(&(&kx * k.0.transpose()));
    SymMatrix::from_symmetrized(s)
}

/// `xi * eps` with `xi = Tr(W) 4 kappa^6 / gamma^2`: the PSD-order gap between
/// steady-state covariances of two plants `eps` apart under a shared policy.
pub fn covariance_gap_bound(kappa: f64, gamma: f64, w: &SymMatrix, eps: f64) -> Result<f64, LtiError> {
    let limit = gamma / (4.0 * kappa * kappa);
    if eps > limit {
        return Err(LtiError::OutOfRegime { eps, limit });
    }
    Ok(w.trace() * 4.0 * kappa.powi(6) / (gamma * gamma) * eps)
}

/// State covariances propagated under a policy sequence alongside each
/// policy's own steady state.
#[derive(Debug, Clone)]
pub struct CovarianceTrack {
    /// `propagated[t]` is the covariance before `policies[t]` acts; one longer
    /// than the policy sequence.
    pub propagated: Vec<SymMatrix>,
    /// Steady-state covariance of each policy.
    pub targets: Vec<SymMatrix>,
}

impl CovarianceTrack {
    /// `||X̂_t - X_t||` (spectral) for each policy index.
    pub fn gaps(&self) -> Vec<f64> {
        self.targets
            .iter()
            .zip(&self.propagated)
            .map(|(x, xh)| spectral_norm(xh.sub(x).as_matrix()))
            .collect()
    }

    /// Largest spectral-norm jump between consecutive steady states.
    pub fn max_target_drift(&self) -> f64 {
        self.targets
            .windows(2)
            .map(|w| spectral_norm(w[1].sub(&w[0]).as_matrix()))
            .fold(0.0, f64::max)
    }
}

/// Propagates `X̂_{t+1} = M_t X̂_t M_t^T + W` under a time-varying policy.
pub fn sequential_covariance_tracking(
    sys: &LtiSystem,
    policies: &[LinearPolicy],
    initial: &SymMatrix,
) -> Result<CovarianceTrack, LtiError> {
    let mut propagated = Vec::with_capacity(policies.len() + 1);
    let mut targets = Vec::with_capacity(policies.len());
    propagated.push(initial.clone());
    let mut x = initial.clone();
    for k in policies {
        let m = sys.closed_loop(k);
        targets.push(lyapunov_fixed_point(&m, sys.w())?);
        x = x.congruence(&m).add(sys.w());
        propagated.push(x.clone());
    }
    Ok(CovarianceTrack { propagated, targets })
}
