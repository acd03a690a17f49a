//! Distributed online projected gradient descent over the per-agent
//! covariance sets, policy extraction and Gaussian action sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::costs::{global_sdp_cost, CostPair, CostSchedule};
use crate::feasible_set::{
    dykstra_project_with, DykstraSettings, DykstraWarmStart, FeasibilityGaps, FeasibleSet, FeasibleSetError,
};
use crate::lti::{lyapunov_fixed_point, LinearPolicy, LtiError, LtiSystem};
use crate::matops::{spectral_norm, spectral_radius, SymMatrix};
use crate::network::MixingMatrix;
use crate::sysid::SystemEstimate;

/// Added to `V` before sampling.
pub const V_JITTER: f64 = 1e-15;
/// Ridge applied to a nearly singular `Σ_xx`.
pub const XX_RIDGE: f64 = 1e-12;
const XX_RIDGE_TRIGGER: f64 = 1e-10;
/// Negative eigenvalues of `V` down to this are treated as round-off.
pub const V_NEGATIVE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("Σ_xx is not positive definite (min eigenvalue {min_eig:e})")]
    SingularStateBlock { min_eig: f64 },
    #[error("action covariance V has eigenvalue {min_eig:e} below -{V_NEGATIVE_TOL:e}")]
    IndefiniteActionCovariance { min_eig: f64 },
    #[error("projection failed for agent {agent} at round {round}: {source}")]
    Projection { agent: usize, round: usize, source: FeasibleSetError },
    #[error("agent {agent}: {source}")]
    FeasibleSet { agent: usize, source: FeasibleSetError },
    #[error("agent {agent}: prior controller is unstable for the agent's estimate: {source}")]
    Initialization { agent: usize, source: LtiError },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One agent's online state.
#[derive(Debug, Clone)]
pub struct AgentRoundState {
    pub agent: usize,
    pub sigma: SymMatrix,
    pub x: DVector<f64>,
    pub estimate: SystemEstimate,
    pub set: FeasibleSet,
    pub warm: DykstraWarmStart,
    /// Dykstra cycles used by the latest projection.
    pub last_iterations: usize,
}

/// `u ~ N(K x, V)` extracted from a covariance iterate.
#[derive(Debug, Clone)]
pub struct ExtractedPolicy {
    pub k: LinearPolicy,
    pub v: SymMatrix,
    /// Smallest eigenvalue of `V` before the jitter.
    pub v_min_eig: f64,
    factor: DMatrix<f64>,
}

/// `K = Σ_ux Σ_xx^{-1}`, `V = Σ_uu - K Σ_xx K^T + 1e-15 I`.
pub fn extract_policy(sigma: &SymMatrix, state_dim: usize) -> Result<ExtractedPolicy, ControllerError> {
    let n = sigma.dim();
    let d = state_dim;
    if d == 0 || d >= n {
        return Err(ControllerError::DimensionMismatch(format!("state dim {d} must lie in 1..{n}")));
    }
    let k = n - d;
    let s = sigma.as_matrix();
    let mut sxx = s.view((0, 0), (d, d)).into_owned();
    let sux = s.view((d, 0), (k, d)).into_owned();
    let suu = s.view((d, d), (k, k)).into_owned();

    let mut min_eig = SymmetricEigen::new(sxx.clone()).eigenvalues.min();
    if min_eig < -V_NEGATIVE_TOL {
        return Err(ControllerError::SingularStateBlock { min_eig });
    }
    if min_eig < XX_RIDGE_TRIGGER {
        for i in 0..d {
            sxx[(i, i)] += XX_RIDGE;
        }
        min_eig += XX_RIDGE;
    }
    let chol = match sxx.clone().cholesky() {
        Some(c) => c,
        _ => return Err(ControllerError::SingularStateBlock { min_eig }),
    };
    // Σ_xx K^T = Σ_ux^T
    let gain = chol.solve(&sux.transpose()).transpose();
    let mut v = &suu - &gain * &sxx * gain.transpose();
    v = (&v + v.transpose()) * 0.5;
    let eig = SymmetricEigen::new(v.clone());
    let v_min_eig = eig.eigenvalues.min();
    if v_min_eig < -V_NEGATIVE_TOL {
        return Err(ControllerError::IndefiniteActionCovariance { min_eig: v_min_eig });
    }
    for i in 0..k {
        v[(i, i)] += V_JITTER;
    }
    let mut factor = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        factor.column_mut(j).scale_mut((lam + V_JITTER).max(0.0).sqrt());
    }
    Ok(ExtractedPolicy {
        k: LinearPolicy::new(gain).map_err(|e| ControllerError::InvalidParameter(e.to_string()))?,
        v: SymMatrix::from_symmetrized(v),
        v_min_eig,
        factor,
    })
}

/// Draws `u ~ N(K x, V)`.
pub fn sample_action<R: Rng + ?Sized>(policy: &ExtractedPolicy, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let k = policy.factor.nrows();
    let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    policy.k.act(x) + &policy.factor * z
}

/// One synchronous round: mix neighbour iterates, subtract the local cost
/// gradient, project onto the agent's own set.
pub fn odgd_round(
    states: &mut [AgentRoundState],
    costs: &[CostPair],
    p: &MixingMatrix,
    eta: f64,
    settings: &DykstraSettings,
) -> Result<(), ControllerError> {
    if costs.len() != states.len() {
        return Err(ControllerError::DimensionMismatch(format!("{} cost pairs for {} agents", costs.len(), states.len())));
    }
    let grads: Vec<SymMatrix> = costs.iter().map(CostPair::gradient).collect();
    odgd_round_with(states, p, eta, settings, 0, |i, m| *m -= grads[i].as_matrix() * eta)
}

fn odgd_round_with<F>(
    states: &mut [AgentRoundState],
    p: &MixingMatrix,
    eta: f64,
    settings: &DykstraSettings,
    round: usize,
    mut descend: F,
) -> Result<(), ControllerError>
where
    F: FnMut(usize, &mut DMatrix<f64>),
{
    let m = states.len();
    if p.m() != m {
        return Err(ControllerError::DimensionMismatch(format!("network has {} agents, state has {m}", p.m())));
    }
    if !(eta > 0.0) {
        return Err(ControllerError::InvalidParameter(format!("eta must be positive, got {eta}")));
    }
    let n = states[0].sigma.dim();
    let mut targets = Vec::with_capacity(m);
    for i in 0..m {
        let mut mixed = DMatrix::zeros(n, n);
        for (j, s) in states.iter().enumerate() {
            let w = p.weight(j, i);
            if w != 0.0 {
                mixed += s.sigma.as_matrix() * w;
            }
        }
        descend(i, &mut mixed);
        targets.push(SymMatrix::from_symmetrized(mixed));
    }
    for (state, target) in states.iter_mut().zip(targets) {
        let out = dykstra_project_with(&state.set, &target, settings, Some(&mut state.warm))
            .map_err(|source| ControllerError::Projection { agent: state.agent, round, source })?;
        state.sigma = out.point;
        state.last_iterations = out.iterations;
    }
    Ok(())
}

/// Largest pairwise Frobenius distance between agent iterates.
pub fn consensus_spread(states: &[AgentRoundState]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            worst = worst.max(a.sigma.distance(&b.sigma));
        }
    }
    worst
}

/// `blockdiag(X̂, ν/(2k) I)` projected onto the agent's set, where `X̂` is the
/// steady state of the prior controller under the agent's own estimate.
pub fn initial_iterate(
    set: &FeasibleSet,
    estimate: &SystemEstimate,
    w: &SymMatrix,
    prior: &LinearPolicy,
    settings: &DykstraSettings,
    warm: &mut DykstraWarmStart,
) -> Result<SymMatrix, ControllerError> {
    let agent = estimate.owner;
    let m = estimate.a_hat() + estimate.b_hat() * prior.gain();
    let x = lyapunov_fixed_point(&m, w).map_err(|source| ControllerError::Initialization { agent, source })?;
    let k = estimate.b_hat().ncols();
    let seed = SymMatrix::block_diag(&x, &SymMatrix::scaled_identity(k, set.nu() / (2.0 * k as f64)));
    dykstra_project_with(set, &seed, settings, Some(warm))
        .map(|o| o.point)
        .map_err(|source| ControllerError::Projection { agent, round: 0, source })
}

/// Everything the online phase needs besides randomness.
#[derive(Debug, Clone)]
pub struct ExploitationSetup<'a> {
    pub sys: &'a LtiSystem,
    pub estimates: &'a [SystemEstimate],
    pub network: &'a MixingMatrix,
    pub schedule: &'a CostSchedule,
    pub eta: f64,
    pub nu: f64,
    pub prior: &'a LinearPolicy,
    /// First online round `T_s` (1-based).
    pub start_round: usize,
    /// Last round `T`.
    pub horizon: usize,
    pub dykstra: DykstraSettings,
    /// Checks `rho(A + B K) < 1` against the true plant for every policy.
    pub track_stability: bool,
    /// Keeps per-round, per-agent diagnostics rows.
    pub record_trace: bool,
}

/// What the observer sees each round for each agent.
#[derive(Debug)]
pub struct RoundObservation<'a> {
    pub round: usize,
    pub agent: usize,
    pub x: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
}

/// Per-round, per-agent diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub agent: usize,
    pub gaps: FeasibilityGaps,
    pub k_norm: f64,
    pub spread: f64,
    pub dykstra_iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExploitationDiagnostics {
    pub policies: usize,
    pub max_k_norm: f64,
    /// Policies with `||K|| > sqrt(nu) / sigma`.
    pub k_bound_violations: usize,
    /// Policies checked for and found with `rho(A + B K) >= 1`.
    pub stability_checked: usize,
    pub unstable_policies: usize,
    /// Consensus spread of the iterates used in each online round.
    pub spread: Vec<f64>,
    /// Dykstra cycles summed over agents per online round.
    pub dykstra_iterations: Vec<usize>,
    /// Largest `||x||^2` seen in the online phase.
    pub max_state_sq: f64,
    /// Largest feasibility gap of any iterate used for a policy.
    pub max_gap: f64,
    /// `sum_t blockdiag(Q_t, R_t) • Σ_{j,t}` per agent.
    pub sdp_cost: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct ExploitationOutcome {
    pub states: Vec<AgentRoundState>,
    pub diagnostics: ExploitationDiagnostics,
}

/// Runs the online phase from `T_s` to `T`. Each round every agent extracts
/// its policy, acts, steps the plant, reports `(x, u)` to the observer, and
/// then all agents perform one synchronous projected gradient round with the
/// costs just revealed.
pub fn run_exploitation<R: Rng>(
    setup: &ExploitationSetup<'_>,
    initial_states: Vec<DVector<f64>>,
    noise_rngs: &mut [R],
    action_rngs: &mut [R],
    observer: &mut dyn FnMut(RoundObservation<'_>),
) -> Result<ExploitationOutcome, ControllerError> {
    let sys = setup.sys;
    let m = setup.network.m();
    let (d, n) = (sys.state_dim(), sys.joint_dim());
    if setup.estimates.len() != m || initial_states.len() != m || noise_rngs.len() != m || action_rngs.len() != m {
        return Err(ControllerError::DimensionMismatch(format!("expected {m} agents everywhere")));
    }
    if setup.start_round == 0 || setup.horizon > setup.schedule.horizon() {
        return Err(ControllerError::InvalidParameter(format!(
            "rounds {}..={} outside the cost schedule (1..={})",
            setup.start_round,
            setup.horizon,
            setup.schedule.horizon()
        )));
    }
    let mut states = Vec::with_capacity(m);
    for (i, (est, x)) in setup.estimates.iter().zip(initial_states).enumerate() {
        let set = FeasibleSet::build(est.d_hat.clone(), sys.w().clone(), setup.nu)
            .map_err(|source| ControllerError::FeasibleSet { agent: i, source })?;
        let mut warm = DykstraWarmStart::zeros(n);
        let sigma = initial_iterate(&set, est, sys.w(), setup.prior, &setup.dykstra, &mut warm)?;
        states.push(AgentRoundState { agent: i, sigma, x, estimate: est.clone(), set, warm, last_iterations: 0 });
    }

    let k_bound = (setup.nu / sys.sigma2()).sqrt();
    let rounds = setup.horizon.saturating_sub(setup.start_round) + 1;
    let mut diag = ExploitationDiagnostics {
        sdp_cost: vec![0.0; m],
        spread: Vec::with_capacity(rounds),
        dykstra_iterations: Vec::with_capacity(rounds),
        ..Default::default()
    };
    for t in setup.start_round..=setup.horizon {
        let spread = consensus_spread(&states);
        diag.spread.push(spread);
        for (i, st) in states.iter_mut().enumerate() {
            let policy = extract_policy(&st.sigma, d)?;
            let k_norm = policy.k.norm();
            diag.policies += 1;
            diag.max_k_norm = diag.max_k_norm.max(k_norm);
            if k_norm > k_bound + 1e-9 {
                diag.k_bound_violations += 1;
            }
            if setup.track_stability {
                diag.stability_checked += 1;
                if spectral_radius(&sys.closed_loop(&policy.k)) >= 1.0 {
                    diag.unstable_policies += 1;
                }
            }
            diag.sdp_cost[i] += global_sdp_cost(setup.schedule, t, &st.sigma);
            if setup.record_trace {
                diag.trace.push(TraceRow {
                    round: t,
                    agent: i,
                    gaps: st.set.feasibility_violation(&st.sigma),
                    k_norm,
                    spread,
                    dykstra_iterations: st.last_iterations,
                });
            }
            let u = sample_action(&policy, &st.x, &mut action_rngs[i]);
            let w = sys.sample_noise(&mut noise_rngs[i]);
            let next = sys.propagate(&st.x, &u, &w);
            observer(RoundObservation { round: t, agent: i, x: &st.x, u: &u });
            diag.max_state_sq = diag.max_state_sq.max(st.x.norm_squared());
            st.x = next;
        }
        if t < setup.horizon {
            let eta = setup.eta;
            let schedule = setup.schedule;
            odgd_round_with(&mut states, setup.network, eta, &setup.dykstra, t, |i, mat| {
                for (a, q) in schedule.q_diag(t, i).iter().enumerate() {
                    mat[(a, a)] -= eta * q;
                }
                for (a, r) in schedule.r_diag(t, i).iter().enumerate() {
                    mat[(d + a, d + a)] -= eta * r;
                }
            })?;
            diag.dykstra_iterations.push(states.iter().map(|s| s.last_iterations).sum());
            for st in &states {
                let g = st.set.feasibility_violation(&st.sigma).max();
                diag.max_gap = diag.max_gap.max(g);
            }
        }
    }
    Ok(ExploitationOutcome { states, diagnostics: diag })
}

/// `||K|| <= sqrt(nu) / sigma` bound on extracted gains.
pub fn gain_bound(nu: f64, sigma2: f64) -> f64 {
    (nu / sigma2).sqrt()
}

/// `||L_t||`-style helper: spectral norm of a policy's closed loop.
pub fn closed_loop_norm(sys: &LtiSystem, k: &LinearPolicy) -> f64 {
    spectral_norm(&sys.closed_loop(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::generate_uniform_diagonal;
    use crate::lti::{joint_covariance, steady_state_covariance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NU: f64 = 75.9375;

    fn reference_plant() -> LtiSystem {
        LtiSystem::new(DMatrix::identity(3, 3) * 0.2, DMatrix::identity(3, 3) * (0.4 / 1.5), SymMatrix::identity(3), 1.0, 1.0)
            .unwrap()
    }

    fn truth_estimate(sys: &LtiSystem, owner: usize) -> SystemEstimate {
        SystemEstimate { d_hat: sys.ab(), owner }
    }

    fn agent_states(sys: &LtiSystem, sigmas: &[SymMatrix]) -> Vec<AgentRoundState> {
        sigmas
            .iter()
            .enumerate()
            .map(|(i, s)| AgentRoundState {
                agent: i,
                sigma: s.clone(),
                x: DVector::zeros(3),
                estimate: truth_estimate(sys, i),
                set: FeasibleSet::build(sys.ab(), sys.w().clone(), NU).unwrap(),
                warm: DykstraWarmStart::zeros(6),
                last_iterations: 0,
            })
            .collect()
    }

    fn feasible_sigma(sys: &LtiSystem, gain: f64) -> SymMatrix {
        let k = LinearPolicy::scaled_identity(3, 3, gain);
        joint_covariance(&k, &steady_state_covariance(sys, &k).unwrap())
    }

    fn zero_costs(m: usize) -> Vec<CostPair> {
        vec![CostPair { q: SymMatrix::zeros(3), r: SymMatrix::zeros(3) }; m]
    }

    #[test]
    fn decoupled_covariance_gives_zero_gain() {
        let x = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let u = SymMatrix::from_diagonal(&[0.5]);
        let p = extract_policy(&SymMatrix::block_diag(&x, &u), 2).unwrap();
        assert_eq!(p.k.gain(), &DMatrix::zeros(1, 2));
        assert!((p.v.as_matrix()[(0, 0)] - (0.5 + 1e-15)).abs() < 1e-18);
    }

    #[test]
    fn rank_structured_covariance_recovers_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let kt = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let x = SymMatrix::from_symmetrized(&a * a.transpose() + DMatrix::identity(3, 3));
            let s = joint_covariance(&LinearPolicy::new(kt.clone()).unwrap(), &x);
            let p = extract_policy(&s, 3).unwrap();
            assert!((p.k.gain() - &kt).norm() <= 1e-8);
            assert!(p.v.distance(&SymMatrix::scaled_identity(2, 1e-15)) <= 1e-10);
        }
    }

    #[test]
    fn feasible_iterates_respect_gain_bound() {
        let sys = reference_plant();
        let set = FeasibleSet::build(sys.ab(), sys.w().clone(), NU).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-8.0..8.0));
            let s = SymMatrix::from_symmetrized(&m + m.transpose());
            let out = dykstra_project_with(&set, &s, &DykstraSettings::default(), None).unwrap();
            let p = extract_policy(&out.point, 3).unwrap();
            assert!(p.k.norm() <= gain_bound(NU, 1.0) + 1e-9);
        }
    }

    #[test]
    fn singular_state_block_is_ridged() {
        let s = SymMatrix::block_diag(&SymMatrix::zeros(2), &SymMatrix::identity(1));
        let p = extract_policy(&s, 2).unwrap();
        assert!(p.k.gain().iter().all(|v| v.is_finite()));
        assert_eq!(p.k.norm(), 0.0);
    }

    #[test]
    fn indefinite_state_block_rejected() {
        let s = SymMatrix::block_diag(&SymMatrix::from_diagonal(&[1.0, -1e-3]), &SymMatrix::identity(1));
        assert!(matches!(extract_policy(&s, 2), Err(ControllerError::SingularStateBlock { .. })));
    }

    #[test]
    fn zero_covariance_samples_deterministically() {
        let x = SymMatrix::identity(2);
        let k = LinearPolicy::new(DMatrix::from_row_slice(1, 2, &[0.5, -1.0])).unwrap();
        let p = extract_policy(&joint_covariance(&k, &x), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = DVector::from_vec(vec![2.0, 1.0]);
        let u = sample_action(&p, &state, &mut rng);
        assert!((u[0] - 0.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_moments() {
        let x = SymMatrix::identity(2);
        let v = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.5])).unwrap();
        let s = SymMatrix::block_diag(&x, &v);
        let p = extract_policy(&s, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = DVector::from_vec(vec![1.0, -1.0]);
        let n = 100_000;
        let mut mean = DVector::zeros(2);
        let mut cov = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let u = sample_action(&p, &state, &mut rng);
            mean += &u;
            cov += &u * u.transpose();
        }
        mean /= n as f64;
        cov = cov / n as f64 - &mean * mean.transpose();
        let kx = p.k.act(&state);
        let tol = 4.0 * (v.max_eigenvalue() / n as f64).sqrt();
        assert!((0..2).all(|i| (mean[i] - kx[i]).abs() <= tol));
        assert!((cov - v.as_matrix()).norm() <= 0.05 * v.frobenius_norm());
    }

    #[test]
    fn single_agent_zero_cost_is_fixed() {
        let sys = reference_plant();
        let s = feasible_sigma(&sys, -0.1);
        let mut states = agent_states(&sys, std::slice::from_ref(&s));
        odgd_round(&mut states, &zero_costs(1), &MixingMatrix::single(), 0.1, &DykstraSettings::default()).unwrap();
        assert!(states[0].sigma.distance(&s) <= 1e-8);
    }

    #[test]
    fn symmetric_agents_stay_identical() {
        let sys = reference_plant();
        let s = feasible_sigma(&sys, -0.2);
        let mut states = agent_states(&sys, &vec![s; 4]);
        let p = MixingMatrix::build_cycle(4, 1, 0.5).unwrap();
        let pair = CostPair { q: SymMatrix::from_diagonal(&[3.0, 1.0, 2.0]), r: SymMatrix::from_diagonal(&[1.0, 1.0, 4.0]) };
        for _ in 0..10 {
            odgd_round(&mut states, &vec![pair.clone(); 4], &p, 0.05, &DykstraSettings::default()).unwrap();
            for st in &states[1..] {
                assert_eq!(st.sigma, states[0].sigma);
            }
        }
    }

    #[test]
    fn mixing_contracts_disagreement() {
        let sys = reference_plant();
        let sigmas: Vec<SymMatrix> = [-0.3, -0.1, 0.0, 0.1, 0.2].iter().map(|&g| feasible_sigma(&sys, g)).collect();
        let p = MixingMatrix::build_cycle(5, 1, 0.6).unwrap();
        let disagreement = |ss: &[DMatrix<f64>]| {
            let mean = ss.iter().fold(DMatrix::zeros(6, 6), |a, s| a + s) / ss.len() as f64;
            ss.iter().map(|s| (s - &mean).norm_squared()).sum::<f64>().sqrt()
        };
        let before: Vec<DMatrix<f64>> = sigmas.iter().map(|s| s.as_matrix().clone()).collect();
        let after: Vec<DMatrix<f64>> = (0..5)
            .map(|i| (0..5).fold(DMatrix::zeros(6, 6), |acc, j| acc + &before[j] * p.weight(j, i)))
            .collect();
        assert!(disagreement(&after) <= p.beta() * disagreement(&before) + 1e-12);
    }

    #[test]
    fn gradient_block_is_exact_linear_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = CostPair { q: SymMatrix::from_diagonal(&[1.0, 2.0, 3.0]), r: SymMatrix::from_diagonal(&[0.5, 0.1, 4.0]) };
        let g = pair.gradient();
        let f = |s: &DMatrix<f64>| g.as_matrix().dot(s);
        let s = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let h = 1e-6;
        for a in 0..6 {
            for b in 0..6 {
                let mut e = DMatrix::zeros(6, 6);
                e[(a, b)] = 1.0;
                let fd = (f(&(&s + &e * h)) - f(&(&s - &e * h))) / (2.0 * h);
                assert!((fd - g.as_matrix()[(a, b)]).abs() <= 1e-6);
            }
        }
        assert!(g.as_matrix().view((0, 3), (3, 3)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_cost_run_keeps_iterates() {
        let sys = reference_plant();
        let schedule = generate_uniform_diagonal(3, 40, 3, 3, 0.0, 0).unwrap();
        let estimates: Vec<_> = (0..3).map(|i| truth_estimate(&sys, i)).collect();
        let net = MixingMatrix::build_cycle(3, 1, 0.5).unwrap();
        let prior = LinearPolicy::scaled_identity(3, 3, -0.015);
        let setup = ExploitationSetup {
            sys: &sys,
            estimates: &estimates,
            network: &net,
            schedule: &schedule,
            eta: 0.1,
            nu: NU,
            prior: &prior,
            start_round: 1,
            horizon: 40,
            dykstra: DykstraSettings::default(),
            track_stability: true,
            record_trace: false,
        };
        let x0 = vec![DVector::from_vec(vec![1.0, -1.0, 0.5]); 3];
        let mut noise: Vec<_> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let mut act: Vec<_> = (0..3).map(|i| ChaCha8Rng::seed_from_u64(10 + i)).collect();
        let set = FeasibleSet::build(sys.ab(), sys.w().clone(), NU).unwrap();
        let start =
            initial_iterate(&set, &estimates[0], sys.w(), &prior, &DykstraSettings::default(), &mut DykstraWarmStart::zeros(6))
                .unwrap();
        let out = run_exploitation(&setup, x0, &mut noise, &mut act, &mut |_| {}).unwrap();
        assert!(out.diagnostics.spread.iter().all(|s| *s <= 1e-7));
        for st in &out.states {
            assert!(st.sigma.distance(&start) <= 1e-6);
        }
        assert_eq!(out.diagnostics.unstable_policies, 0);
    }

    #[test]
    fn online_phase_keeps_invariants() {
        let sys = reference_plant();
        let m = 4;
        let horizon = 300;
        let schedule = generate_uniform_diagonal(m, horizon, 3, 3, 300.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let estimates: Vec<_> = (0..m)
            .map(|i| SystemEstimate {
                d_hat: sys.ab() + DMatrix::from_fn(3, 6, |_, _| rng.random_range(-0.01..0.01)),
                owner: i,
            })
            .collect();
        let net = MixingMatrix::build_cycle(m, 1, 0.6).unwrap();
        let prior = LinearPolicy::scaled_identity(3, 3, -0.015);
        let setup = ExploitationSetup {
            sys: &sys,
            estimates: &estimates,
            network: &net,
            schedule: &schedule,
            eta: (horizon as f64).powf(-1.0 / 3.0),
            nu: NU,
            prior: &prior,
            start_round: 1,
            horizon,
            dykstra: DykstraSettings::default(),
            track_stability: true,
            record_trace: true,
        };
        let mut noise: Vec<_> = (0..m).map(|i| ChaCha8Rng::seed_from_u64(100 + i as u64)).collect();
        let mut act: Vec<_> = (0..m).map(|i| ChaCha8Rng::seed_from_u64(200 + i as u64)).collect();
        let mut seen = 0;
        let out = run_exploitation(&setup, vec![DVector::zeros(3); m], &mut noise, &mut act, &mut |_| seen += 1).unwrap();
        let d = &out.diagnostics;
        assert_eq!(seen, m * horizon);
        assert_eq!(d.policies, m * horizon);
        assert_eq!(d.k_bound_violations, 0);
        assert!(d.max_gap <= 1e-6);
        assert!(d.max_state_sq <= 50.0 * NU);
        assert_eq!(d.trace.len(), m * horizon);
        assert!(d.unstable_policies * 100 <= d.stability_checked);
    }
}
