//! Time-varying diagonal cost schedules, the fixed benchmark policy and
//! global-cost evaluation.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lti::{
    certify_strong_stability, joint_covariance, steady_state_covariance, LinearPolicy, LtiError, LtiSystem,
    StabilityCert, StabilityRejection,
};
use crate::matops::SymMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid cost parameter: {0}")]
    InvalidParameter(String),
    #[error("benchmark policy is not certified: {0}")]
    InvalidBenchmark(StabilityRejection),
    #[error(transparent)]
    Lti(#[from] LtiError),
}

/// Local costs `(Q_{i,t}, R_{i,t})` of one agent in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct CostPair {
    pub q: SymMatrix,
    pub r: SymMatrix,
}

impl CostPair {
    /// Checks PSD-ness and `Tr Q, Tr R <= c`.
    pub fn new(q: SymMatrix, r: SymMatrix, c: f64) -> Result<Self, CostError> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if m.min_eigenvalue() < -1e-10 {
                return Err(CostError::InvalidParameter(format!("{name} is not PSD")));
            }
            if m.trace() > c + 1e-12 {
                return Err(CostError::InvalidParameter(format!("Tr {name} = {} exceeds C = {c}", m.trace())));
            }
        }
        Ok(Self { q, r })
    }

    /// `blockdiag(Q, R)`, the gradient of `Σ ↦ blockdiag(Q, R) • Σ`.
    pub fn gradient(&self) -> SymMatrix {
        SymMatrix::block_diag(&self.q, &self.r)
    }
}

/// Diagonal costs for every round and agent, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSchedule {
    m: usize,
    horizon: usize,
    d: usize,
    k: usize,
    c: f64,
    seed: u64,
    q: Vec<f64>,
    r: Vec<f64>,
    q_sum: Vec<f64>,
    r_sum: Vec<f64>,
}

/// Diagonal entries drawn from `U[0, C/d]` for `Q` and `U[0, C/k]` for `R`.
pub fn generate_uniform_diagonal(
    m: usize,
    horizon: usize,
    d: usize,
    k: usize,
    c: f64,
    seed: u64,
) -> Result<CostSchedule, CostError> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(CostError::InvalidParameter(format!("C must be finite and >= 0, got {c}")));
    }
    if m == 0 || d == 0 || k == 0 {
        return Err(CostError::InvalidParameter("m, d and k must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (qs, rs) = (c / d as f64, c / k as f64);
    let mut q = Vec::with_capacity(horizon * m * d);
    let mut r = Vec::with_capacity(horizon * m * k);
    for _ in 0..horizon * m {
        q.extend((0..d).map(|_| rng.random::<f64>() * qs));
        r.extend((0..k).map(|_| rng.random::<f64>() * rs));
    }
    let mut q_sum = vec![0.0; horizon * d];
    let mut r_sum = vec![0.0; horizon * k];
    for t in 0..horizon {
        for i in 0..m {
            let base = t * m + i;
            for a in 0..d {
                q_sum[t * d + a] += q[base * d + a];
            }
            for a in 0..k {
                r_sum[t * k + a] += r[base * k + a];
            }
        }
    }
    Ok(CostSchedule { m, horizon, d, k, c, seed, q, r, q_sum, r_sum })
}

impl CostSchedule {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn bound(&self) -> f64 {
        self.c
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Diagonal of `Q_{i,t}`; rounds are 1-based.
    pub fn q_diag(&self, t: usize, i: usize) -> &[f64] {
        let base = ((t - 1) * self.m + i) * self.d;
        &self.q[base..base + self.d]
    }

    pub fn r_diag(&self, t: usize, i: usize) -> &[f64] {
        let base = ((t - 1) * self.m + i) * self.k;
        &self.r[base..base + self.k]
    }

    /// Diagonal of `Q_t = sum_i Q_{i,t}`.
    pub fn q_total(&self, t: usize) -> &[f64] {
        &self.q_sum[(t - 1) * self.d..t * self.d]
    }

    pub fn r_total(&self, t: usize) -> &[f64] {
        &self.r_sum[(t - 1) * self.k..t * self.k]
    }

    pub fn pair(&self, t: usize, i: usize) -> CostPair {
        CostPair { q: SymMatrix::from_diagonal(self.q_diag(t, i)), r: SymMatrix::from_diagonal(self.r_diag(t, i)) }
    }

    /// The first `horizon` rounds.
    pub fn truncated(&self, horizon: usize) -> Self {
        let h = horizon.min(self.horizon);
        Self {
            horizon: h,
            q: self.q[..h * self.m * self.d].to_vec(),
            r: self.r[..h * self.m * self.k].to_vec(),
            q_sum: self.q_sum[..h * self.d].to_vec(),
            r_sum: self.r_sum[..h * self.k].to_vec(),
            ..self.clone()
        }
    }

    /// Writes `round, agent, q_0.., r_0..` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string(), "agent".to_string()];
        header.extend((0..self.d).map(|a| format!("q_{a}")));
        header.extend((0..self.k).map(|a| format!("r_{a}")));
        w.write_record(&header)?;
        for t in 1..=self.horizon {
            for i in 0..self.m {
                let mut row = vec![t.to_string(), i.to_string()];
                row.extend(self.q_diag(t, i).iter().map(|v| v.to_string()));
                row.extend(self.r_diag(t, i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn diag_quad(diag: &[f64], v: &DVector<f64>) -> f64 {
    diag.iter().zip(v.iter()).map(|(q, x)| q * x * x).sum()
}

/// `x^T Q_t x + u^T R_t u` with `Q_t`, `R_t` summed over agents.
pub fn global_cost(schedule: &CostSchedule, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    diag_quad(schedule.q_total(t), x) + diag_quad(schedule.r_total(t), u)
}

/// `blockdiag(Q_t, R_t) • Σ`.
pub fn global_sdp_cost(schedule: &CostSchedule, t: usize, sigma: &SymMatrix) -> f64 {
    let s = sigma.as_matrix();
    let d = schedule.d;
    let q: f64 = schedule.q_total(t).iter().enumerate().map(|(a, v)| v * s[(a, a)]).sum();
    let r: f64 = schedule.r_total(t).iter().enumerate().map(|(a, v)| v * s[(d + a, d + a)]).sum();
    q + r
}

/// The fixed comparator `K^s = -kappa 10^-2 I` with its certificate.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub policy: LinearPolicy,
    pub certificate: StabilityCert,
}

impl Benchmark {
    /// Steady-state joint covariance `Σ^s`.
    pub fn steady_state(&self, sys: &LtiSystem) -> Result<SymMatrix, CostError> {
        let x = steady_state_covariance(sys, &self.policy)?;
        Ok(joint_covariance(&self.policy, &x))
    }
}

pub fn benchmark_policy(sys: &LtiSystem, kappa: f64, gamma: f64) -> Result<Benchmark, CostError> {
    let policy = LinearPolicy::scaled_identity(sys.input_dim(), sys.state_dim(), -kappa * 1e-2);
    benchmark_from_gain(sys, policy, kappa, gamma)
}

/// Certifies an arbitrary comparator gain.
pub fn benchmark_from_gain(sys: &LtiSystem, policy: LinearPolicy, kappa: f64, gamma: f64) -> Result<Benchmark, CostError> {
    let certificate = certify_strong_stability(sys, &policy, kappa, gamma).map_err(CostError::InvalidBenchmark)?;
    Ok(Benchmark { policy, certificate })
}

/// Steady-state expected cost `sum_t blockdiag(Q_t, R_t) • Σ(c)` of `K = c I`
/// for each gain in the grid; unstable gains are skipped.
pub fn scalar_gain_sweep(sys: &LtiSystem, schedule: &CostSchedule, gains: &[f64]) -> Vec<(f64, f64)> {
    let (d, k) = (sys.state_dim(), sys.input_dim());
    let mut q_tot = vec![0.0; d];
    let mut r_tot = vec![0.0; k];
    for t in 1..=schedule.horizon() {
        for (a, v) in schedule.q_total(t).iter().enumerate() {
            q_tot[a] += v;
        }
        for (a, v) in schedule.r_total(t).iter().enumerate() {
            r_tot[a] += v;
        }
    }
    let l = SymMatrix::from_diagonal(&q_tot.iter().chain(&r_tot).copied().collect::<Vec<_>>());
    gains
        .iter()
        .filter_map(|&c| {
            let policy = LinearPolicy::scaled_identity(k, d, c);
            let x = steady_state_covariance(sys, &policy).ok()?;
            Some((c, l.dot(&joint_covariance(&policy, &x))))
        })
        .collect()
}

/// Best gain of a sweep.
pub fn best_scalar_gain(sweep: &[(f64, f64)]) -> Option<(f64, f64)> {
    sweep.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1))
}
