//! Experiment orchestration: configuration, phase bookkeeping, regret
//! accounting against the fixed benchmark, Monte Carlo aggregation and
//! CSV/JSON export.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{run_exploitation, ExploitationSetup, TraceRow};
use crate::costs::{benchmark_from_gain, benchmark_policy, generate_uniform_diagonal, global_cost, global_sdp_cost, Benchmark, CostSchedule};
use crate::error::{Error, Result};
use crate::feasible_set::{Constraints, DykstraSettings};
use crate::lti::{LinearPolicy, LtiSystem};
use crate::matops::SymMatrix;
use crate::network::MixingMatrix;
use crate::sysid::{
    estimate_spread, estimation_error, explore, extra_self_tuned, extra_solve, extra_step_size, initial_estimates,
    ridge_weight, ExplorationLog, ExtraSolver, PriorController, SelfTuning, SystemEstimate,
};

/// A matrix given either as `scale * I` or row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSpec {
    ScaledIdentity { scale: f64 },
    Dense { rows: Vec<Vec<f64>> },
}

impl MatrixSpec {
    pub fn build(&self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::ScaledIdentity { scale } => Ok(DMatrix::identity(rows, cols) * *scale),
            MatrixSpec::Dense { rows: data } => {
                if data.len() != rows || data.iter().any(|r| r.len() != cols) {
                    return Err(Error::Config(format!("dense matrix must be {rows}x{cols}")));
                }
                Ok(DMatrix::from_fn(rows, cols, |i, j| data[i][j]))
            }
        }
    }
}

/// Communication graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    Cycle { neighbors_per_side: usize, self_weight: f64 },
    Complete {},
    Custom { matrix: Vec<Vec<f64>> },
}

impl NetworkSpec {
    /// Cycle, two neighbours, self weight 0.6.
    pub fn net_a() -> Self {
        NetworkSpec::Cycle { neighbors_per_side: 1, self_weight: 0.6 }
    }

    /// Cycle, six neighbours, self weight 0.6.
    pub fn net_b() -> Self {
        NetworkSpec::Cycle { neighbors_per_side: 3, self_weight: 0.6 }
    }

    /// Complete graph with uniform weights.
    pub fn net_c() -> Self {
        NetworkSpec::Complete {}
    }

    pub fn build(&self, m: usize) -> Result<MixingMatrix> {
        let p = match self {
            NetworkSpec::Complete {} if m == 1 => MixingMatrix::single(),
            NetworkSpec::Cycle { neighbors_per_side, self_weight } => {
                MixingMatrix::build_cycle(m, *neighbors_per_side, *self_weight)?
            }
            NetworkSpec::Complete {} => MixingMatrix::build_complete(m)?,
            NetworkSpec::Custom { matrix } => {
                if matrix.len() != m || matrix.iter().any(|r| r.len() != m) {
                    return Err(Error::Config(format!("custom mixing matrix must be {m}x{m}")));
                }
                MixingMatrix::from_matrix(DMatrix::from_fn(m, m, |i, j| matrix[i][j]))?
            }
        };
        Ok(p)
    }
}

/// Everything that defines an experiment. Defaults are the 20-agent reference
/// experiment at the desk-scale horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub agents: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub w: MatrixSpec,
    pub sigma2: f64,
    /// Bound on `||[A B]||_F`.
    pub theta: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Defaults to `kappa`.
    pub kappa0: Option<f64>,
    /// Defaults to `gamma`.
    pub gamma0: Option<f64>,
    /// Exploration controller; defaults to the benchmark gain.
    pub k0: Option<MatrixSpec>,
    /// Comparator gain; defaults to `-kappa 10^-2 I`.
    pub benchmark_gain: Option<MatrixSpec>,
    /// Bound on `Tr(W)`; defaults to `Tr(W)`.
    pub lambda2: Option<f64>,
    pub network: NetworkSpec,
    pub horizon: usize,
    pub t0: Option<usize>,
    /// Fixed EXTRA iteration count; self-tuned when absent.
    pub t1: Option<usize>,
    /// Defaults to `T^{-1/3}`.
    pub eta: Option<f64>,
    /// Defaults to `2 kappa^4 lambda^2 / gamma`.
    pub nu: Option<f64>,
    /// Trace bound `C` on each cost matrix.
    pub cost_bound: f64,
    pub delta: f64,
    /// Proof constant in the minimum-horizon diagnostic.
    pub zeta: f64,
    pub trials: usize,
    pub seed: u64,
    /// Counts the cost of rounds before `T_s` on both sides of the regret.
    pub charge_exploration: bool,
    /// Skips identification and hands every agent the true `(A, B)`.
    pub known_system: bool,
    /// Row spacing of regret_series.csv; defaults to `max(1, T / 200)`.
    pub series_stride: Option<usize>,
    pub dykstra_tol: f64,
    pub dykstra_max_iters: usize,
    pub track_stability: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            agents: 20,
            state_dim: 3,
            input_dim: 3,
            a: MatrixSpec::ScaledIdentity { scale: 0.2 },
            b: MatrixSpec::ScaledIdentity { scale: 0.4 / 1.5 },
            w: MatrixSpec::ScaledIdentity { scale: 1.0 },
            sigma2: 1.0,
            theta: 1.0,
            kappa: 1.5,
            gamma: 0.4,
            kappa0: None,
            gamma0: None,
            k0: None,
            benchmark_gain: None,
            lambda2: None,
            network: NetworkSpec::net_a(),
            horizon: 20_000,
            t0: None,
            t1: None,
            eta: None,
            nu: None,
            cost_bound: 300.0,
            delta: 0.1,
            zeta: 1.0,
            trials: 10,
            seed: 0,
            charge_exploration: true,
            known_system: false,
            series_stride: None,
            dykstra_tol: crate::feasible_set::DEFAULT_TOL,
            dykstra_max_iters: crate::feasible_set::DEFAULT_MAX_ITERS,
            track_stability: true,
        }
    }
}

/// Reads a config file. A previous run's `run_meta.json` is accepted too.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    let json_err = |source| Error::Json { path: path.into(), source };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    let is_meta = value.as_object().is_some_and(|o| o.contains_key("config") && o.contains_key("derived"));
    let inner = if is_meta { value["config"].clone() } else { value };
    serde_json::from_value(inner).map_err(json_err)
}

/// Exploration length `ceil(T^{2/3} ln(T / delta))`, capped at `T / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub t0: usize,
    pub capped: bool,
    pub warning: Option<String>,
}

pub fn default_phases(horizon: usize, delta: f64) -> Result<Phases> {
    if horizon < 2 {
        return Err(Error::Config(format!("horizon must be >= 2, got {horizon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    let t = horizon as f64;
    let raw = (t.powf(2.0 / 3.0) * (t / delta).ln()).ceil() as usize;
    let cap = horizon / 2;
    if raw > cap {
        let warning = format!("T0 = {raw} exceeds T/2 at T = {horizon}; capped at {cap}");
        warn!("{warning}");
        return Ok(Phases { t0: cap, capped: true, warning: Some(warning) });
    }
    Ok(Phases { t0: raw, capped: false, warning: None })
}

/// The four lower bounds on `T` and their maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimumHorizon {
    pub terms: [f64; 4],
    pub value: f64,
}

/// Theoretical minimum horizon, evaluated with `kbar = sqrt(nu) / sigma` and
/// `gbar = 1 / (2 kbar^2)`. Diagnostic only.
pub fn minimum_horizon(config: &ExperimentConfig) -> Result<MinimumHorizon> {
    let r = Resolved::new(config)?;
    Ok(minimum_horizon_resolved(config, &r))
}

fn minimum_horizon_resolved(c: &ExperimentConfig, r: &Resolved) -> MinimumHorizon {
    let m = c.agents as f64;
    let n = (c.state_dim + c.input_dim) as f64;
    let d = c.state_dim as f64;
    let kbar2 = r.nu / c.sigma2;
    let gbar = 1.0 / (2.0 * kbar2);
    let t1 = ((1.0 + 38.0 * 2f64.sqrt() * n / m.sqrt()) * 4.0 * kbar2 / gbar).powi(3);
    let t2 = (3.0 * m.sqrt() / (1.0 - r.beta) * (2.0 * c.zeta + 4.0 * c.cost_bound) * 2.0 / (gbar * c.sigma2)).powi(3);
    let t3 = (200.0 * (n * 12f64.ln() + (3.0 * m / c.delta).ln())).powf(1.5);
    let (th2, k0, g0) = (c.theta * c.theta, r.kappa0, r.gamma0);
    let varrho = m * 144.0 * th2 * k0.powi(4) / (g0 * g0) * (1.0 + th2 * k0 * k0);
    let t4 = (4.0 * varrho + 6.0 * m + 3.0 * d).powf(1.5);
    let terms = [t1, t2, t3, t4];
    MinimumHorizon { terms, value: terms.iter().copied().fold(f64::NEG_INFINITY, f64::max) }
}

/// A validated config turned into model objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub sys: LtiSystem,
    pub network: MixingMatrix,
    pub prior: PriorController,
    pub benchmark: Benchmark,
    pub kappa0: f64,
    pub gamma0: f64,
    pub lambda2: f64,
    pub nu: f64,
    pub eta: f64,
    pub beta: f64,
    pub t0: usize,
    pub t0_warning: Option<String>,
    pub stride: usize,
    pub dykstra: DykstraSettings,
}

impl Resolved {
    pub fn new(c: &ExperimentConfig) -> Result<Self> {
        if c.agents == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        if c.state_dim == 0 || c.input_dim == 0 {
            return Err(Error::Config("state and input dimensions must be positive".into()));
        }
        if c.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if !(c.delta > 0.0 && c.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", c.delta)));
        }
        if !(c.sigma2 >= 0.0) {
            return Err(Error::Config(format!("sigma2 must be non-negative, got {}", c.sigma2)));
        }
        if !(c.kappa >= 1.0 && c.gamma > 0.0 && c.gamma < 1.0) {
            return Err(Error::Config(format!("need kappa >= 1 and gamma in (0, 1), got {} and {}", c.kappa, c.gamma)));
        }
        let (d, k) = (c.state_dim, c.input_dim);
        let a = c.a.build(d, d)?;
        let b = c.b.build(d, k)?;
        let w = SymMatrix::new(c.w.build(d, d)?)?;
        let sys = LtiSystem::new(a, b, w, c.sigma2, c.theta)?;
        let network = c.network.build(c.agents)?;
        let kappa0 = c.kappa0.unwrap_or(c.kappa);
        let gamma0 = c.gamma0.unwrap_or(c.gamma);
        let benchmark = match &c.benchmark_gain {
            None => benchmark_policy(&sys, c.kappa, c.gamma)?,
            Some(spec) => benchmark_from_gain(&sys, LinearPolicy::new(spec.build(k, d)?)?, c.kappa, c.gamma)?,
        };
        let k0 = match &c.k0 {
            None => benchmark.policy.clone(),
            Some(spec) => LinearPolicy::new(spec.build(k, d)?)?,
        };
        let prior = PriorController::new(&sys, k0, kappa0, gamma0)?;
        let lambda2 = c.lambda2.unwrap_or_else(|| sys.w().trace());
        let nu = c.nu.unwrap_or(2.0 * c.kappa.powi(4) * lambda2 / c.gamma);
        let eta = c.eta.unwrap_or((c.horizon.max(1) as f64).powf(-1.0 / 3.0));
        if !(nu > 0.0 && eta > 0.0) {
            return Err(Error::Config(format!("nu and eta must be positive, got {nu} and {eta}")));
        }
        let (t0, t0_warning) = if c.known_system {
            (0, None)
        } else if let Some(t0) = c.t0 {
            (t0, None)
        } else {
            let p = default_phases(c.horizon, c.delta)?;
            (p.t0, p.warning)
        };
        if !c.known_system && t0 == 0 {
            return Err(Error::Config("identification needs T0 >= 1".into()));
        }
        let t1_floor = if c.known_system { 0 } else { c.t1.unwrap_or(0) };
        if c.horizon < t0 + t1_floor + 2 {
            return Err(Error::Config(format!(
                "horizon {} must be at least T_s = T0 + T1 + 2 = {}",
                c.horizon,
                t0 + t1_floor + 2
            )));
        }
        let stride = c.series_stride.unwrap_or((c.horizon / 200).max(1));
        if stride == 0 {
            return Err(Error::Config("series_stride must be >= 1".into()));
        }
        let dykstra = DykstraSettings { tol: c.dykstra_tol, max_iters: c.dykstra_max_iters, constraints: Constraints::default() };
        let beta = network.beta();
        Ok(Self { sys, network, prior, benchmark, kappa0, gamma0, lambda2, nu, eta, beta, t0, t0_warning, stride, dykstra })
    }
}

/// Values derived from a config, written to run_meta.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub t0: usize,
    /// Per trial; fixed or self-tuned EXTRA iterations.
    pub t1: Vec<usize>,
    pub t_s: Vec<usize>,
    pub nu: f64,
    pub eta: f64,
    pub beta: f64,
    pub lambda2: f64,
    pub kappa0: f64,
    pub gamma0: f64,
    pub minimum_horizon: MinimumHorizon,
    pub trial_seeds: Vec<u64>,
    pub schedule_seeds: Vec<u64>,
    pub series_stride: usize,
    pub benchmark: String,
    pub warnings: Vec<String>,
}

/// Cumulative costs per agent at the recorded rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretSeries {
    pub rounds: Vec<usize>,
    /// `cum_alg[j][r]`: algorithm cost of agent `j` through `rounds[r]`.
    pub cum_alg: Vec<Vec<f64>>,
    pub cum_bench: Vec<Vec<f64>>,
}

impl RegretSeries {
    pub fn m(&self) -> usize {
        self.cum_alg.len()
    }

    pub fn horizon(&self) -> usize {
        self.rounds.last().copied().unwrap_or(0)
    }

    pub fn regret(&self, agent: usize, idx: usize) -> f64 {
        self.cum_alg[agent][idx] - self.cum_bench[agent][idx]
    }

    pub fn final_regret(&self, agent: usize) -> f64 {
        self.regret(agent, self.rounds.len() - 1)
    }

    /// Mean over agents of `regret_j(T) / T`.
    pub fn averaged_regret(&self) -> f64 {
        let m = self.m();
        (0..m).map(|j| self.final_regret(j)).sum::<f64>() / (m as f64 * self.horizon() as f64)
    }
}

/// Optional per-trial artefacts for debugging.
#[derive(Debug, Clone)]
pub struct TrialDumps {
    pub schedule: CostSchedule,
    pub exploration: Option<ExplorationLog>,
    /// `(iteration, agent, ||D_i - [A B]||_F)`.
    pub extra_errors: Vec<(usize, usize, f64)>,
    /// `(round, Dykstra cycles summed over agents)`.
    pub dykstra: Vec<(usize, usize)>,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDiagnostics {
    pub policies: usize,
    pub max_k_norm: f64,
    pub k_bound_violations: usize,
    pub stability_checked: usize,
    pub unstable_policies: usize,
    /// Mean consensus spread over the last quarter of online rounds.
    pub late_spread: f64,
    pub max_gap: f64,
    pub max_state_sq: f64,
    pub mean_dykstra_iterations: f64,
    /// Per agent, `sum_t L_t • Σ_{j,t} - sum_t L_t • Σ^s` over the online rounds.
    pub sdp_regret: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub schedule_seed: u64,
    pub t0: usize,
    pub t1: usize,
    pub t_s: usize,
    pub tau_hat: Option<f64>,
    pub series: RegretSeries,
    /// Largest `||D_i - [A B]||_F` over agents.
    pub estimation_error: f64,
    pub estimate_spread: f64,
    pub diagnostics: TrialDiagnostics,
    pub flags: Vec<String>,
    pub dumps: Option<TrialDumps>,
}

/// Mean and standard error of one metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    /// Absent for a single trial.
    pub stderr: Option<f64>,
    pub trials: usize,
}

impl MetricSummary {
    pub fn from_values(name: &str, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Self { name: name.into(), mean, stderr, trials: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McAggregate {
    pub trials: usize,
    pub metrics: Vec<MetricSummary>,
}

impl McAggregate {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |m| m.mean)
    }
}

pub const AVG_REGRET: &str = "avg_regret";

/// Metric name and extractor, in summary.csv order.
type MetricFn = fn(&TrialResult) -> f64;

const METRICS: &[(&str, MetricFn)] = &[
    (AVG_REGRET, |t| t.series.averaged_regret()),
    ("final_regret", |t| mean((0..t.series.m()).map(|j| t.series.final_regret(j)))),
    ("regret_over_t23", |t| {
        mean((0..t.series.m()).map(|j| t.series.final_regret(j))) / (t.series.horizon() as f64).powf(2.0 / 3.0)
    }),
    ("cost_alg_per_round", |t| {
        mean(t.series.cum_alg.iter().map(|c| *c.last().unwrap())) / t.series.horizon() as f64
    }),
    ("cost_bench_per_round", |t| {
        mean(t.series.cum_bench.iter().map(|c| *c.last().unwrap())) / t.series.horizon() as f64
    }),
    ("agent_regret_spread", |t| {
        let r: Vec<f64> = (0..t.series.m()).map(|j| t.series.final_regret(j)).collect();
        let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
        (hi - lo) / mean(r.iter().copied()).abs()
    }),
    ("sdp_regret", |t| mean(t.diagnostics.sdp_regret.iter().copied())),
    ("estimation_error", |t| t.estimation_error),
    ("t0", |t| t.t0 as f64),
    ("t1", |t| t.t1 as f64),
    ("t_s", |t| t.t_s as f64),
    ("late_consensus_spread", |t| t.diagnostics.late_spread),
    ("max_k_norm", |t| t.diagnostics.max_k_norm),
    ("k_bound_violation_rate", |t| rate(t.diagnostics.k_bound_violations, t.diagnostics.policies)),
    ("unstable_rate", |t| rate(t.diagnostics.unstable_policies, t.diagnostics.stability_checked)),
    ("max_feasibility_gap", |t| t.diagnostics.max_gap),
    ("mean_dykstra_iterations", |t| t.diagnostics.mean_dykstra_iterations),
    ("flagged", |t| if t.flags.is_empty() { 0.0 } else { 1.0 }),
];

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn aggregate(trials: &[TrialResult]) -> McAggregate {
    let metrics = METRICS
        .iter()
        .map(|(name, f)| MetricSummary::from_values(name, &trials.iter().map(f).collect::<Vec<_>>()))
        .collect();
    McAggregate { trials: trials.len(), metrics }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub debug_dumps: bool,
    /// Worker threads; `0` means available parallelism.
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub config: ExperimentConfig,
    pub derived: Derived,
    pub aggregate: McAggregate,
    pub trials: Vec<TrialResult>,
}

const NOISE: u64 = 0;
const ACTION: u64 = 1;
const SCHEDULE_STREAM: u64 = u64::MAX;

/// Independent ChaCha stream `id` under `seed`.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn agent_stream(seed: u64, agent: usize, kind: u64) -> ChaCha8Rng {
    stream(seed, agent as u64 * 4 + kind)
}

/// Trial seeds drawn from the master seed; independent of the topology.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    (0..trials).map(|_| r.next_u64()).collect()
}

pub fn schedule_seed(trial_seed: u64) -> u64 {
    stream(trial_seed, SCHEDULE_STREAM).next_u64()
}

/// Per-agent recorder of cumulative costs at the sampled rounds.
struct Ledger {
    rounds: Vec<usize>,
    charge_from: usize,
    cum: Vec<f64>,
    series: Vec<Vec<f64>>,
    next: Vec<usize>,
}

impl Ledger {
    fn new(m: usize, rounds: Vec<usize>, charge_from: usize) -> Self {
        let n = rounds.len();
        Self { rounds, charge_from, cum: vec![0.0; m], series: vec![Vec::with_capacity(n); m], next: vec![0; m] }
    }

    fn add(&mut self, agent: usize, round: usize, cost: f64) {
        if round >= self.charge_from {
            self.cum[agent] += cost;
        }
        let k = self.next[agent];
        if k < self.rounds.len() && self.rounds[k] == round {
            self.series[agent].push(self.cum[agent]);
            self.next[agent] += 1;
        }
    }
}

fn recorded_rounds(horizon: usize, stride: usize) -> Vec<usize> {
    let mut r: Vec<usize> = (1..=horizon).filter(|t| t % stride == 0).collect();
    if r.last() != Some(&horizon) {
        r.push(horizon);
    }
    r
}

/// Runs one trial end to end: exploration, identification, the transition
/// rounds under `K0`, and the online phase, with the benchmark replaying each
/// agent's plant noise from `x = 0` under `K^s`.
pub fn run_trial(config: &ExperimentConfig, trial: usize, seed: u64, opts: RunOptions) -> Result<TrialResult> {
    let r = Resolved::new(config)?;
    run_trial_resolved(config, &r, trial, seed, opts)
}

fn run_trial_resolved(c: &ExperimentConfig, r: &Resolved, trial: usize, seed: u64, opts: RunOptions) -> Result<TrialResult> {
    let sys = &r.sys;
    let (m, d, n) = (c.agents, sys.state_dim(), sys.joint_dim());
    let horizon = c.horizon;
    let sched_seed = schedule_seed(seed);
    let schedule = generate_uniform_diagonal(m, horizon, d, sys.input_dim(), c.cost_bound, sched_seed)?;
    let mut noise: Vec<_> = (0..m).map(|i| agent_stream(seed, i, NOISE)).collect();
    let mut action: Vec<_> = (0..m).map(|i| agent_stream(seed, i, ACTION)).collect();

    let t0 = r.t0;
    let log = explore(sys, &r.prior, t0, c.sigma2.sqrt(), &mut noise, &mut action)?;
    let ridge = ridge_weight(c.sigma2, c.theta);
    let mut extra_errors = Vec::new();
    let (estimates, t1, tau_hat) = if c.known_system {
        ((0..m).map(|i| SystemEstimate { d_hat: sys.ab(), owner: i }).collect::<Vec<_>>(), 0, None)
    } else {
        let alpha = extra_step_size(&log, ridge);
        let init = initial_estimates::<ChaCha8Rng>(m, d, n, None);
        let (est, t1, tau) = match c.t1 {
            Some(t1) => (extra_solve(&log, &r.network, alpha, t1, &init, ridge)?, t1, None),
            None => {
                let tuned = extra_self_tuned(&log, &r.network, alpha, &init, ridge, SelfTuning::for_horizon(horizon))?;
                (tuned.estimates, tuned.t1, tuned.tau_hat.is_finite().then_some(tuned.tau_hat))
            }
        };
        if opts.debug_dumps {
            let mut solver = ExtraSolver::new(&log, &r.network, alpha, ridge, &init)?;
            loop {
                let it = solver.iterations();
                for e in solver.estimates() {
                    extra_errors.push((it, e.owner, estimation_error(&e, sys)));
                }
                if it >= t1 {
                    break;
                }
                solver.step()?;
            }
        }
        (est, t1, tau)
    };
    let t_s = t0 + t1 + 2;
    if t_s > horizon {
        return Err(Error::Config(format!("T_s = {t_s} exceeds the horizon {horizon}")));
    }

    let rounds = recorded_rounds(horizon, r.stride);
    let charge_from = if c.charge_exploration { 1 } else { t_s };
    let mut alg = Ledger::new(m, rounds.clone(), charge_from);
    let mut bench = Ledger::new(m, rounds.clone(), charge_from);

    // benchmark replays each agent's plant noise
    for i in 0..m {
        let mut rng = agent_stream(seed, i, NOISE);
        let mut x = DVector::zeros(d);
        for t in 1..=horizon {
            let u = r.benchmark.policy.act(&x);
            bench.add(i, t, global_cost(&schedule, t, &x, &u));
            let w = sys.sample_noise(&mut rng);
            x = sys.propagate(&x, &u, &w);
        }
    }

    let mut states = Vec::with_capacity(m);
    for (i, a) in log.agents().iter().enumerate() {
        for s in 0..t0 {
            let x = a.z.column(s).rows(0, d).into_owned();
            let u = a.z.column(s).rows(d, sys.input_dim()).into_owned();
            alg.add(i, s + 1, global_cost(&schedule, s + 1, &x, &u));
        }
        let (x, u) = a.last_round.clone().expect("exploration records its final round");
        alg.add(i, t0 + 1, global_cost(&schedule, t0 + 1, &x, &u));
        let mut x = a.final_state.clone().expect("exploration records its final state");
        for t in t0 + 2..t_s {
            let u = r.prior.k0.act(&x);
            alg.add(i, t, global_cost(&schedule, t, &x, &u));
            let w = sys.sample_noise(&mut noise[i]);
            x = sys.propagate(&x, &u, &w);
        }
        states.push(x);
    }

    let setup = ExploitationSetup {
        sys,
        estimates: &estimates,
        network: &r.network,
        schedule: &schedule,
        eta: r.eta,
        nu: r.nu,
        prior: &r.prior.k0,
        start_round: t_s,
        horizon,
        dykstra: r.dykstra,
        track_stability: c.track_stability,
        record_trace: opts.debug_dumps,
    };
    let out = run_exploitation(&setup, states, &mut noise, &mut action, &mut |o| {
        alg.add(o.agent, o.round, global_cost(&schedule, o.round, o.x, o.u));
    })?;
    let diag = out.diagnostics;

    let sigma_s = r.benchmark.steady_state(sys)?;
    let bench_sdp: f64 = (t_s..=horizon).map(|t| global_sdp_cost(&schedule, t, &sigma_s)).sum();
    let late = &diag.spread[diag.spread.len() * 3 / 4..];
    let projections = diag.dykstra_iterations.len() * m;
    let diagnostics = TrialDiagnostics {
        policies: diag.policies,
        max_k_norm: diag.max_k_norm,
        k_bound_violations: diag.k_bound_violations,
        stability_checked: diag.stability_checked,
        unstable_policies: diag.unstable_policies,
        late_spread: if late.is_empty() { 0.0 } else { mean(late.iter().copied()) },
        max_gap: diag.max_gap,
        max_state_sq: diag.max_state_sq,
        mean_dykstra_iterations: rate(diag.dykstra_iterations.iter().sum(), projections),
        sdp_regret: diag.sdp_cost.iter().map(|s| s - bench_sdp).collect(),
    };
    let mut flags = Vec::new();
    if diagnostics.k_bound_violations > 0 {
        flags.push(format!("{} gains exceeded sqrt(nu)/sigma", diagnostics.k_bound_violations));
    }
    if diagnostics.unstable_policies > 0 {
        flags.push(format!(
            "{} of {} policies had rho(A + BK) >= 1",
            diagnostics.unstable_policies, diagnostics.stability_checked
        ));
    }
    for f in &flags {
        warn!("trial {trial}: {f}");
    }
    let dumps = opts.debug_dumps.then(|| TrialDumps {
        schedule: schedule.clone(),
        exploration: (!c.known_system).then(|| log.clone()),
        extra_errors,
        dykstra: diag.dykstra_iterations.iter().enumerate().map(|(k, v)| (t_s + k, *v)).collect(),
        trace: diag.trace.clone(),
    });
    Ok(TrialResult {
        trial,
        seed,
        schedule_seed: sched_seed,
        t0,
        t1,
        t_s,
        tau_hat,
        series: RegretSeries { rounds, cum_alg: alg.series, cum_bench: bench.series },
        estimation_error: estimates.iter().map(|e| estimation_error(e, sys)).fold(0.0, f64::max),
        estimate_spread: estimate_spread(&estimates),
        diagnostics,
        flags,
        dumps,
    })
}

/// Runs all trials of a config, in parallel, with seeds derived from the
/// master seed. Output does not depend on the thread count.
pub fn monte_carlo(config: &ExperimentConfig, opts: RunOptions) -> Result<MonteCarloResult> {
    let r = Resolved::new(config)?;
    let seeds = trial_seeds(config.seed, config.trials);
    let mh = minimum_horizon_resolved(config, &r);
    let mut warnings: Vec<String> = r.t0_warning.iter().cloned().collect();
    if (config.horizon as f64) < mh.value {
        let w = format!("horizon {} is below the theoretical minimum {:.3e}", config.horizon, mh.value);
        warn!("{w}");
        warnings.push(w);
    }
    let threads = if opts.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        opts.threads
    }
    .min(config.trials);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TrialResult>>>> = Mutex::new((0..config.trials).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= config.trials {
                    break;
                }
                let res = run_trial_resolved(config, &r, k, seeds[k], opts)
                    .map_err(|e| Error::Trial { trial: k, source: Box::new(e) });
                slots.lock().expect("no worker panicked")[k] = Some(res);
            });
        }
    });
    let trials = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|s| s.expect("every trial ran"))
        .collect::<Result<Vec<_>>>()?;
    let derived = Derived {
        t0: r.t0,
        t1: trials.iter().map(|t| t.t1).collect(),
        t_s: trials.iter().map(|t| t.t_s).collect(),
        nu: r.nu,
        eta: r.eta,
        beta: r.beta,
        lambda2: r.lambda2,
        kappa0: r.kappa0,
        gamma0: r.gamma0,
        minimum_horizon: mh,
        trial_seeds: seeds,
        schedule_seeds: trials.iter().map(|t| t.schedule_seed).collect(),
        series_stride: r.stride,
        benchmark: "common random numbers: the benchmark trajectory of agent j starts at x = 0 and replays agent j's plant-noise stream under the fixed comparator gain".into(),
        warnings,
    };
    Ok(MonteCarloResult { config: config.clone(), derived, aggregate: aggregate(&trials), trials })
}

/// Monte Carlo per topology with identical seeds and cost schedules.
pub fn topology_comparison(
    config: &ExperimentConfig,
    topologies: &[(String, NetworkSpec)],
    opts: RunOptions,
) -> Result<Vec<(String, MonteCarloResult)>> {
    if topologies.len() < 2 {
        return Err(Error::Config("a comparison needs at least two topologies".into()));
    }
    topologies
        .iter()
        .map(|(label, net)| {
            let cfg = ExperimentConfig { network: net.clone(), ..config.clone() };
            monte_carlo(&cfg, opts).map(|r| (label.clone(), r))
        })
        .collect()
}

#[derive(Serialize)]
struct SeriesRow {
    trial: usize,
    round: usize,
    agent: usize,
    cum_cost_alg: f64,
    cum_cost_bench: f64,
    regret: f64,
    avg_regret: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    metric: &'a str,
    mean: f64,
    stderr: Option<f64>,
    trials: usize,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config: &'a ExperimentConfig,
    derived: &'a Derived,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io { path: path.into(), source })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv { path: path.into(), source }
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| Error::Io { path: path.into(), source })
}

/// Writes regret_series.csv, summary.csv and run_meta.json into `dir`, plus a
/// `debug/` tree when the trials carry dumps. Returns the written paths.
pub fn export(result: &MonteCarloResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    let mut written = Vec::new();

    let path = dir.join("regret_series.csv");
    let mut w = csv_writer(&path)?;
    for t in &result.trials {
        let s = &t.series;
        for (idx, &round) in s.rounds.iter().enumerate() {
            for agent in 0..s.m() {
                let regret = s.regret(agent, idx);
                w.serialize(SeriesRow {
                    trial: t.trial,
                    round,
                    agent,
                    cum_cost_alg: s.cum_alg[agent][idx],
                    cum_cost_bench: s.cum_bench[agent][idx],
                    regret,
                    avg_regret: regret / round as f64,
                })
                .map_err(csv_err(&path))?;
            }
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("summary.csv");
    let mut w = csv_writer(&path)?;
    for m in &result.aggregate.metrics {
        w.serialize(SummaryRow { metric: &m.name, mean: m.mean, stderr: m.stderr, trials: m.trials })
            .map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("run_meta.json");
    let meta = RunMeta { config: &result.config, derived: &result.derived };
    serde_json::to_writer_pretty(create(&path)?, &meta).map_err(|source| Error::Json { path: path.clone(), source })?;
    written.push(path);

    for t in &result.trials {
        if let Some(d) = &t.dumps {
            written.extend(export_dumps(t.trial, d, &dir.join("debug").join(format!("trial_{}", t.trial)))?);
        }
    }
    Ok(written)
}

fn export_dumps(trial: usize, d: &TrialDumps, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    let mut written = Vec::new();

    let path = dir.join("cost_schedule.csv");
    d.schedule.write_csv(create(&path)?).map_err(csv_err(&path))?;
    written.push(path);

    if let Some(log) = &d.exploration {
        let path = dir.join("exploration.csv");
        let mut w = csv_writer(&path)?;
        let (dx, n) = (log.state_dim(), log.joint_dim());
        let mut header = vec!["agent".to_string(), "round".to_string()];
        header.extend((0..dx).map(|a| format!("x{a}")));
        header.extend((0..n - dx).map(|a| format!("u{a}")));
        header.extend((0..dx).map(|a| format!("x_next{a}")));
        w.write_record(&header).map_err(csv_err(&path))?;
        for (i, a) in log.agents().iter().enumerate() {
            for s in 0..a.samples() {
                let mut rec = vec![i.to_string(), (s + 1).to_string()];
                rec.extend(a.z.column(s).iter().map(|v| v.to_string()));
                rec.extend(a.x_next.column(s).iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err(&path))?;
            }
        }
        finish(w, &path)?;
        written.push(path);
    }

    let path = dir.join("extra_errors.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["iteration", "agent", "frobenius_error"]).map_err(csv_err(&path))?;
    for (it, agent, err) in &d.extra_errors {
        w.serialize((it, agent, err)).map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("dykstra_iterations.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["round", "iterations"]).map_err(csv_err(&path))?;
    for row in &d.dykstra {
        w.serialize(row).map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("controller_trace.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["round", "agent", "psd_gap", "trace_gap", "affine_gap", "k_norm", "consensus_spread", "dykstra_iterations"])
        .map_err(csv_err(&path))?;
    for r in &d.trace {
        w.serialize((r.round, r.agent, r.gaps.psd, r.gaps.trace, r.gaps.affine, r.k_norm, r.spread, r.dykstra_iterations))
            .map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);
    log::debug!("trial {trial}: wrote {} debug files", written.len());
    Ok(written)
}

/// Writes one subdirectory per topology plus a side-by-side averaged-regret
/// table.
pub fn export_comparison(results: &[(String, MonteCarloResult)], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (label, r) in results {
        written.extend(export(r, &dir.join(label))?);
    }
    let path = dir.join("topology_summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["topology", "beta", "metric", "mean", "stderr", "trials"]).map_err(csv_err(&path))?;
    for (label, r) in results {
        let m = r.aggregate.get(AVG_REGRET).expect("averaged regret is always aggregated");
        w.serialize((label, r.derived.beta, &m.name, m.mean, m.stderr, m.trials)).map_err(csv_err(&path))?;
    }
    finish(w, &path)?;
    written.push(path);
    Ok(written)
}
