use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::{DMatrix, DVector};
use odlqr_core::controller::{extract_policy, initial_iterate, odgd_round, AgentRoundState};
use odlqr_core::costs::generate_uniform_diagonal;
use odlqr_core::feasible_set::{dykstra_project, DykstraSettings, DykstraWarmStart, FeasibleSet, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use odlqr_core::lti::{LinearPolicy, LtiSystem};
use odlqr_core::matops::{psd_project, SymMatrix};
use odlqr_core::sysid::{
    explore, extra_step_size, initial_estimates, ridge_weight, ExtraSolver, PriorController, SystemEstimate,
};
use odlqr_core::MixingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AGENTS: usize = 20;
const NU: f64 = 75.9375;

fn reference_plant() -> LtiSystem {
    LtiSystem::new(DMatrix::identity(3, 3) * 0.2, DMatrix::identity(3, 3) * (0.4 / 1.5), SymMatrix::identity(3), 1.0, 1.5)
        .unwrap()
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> SymMatrix {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-scale..scale));
    SymMatrix::from_symmetrized(&m + m.transpose())
}

fn matrix_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sys = reference_plant();
    let set = FeasibleSet::build(sys.ab(), sys.w().clone(), NU).unwrap();
    let input = random_sym(&mut rng, 6, 5.0);
    c.bench_function("psd_project_6x6", |b| b.iter(|| psd_project(&input)));
    c.bench_function("dykstra_project_cold", |b| {
        b.iter(|| dykstra_project(&set, &input, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap())
    });
    let feasible = dykstra_project(&set, &input, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
    c.bench_function("extract_policy", |b| b.iter(|| extract_policy(&feasible, 3).unwrap()));
}

fn online_round(c: &mut Criterion) {
    let sys = reference_plant();
    let p = MixingMatrix::build_cycle(AGENTS, 1, 0.6).unwrap();
    let settings = DykstraSettings::default();
    let prior = LinearPolicy::scaled_identity(3, 3, -0.015);
    let states: Vec<AgentRoundState> = (0..AGENTS)
        .map(|agent| {
            let estimate = SystemEstimate { d_hat: sys.ab().clone(), owner: agent };
            let set = FeasibleSet::build(estimate.d_hat.clone(), sys.w().clone(), NU).unwrap();
            let mut warm = DykstraWarmStart::zeros(6);
            let sigma = initial_iterate(&set, &estimate, sys.w(), &prior, &settings, &mut warm).unwrap();
            AgentRoundState { agent, sigma, x: DVector::zeros(3), estimate, set, warm, last_iterations: 0 }
        })
        .collect();
    let schedule = generate_uniform_diagonal(AGENTS, 1, 3, 3, 300.0, 7).unwrap();
    let costs: Vec<_> = (0..AGENTS).map(|i| schedule.pair(1, i)).collect();
    let eta = 20_000f64.powf(-1.0 / 3.0);
    c.bench_function("odgd_round_20_agents", |b| {
        b.iter_batched(
            || states.clone(),
            |mut s| odgd_round(&mut s, &costs, &p, eta, &settings).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn extra_step(c: &mut Criterion) {
    let sys = reference_plant();
    let prior = PriorController::new(&sys, LinearPolicy::scaled_identity(3, 3, -0.015), 1.5, 0.4).unwrap();
    let mut noise: Vec<_> = (0..AGENTS as u64).map(ChaCha8Rng::seed_from_u64).collect();
    let mut act: Vec<_> = (0..AGENTS as u64).map(|i| ChaCha8Rng::seed_from_u64(100 + i)).collect();
    let log = explore(&sys, &prior, 500, 1.0, &mut noise, &mut act).unwrap();
    let p = MixingMatrix::build_cycle(AGENTS, 1, 0.6).unwrap();
    let ridge = ridge_weight(1.0, 1.0);
    let alpha = extra_step_size(&log, ridge);
    let init = initial_estimates::<ChaCha8Rng>(AGENTS, 3, 6, None);
    let solver = ExtraSolver::new(&log, &p, alpha, ridge, &init).unwrap();
    c.bench_function("extra_step_20_agents", |b| {
        b.iter_batched(|| solver.clone(), |mut s| s.step().unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, matrix_kernels, online_round, extra_step);
criterion_main!(benches);
