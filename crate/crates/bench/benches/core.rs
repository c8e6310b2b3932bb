use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fleetdesign::bayesopt::{self, candidate_grid, gp_posterior};
use fleetdesign::env::{GridId, OrderSpec};
use fleetdesign::marl::{self, Encoder, EvalConfig, EvalMode, Hyperparams};
use fleetdesign::nn::{mlp_init, Head};
use fleetdesign::reward::{self, DEFAULT_ELASTICITY};
use fleetdesign::{presets, GpHyper, GpState, ObjectiveConfig, Policy, RewardDesign};

fn nn(c: &mut Criterion) {
    let enc = Encoder { width: 10, height: 10, horizon: 12 };
    let critic = mlp_init(&[enc.critic_dim(), 64, 32, 16, 1], 0, Head::Identity).unwrap();
    let actor = mlp_init(&[enc.obs_dim(), 32, 16, 8, 5], 1, Head::Softmax).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..enc.critic_dim()).map(|_| rng.random()).collect();
    let obs: Vec<f64> = (0..enc.obs_dim()).map(|_| rng.random()).collect();

    c.bench_function("critic forward", |b| b.iter(|| critic.forward(black_box(&x)).unwrap()));
    c.bench_function("critic forward+backward", |b| {
        b.iter(|| {
            let tape = critic.tape(black_box(&x)).unwrap();
            critic.backward(&tape, &[1.0]).unwrap()
        })
    });
    c.bench_function("actor forward", |b| b.iter(|| actor.forward(black_box(&obs)).unwrap()));
}

fn gp(c: &mut Criterion) {
    let mut state = GpState::new(GpHyper { length: 0.2, sigma_f: 0.05, sigma_y: 0.01, delta: 0.1, dim: 1 });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a: f64 = rng.random();
        state.push(a, -(a - 0.5) * (a - 0.5));
    }
    let grid = candidate_grid(0.0, 1.0, 512);
    c.bench_function("gp posterior 20 points x 512 candidates", |b| {
        b.iter(|| gp_posterior(black_box(&state), &grid).unwrap())
    });
    c.bench_function("bo loop on a parabola", |b| {
        b.iter(|| bayesopt::bo_loop(|a| Ok(-(a - 0.37) * (a - 0.37)), &Default::default()).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let city = presets::synthetic_city(12);
    let policy = Policy::new(&city, &Hyperparams::city(), 0).unwrap();
    let design = RewardDesign::Toll { alpha: 5.0 };
    let eval = EvalConfig::new(1, 0, EvalMode::Stochastic, ObjectiveConfig::toll());
    c.bench_function("city evaluation episode", |b| {
        b.iter(|| marl::evaluate_episodes(&policy, &city, &design, &eval).unwrap())
    });

    let two = presets::service_charge_2x2();
    let hyper = Hyperparams { episodes: 50, actor_delay: 10, ..Hyperparams::two_by_two() };
    let design = RewardDesign::ServiceCharge { alpha: 0.5 };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("2x2 50 episodes", |b| b.iter(|| marl::train(&two, &design, &hyper, 0).unwrap()));
    group.finish();

    let cbd: BTreeSet<GridId> = [GridId(1)].into();
    let orders: Vec<OrderSpec> = (0..10_000)
        .map(|i| OrderSpec { origin: GridId(i % 2), destination: GridId(1), appear_time: 1, fare: 10.0, passengers: 1 })
        .collect();
    c.bench_function("thin 10k orders", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            reward::thin_demand(orders.clone(), 2.5, &cbd, DEFAULT_ELASTICITY, &mut rng)
        })
    });
}

criterion_group!(benches, nn, gp, simulation);
criterion_main!(benches);
