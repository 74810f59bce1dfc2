use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;
use refine_es::engine::{run_generation, FnObjective};
use refine_es::estimator::{centered_ranks, tdes_gradient, ReturnTable};
use refine_es::perturb::{make_batch, sample_triangular, NoiseDistribution};
use refine_es::policy::forward;
use refine_es::ppo::{evaluate_objective, ActorCritic, Transition};
use refine_es::rng::stream_from_seed;
use refine_es::stats::{stratified_bootstrap_ci, BootstrapConfig};
use refine_es::{EsConfig, EsState, MlpArchitecture, ParameterVector};

// Matches the default 36-in, [64, 64], 8-out policy: 7048 parameters.
fn policy_arch() -> MlpArchitecture {
    MlpArchitecture::new(36, vec![64, 64], 8).unwrap()
}

fn noise(c: &mut Criterion) {
    c.bench_function("sample_triangular 7048", |b| {
        let mut rng = stream_from_seed(1);
        b.iter(|| sample_triangular(1.0, black_box(7048), &mut rng))
    });
    c.bench_function("make_batch m=8 d=7048", |b| {
        let mut gen = 0;
        b.iter(|| {
            gen += 1;
            make_batch(&NoiseDistribution::triangular(), 0.03, 8, 7048, gen, 3).unwrap()
        })
    });
}

fn estimator(c: &mut Criterion) {
    let batch = make_batch(&NoiseDistribution::triangular(), 0.03, 8, 7048, 0, 3).unwrap();
    let mut rng = stream_from_seed(2);
    let table = ReturnTable::new((0..8).map(|_| rng.gen()).collect(), (0..8).map(|_| rng.gen()).collect()).unwrap();
    c.bench_function("centered ranks + tdes gradient", |b| {
        b.iter(|| tdes_gradient(&batch, &centered_ranks(black_box(&table)).unwrap()).unwrap())
    });

    let center = ParameterVector::zeros(7048);
    let objective = FnObjective(|x: &[f64]| -x.iter().map(|v| (v - 0.1) * (v - 0.1)).sum::<f64>());
    let config = EsConfig { generations: 1, ..EsConfig::tdes(0) };
    c.bench_function("es generation on quadratic d=7048", |b| {
        b.iter_batched(
            || EsState::start(center.clone()),
            |mut state| run_generation(&mut state, &objective, &config).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn networks(c: &mut Criterion) {
    let arch = policy_arch();
    let params = ParameterVector::init(&arch, 0.01, &mut stream_from_seed(4));
    let state = vec![0.1; 36];
    c.bench_function("policy forward 36-64-64-8", |b| b.iter(|| forward(params.as_slice(), &arch, black_box(&state)).unwrap()));

    let mut rng = stream_from_seed(5);
    let ac = ActorCritic::new(4, 2, &[64, 64], -0.7, &mut rng).unwrap();
    let transitions: Vec<Transition> = (0..256)
        .map(|_| {
            let state: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let action: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let log_prob = ac.log_prob(&state, &action);
            Transition { state, action, log_prob, advantage: rng.gen_range(-1.0..1.0), value_target: rng.gen() }
        })
        .collect();
    let batch: Vec<&Transition> = transitions.iter().collect();
    c.bench_function("ppo objective + gradient, minibatch 256", |b| {
        b.iter(|| evaluate_objective(&ac, black_box(&batch), 0.2, 0.5, 0.0, true))
    });
}

fn statistics(c: &mut Criterion) {
    let mut rng = stream_from_seed(6);
    let strata: Vec<Vec<f64>> = (0..3).map(|_| (0..9).map(|_| rng.gen()).collect()).collect();
    let config = BootstrapConfig { resamples: 2000, ..BootstrapConfig::default() };
    c.bench_function("stratified bootstrap mean, 3x9, 2000 resamples", |b| {
        b.iter(|| {
            stratified_bootstrap_ci(
                black_box(&strata),
                |s| s.iter().flatten().sum::<f64>() / 27.0,
                &config,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, noise, estimator, networks, statistics);
criterion_main!(benches);
