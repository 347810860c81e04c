use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use makeseq_core::dit::Ctx;
use makeseq_core::flow::{euler_sample, SamplerConfig};
use makeseq_core::pipeline::{stage1_init, train_step, Config, Objective};
use makeseq_core::{DiT, Graph, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = Tensor::<f32>::randn(vec![n, n], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(vec![n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let dit = DiT::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = dit.init_params::<f32, _>(&mut rng).unwrap();
    let x0 = Tensor::<f32>::randn(dit.config.image_shape(8).to_vec(), 1.0, &mut rng);
    c.bench_function("dit_forward_backward_b8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, |_| true);
            let z = g.constant(x0.clone());
            let v = dit
                .forward(&mut g, Ctx::new(&bound, None), z, &[0.5; 8], &[0; 8])
                .unwrap();
            let target = g.constant(x0.clone());
            let loss = g.mse(v, target).unwrap();
            black_box(g.backward(loss).unwrap())
        })
    });
}

fn training_step(c: &mut Criterion) {
    let config = Config::default();
    let mut state = stage1_init(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Tensor::<f32>::randn(config.model.image_shape(8).to_vec(), 0.5, &mut rng);
    let tasks = [0, 1, 2, 0, 1, 2, 0, 1];
    c.bench_function("train_step_b8", |bench| {
        bench.iter(|| {
            train_step(
                &mut state.model,
                true,
                &mut state.adam,
                &x0,
                &tasks,
                Objective::Cfm,
                config.flow.t_dist,
                &mut rng,
                0,
            )
            .unwrap()
        })
    });
}

fn sampling(c: &mut Criterion) {
    let config = Config::default();
    let state = stage1_init(&config).unwrap();
    let shape = config.model.image_shape(1);
    let mut group = c.benchmark_group("euler_sample");
    group.sample_size(10);
    group.bench_function("steps_32", |bench| {
        bench.iter(|| {
            let sampler = SamplerConfig { steps: 32, seed: 3 };
            black_box(euler_sample(&state.model, &shape, &[0], &sampler).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, forward_backward, training_step, sampling);
criterion_main!(benches);
