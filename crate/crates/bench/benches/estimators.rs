use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use discrete_grad::data::{self, PIXELS};
use discrete_grad::estimators::{estimate, EstimatorConfig};
use discrete_grad::models::{init_params, ModelSpec};
use discrete_grad::oracle::{ExactOracle, DEFAULT_DRAWS};
use discrete_grad::train::{train, DatasetSpec, RunConfig};
use discrete_grad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn estimator_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = random(&[64, 4, 8], &mut rng);
    let weights = random(&[64, 4, 8], &mut rng);
    for (name, cfg) in [
        ("st_gs", EstimatorConfig::st_gs(1.0)),
        ("decoupled_st_gs", EstimatorConfig::decoupled(1.6, 1.3)),
    ] {
        c.bench_function(&format!("estimator/{name}/64x4x8"), |b| {
            b.iter(|| {
                let g = Graph::new();
                let l = g.param(logits.clone());
                let z = estimate(l, &cfg, &mut rng, 0).unwrap().output;
                z.mul(g.constant(weights.clone())).unwrap().sum().unwrap().backward().unwrap();
                black_box(l.grad())
            })
        });
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[64, PIXELS], &mut rng);
    let w = random(&[PIXELS, 512], &mut rng);
    c.bench_function("autodiff/matmul_backward/64x784x512", |b| {
        b.iter(|| {
            let g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.param(w.clone()));
            xv.matmul(wv).unwrap().sum().unwrap().backward().unwrap();
            black_box(wv.grad())
        })
    });
}

fn oracle(c: &mut Criterion) {
    let spec = ModelSpec::categorical_vae(PIXELS, 4, 8);
    let params = init_params(&spec, 0);
    let x = data::synthetic(80, 0).unwrap().train.slice_rows(0, 64);
    c.bench_function("oracle/build_and_gradient/8x4/batch64", |b| {
        b.iter(|| black_box(ExactOracle::new(&spec, &params, &x).unwrap().gradient().unwrap()))
    });
    let o = ExactOracle::new(&spec, &params, &x).unwrap();
    c.bench_function("oracle/gradient_only/8x4/batch64", |b| b.iter(|| black_box(o.gradient().unwrap())));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = EstimatorConfig::decoupled(1.6, 1.3);
    let mut group = c.benchmark_group("oracle");
    group.sample_size(10);
    group.bench_function(format!("bias_variance/{DEFAULT_DRAWS}_draws/batch64"), |b| {
        b.iter(|| {
            black_box(discrete_grad::oracle::bias_variance(&o, &spec, &params, &x, &cfg, DEFAULT_DRAWS, &mut rng).unwrap())
        })
    });
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut run = RunConfig::binary_ae(EstimatorConfig::decoupled(0.3, 3.0), 0);
    run.dataset = DatasetSpec::synthetic(640, 0);
    run.epochs = 1;
    let data = run.dataset.load(std::path::Path::new(".")).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("binary_ae/one_epoch/576_images", |b| {
        b.iter_batched(|| run.clone(), |r| black_box(train(&r, &data).unwrap().final_validation), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, estimator_step, matmul, oracle, training);
criterion_main!(benches);
