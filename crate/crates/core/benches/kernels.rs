use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdcount::autodiff::{conv2d, ConvParams, Tensor};
use crowdcount::densitygen::{density_target, SigmaMode};
use crowdcount::drf::{refined_dilated_conv_backward, refined_dilated_conv_forward, DilationMap};
use crowdcount::nets::{build_model, ModelConfig, Role};
use crowdcount::par::{with_exec, Exec};
use crowdcount::sds::{train_stage, TrainConfig};
use crowdcount::synthdata::{make_benchmark, SceneParams};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn convs(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, [2, 16, 32, 32]);
    let w = random(&mut rng, [16, 16, 3, 3]);
    let b = Tensor::zeros([16]);
    let rates = (0..32 * 32).map(|_| rng.gen_range(0.0..2.0)).collect();
    let d = DilationMap::new(32, 32, rates, 2.0, 0.125).unwrap();
    let (out, ctx) = refined_dilated_conv_forward(&x, &w, Some(&b), &d).unwrap();
    let up = vec![1.0; out.len()];

    let mut g = c.benchmark_group("conv");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::new("conv2d_d2", name), |bn| {
            bn.iter(|| {
                with_exec(mode, || {
                    conv2d(black_box(&x), &w, Some(&b), ConvParams::same3(2)).unwrap()
                })
            })
        });
        g.bench_function(BenchmarkId::new("refined_forward", name), |bn| {
            bn.iter(|| {
                with_exec(mode, || {
                    refined_dilated_conv_forward(black_box(&x), &w, Some(&b), &d).unwrap()
                })
            })
        });
        g.bench_function(BenchmarkId::new("refined_backward", name), |bn| {
            bn.iter(|| {
                with_exec(mode, || {
                    refined_dilated_conv_backward(black_box(&up), &ctx, &w, [true; 3]).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let (train, _) = make_benchmark(8, 1, &SceneParams::default(), 1, None).unwrap();
    let images: Vec<_> = train.samples.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<_> = train
        .samples
        .iter()
        .map(|s| density_target(&s.annotation, SigmaMode::default(), 8).unwrap())
        .collect();
    let dmaps: Vec<_> = (0..8).map(|_| DilationMap::constant(8, 8, 1.3, 0.125)).collect();
    let model = build_model(&ModelConfig::default(), Role::Precise, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    };

    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::new("batch8_precise", name), |bn| {
            bn.iter(|| {
                with_exec(mode, || {
                    train_stage(&model, &images, &targets, &cfg, Some(&dmaps)).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn density(c: &mut Criterion) {
    let (train, _) = make_benchmark(16, 1, &SceneParams::default(), 2, None).unwrap();
    let mut g = c.benchmark_group("density");
    for (name, mode) in MODES {
        for sigma in [
            SigmaMode::Fixed { sigma: 15.0 },
            SigmaMode::Adaptive { k: 3, beta: 0.3 },
        ] {
            let label = match sigma {
                SigmaMode::Fixed { .. } => "fixed15",
                SigmaMode::Adaptive { .. } => "knn",
            };
            g.bench_function(BenchmarkId::new(label, name), |bn| {
                bn.iter(|| {
                    with_exec(mode, || {
                        crowdcount::par::map(&train.samples, |s| density_target(&s.annotation, sigma, 8).unwrap())
                    })
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, convs, training, density);
criterion_main!(benches);
