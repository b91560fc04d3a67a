use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use exvideo::checkpoint::{decode, encode};
use exvideo::dataeval::{MovingShapes, SceneFormat};
use exvideo::diffusion::NoiseSchedule;
use exvideo::surgery::{extend_model, ExtensionPlan};
use exvideo::tensor::ops::{conv3d, matmul, temporal_attention};
use exvideo::tensor::{no_grad, Tensor};
use exvideo::trainer::{train_step, TrainConfig, TrainState};
use exvideo::{ModelConfig, VideoModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn primitives(c: &mut Criterion) {
    let mut r = rng();
    let a = Tensor::randn(&[256, 256], &mut r);
    let b = Tensor::randn(&[256, 256], &mut r);
    c.bench_function("matmul_256", |bench| bench.iter(|| matmul(&a, &b).unwrap()));

    let x = Tensor::randn(&[1, 32, 8, 32, 32], &mut r);
    let w = Tensor::randn(&[32, 32, 3, 1, 1], &mut r);
    c.bench_function("conv3d_temporal_32ch_8f", |bench| bench.iter(|| conv3d(&x, &w, None).unwrap()));

    let seq = Tensor::randn(&[256, 40, 32], &mut r);
    let ws: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[32, 32], &mut r)).collect();
    let pe = exvideo::model::sinusoidal_table(40, 32);
    c.bench_function("temporal_attention_40f", |bench| {
        bench.iter(|| temporal_attention(&seq, &ws[0], &ws[1], &ws[2], &ws[3], &pe).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let base = VideoModel::build(cfg.clone(), 0).unwrap();
    let ext = extend_model(&base, &ExtensionPlan::with_default_ratio(8).unwrap()).unwrap();
    let mut r = rng();
    let first = Tensor::randn(&[1, 3, 32, 32], &mut r);
    let t = Tensor::new(vec![500.0], &[1]).unwrap();
    for (name, m, frames) in [("forward_8f", &base, 8), ("forward_40f", &ext, 40)] {
        let x = Tensor::randn(&[1, frames, 3, 32, 32], &mut r);
        c.bench_function(name, |bench| {
            bench.iter(|| {
                let _g = no_grad();
                m.forward(&x, &first, &t).unwrap()
            })
        });
    }

    let mut group = c.benchmark_group("posttune_step_40f");
    group.sample_size(10);
    let data = MovingShapes { format: SceneFormat { height: 32, width: 32, channels: 3, frames: 40 }, seed: 0 };
    let schedule = NoiseSchedule::default();
    for checkpointed in [false, true] {
        let config = TrainConfig { grad_checkpoint: checkpointed, ..TrainConfig::default() };
        let label = if checkpointed { "checkpointed" } else { "plain" };
        group.bench_function(label, |bench| {
            bench.iter_batched(
                || {
                    let mut m = ext.clone();
                    let state = TrainState::new(&mut m, &config).unwrap();
                    (m, state, data.batch(0, 1).unwrap())
                },
                |(mut m, mut state, batch)| train_step(&mut m, &mut state, &batch, &config, &schedule).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn checkpoint_codec(c: &mut Criterion) {
    let tensors = VideoModel::build(ModelConfig::default(), 0).unwrap().state_dict();
    let bytes = encode(&tensors).unwrap();
    c.bench_function("checkpoint_encode", |bench| bench.iter(|| encode(&tensors).unwrap()));
    c.bench_function("checkpoint_decode", |bench| bench.iter(|| decode(&bytes).unwrap()));
}

criterion_group!(benches, primitives, model, checkpoint_codec);
criterion_main!(benches);
