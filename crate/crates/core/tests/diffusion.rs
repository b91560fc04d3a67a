use std::cell::Cell;

use exvideo::diffusion::{sample, training_loss, Batch, Denoiser, NoiseSchedule};
use exvideo::tensor::Tensor;
use exvideo::{Error, ModelConfig, Result, VideoModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Recovers the injected noise exactly from `x_t` given the clean video.
struct Oracle {
    x0: Tensor,
    schedule: NoiseSchedule,
}

impl Denoiser for Oracle {
    fn frame_capacity(&self) -> usize {
        self.x0.shape()[1]
    }

    fn predict_noise(&self, x_t: &Tensor, _first: &Tensor, t: &Tensor) -> Result<Tensor> {
        let ab = self.schedule.alphas_cumprod();
        let b = x_t.shape()[0];
        let per = x_t.numel() / b;
        let (xt, x0, ts) = (x_t.data(), self.x0.data(), t.data());
        let mut out = vec![0.0f32; xt.len()];
        for i in 0..b {
            let a = ab[ts[i] as usize];
            for j in i * per..(i + 1) * per {
                out[j] = ((xt[j] as f64 - a.sqrt() * x0[j] as f64) / (1.0 - a).sqrt()) as f32;
            }
        }
        Ok(Tensor::new(out, x_t.shape())?)
    }
}

struct Zero {
    frames: usize,
    calls: Cell<usize>,
}

impl Denoiser for Zero {
    fn frame_capacity(&self) -> usize {
        self.frames
    }

    fn predict_noise(&self, x_t: &Tensor, _first: &Tensor, _t: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        Ok(Tensor::zeros(x_t.shape()))
    }
}

fn batch(b: usize, t: usize, seed: u64) -> Batch {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Batch { video: Tensor::randn(&[b, t, 3, 8, 8], &mut r), first_frame: Tensor::randn(&[b, 3, 8, 8], &mut r) }
}

#[test]
fn noised_second_moment_matches_closed_form() {
    let s = NoiseSchedule::default();
    let n = 10_000;
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let eps = Tensor::randn(&[1, n], &mut r);
    for t in [0usize, 250, 999] {
        // unit-variance signal keeps E[x_t^2] = 1 at every t
        let x0 = Tensor::randn(&[1, n], &mut r);
        let xt = s.add_noise(&x0, &eps, &[t]).unwrap();
        let m: f64 = xt.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < 0.06, "t={t}: {m}");

        // constant signal c: E[x_t^2] = ab c^2 + (1 - ab)
        let c = 0.8f64;
        let xt = s.add_noise(&Tensor::full(&[1, n], c as f32), &eps, &[t]).unwrap();
        let m: f64 = xt.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n as f64;
        let ab = s.alphas_cumprod()[t];
        assert!((m - (ab * c * c + 1.0 - ab)).abs() < 0.06, "t={t}: {m}");
    }
}

#[test]
fn final_cumulative_product_matches_direct_product() {
    let s = NoiseSchedule::default();
    let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).product();
    assert!((s.alphas_cumprod()[999] - direct).abs() < 1e-15);
    assert!((s.betas()[999] - 2e-2).abs() < 1e-15);
}

#[test]
fn perfect_predictor_has_zero_loss() {
    let b = batch(2, 4, 1);
    let oracle = Oracle { x0: b.video.clone(), schedule: NoiseSchedule::default() };
    let loss = training_loss(&oracle, &oracle.schedule, &b, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(loss.item().unwrap() < 1e-6, "{}", loss.item().unwrap());
}

#[test]
fn zero_predictor_has_unit_loss() {
    let b = batch(4, 8, 2);
    let zero = Zero { frames: 8, calls: Cell::new(0) };
    let loss = training_loss(&zero, &NoiseSchedule::default(), &b, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    // mean of 6144 squared standard normals
    assert!((loss.item().unwrap() - 1.0).abs() < 0.08, "{}", loss.item().unwrap());
}

#[test]
fn loss_is_reproducible_from_the_seed() {
    let cfg = ModelConfig { base_frames: 4, channels: vec![8, 16], height: 8, width: 8, norm_groups: 4, ..ModelConfig::default() };
    let model = VideoModel::build(cfg, 0).unwrap();
    let b = batch(2, 4, 5);
    let s = NoiseSchedule::default();
    let l = |seed| training_loss(&model, &s, &b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().item().unwrap();
    assert_eq!(l(9).to_bits(), l(9).to_bits());
    assert_ne!(l(9).to_bits(), l(10).to_bits());
}

#[test]
fn wrong_length_batch_is_rejected() {
    let zero = Zero { frames: 8, calls: Cell::new(0) };
    let err = training_loss(&zero, &NoiseSchedule::default(), &batch(1, 4, 0), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(Error::FrameCapacity { capacity: 8, got: 4 })));
}

#[test]
fn sampler_calls_model_once_per_step() {
    let zero = Zero { frames: 4, calls: Cell::new(0) };
    let first = Tensor::zeros(&[1, 3, 8, 8]);
    for steps in [1usize, 7, 25] {
        zero.calls.set(0);
        let x = sample(&zero, &NoiseSchedule::default(), &first, 4, steps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(zero.calls.get(), steps);
        assert_eq!(x.shape(), &[1, 4, 3, 8, 8]);
    }
}

#[test]
fn sampler_with_perfect_predictor_lands_on_the_target() {
    let target = batch(1, 4, 8).video;
    let oracle = Oracle { x0: target.clone(), schedule: NoiseSchedule::default() };
    let first = Tensor::zeros(&[1, 3, 8, 8]);
    let x = sample(&oracle, &oracle.schedule, &first, 4, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(x.max_abs_diff(&target).unwrap() < 1e-4);
}

#[test]
fn sampling_is_deterministic() {
    let cfg = ModelConfig { base_frames: 4, channels: vec![8, 16], height: 8, width: 8, norm_groups: 4, ..ModelConfig::default() };
    let model = VideoModel::build(cfg, 3).unwrap();
    let s = NoiseSchedule::default();
    let first = Tensor::randn(&[1, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
    let run = |seed| sample(&model, &s, &first, 4, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert!(run(5).bit_eq(&run(5)));
    assert!(!run(5).bit_eq(&run(6)));
}

proptest! {
    #[test]
    fn sampling_grid_is_strictly_descending(steps in 1usize..=1000) {
        let ts = NoiseSchedule::default().sampling_timesteps(steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(*ts.last().unwrap(), 0);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(ts[0] < 1000);
    }
}
