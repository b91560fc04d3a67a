use std::collections::BTreeSet;

use exvideo::diffusion::{sample, NoiseSchedule};
use exvideo::model::sinusoidal_table;
use exvideo::surgery::{
    expected_param_increase, extend_model, extend_positional_embedding, verify_identity, ExtensionPlan,
    IdentitySample,
};
use exvideo::tensor::Tensor;
use exvideo::{Error, ModelConfig, VideoModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig { base_frames: 4, channels: vec![8, 16], height: 8, width: 8, norm_groups: 4, ..ModelConfig::default() }
}

fn sample_for(cfg: &ModelConfig, seed: u64) -> IdentitySample {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (t, c, h, w) = (cfg.base_frames, cfg.video_channels, cfg.height, cfg.width);
    IdentitySample {
        video: Tensor::randn(&[2, t, c, h, w], &mut r),
        first_frame: Tensor::randn(&[2, c, h, w], &mut r),
        timestep: Tensor::new(vec![17.0, 640.0], &[2]).unwrap(),
    }
}

#[test]
fn extension_is_exact_identity_at_base_length() {
    let cfg = small();
    let plan = ExtensionPlan::with_default_ratio(cfg.base_frames).unwrap();
    for seed in 0..6u64 {
        let base = VideoModel::build(cfg.clone(), seed).unwrap();
        let ext = extend_model(&base, &plan).unwrap();
        assert_eq!(verify_identity(&base, &ext, &sample_for(&cfg, seed + 50)).unwrap(), 0.0, "seed {seed}");
    }
}

#[test]
fn sampling_trajectories_match_under_shared_noise() {
    let cfg = small();
    let base = VideoModel::build(cfg.clone(), 3).unwrap();
    let ext = extend_model(&base, &ExtensionPlan::new(4, 20).unwrap()).unwrap();
    let schedule = NoiseSchedule::default();
    let first = Tensor::randn(&[1, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(9));
    let a = sample(&base, &schedule, &first, 4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample(&ext.prefix(4).unwrap(), &schedule, &first, 4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
}

#[test]
fn extended_model_runs_at_extended_length() {
    let cfg = small();
    let base = VideoModel::build(cfg.clone(), 3).unwrap();
    let ext = extend_model(&base, &ExtensionPlan::new(4, 20).unwrap()).unwrap();
    assert_eq!(ext.frame_capacity(), 20);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[1, 20, 3, 8, 8], &mut r);
    let f = Tensor::randn(&[1, 3, 8, 8], &mut r);
    let y = ext.forward(&x, &f, &Tensor::new(vec![5.0], &[1]).unwrap()).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(!y.has_non_finite());
    assert!(matches!(base.forward(&x, &f, &Tensor::new(vec![5.0], &[1]).unwrap()), Err(Error::FrameCapacity { .. })));
}

#[test]
fn cyclic_table_at_canonical_lengths() {
    let pe = sinusoidal_table(8, 32);
    for t_ext in [16usize, 40] {
        let ext = extend_positional_embedding(&pe, t_ext).unwrap();
        let (src, out) = (pe.to_vec(), ext.to_vec());
        for p in 0..t_ext {
            let row = |v: &[f32], r: usize| v[r * 32..(r + 1) * 32].iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(row(&out, p), row(&src, p % 8), "row {p}");
        }
    }
    assert_eq!(ExtensionPlan::with_default_ratio(8).unwrap().extended_frames / 8, 5);
}

#[test]
fn parameter_count_grows_by_formula() {
    let cfg = small();
    let base = VideoModel::build(cfg.clone(), 0).unwrap();
    let plan = ExtensionPlan::new(4, 20).unwrap();
    let ext = extend_model(&base, &plan).unwrap();
    let want = expected_param_increase(&base.temporal_blocks(), &plan);
    // two levels, each with a down and an up block: channels 8, 8, 16, 16
    let by_hand: usize = [8usize, 8, 16, 16].iter().map(|&c| 16 * c + c * c * 3 + c).sum();
    assert_eq!(want, by_hand);
    assert_eq!(ext.num_params() - base.num_params(), want);
}

#[test]
fn temporal_convolutions_are_untouched() {
    let base = VideoModel::build(small(), 2).unwrap();
    let ext = extend_model(&base, &ExtensionPlan::new(4, 8).unwrap()).unwrap();
    for block in base.temporal_blocks() {
        let name = block.conv_weight_name();
        assert_eq!(base.param(&name).unwrap().to_le_bytes(), ext.param(&name).unwrap().to_le_bytes());
    }
    for (name, t) in base.params() {
        if !name.ends_with(".pos_embed") {
            assert!(t.bit_eq(ext.param(name).unwrap()), "{name}");
        }
    }
}

#[test]
fn second_extension_is_rejected() {
    let base = VideoModel::build(small(), 2).unwrap();
    let ext = extend_model(&base, &ExtensionPlan::new(4, 8).unwrap()).unwrap();
    assert!(matches!(extend_model(&ext, &ExtensionPlan::new(8, 16).unwrap()), Err(Error::Surgery(_))));
    assert!(matches!(extend_model(&base, &ExtensionPlan::new(6, 12).unwrap()), Err(Error::FrameCapacity { .. })));
}

#[test]
fn trainable_set_is_exactly_the_temporal_blocks() {
    let base = VideoModel::build(small(), 2).unwrap();
    let ext = extend_model(&base, &ExtensionPlan::new(4, 8).unwrap()).unwrap();
    let classes = ext.classify_params().unwrap();
    let trainable: BTreeSet<String> = ext.trainable_names().into_iter().collect();
    assert_eq!(trainable, classes.temporal);
    for block in ext.temporal_blocks() {
        assert!(ext.param(&block.pos_embed_name()).unwrap().requires_grad());
        assert!(ext.param(&format!("{}.weight", block.adapter_prefix())).unwrap().requires_grad());
    }
    assert!(!ext.param("in_conv.weight").unwrap().requires_grad());
}

#[test]
fn extended_state_dict_reloads() {
    let base = VideoModel::build(small(), 4).unwrap();
    let ext = extend_model(&base, &ExtensionPlan::new(4, 12).unwrap()).unwrap();
    let back = VideoModel::from_state_dict(ext.state_dict()).unwrap();
    assert!(back.is_extended());
    assert_eq!(back.frame_capacity(), 12);
    assert_eq!(back.trainable_names(), ext.trainable_names());
    assert_eq!(verify_identity(&base, &back, &sample_for(&small(), 1)).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cyclic_rows_repeat_the_source(t0 in 2usize..10, mult in 2usize..6, extra in 0usize..3, half in 1usize..8) {
        let c = half * 2;
        let pe = Tensor::randn(&[t0, c], &mut ChaCha8Rng::seed_from_u64((t0 * 100 + c) as u64));
        let t_ext = t0 * mult + extra;
        let ext = extend_positional_embedding(&pe, t_ext).unwrap();
        let (src, out) = (pe.to_vec(), ext.to_vec());
        for p in 0..t_ext {
            for j in 0..c {
                prop_assert_eq!(out[p * c + j].to_bits(), src[(p % t0) * c + j].to_bits());
            }
        }
    }
}
