use exvideo::dataeval::{
    batch_from_clips, eval_report, gen_video, motion_energy, to_model_range, to_pixel_range, MovingShape,
    MovingShapes, SceneFormat, SceneSpec, ShapeKind,
};
use exvideo::diffusion::NoiseSchedule;
use exvideo::tensor::Tensor;
use exvideo::{ModelConfig, VideoModel};
use proptest::prelude::*;

fn square(size: f32, velocity: [f32; 2]) -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        channels: 1,
        frames: 6,
        shapes: vec![MovingShape { kind: ShapeKind::Rect, size, color: vec![1.0], start: [3.0, 9.0], velocity }],
        seed: 0,
    }
}

#[test]
fn one_pixel_step_of_a_square_changes_eight_pixels() {
    let e = motion_energy(&gen_video(&square(4.0, [1.0, 0.0])).unwrap()).unwrap();
    assert_eq!(e.per_pair.len(), 5);
    assert!(e.per_pair.iter().all(|&v| v == 8.0 / 1024.0), "{:?}", e.per_pair);
    assert_eq!(e.mean, 0.0078125);
}

#[test]
fn energy_reference_values() {
    let still = gen_video(&square(4.0, [0.0, 0.0])).unwrap();
    assert_eq!(motion_energy(&still).unwrap().mean, 0.0);
    let flicker: Vec<f32> = (0..4).flat_map(|k| vec![(k % 2) as f32; 9]).collect();
    let flicker = Tensor::new(flicker, &[4, 1, 3, 3]).unwrap();
    assert_eq!(motion_energy(&flicker).unwrap().mean, 1.0);
    assert!(motion_energy(&Tensor::zeros(&[1, 1, 3, 3])).is_err());
}

#[test]
fn energy_grows_with_speed() {
    for size in [3.0, 4.0, 6.0] {
        let slow = motion_energy(&gen_video(&square(size, [1.0, 0.0])).unwrap()).unwrap().mean;
        let fast = motion_energy(&gen_video(&square(size, [2.0, 0.0])).unwrap()).unwrap().mean;
        assert!(fast >= slow, "size {size}: {fast} < {slow}");
    }
}

#[test]
fn pixel_and_model_ranges_invert() {
    let x = Tensor::new(vec![0.0, 0.25, 1.0], &[3]).unwrap();
    assert_eq!(to_model_range(&x).to_vec(), vec![-1.0, -0.5, 1.0]);
    assert_eq!(to_pixel_range(&to_model_range(&x)).to_vec(), x.to_vec());
    assert_eq!(to_pixel_range(&Tensor::new(vec![-3.0, 3.0], &[2]).unwrap()).to_vec(), vec![0.0, 1.0]);
}

#[test]
fn stream_batches_depend_only_on_step_and_seed() {
    let data = MovingShapes { format: SceneFormat { height: 16, width: 16, channels: 3, frames: 8 }, seed: 4 };
    let a = data.batch(7, 2).unwrap();
    let b = data.batch(7, 2).unwrap();
    assert!(a.video.bit_eq(&b.video) && a.first_frame.bit_eq(&b.first_frame));
    assert_eq!(a.video.shape(), &[2, 8, 3, 16, 16]);
    assert!(!a.video.bit_eq(&data.batch(8, 2).unwrap().video));
    let v = a.video.to_vec();
    assert!(v.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    assert!(batch_from_clips(&[]).is_err());
}

#[test]
fn report_on_untrained_model_is_finite_and_reproducible() {
    let cfg = ModelConfig { base_frames: 4, channels: vec![8, 16], height: 8, width: 8, norm_groups: 4, ..ModelConfig::default() };
    let model = VideoModel::build(cfg, 0).unwrap();
    let format = SceneFormat { height: 8, width: 8, channels: 3, frames: 4 };
    let specs: Vec<SceneSpec> = (0..2).map(|s| SceneSpec::held_out(format, 100 + s)).collect();
    let s = NoiseSchedule::default();
    let a = eval_report(&model, &s, &specs, &[1, 2], 3).unwrap();
    assert_eq!(a.nan_count, 0);
    assert_eq!((a.frames, a.sampler_steps, a.clips.len(), a.frame_range.len()), (4, 3, 2, 4));
    assert!(a.first_frame_mse.is_finite() && a.motion_energy_mean >= 0.0);
    let b = eval_report(&model, &s, &specs, &[1, 2], 3).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert!(eval_report(&model, &s, &specs, &[1], 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_scenes_stay_in_range(seed in any::<u64>(), held_out in any::<bool>(), frames in 1usize..10) {
        let format = SceneFormat { height: 16, width: 12, channels: 3, frames };
        let spec = if held_out { SceneSpec::held_out(format, seed) } else { SceneSpec::random(format, seed) };
        prop_assert!(spec.validate().is_ok());
        let v = gen_video(&spec).unwrap();
        prop_assert_eq!(v.shape(), &[frames, 3, 16, 12][..]);
        prop_assert!(v.to_vec().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(v.bit_eq(&gen_video(&spec).unwrap()));
    }

    #[test]
    fn integer_motion_wraps_after_one_canvas(vx in -2i32..=2, vy in -2i32..=2, circle in any::<bool>()) {
        let kind = if circle { ShapeKind::Circle } else { ShapeKind::Rect };
        let spec = SceneSpec {
            height: 8,
            width: 8,
            channels: 1,
            frames: 9,
            shapes: vec![MovingShape { kind, size: 3.0, color: vec![0.7], start: [1.0, 2.0], velocity: [vx as f32, vy as f32] }],
            seed: 0,
        };
        let v = gen_video(&spec).unwrap();
        prop_assert!(v.narrow(0, 0, 1).unwrap().bit_eq(&v.narrow(0, 8, 1).unwrap()));
    }
}
