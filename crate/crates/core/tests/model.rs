use std::time::{Duration, Instant};

use exvideo::model::{classify_name, sinusoidal_table, SpatialBlock, TemporalOrder};
use exvideo::tensor::ops::{concat, narrow};
use exvideo::tensor::{no_grad, Tensor};
use exvideo::{Error, ModelConfig, VideoModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig { base_frames: 4, channels: vec![8, 16], height: 8, width: 8, norm_groups: 4, ..ModelConfig::default() }
}

fn inputs(cfg: &ModelConfig, b: usize, t: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (cfg.video_channels, cfg.height, cfg.width);
    let x = Tensor::randn(&[b, t, c, h, w], &mut r);
    let f = Tensor::randn(&[b, c, h, w], &mut r);
    let ts = Tensor::new((0..b).map(|i| (100 * i + 7) as f32).collect(), &[b]).unwrap();
    (x, f, ts)
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = VideoModel::build(small(), 42).unwrap();
    let b = VideoModel::build(small(), 42).unwrap();
    assert_eq!(a.params().len(), b.params().len());
    for (k, v) in a.params() {
        assert!(v.bit_eq(&b.params()[k]), "{k}");
    }
    let c = VideoModel::build(small(), 43).unwrap();
    assert!(!a.param("in_conv.weight").unwrap().bit_eq(c.param("in_conv.weight").unwrap()));
}

#[test]
fn positional_tables_are_the_sinusoid() {
    let m = VideoModel::build(small(), 1).unwrap();
    for block in m.temporal_blocks() {
        let pe = m.param(&block.pos_embed_name()).unwrap();
        assert!(pe.bit_eq(&sinusoidal_table(4, block.channels)));
        assert!(!pe.requires_grad());
        let row0 = &pe.to_vec()[..block.channels];
        assert!(row0.iter().step_by(2).all(|&v| v == 0.0));
        assert!(row0.iter().skip(1).step_by(2).all(|&v| v == 1.0));
    }
    assert!((sinusoidal_table(2, 4).to_vec()[4] - 0.841471).abs() < 1e-6);
}

#[test]
fn invalid_config_lists_violations() {
    let cfg = ModelConfig { base_frames: 1, norm_groups: 5, ..small() };
    match VideoModel::build(cfg, 0) {
        Err(Error::InvalidConfig(v)) => assert!(v.len() >= 3, "{v:?}"),
        other => panic!("expected invalid config, got {other:?}"),
    }
}

#[test]
fn output_matches_input_shape_for_several_batches() {
    let cfg = small();
    let m = VideoModel::build(cfg.clone(), 2).unwrap();
    for b in [1, 2, 3] {
        let (x, f, t) = inputs(&cfg, b, 4, b as u64);
        let y = m.forward(&x, &f, &t).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(!y.has_non_finite());
    }
}

#[test]
fn extra_frame_is_a_capacity_error() {
    let cfg = small();
    let m = VideoModel::build(cfg.clone(), 2).unwrap();
    let (x, f, t) = inputs(&cfg, 1, 5, 0);
    let err = m.forward(&x, &f, &t).unwrap_err();
    assert!(matches!(err, Error::FrameCapacity { capacity: 4, got: 5 }));
    let msg = err.to_string();
    assert!(msg.contains("frame-capacity mismatch") && msg.contains('4') && msg.contains('5'), "{msg}");
}

#[test]
fn batch_entries_are_independent() {
    let cfg = small();
    let m = VideoModel::build(cfg.clone(), 3).unwrap();
    let (x, f, t) = inputs(&cfg, 2, 4, 9);
    let swap = |v: &Tensor| concat(&[narrow(v, 0, 1, 1).unwrap(), narrow(v, 0, 0, 1).unwrap()], 0).unwrap();
    let y = m.forward(&x, &f, &t).unwrap();
    let ys = m.forward(&swap(&x), &swap(&f), &swap(&t)).unwrap();
    assert!(swap(&y).bit_eq(&ys));
}

#[test]
fn spatial_blocks_are_frame_local() {
    let cfg = small();
    let m = VideoModel::build(cfg.clone(), 4).unwrap();
    let block = SpatialBlock { prefix: "down.1.spatial".into(), in_channels: 8, out_channels: 16 };
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 4, 8, 4, 4], &mut r);
    let temb = Tensor::randn(&[1, cfg.time_embed_dim()], &mut r);
    let order = [2usize, 0, 3, 1];
    let shuffle = |v: &Tensor, idx: &[usize]| {
        concat(&idx.iter().map(|&i| narrow(v, 1, i, 1).unwrap()).collect::<Vec<_>>(), 1).unwrap()
    };
    let mut inverse = [0usize; 4];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    let direct = block.forward(m.params(), cfg.norm_groups, &x, &temb).unwrap();
    let shuffled = block.forward(m.params(), cfg.norm_groups, &shuffle(&x, &order), &temb).unwrap();
    assert!(shuffle(&shuffled, &inverse).bit_eq(&direct));
}

#[test]
fn classification_partitions_names() {
    let m = VideoModel::build(small(), 5).unwrap();
    let classes = m.classify_params().unwrap();
    assert_eq!(classes.spatial.len() + classes.temporal.len(), m.params().len());
    assert!(classes.spatial.is_disjoint(&classes.temporal));
    assert!(classes.spatial.contains("out_conv.weight"));
    assert!(classes.temporal.contains("up.0.temporal.attn.q.weight"));
    assert!(classes.temporal.iter().all(|n| n.contains(".temporal.")));
    assert!(matches!(classify_name("decoder.weight"), Err(Error::Unclassifiable(_))));
    assert!(classify_name("down.x.temporal.conv.weight").is_err());
}

#[test]
fn attention_first_order_is_supported() {
    let cfg = ModelConfig { temporal_order: TemporalOrder::AttentionThenConv, ..small() };
    let m = VideoModel::build(cfg.clone(), 6).unwrap();
    let (x, f, t) = inputs(&cfg, 1, 4, 1);
    let base = VideoModel::build(small(), 6).unwrap();
    let (a, b) = (m.forward(&x, &f, &t).unwrap(), base.forward(&x, &f, &t).unwrap());
    assert_eq!(a.shape(), b.shape());
    assert!(!a.bit_eq(&b));
}

#[test]
fn state_dict_round_trips_through_rebuild() {
    let m = VideoModel::build(small(), 8).unwrap();
    let r = VideoModel::from_state_dict(m.state_dict()).unwrap();
    let (x, f, t) = inputs(&small(), 1, 4, 2);
    let _g = no_grad();
    assert!(m.forward(&x, &f, &t).unwrap().bit_eq(&r.forward(&x, &f, &t).unwrap()));

    let mut broken = m.state_dict();
    broken.remove("up.1.temporal.attn.k.weight");
    assert!(matches!(VideoModel::from_state_dict(broken), Err(Error::MissingTensor(_))));
}

#[test]
fn full_size_forward_and_backward_fit_the_budget() {
    let cfg = ModelConfig::default();
    let m = VideoModel::build(cfg.clone(), 0).unwrap();
    let (x, f, t) = inputs(&cfg, 1, 8, 0);
    let start = Instant::now();
    let y = m.forward(&x, &f, &t).unwrap();
    assert!(!y.has_non_finite());
    y.mul(&y).unwrap().mean().backward().unwrap();
    assert!(m.param("in_conv.weight").unwrap().grad().is_some());
    assert!(start.elapsed() < Duration::from_secs(10), "{:?}", start.elapsed());
}
