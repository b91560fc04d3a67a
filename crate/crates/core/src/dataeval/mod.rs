//! Synthetic moving-shape videos, motion metrics, and evaluation reports.

mod export;
mod scene;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use export::{write_frames, FramesFormat};
pub use scene::{gen_video, MovingShape, SceneFormat, SceneSpec, ShapeKind};

use crate::diffusion::{sample, Batch, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::ops::{concat, reshape};
use crate::tensor::Tensor;

/// Maps pixel values in `[0, 1]` to the model's `[-1, 1]`.
pub fn to_model_range(x: &Tensor) -> Tensor {
    let v = x.data().iter().map(|&p| 2.0 * p - 1.0).collect();
    Tensor::new(v, x.shape()).expect("same shape")
}

/// Inverse of [`to_model_range`], clamped to `[0, 1]`.
pub fn to_pixel_range(x: &Tensor) -> Tensor {
    let v = x.data().iter().map(|&p| ((p + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    Tensor::new(v, x.shape()).expect("same shape")
}

/// Deterministic stream of training clips: clip `i` of step `s` is the random
/// scene seeded by `(seed, s, i)`, so batch contents never depend on timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovingShapes {
    pub format: SceneFormat,
    pub seed: u64,
}

impl MovingShapes {
    pub fn scene_seed(&self, step: u64, index: usize) -> u64 {
        // splitmix-style mixing keeps nearby steps decorrelated
        let mut z = self.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn batch(&self, step: u64, batch_size: usize) -> Result<Batch> {
        let clips = (0..batch_size)
            .map(|i| gen_video(&SceneSpec::random(self.format, self.scene_seed(step, i))))
            .collect::<Result<Vec<_>>>()?;
        batch_from_clips(&clips)
    }
}

/// Stacks `[T, C, H, W]` pixel clips into a model-range [`Batch`].
pub fn batch_from_clips(clips: &[Tensor]) -> Result<Batch> {
    let Some(first) = clips.first() else {
        return Err(Error::InvalidInput("empty batch".to_string()));
    };
    let &[t, c, h, w] = first.shape() else {
        return Err(Error::InvalidInput(format!("clip must be [T,C,H,W], got {:?}", first.shape())));
    };
    let lifted: Vec<Tensor> =
        clips.iter().map(|v| reshape(&to_model_range(v), &[1, t, c, h, w])).collect::<std::result::Result<_, _>>()?;
    let video = concat(&lifted, 0)?;
    let frames: Vec<Tensor> = lifted
        .iter()
        .map(|v| v.narrow(1, 0, 1).and_then(|f| f.reshape(&[1, c, h, w])))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Batch { video, first_frame: concat(&frames, 0)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEnergy {
    /// `mean |frame[k+1] - frame[k]|` for each consecutive pair.
    pub per_pair: Vec<f64>,
    pub mean: f64,
}

/// Frame-difference energy of a `[T, C, H, W]` or `[1, T, C, H, W]` video.
pub fn motion_energy(video: &Tensor) -> Result<MotionEnergy> {
    let shape = match video.shape() {
        [1, rest @ ..] if rest.len() == 4 => rest,
        s if s.len() == 4 => s,
        s => return Err(Error::InvalidInput(format!("video must be [T,C,H,W], got {s:?}"))),
    };
    let t = shape[0];
    if t < 2 {
        return Err(Error::InvalidInput(format!("motion energy needs at least 2 frames, got {t}")));
    }
    let n: usize = shape[1..].iter().product();
    let v = video.data();
    let per_pair: Vec<f64> = (0..t - 1)
        .map(|k| {
            let (a, b) = (&v[k * n..(k + 1) * n], &v[(k + 1) * n..(k + 2) * n]);
            a.iter().zip(b).fold(0.0f64, |s, (&x, &y)| s + (y as f64 - x as f64).abs()) / n as f64
        })
        .collect();
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(MotionEnergy { per_pair, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub scene_seed: u64,
    pub noise_seed: u64,
    pub motion_energy: f64,
    pub ground_truth_energy: f64,
    pub first_frame_mse: f64,
    pub nan_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub sampler_steps: usize,
    pub motion_energy_mean: f64,
    pub ground_truth_energy_mean: f64,
    pub nan_count: usize,
    /// `[min, max]` of each sampled frame in pixel range, over all clips,
    /// before clamping.
    pub frame_range: Vec<[f32; 2]>,
    pub first_frame_mse: f64,
    pub clips: Vec<ClipReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json { context: "encoding report".into(), source })
    }
}

/// Samples one clip per `(spec, seed)` pair, conditioned on the spec's first
/// frame, and compares it with the rendered ground truth.
pub fn eval_report(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    specs: &[SceneSpec],
    seeds: &[u64],
    sampler_steps: usize,
) -> Result<EvalReport> {
    if specs.len() != seeds.len() || specs.is_empty() {
        return Err(Error::InvalidInput(format!("{} specs for {} seeds", specs.len(), seeds.len())));
    }
    let frames = model.frame_capacity();
    let mut clips = Vec::new();
    let mut frame_range = vec![[f32::INFINITY, f32::NEG_INFINITY]; frames];
    for (spec, &seed) in specs.iter().zip(seeds) {
        let truth = gen_video(&SceneSpec { frames, ..spec.clone() })?;
        let (c, h, w) = (spec.channels, spec.height, spec.width);
        let first = to_model_range(&truth.narrow(0, 0, 1)?.reshape(&[1, c, h, w])?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = sample(model, schedule, &first, frames, sampler_steps, &mut rng)?;
        let raw_data = raw.data();
        let nan_count = raw_data.iter().filter(|v| !v.is_finite()).count();
        let per_frame = c * h * w;
        for (k, range) in frame_range.iter_mut().enumerate() {
            for &v in &raw_data[k * per_frame..(k + 1) * per_frame] {
                let p = (v + 1.0) * 0.5;
                range[0] = range[0].min(p);
                range[1] = range[1].max(p);
            }
        }
        let video = to_pixel_range(&raw).reshape(&[frames, c, h, w])?;
        let vd = video.data();
        let td = truth.data();
        let first_frame_mse = vd[..per_frame]
            .iter()
            .zip(&td[..per_frame])
            .fold(0.0f64, |s, (&a, &b)| s + ((a - b) as f64).powi(2))
            / per_frame as f64;
        clips.push(ClipReport {
            scene_seed: spec.seed,
            noise_seed: seed,
            motion_energy: motion_energy(&video)?.mean,
            ground_truth_energy: motion_energy(&truth)?.mean,
            first_frame_mse,
            nan_count,
        });
    }
    let n = clips.len() as f64;
    Ok(EvalReport {
        frames,
        sampler_steps,
        motion_energy_mean: clips.iter().map(|c| c.motion_energy).sum::<f64>() / n,
        ground_truth_energy_mean: clips.iter().map(|c| c.ground_truth_energy).sum::<f64>() / n,
        nan_count: clips.iter().map(|c| c.nan_count).sum(),
        frame_range,
        first_frame_mse: clips.iter().map(|c| c.first_frame_mse).sum::<f64>() / n,
        clips,
    })
}
