use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Circle,
}

/// A shape moving at constant velocity. `size` is the side of a square or the
/// diameter of a circle; `start` and `velocity` are `(x, y)` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingShape {
    pub kind: ShapeKind,
    pub size: f32,
    pub color: Vec<f32>,
    pub start: [f32; 2],
    pub velocity: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    pub shapes: Vec<MovingShape>,
    pub seed: u64,
}

/// Canvas and clip length shared by a family of random scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneFormat {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
}

/// Integer velocities used for training scenes and the fractional ones kept
/// for held-out evaluation.
const TRAIN_SPEEDS: [f32; 4] = [-2.0, -1.0, 1.0, 2.0];
const HELD_OUT_SPEEDS: [f32; 4] = [-1.5, -0.5, 0.5, 1.5];

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let limit = self.height.min(self.width) as f32;
        for (i, s) in self.shapes.iter().enumerate() {
            if !(s.size > 0.0 && s.size < limit) {
                return Err(Error::InvalidInput(format!("shape {i} size {} must lie in (0, {limit})", s.size)));
            }
            if s.color.len() != self.channels || s.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidInput(format!("shape {i} needs {} colors in [0, 1]", self.channels)));
            }
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.frames == 0 {
            return Err(Error::InvalidInput("scene extents must be positive".to_string()));
        }
        Ok(())
    }

    /// One or two random shapes; velocities from the training set.
    pub fn random(format: SceneFormat, seed: u64) -> SceneSpec {
        Self::random_with_speeds(format, seed, &TRAIN_SPEEDS)
    }

    /// Like [`SceneSpec::random`] but with velocities never seen in training.
    pub fn held_out(format: SceneFormat, seed: u64) -> SceneSpec {
        Self::random_with_speeds(format, seed, &HELD_OUT_SPEEDS)
    }

    fn random_with_speeds(format: SceneFormat, seed: u64, speeds: &[f32]) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(1..=2);
        let max_size = (format.height.min(format.width) as f32 / 3.0).max(2.0);
        let shapes = (0..count)
            .map(|_| {
                let kind = if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Circle };
                let size = rng.random_range(2.0f32..=max_size).floor();
                let color = (0..format.channels).map(|_| rng.random_range(0.4f32..=1.0)).collect();
                let start = [
                    rng.random_range(0..format.width) as f32,
                    rng.random_range(0..format.height) as f32,
                ];
                let vx = speeds[rng.random_range(0..speeds.len())];
                let vy = if rng.random_bool(0.5) { 0.0 } else { speeds[rng.random_range(0..speeds.len())] };
                MovingShape { kind, size, color, start, velocity: [vx, vy] }
            })
            .collect();
        SceneSpec {
            height: format.height,
            width: format.width,
            channels: format.channels,
            frames: format.frames,
            shapes,
            seed,
        }
    }
}

fn covers(shape: &MovingShape, origin: [f32; 2], x: usize, y: usize, w: usize, h: usize) -> bool {
    match shape.kind {
        ShapeKind::Rect => {
            let ox = origin[0].floor() as i64;
            let oy = origin[1].floor() as i64;
            let dx = (x as i64 - ox).rem_euclid(w as i64);
            let dy = (y as i64 - oy).rem_euclid(h as i64);
            (dx as f32) < shape.size && (dy as f32) < shape.size
        }
        ShapeKind::Circle => {
            let r = shape.size / 2.0;
            let (cx, cy) = (origin[0] + r, origin[1] + r);
            let wrap = |d: f32, extent: usize| {
                let e = extent as f32;
                let d = d.rem_euclid(e);
                d.min(e - d)
            };
            let dx = wrap(x as f32 + 0.5 - cx, w);
            let dy = wrap(y as f32 + 0.5 - cy, h);
            dx * dx + dy * dy <= r * r
        }
    }
}

/// Renders `[T, C, H, W]` with values in `[0, 1]`: frame `k` puts each shape
/// at `start + k * velocity`, wrapping around the canvas. Later shapes paint
/// over earlier ones on a zero background.
pub fn gen_video(spec: &SceneSpec) -> Result<Tensor> {
    spec.validate()?;
    let (t, c, h, w) = (spec.frames, spec.channels, spec.height, spec.width);
    let mut data = vec![0.0f32; t * c * h * w];
    for k in 0..t {
        let frame = &mut data[k * c * h * w..(k + 1) * c * h * w];
        for shape in &spec.shapes {
            let origin = [
                (shape.start[0] + k as f32 * shape.velocity[0]).rem_euclid(w as f32),
                (shape.start[1] + k as f32 * shape.velocity[1]).rem_euclid(h as f32),
            ];
            for y in 0..h {
                for x in 0..w {
                    if covers(shape, origin, x, y, w, h) {
                        for ch in 0..c {
                            frame[(ch * h + y) * w + x] = shape.color[ch];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(data, &[t, c, h, w])?)
}
