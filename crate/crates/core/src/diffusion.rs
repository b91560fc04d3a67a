//! DDPM noise schedule, epsilon-prediction loss, and a deterministic DDIM sampler.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::VideoModel;
use crate::tensor::{no_grad, Tensor, TensorError};

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Linear-beta schedule with precomputed cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    sqrt_ab: Vec<f32>,
    sqrt_one_minus_ab: Vec<f32>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, BETA_START, BETA_END)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> NoiseSchedule {
        assert!(steps >= 2, "schedule needs at least two steps");
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        let sqrt_ab = alphas_cumprod.iter().map(|a| a.sqrt() as f32).collect();
        let sqrt_one_minus_ab = alphas_cumprod.iter().map(|a| (1.0 - a).sqrt() as f32).collect();
        NoiseSchedule { betas, alphas_cumprod, sqrt_ab, sqrt_one_minus_ab }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidInput(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// `x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`, with one timestep per
    /// leading-axis entry of `x0`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(
                TensorError::ShapeMismatch { op: "add_noise", expected: x0.shape().to_vec(), got: eps.shape().to_vec() }
                    .into(),
            );
        }
        let b = x0.shape().first().copied().unwrap_or(1);
        if t.len() != b {
            return Err(Error::InvalidInput(format!("{} timesteps for batch of {b}", t.len())));
        }
        for &ti in t {
            self.check_t(ti)?;
        }
        let per = x0.numel() / b.max(1);
        let (xd, ed) = (x0.data(), eps.data());
        let mut out = vec![0.0f32; xd.len()];
        for (i, &ti) in t.iter().enumerate() {
            let (a, s) = (self.sqrt_ab[ti], self.sqrt_one_minus_ab[ti]);
            for j in i * per..(i + 1) * per {
                out[j] = a * xd[j] + s * ed[j];
            }
        }
        Ok(Tensor::new(out, x0.shape())?)
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::InvalidInput(format!("sampler steps must be in [1, {}], got {steps}", self.steps())));
        }
        let ratio = self.steps() / steps;
        Ok((0..steps).rev().map(|i| i * ratio).collect())
    }
}

/// Anything that predicts the injected noise for a video.
pub trait Denoiser {
    fn frame_capacity(&self) -> usize;

    /// `x_t: [B, T, C_v, H, W]`, `first_frame: [B, C_v, H, W]`, `t: [B]`.
    fn predict_noise(&self, x_t: &Tensor, first_frame: &Tensor, t: &Tensor) -> Result<Tensor>;
}

impl Denoiser for VideoModel {
    fn frame_capacity(&self) -> usize {
        VideoModel::frame_capacity(self)
    }

    fn predict_noise(&self, x_t: &Tensor, first_frame: &Tensor, t: &Tensor) -> Result<Tensor> {
        self.forward(x_t, first_frame, t)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, T, C_v, H, W]`, in model range.
    pub video: Tensor,
    /// `[B, C_v, H, W]`.
    pub first_frame: Tensor,
}

/// Draws `t` then `eps` from `rng` and returns `mean((model(x_t) - eps)^2)`.
pub fn training_loss<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    batch: &Batch,
    rng: &mut R,
) -> Result<Tensor> {
    let shape = batch.video.shape();
    if shape.len() != 5 {
        return Err(Error::InvalidInput(format!("video must be [B,T,C,H,W], got {shape:?}")));
    }
    let capacity = model.frame_capacity();
    if shape[1] != capacity {
        return Err(Error::FrameCapacity { capacity, got: shape[1] });
    }
    let t: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(0..schedule.steps())).collect();
    let eps = Tensor::randn(shape, rng);
    let x_t = schedule.add_noise(&batch.video, &eps, &t)?;
    let t_tensor = Tensor::new(t.iter().map(|&v| v as f32).collect(), &[t.len()])?;
    let pred = model.predict_noise(&x_t, &batch.first_frame, &t_tensor)?;
    let err = pred.sub(&eps)?;
    Ok(err.mul(&err)?.mean())
}

/// Deterministic DDIM (eta = 0) sampling of a `[1, frames, C_v, H, W]` video
/// from `first_frame: [1, C_v, H, W]`. Consumes exactly `steps` model calls.
pub fn sample<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    first_frame: &Tensor,
    frames: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let capacity = model.frame_capacity();
    if frames != capacity {
        return Err(Error::FrameCapacity { capacity, got: frames });
    }
    let &[1, c, h, w] = first_frame.shape() else {
        return Err(Error::InvalidInput(format!("first frame must be [1,C,H,W], got {:?}", first_frame.shape())));
    };
    let timesteps = schedule.sampling_timesteps(steps)?;
    let _guard = no_grad();
    let shape = [1, frames, c, h, w];
    let mut x = Tensor::randn(&shape, rng).to_vec();
    let ab = schedule.alphas_cumprod();
    for (i, &t) in timesteps.iter().enumerate() {
        let xt = Tensor::new(x.clone(), &shape)?;
        let eps = model.predict_noise(&xt, first_frame, &Tensor::new(vec![t as f32], &[1])?)?;
        let eps = eps.data();
        let a_t = ab[t];
        let a_prev = timesteps.get(i + 1).map_or(1.0, |&p| ab[p]);
        let (sa, s1a) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (sp, s1p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        for (xv, &e) in x.iter_mut().zip(eps.iter()) {
            let e = e as f64;
            let x0 = (*xv as f64 - s1a * e) / sa;
            *xv = (sp * x0 + s1p * e) as f32;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplingNonFinite { step: i });
        }
    }
    Ok(Tensor::new(x, &shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_product_decreases_within_unit_interval() {
        let s = NoiseSchedule::default();
        let ab = s.alphas_cumprod();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!((ab[0] - (1.0 - 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![1.0, -2.0], &[1, 2]).unwrap();
        let xt = s.add_noise(&x0, &Tensor::zeros(&[1, 2]), &[500]).unwrap();
        let a = s.alphas_cumprod()[500].sqrt() as f32;
        assert_eq!(xt.to_vec(), vec![a, -2.0 * a]);
    }

    #[test]
    fn timestep_out_of_range() {
        let s = NoiseSchedule::default();
        let x = Tensor::zeros(&[1, 2]);
        assert!(s.add_noise(&x, &x, &[1000]).is_err());
    }

    #[test]
    fn sampling_grid_is_descending_and_sized() {
        let s = NoiseSchedule::default();
        let ts = s.sampling_timesteps(25).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!((ts[0], ts[24]), (960, 0));
        assert!(s.sampling_timesteps(1001).is_err());
    }
}
