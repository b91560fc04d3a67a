//! Frame-capacity extension of a trained model.
//!
//! Each temporal block gets a longer, trainable positional table initialized
//! by cyclic tiling of the original rows, and a 3D-convolution adapter placed
//! right after the positional term whose kernel is the identity map. The
//! temporal convolutions are kept as they are. Before any training the
//! extended model computes exactly what the original computes on the
//! original frame count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamMap, TemporalBlock, VideoModel, POS_EMBED_SOURCE};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionPlan {
    pub base_frames: usize,
    pub extended_frames: usize,
    pub adapter_kernel: [usize; 3],
}

impl ExtensionPlan {
    pub const DEFAULT_RATIO: usize = 5;
    pub const DEFAULT_ADAPTER_KERNEL: [usize; 3] = [3, 1, 1];

    pub fn new(base_frames: usize, extended_frames: usize) -> Result<ExtensionPlan> {
        let plan = ExtensionPlan { base_frames, extended_frames, adapter_kernel: Self::DEFAULT_ADAPTER_KERNEL };
        plan.validate()?;
        Ok(plan)
    }

    /// `T_ext = 5 * T0`.
    pub fn with_default_ratio(base_frames: usize) -> Result<ExtensionPlan> {
        Self::new(base_frames, Self::DEFAULT_RATIO * base_frames)
    }

    pub fn with_kernel(mut self, kernel: [usize; 3]) -> Result<ExtensionPlan> {
        self.adapter_kernel = kernel;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extended_frames <= self.base_frames {
            return Err(Error::Surgery(format!(
                "extended frame count {} must exceed base count {}",
                self.extended_frames, self.base_frames
            )));
        }
        check_odd(&self.adapter_kernel)
    }
}

fn check_odd(kernel: &[usize]) -> Result<()> {
    if kernel.iter().any(|k| k % 2 == 0) {
        return Err(Error::Surgery(format!("adapter kernel {kernel:?} has an even extent and no center")));
    }
    Ok(())
}

/// Row `p` of the result is row `p mod T0` of `pe`. The result is a trainable leaf.
pub fn extend_positional_embedding(pe: &Tensor, extended_frames: usize) -> Result<Tensor> {
    let &[t0, c] = pe.shape() else {
        return Err(Error::Surgery(format!("positional table must be [T, C], got {:?}", pe.shape())));
    };
    if extended_frames <= t0 {
        return Err(Error::Surgery(format!("extended frame count {extended_frames} must exceed {t0}")));
    }
    let src = pe.data();
    let mut rows = Vec::with_capacity(extended_frames * c);
    for p in 0..extended_frames {
        let r = p % t0;
        rows.extend_from_slice(&src[r * c..(r + 1) * c]);
    }
    Ok(Tensor::new(rows, &[extended_frames, c])?.with_requires_grad(true))
}

/// Weight `[C, C, kT, kH, kW]` with a 1 at the kernel center on the channel
/// diagonal and zeros elsewhere, plus a zero bias `[C]`.
pub fn identity_adapter(channels: usize, kernel: [usize; 3]) -> Result<(Tensor, Tensor)> {
    check_odd(&kernel)?;
    let [kt, kh, kw] = kernel;
    let taps = kt * kh * kw;
    let center = (kt / 2) * kh * kw + (kh / 2) * kw + kw / 2;
    let mut w = vec![0.0f32; channels * channels * taps];
    for c in 0..channels {
        w[(c * channels + c) * taps + center] = 1.0;
    }
    let weight = Tensor::new(w, &[channels, channels, kt, kh, kw])?.with_requires_grad(true);
    let bias = Tensor::zeros(&[channels]).with_requires_grad(true);
    Ok((weight, bias))
}

/// Adds identity adapter tensors for `block` to `params`.
pub fn inject_identity_adapter(params: &mut ParamMap, block: &TemporalBlock, kernel: [usize; 3]) -> Result<()> {
    if block.is_extended(params) {
        return Err(Error::Surgery(format!("{} already has an adapter", block.prefix)));
    }
    let (w, b) = identity_adapter(block.channels, kernel)?;
    let pre = block.adapter_prefix();
    params.insert(format!("{pre}.weight"), w);
    params.insert(format!("{pre}.bias"), b);
    Ok(())
}

/// Parameter count added by `plan` to a model with these temporal blocks:
/// new table rows, adapter weight and adapter bias in every block.
pub fn expected_param_increase(blocks: &[TemporalBlock], plan: &ExtensionPlan) -> usize {
    let taps: usize = plan.adapter_kernel.iter().product();
    blocks
        .iter()
        .map(|b| {
            let c = b.channels;
            (plan.extended_frames - plan.base_frames) * c + c * c * taps + c
        })
        .sum()
}

/// Extends every temporal block of `model` per `plan`. Spatial parameters and
/// temporal convolutions are shared unchanged; the result is masked for
/// post-tuning (temporal trainable, spatial frozen).
pub fn extend_model(model: &VideoModel, plan: &ExtensionPlan) -> Result<VideoModel> {
    plan.validate()?;
    if model.is_extended() {
        return Err(Error::Surgery("model is already extended".to_string()));
    }
    let capacity = model.frame_capacity();
    if capacity != plan.base_frames {
        return Err(Error::FrameCapacity { capacity, got: plan.base_frames });
    }
    let mut out = model.clone();
    for block in model.temporal_blocks() {
        let name = block.pos_embed_name();
        let original = model.param(&name)?.detach();
        let extended = extend_positional_embedding(&original, plan.extended_frames)?;
        out.params_mut().insert(name, extended);
        out.buffers_mut().insert(format!("{}.{POS_EMBED_SOURCE}", block.prefix), original);
        inject_identity_adapter(out.params_mut(), &block, plan.adapter_kernel)?;
    }
    let mask = out.freeze_mask()?;
    out.set_trainable(&mask)?;
    Ok(out)
}

/// Inputs for comparing an original and an extended model at the original
/// frame count.
#[derive(Debug, Clone)]
pub struct IdentitySample {
    pub video: Tensor,
    pub first_frame: Tensor,
    pub timestep: Tensor,
}

/// Max absolute difference between the original forward and the extended
/// model's forward restricted to the first `T0` table rows.
pub fn verify_identity(original: &VideoModel, extended: &VideoModel, sample: &IdentitySample) -> Result<f32> {
    let _guard = no_grad();
    let frames = sample.video.shape().get(1).copied().unwrap_or(0);
    let a = original.forward(&sample.video, &sample.first_frame, &sample.timestep)?;
    let b = extended.prefix(frames)?.forward(&sample.video, &sample.first_frame, &sample.timestep)?;
    Ok(a.max_abs_diff(&b)?)
}
