//! Spatial and temporal building blocks.
//!
//! Blocks are descriptors: they hold a name prefix and shape facts, and read
//! their weights from a [`ParamMap`] at forward time. This keeps the weight
//! set a flat name→tensor map, which is what surgery and checkpoints operate
//! on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::TemporalOrder;
use super::embedding::sinusoidal_table;
use super::ParamMap;
use crate::error::{Error, Result};
use crate::tensor::ops::{attend, conv2d, conv3d, group_norm, linear, temporal_attention};
use crate::tensor::Tensor;

pub(crate) fn param<'a>(p: &'a ParamMap, name: &str) -> Result<&'a Tensor> {
    p.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

/// Seeded initializer; weights and biases draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) struct Init<'a> {
    pub rng: ChaCha8Rng,
    pub out: &'a mut ParamMap,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.out.insert(name, Tensor::new(data, shape).expect("init shape"));
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f32) {
        self.out.insert(name, Tensor::full(shape, value));
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.constant(format!("{prefix}.weight"), &[c], 1.0);
        self.constant(format!("{prefix}.bias"), &[c], 0.0);
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, kernel: &[usize]) {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(kernel);
        self.uniform(format!("{prefix}.weight"), &shape, fan_in);
        self.uniform(format!("{prefix}.bias"), &[c_out], fan_in);
    }

    pub(crate) fn linear(&mut self, prefix: &str, out_f: usize, in_f: usize, bias: bool) {
        self.uniform(format!("{prefix}.weight"), &[out_f, in_f], in_f);
        if bias {
            self.uniform(format!("{prefix}.bias"), &[out_f], in_f);
        }
    }

    pub(crate) fn conv2d(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.conv(prefix, c_out, c_in, &[k, k]);
    }

    pub(crate) fn group_norm(&mut self, prefix: &str, c: usize) {
        self.norm(prefix, c);
    }
}

fn norm_act(p: &ParamMap, prefix: &str, groups: usize, x: &Tensor) -> Result<Tensor> {
    let gamma = param(p, &format!("{prefix}.weight"))?;
    let beta = param(p, &format!("{prefix}.bias"))?;
    Ok(group_norm(x, groups, gamma, beta)?.silu())
}

fn conv2d_named(p: &ParamMap, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = param(p, &format!("{prefix}.weight"))?;
    let b = param(p, &format!("{prefix}.bias"))?;
    Ok(conv2d(x, w, Some(b))?)
}

fn conv3d_named(p: &ParamMap, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = param(p, &format!("{prefix}.weight"))?;
    let b = param(p, &format!("{prefix}.bias"))?;
    Ok(conv3d(x, w, Some(b))?)
}

/// Residual block of two 3x3 convolutions applied to each frame on its own,
/// with an additive timestep projection between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl SpatialBlock {
    pub(crate) fn init(&self, init: &mut Init<'_>, temb_dim: usize) {
        let (ci, co, pre) = (self.in_channels, self.out_channels, &self.prefix);
        init.norm(&format!("{pre}.norm1"), ci);
        init.conv(&format!("{pre}.conv1"), co, ci, &[3, 3]);
        init.linear(&format!("{pre}.temb_proj"), co, temb_dim, true);
        init.norm(&format!("{pre}.norm2"), co);
        init.conv(&format!("{pre}.conv2"), co, co, &[3, 3]);
        if ci != co {
            init.conv(&format!("{pre}.skip"), co, ci, &[1, 1]);
        }
    }

    /// `x: [B, T, C_in, H, W]`, `temb: [B, E]` → `[B, T, C_out, H, W]`.
    pub fn forward(&self, p: &ParamMap, groups: usize, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let &[b, t, c, h, w] = x.shape() else {
            return Err(Error::InvalidInput(format!("spatial block expects [B,T,C,H,W], got {:?}", x.shape())));
        };
        let pre = &self.prefix;
        let co = self.out_channels;
        let frames = x.reshape(&[b * t, c, h, w])?;
        let hid = conv2d_named(p, &format!("{pre}.conv1"), &norm_act(p, &format!("{pre}.norm1"), groups, &frames)?)?;
        let proj = linear(
            &temb.silu(),
            param(p, &format!("{pre}.temb_proj.weight"))?,
            Some(param(p, &format!("{pre}.temb_proj.bias"))?),
        )?;
        let hid = hid.reshape(&[b, t, co, h, w])?.add(&proj.reshape(&[b, 1, co, 1, 1])?)?;
        let hid = hid.reshape(&[b * t, co, h, w])?;
        let hid = conv2d_named(p, &format!("{pre}.conv2"), &norm_act(p, &format!("{pre}.norm2"), groups, &hid)?)?;
        let skip = if self.in_channels != co { conv2d_named(p, &format!("{pre}.skip"), &frames)? } else { frames };
        Ok(skip.add(&hid)?.reshape(&[b, t, co, h, w])?)
    }
}

/// Temporal unit: a residual 3D convolution and a residual single-head
/// attention along the frame axis with an additive positional table.
///
/// After extension the same descriptor also drives the adapter, a 3D
/// convolution applied right after the positional term is added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalBlock {
    pub prefix: String,
    pub channels: usize,
    pub kernel: [usize; 3],
    pub order: TemporalOrder,
}

impl TemporalBlock {
    pub fn pos_embed_name(&self) -> String {
        format!("{}.pos_embed", self.prefix)
    }

    pub fn adapter_prefix(&self) -> String {
        format!("{}.adapter", self.prefix)
    }

    pub fn conv_weight_name(&self) -> String {
        format!("{}.conv.weight", self.prefix)
    }

    pub fn is_extended(&self, p: &ParamMap) -> bool {
        p.contains_key(&format!("{}.adapter.weight", self.prefix))
    }

    pub(crate) fn init(&self, init: &mut Init<'_>, frames: usize) {
        let (c, pre) = (self.channels, &self.prefix);
        init.norm(&format!("{pre}.norm1"), c);
        init.conv(&format!("{pre}.conv"), c, c, &self.kernel);
        init.norm(&format!("{pre}.norm2"), c);
        for proj in ["q", "k", "v", "o"] {
            init.linear(&format!("{pre}.attn.{proj}"), c, c, false);
        }
        init.out.insert(self.pos_embed_name(), sinusoidal_table(frames, c));
    }

    /// `x: [B, T, C, H, W]` → same shape. `T` must match the positional table.
    pub fn forward(&self, p: &ParamMap, groups: usize, x: &Tensor) -> Result<Tensor> {
        let pre = &self.prefix;
        // [B, C, T, H, W] so the 3D convolution sees T as its depth axis
        let xc = x.permute(&[0, 2, 1, 3, 4])?;
        let conv = |h: &Tensor| -> Result<Tensor> {
            let d = conv3d_named(p, &format!("{pre}.conv"), &norm_act(p, &format!("{pre}.norm1"), groups, h)?)?;
            Ok(h.add(&d)?)
        };
        let attn = |h: &Tensor| -> Result<Tensor> { Ok(h.add(&self.attention(p, groups, h)?)?) };
        let y = match self.order {
            TemporalOrder::ConvThenAttention => attn(&conv(&xc)?)?,
            TemporalOrder::AttentionThenConv => conv(&attn(&xc)?)?,
        };
        Ok(y.permute(&[0, 2, 1, 3, 4])?)
    }

    /// Attention branch on `[B, C, T, H, W]`, returned in the same layout.
    fn attention(&self, p: &ParamMap, groups: usize, h: &Tensor) -> Result<Tensor> {
        let pre = &self.prefix;
        let &[b, c, t, hh, ww] = h.shape() else { unreachable!("rank checked by permute") };
        let gamma = param(p, &format!("{pre}.norm2.weight"))?;
        let beta = param(p, &format!("{pre}.norm2.bias"))?;
        let z = group_norm(h, groups, gamma, beta)?;
        let pe = param(p, &self.pos_embed_name())?;
        let w = |n: &str| param(p, &format!("{pre}.attn.{n}.weight"));
        let to_seq = |z: &Tensor| -> Result<Tensor> { Ok(z.permute(&[0, 3, 4, 2, 1])?.reshape(&[b * hh * ww, t, c])?) };
        let out = if self.is_extended(p) {
            if pe.shape()[0] != t {
                return Err(Error::FrameCapacity { capacity: pe.shape()[0], got: t });
            }
            let pe5 = pe.permute(&[1, 0])?.reshape(&[1, c, t, 1, 1])?;
            let z = conv3d_named(p, &self.adapter_prefix(), &z.add(&pe5)?)?;
            attend(&to_seq(&z)?, w("q")?, w("k")?, w("v")?, w("o")?)?
        } else {
            temporal_attention(&to_seq(&z)?, w("q")?, w("k")?, w("v")?, w("o")?, pe)?
        };
        Ok(out.reshape(&[b, hh, ww, t, c])?.permute(&[0, 4, 3, 1, 2])?)
    }
}
