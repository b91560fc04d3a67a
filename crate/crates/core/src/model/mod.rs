//! Miniature image-to-video UNet with separated spatial and temporal blocks.
//!
//! Activations are laid out `[B, T, C, H, W]`. Every level runs a
//! [`SpatialBlock`] (frame-local) followed by a [`TemporalBlock`] (mixes
//! along `T` only). Conditioning is the first frame, replicated over `T` and
//! concatenated with the noisy video on the channel axis.

mod blocks;
mod config;
mod embedding;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{SpatialBlock, TemporalBlock};
pub use config::{ModelConfig, TemporalOrder};
pub use embedding::{sinusoidal_table, timestep_features};

use blocks::{param, Init};
use crate::error::{Error, Result};
use crate::tensor::ops::{concat, conv2d, group_norm, linear};
use crate::tensor::{checkpoint, no_grad, Tensor, TensorError};

/// Flat name → tensor map, sorted by name.
pub type ParamMap = BTreeMap<String, Tensor>;

pub const META_CONFIG: &str = "meta.config";
/// Suffix of the buffer holding the pre-extension positional table.
pub const POS_EMBED_SOURCE: &str = "pos_embed_source";

/// Down or up half of the UNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Down,
    Up,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Down => "down",
            Stage::Up => "up",
        }
    }
}

/// One level of one stage: resampling, then spatial, then temporal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    pub stage: Stage,
    pub index: usize,
    pub spatial: SpatialBlock,
    pub temporal: TemporalBlock,
}

impl Level {
    fn prefix(&self) -> String {
        format!("{}.{}.", self.stage.name(), self.index)
    }

    fn forward(&self, p: &ParamMap, groups: usize, inputs: &[Tensor]) -> Result<Tensor> {
        let (h, temb) = (&inputs[0], &inputs[1]);
        let h = match (self.stage, inputs.get(2)) {
            (Stage::Down, _) if self.index > 0 => crate::tensor::ops::avg_pool2x(h)?,
            (Stage::Up, Some(skip)) => concat(&[crate::tensor::ops::upsample_nearest2x(h)?, skip.clone()], 2)?,
            _ => h.clone(),
        };
        let h = self.spatial.forward(p, groups, &h, temb)?;
        self.temporal.forward(p, groups, &h)
    }
}

/// Partition of parameter names into frozen-during-post-tuning and trainable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamClasses {
    pub spatial: BTreeSet<String>,
    pub temporal: BTreeSet<String>,
}

/// Whether `name` belongs to a temporal block. Errors on names outside the
/// naming scheme.
pub fn classify_name(name: &str) -> Result<bool> {
    const SPATIAL_ROOTS: [&str; 4] = ["time_embed.", "in_conv.", "out_norm.", "out_conv."];
    if SPATIAL_ROOTS.iter().any(|r| name.starts_with(r)) {
        return Ok(false);
    }
    let mut parts = name.splitn(4, '.');
    let (stage, idx, block, rest) = (parts.next(), parts.next(), parts.next(), parts.next());
    let stage_ok = matches!(stage, Some("down" | "up"));
    let idx_ok = idx.is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
    match (stage_ok && idx_ok && rest.is_some_and(|r| !r.is_empty()), block) {
        (true, Some("temporal")) => Ok(true),
        (true, Some("spatial")) => Ok(false),
        _ => Err(Error::Unclassifiable(name.to_string())),
    }
}

#[derive(Debug, Clone)]
pub struct VideoModel {
    config: ModelConfig,
    params: ParamMap,
    buffers: ParamMap,
    grad_checkpoint: bool,
}

impl VideoModel {
    /// Builds and deterministically initializes a model.
    ///
    /// All parameters are trainable except the static positional tables.
    pub fn build(config: ModelConfig, seed: u64) -> Result<VideoModel> {
        config.validate()?;
        let mut params = ParamMap::new();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), out: &mut params };
        let c0 = config.channels[0];
        let temb = config.time_embed_dim();
        init.linear("time_embed.linear1", temb, c0, true);
        init.linear("time_embed.linear2", temb, temb, true);
        init.conv2d("in_conv", c0, 2 * config.video_channels, 3);
        for level in levels(&config) {
            level.spatial.init(&mut init, temb);
            level.temporal.init(&mut init, config.base_frames);
        }
        init.group_norm("out_norm", c0);
        init.conv2d("out_conv", config.video_channels, c0, 3);

        let mut buffers = ParamMap::new();
        buffers.insert(META_CONFIG.to_string(), Tensor::new(config.encode(), &[config.encode().len()])?);
        let mut model = VideoModel { config, params, buffers, grad_checkpoint: false };
        model.set_trainable(&model.pretrain_mask())?;
        Ok(model)
    }

    /// Rebuilds a model from a flat tensor map (as produced by
    /// [`VideoModel::state_dict`]), checking names and shapes against the
    /// architecture the embedded config describes.
    pub fn from_state_dict(mut tensors: ParamMap) -> Result<VideoModel> {
        let meta = tensors.remove(META_CONFIG).ok_or_else(|| Error::MissingTensor(META_CONFIG.to_string()))?;
        let config = ModelConfig::decode(&meta.data())?;
        let mut buffers = ParamMap::new();
        buffers.insert(META_CONFIG.to_string(), meta.with_requires_grad(false));
        let source_keys: Vec<String> =
            tensors.keys().filter(|k| k.ends_with(&format!(".{POS_EMBED_SOURCE}"))).cloned().collect();
        for k in source_keys {
            let t = tensors.remove(&k).expect("key listed");
            buffers.insert(k, t.with_requires_grad(false));
        }

        let reference = VideoModel::build(config.clone(), 0)?;
        let temporal: Vec<TemporalBlock> = levels(&config).into_iter().map(|l| l.temporal).collect();
        let extended: Vec<bool> = temporal.iter().map(|b| b.is_extended(&tensors)).collect();
        let is_ext = extended.iter().any(|&e| e);
        if is_ext && !extended.iter().all(|&e| e) {
            return Err(Error::Surgery("only some temporal blocks carry adapters".to_string()));
        }
        let capacity = tensors
            .get(&temporal[0].pos_embed_name())
            .map(|t| t.shape()[0])
            .ok_or_else(|| Error::MissingTensor(temporal[0].pos_embed_name()))?;

        let mut expected: BTreeMap<String, Vec<usize>> =
            reference.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
        for block in &temporal {
            let c = block.channels;
            expected.insert(block.pos_embed_name(), vec![capacity, c]);
            if is_ext {
                let weight = format!("{}.weight", block.adapter_prefix());
                let shape = tensors[&weight].shape().to_vec();
                let well_formed =
                    shape.len() == 5 && shape[0] == c && shape[1] == c && shape[2..].iter().all(|k| k % 2 == 1);
                if !well_formed {
                    return Err(Error::TensorShape { name: weight, expected: vec![c, c, 3, 1, 1], got: shape });
                }
                expected.insert(weight, shape);
                expected.insert(format!("{}.bias", block.adapter_prefix()), vec![c]);
                let source = format!("{}.{POS_EMBED_SOURCE}", block.prefix);
                if !buffers.contains_key(&source) {
                    return Err(Error::MissingTensor(source));
                }
            }
        }
        for (name, shape) in &expected {
            let t = tensors.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() });
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        let mut model = VideoModel { config, params: tensors, buffers, grad_checkpoint: false };
        let mask = if is_ext { model.freeze_mask()? } else { model.pretrain_mask() };
        model.set_trainable(&mask)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn levels(&self) -> Vec<Level> {
        levels(&self.config)
    }

    pub fn temporal_blocks(&self) -> Vec<TemporalBlock> {
        self.levels().into_iter().map(|l| l.temporal).collect()
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn buffers(&self) -> &ParamMap {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        param(&self.params, name)
    }

    /// Replaces a parameter's value, keeping the shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self.param(name)?;
        if old.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: old.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut ParamMap {
        &mut self.buffers
    }

    /// Parameters and buffers together, as persisted.
    pub fn state_dict(&self) -> ParamMap {
        let mut all = self.params.clone();
        all.extend(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        all
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Frames the temporal blocks currently accept.
    pub fn frame_capacity(&self) -> usize {
        let name = self.temporal_blocks()[0].pos_embed_name();
        self.params[&name].shape()[0]
    }

    pub fn is_extended(&self) -> bool {
        self.temporal_blocks()[0].is_extended(&self.params)
    }

    pub fn classify_params(&self) -> Result<ParamClasses> {
        let mut classes = ParamClasses::default();
        for name in self.params.keys() {
            if classify_name(name)? {
                classes.temporal.insert(name.clone());
            } else {
                classes.spatial.insert(name.clone());
            }
        }
        Ok(classes)
    }

    /// Post-tuning mask: temporal parameters trainable, everything else frozen.
    /// On a model that has not been extended the static positional tables stay
    /// frozen as well.
    pub fn freeze_mask(&self) -> Result<BTreeMap<String, bool>> {
        let extended = self.is_extended();
        self.params
            .keys()
            .map(|name| {
                let temporal = classify_name(name)?;
                let static_pe = !extended && name.ends_with(".pos_embed");
                Ok((name.clone(), temporal && !static_pe))
            })
            .collect()
    }

    /// Base-training mask: everything except the static positional tables.
    pub fn pretrain_mask(&self) -> BTreeMap<String, bool> {
        self.params.keys().map(|n| (n.clone(), !n.ends_with(".pos_embed"))).collect()
    }

    pub fn set_trainable(&mut self, mask: &BTreeMap<String, bool>) -> Result<()> {
        for (name, &on) in mask {
            let t = self.param(name)?;
            if t.requires_grad() != on {
                let t = t.with_requires_grad(on);
                self.params.insert(name.clone(), t);
            }
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params.iter().filter(|(_, t)| t.requires_grad()).map(|(k, _)| k.clone()).collect()
    }

    /// Enables per-level activation recomputation during backward.
    pub fn set_grad_checkpointing(&mut self, on: bool) {
        self.grad_checkpoint = on;
    }

    pub fn grad_checkpointing(&self) -> bool {
        self.grad_checkpoint
    }

    /// Read-only view whose positional tables keep their first `frames` rows.
    /// Used to run an extended model on the original frame count.
    pub fn prefix(&self, frames: usize) -> Result<VideoModel> {
        let capacity = self.frame_capacity();
        if frames == 0 || frames > capacity {
            return Err(Error::FrameCapacity { capacity, got: frames });
        }
        let _guard = no_grad();
        let mut view = self.clone();
        for block in self.temporal_blocks() {
            let name = block.pos_embed_name();
            let pe = &self.params[&name];
            view.params.insert(name, pe.narrow(0, 0, frames)?.with_requires_grad(false));
        }
        Ok(view)
    }

    /// Noise prediction for `noisy: [B, T, C_v, H, W]` conditioned on
    /// `first_frame: [B, C_v, H, W]` at diffusion steps `timestep: [B]`.
    pub fn forward(&self, noisy: &Tensor, first_frame: &Tensor, timestep: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (cv, hh, ww) = (cfg.video_channels, cfg.height, cfg.width);
        let &[b, t, c, h, w] = noisy.shape() else {
            return Err(Error::InvalidInput(format!("video must be [B,T,C,H,W], got {:?}", noisy.shape())));
        };
        if (c, h, w) != (cv, hh, ww) {
            return Err(Error::InvalidInput(format!(
                "video frames are {c}x{h}x{w}, model expects {cv}x{hh}x{ww}"
            )));
        }
        let capacity = self.frame_capacity();
        if t != capacity {
            return Err(Error::FrameCapacity { capacity, got: t });
        }
        if first_frame.shape() != [b, cv, hh, ww] {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                expected: vec![b, cv, hh, ww],
                got: first_frame.shape().to_vec(),
            }
            .into());
        }
        if timestep.shape() != [b] {
            return Err(TensorError::ShapeMismatch { op: "forward", expected: vec![b], got: timestep.shape().to_vec() }
                .into());
        }

        let cond = first_frame.reshape(&[b, 1, cv, h, w])?;
        let cond = concat(&vec![cond; t], 1)?;
        let x = concat(&[noisy.clone(), cond], 2)?.reshape(&[b * t, 2 * cv, h, w])?;
        let c0 = cfg.channels[0];
        let mut hid = self.conv2d("in_conv", &x)?.reshape(&[b, t, c0, h, w])?;
        let temb = self.time_embed(timestep)?;

        let all = levels(cfg);
        let depth = cfg.levels;
        let mut skips = Vec::new();
        for level in all.iter().filter(|l| l.stage == Stage::Down) {
            hid = self.run_level(level, vec![hid, temb.clone()])?;
            if level.index + 1 < depth {
                skips.push(hid.clone());
            }
        }
        for level in all.iter().filter(|l| l.stage == Stage::Up) {
            let mut inputs = vec![hid, temb.clone()];
            if level.index + 1 < depth {
                inputs.push(skips[level.index].clone());
            }
            hid = self.run_level(level, inputs)?;
        }

        let flat = hid.reshape(&[b * t, c0, h, w])?;
        let normed = group_norm(&flat, cfg.norm_groups, self.param("out_norm.weight")?, self.param("out_norm.bias")?)?;
        Ok(self.conv2d("out_conv", &normed.silu())?.reshape(&[b, t, cv, h, w])?)
    }

    fn conv2d(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(conv2d(x, w, Some(b))?)
    }

    fn time_embed(&self, timestep: &Tensor) -> Result<Tensor> {
        let feats = timestep_features(&timestep.data(), self.config.channels[0]);
        let h = linear(&feats, self.param("time_embed.linear1.weight")?, Some(self.param("time_embed.linear1.bias")?))?;
        Ok(linear(&h.silu(), self.param("time_embed.linear2.weight")?, Some(self.param("time_embed.linear2.bias")?))?)
    }

    fn run_level(&self, level: &Level, inputs: Vec<Tensor>) -> Result<Tensor> {
        let groups = self.config.norm_groups;
        if !self.grad_checkpoint {
            return level.forward(&self.params, groups, &inputs);
        }
        let prefix = level.prefix();
        let own: ParamMap =
            self.params.iter().filter(|(k, _)| k.starts_with(&prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let trainable = own.values().any(Tensor::requires_grad);
        let level = level.clone();
        Ok(checkpoint(&inputs, trainable, move |xs| {
            level.forward(&own, groups, xs).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => TensorError::InvalidArgument { op: "checkpoint", msg: other.to_string() },
            })
        })?)
    }
}

fn levels(cfg: &ModelConfig) -> Vec<Level> {
    let temporal = |prefix: String, c: usize| TemporalBlock {
        prefix,
        channels: c,
        kernel: cfg.temporal_kernel,
        order: cfg.temporal_order,
    };
    let mut out = Vec::new();
    for (i, &c) in cfg.channels.iter().enumerate() {
        let c_in = if i == 0 { c } else { cfg.channels[i - 1] };
        let pre = format!("down.{i}");
        out.push(Level {
            stage: Stage::Down,
            index: i,
            spatial: SpatialBlock { prefix: format!("{pre}.spatial"), in_channels: c_in, out_channels: c },
            temporal: temporal(format!("{pre}.temporal"), c),
        });
    }
    for (i, &c) in cfg.channels.iter().enumerate().rev() {
        let c_in = if i + 1 < cfg.levels { cfg.channels[i + 1] + c } else { c };
        let pre = format!("up.{i}");
        out.push(Level {
            stage: Stage::Up,
            index: i,
            spatial: SpatialBlock { prefix: format!("{pre}.spatial"), in_channels: c_in, out_channels: c },
            temporal: temporal(format!("{pre}.temporal"), c),
        });
    }
    out
}
