use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placement of the temporal convolution relative to temporal attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalOrder {
    #[default]
    ConvThenAttention,
    AttentionThenConv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_frames: usize,
    /// Channel count per UNet level.
    pub channels: Vec<usize>,
    pub levels: usize,
    pub video_channels: usize,
    pub height: usize,
    pub width: usize,
    pub norm_groups: usize,
    /// `(kT, kH, kW)` of the temporal convolution.
    pub temporal_kernel: [usize; 3],
    #[serde(default)]
    pub temporal_order: TemporalOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_frames: 8,
            channels: vec![32, 64],
            levels: 2,
            video_channels: 3,
            height: 32,
            width: 32,
            norm_groups: 8,
            temporal_kernel: [3, 1, 1],
            temporal_order: TemporalOrder::ConvThenAttention,
        }
    }
}

impl ModelConfig {
    /// Collects every violated constraint rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.base_frames < 2 {
            bad.push(format!("base_frames must be >= 2, got {}", self.base_frames));
        }
        if self.levels == 0 {
            bad.push("levels must be >= 1".to_string());
        }
        if self.channels.len() != self.levels {
            bad.push(format!("{} channel entries for {} levels", self.channels.len(), self.levels));
        }
        if self.video_channels == 0 {
            bad.push("video_channels must be >= 1".to_string());
        }
        if self.norm_groups == 0 {
            bad.push("norm_groups must be >= 1".to_string());
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || (self.norm_groups > 0 && c % self.norm_groups != 0) {
                bad.push(format!("channels[{i}] = {c} is not divisible by {} norm groups", self.norm_groups));
            }
            if c % 2 != 0 {
                bad.push(format!("channels[{i}] = {c} must be even for the sinusoidal table"));
            }
        }
        let factor = 1usize << self.levels.saturating_sub(1).min(16);
        for (axis, extent) in [("height", self.height), ("width", self.width)] {
            if extent == 0 || extent % factor != 0 {
                bad.push(format!("{axis} = {extent} is not divisible by {factor}"));
            }
        }
        if self.temporal_kernel.iter().any(|k| k % 2 == 0) {
            bad.push(format!("temporal_kernel {:?} has an even extent", self.temporal_kernel));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    /// Width of the timestep embedding MLP.
    pub fn time_embed_dim(&self) -> usize {
        4 * self.channels[0]
    }

    pub(crate) fn encode(&self) -> Vec<f32> {
        let order = match self.temporal_order {
            TemporalOrder::ConvThenAttention => 0.0,
            TemporalOrder::AttentionThenConv => 1.0,
        };
        let mut v = vec![
            1.0,
            self.base_frames as f32,
            self.video_channels as f32,
            self.height as f32,
            self.width as f32,
            self.norm_groups as f32,
            self.temporal_kernel[0] as f32,
            self.temporal_kernel[1] as f32,
            self.temporal_kernel[2] as f32,
            order,
            self.levels as f32,
        ];
        v.extend(self.channels.iter().map(|&c| c as f32));
        v
    }

    pub(crate) fn decode(v: &[f32]) -> Result<ModelConfig> {
        let bad = |msg: &str| Error::InvalidInput(format!("meta.config: {msg}"));
        if v.len() < 11 || v[0] != 1.0 {
            return Err(bad("unsupported encoding"));
        }
        let u = |x: f32| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e7 {
                Ok(x as usize)
            } else {
                Err(bad("non-integer field"))
            }
        };
        let levels = u(v[10])?;
        if v.len() != 11 + levels {
            return Err(bad("channel list length disagrees with levels"));
        }
        let temporal_order = match v[9] {
            0.0 => TemporalOrder::ConvThenAttention,
            1.0 => TemporalOrder::AttentionThenConv,
            _ => return Err(bad("unknown temporal order")),
        };
        let cfg = ModelConfig {
            base_frames: u(v[1])?,
            video_channels: u(v[2])?,
            height: u(v[3])?,
            width: u(v[4])?,
            norm_groups: u(v[5])?,
            temporal_kernel: [u(v[6])?, u(v[7])?, u(v[8])?],
            temporal_order,
            levels,
            channels: v[11..].iter().map(|&x| u(x)).collect::<Result<_>>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn reports_every_violation() {
        let cfg = ModelConfig { base_frames: 1, channels: vec![30, 64], height: 31, ..ModelConfig::default() };
        let Err(Error::InvalidConfig(v)) = cfg.validate() else { panic!("expected invalid config") };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn encoding_round_trips() {
        let cfg = ModelConfig { temporal_order: TemporalOrder::AttentionThenConv, ..ModelConfig::default() };
        assert_eq!(ModelConfig::decode(&cfg.encode()).unwrap(), cfg);
    }
}
