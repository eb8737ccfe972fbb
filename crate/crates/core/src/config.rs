use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, OrderSet};
use crate::error::{Error, Result};
use crate::layers::Activation;

/// Architecture of the backbone stages and their detectors.
///
/// The number of stages equals the number of detectors; stage 1 maps
/// `input_dim` to `channels`, later stages map `channels` to `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub channels: usize,
    pub stage_hidden: usize,
    /// Window half-width `k`; windows hold `2k + 1` frames.
    pub half_width: usize,
    pub ffn_expansion: usize,
    pub pcm_channels: usize,
    pub se_hidden: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub detectors: Vec<DetectorConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            channels: 32,
            stage_hidden: 32,
            half_width: 8,
            ffn_expansion: 2,
            pcm_channels: 16,
            se_hidden: 8,
            mlp_hidden: 64,
            activation: Activation::Silu,
            detectors: default_detectors(3),
        }
    }
}

fn default_detectors(n_blocks: usize) -> Vec<DetectorConfig> {
    [&[0u8][..], &[0, 1], &[0, 1, 2]]
        .iter()
        .map(|orders| DetectorConfig {
            order_set: OrderSet::from_orders(orders).expect("valid default orders"),
            n_blocks,
            exit_threshold: 0.5,
            exit_radius: 4,
            loss_weight: 1.0,
        })
        .collect()
}

impl ModelConfig {
    /// Small model used for gradient checks (`C = 4`, `t_w = 5`).
    pub fn miniature() -> Self {
        ModelConfig {
            input_dim: 4,
            channels: 4,
            stage_hidden: 5,
            half_width: 2,
            ffn_expansion: 2,
            pcm_channels: 3,
            se_hidden: 2,
            mlp_hidden: 6,
            activation: Activation::Silu,
            detectors: default_detectors(2),
        }
    }

    /// Reduced widths for single-core desk runs: `C = 16`, `C_p = 4`, two
    /// difference blocks per detector. Window, scheduler and order sets
    /// keep their defaults.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 16,
            pcm_channels: 4,
            detectors: default_detectors(2),
            ..ModelConfig::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.detectors.len()
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("channels", self.channels),
            ("stage_hidden", self.stage_hidden),
            ("half_width", self.half_width),
            ("ffn_expansion", self.ffn_expansion),
            ("pcm_channels", self.pcm_channels),
            ("se_hidden", self.se_hidden),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("at least one detector is required".into()));
        }
        for (i, d) in self.detectors.iter().enumerate() {
            d.validate()
                .map_err(|e| Error::Config(format!("detector {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set_order_sets(&mut self, sets: &[OrderSet]) {
        for (d, s) in self.detectors.iter_mut().zip(sets) {
            d.order_set = *s;
        }
    }

    pub fn set_exit_radius(&mut self, radius: usize) {
        self.detectors.iter_mut().for_each(|d| d.exit_radius = radius);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.window_len(), 17);
        assert_eq!(c.stages(), 3);
        ModelConfig::miniature().validate().unwrap();
        assert_eq!(ModelConfig::miniature().window_len(), 5);
    }

    #[test]
    fn json_roundtrip() {
        let c = ModelConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"order_set\":[0,1,2]"));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_detector() {
        let mut c = ModelConfig::default();
        c.detectors[1].exit_threshold = 1.5;
        assert!(c.validate().is_err());
    }
}
