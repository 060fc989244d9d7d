use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QarvError, Result};

/// Latent-block wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockConfig {
    /// Posterior sees encoder features only; z replaces the decoder state.
    A,
    /// Posterior fuses encoder and decoder features; z replaces the state.
    B,
    /// As B, with z added to the decoder state.
    C,
}

impl BlockConfig {
    pub const ALL: [BlockConfig; 3] = [BlockConfig::A, BlockConfig::B, BlockConfig::C];

    pub fn bidirectional(self) -> bool {
        self != BlockConfig::A
    }

    pub fn residual(self) -> bool {
        self == BlockConfig::C
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormType {
    Layer,
    Group,
    Instance,
}

/// One resolution of the latent ladder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// Downsampling factor relative to the input image.
    pub divisor: usize,
    /// Feature channels at this resolution.
    pub channels: usize,
    pub latent_channels: usize,
    /// Number of latent blocks at this resolution.
    pub latents: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub max_downsample: usize,
    /// Coarse to fine.
    pub stages: Vec<Stage>,
    pub block_config: BlockConfig,
    pub norm: NormType,
    pub affine_position: u8,
    pub lambda_low: f64,
    pub lambda_high: f64,
    /// Number of sin/cos frequency pairs.
    pub embed_pairs: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub mlp_expansion: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub group_norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    pub const IMAGE_CHANNELS: usize = 3;

    /// Desk-scale preset: D = 16, four latents over three resolutions.
    pub fn tiny() -> Self {
        let stage = |divisor, channels, latents| Stage {
            divisor,
            channels,
            latent_channels: 8,
            latents,
        };
        ModelConfig {
            max_downsample: 16,
            stages: vec![stage(16, 48, 1), stage(8, 32, 1), stage(4, 24, 2)],
            block_config: BlockConfig::C,
            norm: NormType::Layer,
            affine_position: 2,
            lambda_low: 16.0,
            lambda_high: 2048.0,
            embed_pairs: 8,
            embed_hidden: 64,
            embed_dim: 64,
            kernel: 7,
            mlp_expansion: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            group_norm_groups: 32,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "qarv-tiny" | "tiny" => Ok(Self::tiny()),
            other => Err(QarvError::InvalidArgument(format!(
                "unknown preset '{other}'"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QarvError::InvalidArgument(msg));
        if self.stages.is_empty() {
            return bad("latent ladder is empty".into());
        }
        for s in &self.stages {
            if !s.divisor.is_power_of_two() {
                return bad(format!("divisor {} is not a power of two", s.divisor));
            }
            if s.channels < 2 || s.latent_channels == 0 || s.latents == 0 {
                return bad(format!("degenerate stage {s:?}"));
            }
        }
        if self.stages.windows(2).any(|w| w[1].divisor >= w[0].divisor) {
            return bad("stage divisors must strictly decrease from coarse to fine".into());
        }
        if self.stages[0].divisor != self.max_downsample {
            return bad(format!(
                "max_downsample {} differs from the coarsest divisor {}",
                self.max_downsample, self.stages[0].divisor
            ));
        }
        if self.affine_position > 4 {
            return bad(format!(
                "affine position {} not in 0..=4",
                self.affine_position
            ));
        }
        if !(self.lambda_low > 0.0
            && self.lambda_low < self.lambda_high
            && self.lambda_high.is_finite())
        {
            return bad(format!(
                "invalid lambda range [{}, {}]",
                self.lambda_low, self.lambda_high
            ));
        }
        if self.embed_pairs < 2 || self.embed_hidden == 0 || self.embed_dim == 0 {
            return bad("embedding dimensions too small".into());
        }
        if self.kernel.is_multiple_of(2) || self.mlp_expansion == 0 || self.group_norm_groups == 0 {
            return bad("kernel must be odd; expansion and groups positive".into());
        }
        Ok(())
    }

    pub fn num_latents(&self) -> usize {
        self.stages.iter().map(|s| s.latents).sum()
    }

    pub fn finest_divisor(&self) -> usize {
        self.stages.last().expect("validated").divisor
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 8 bytes of SHA-256 over the canonical JSON.
    pub fn hash(&self) -> [u8; 8] {
        let digest = Sha256::digest(self.to_json().as_bytes());
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    pub fn lambda_in_range(&self, lambda: f64) -> bool {
        lambda >= self.lambda_low && lambda <= self.lambda_high
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_preset_is_valid() {
        let c = ModelConfig::tiny();
        c.validate().unwrap();
        assert_eq!(c.num_latents(), 4);
        assert_eq!(c.finest_divisor(), 4);
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let c = ModelConfig::tiny();
        let back = ModelConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = ModelConfig::tiny();
        let b = ModelConfig {
            block_config: BlockConfig::B,
            ..a.clone()
        };
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_ladders() {
        let mut c = ModelConfig::tiny();
        c.stages[1].divisor = 6;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.max_downsample = 32;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.stages.swap(0, 2);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.affine_position = 5;
        assert!(c.validate().is_err());
    }
}
