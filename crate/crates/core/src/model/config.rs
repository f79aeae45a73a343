use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    #[default]
    Factorised,
}

/// How the decoder's `[T, S, d]` queries are parameterised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Shared spatial embeddings plus per-frame temporal embeddings.
    #[default]
    Factorised,
    /// A free embedding for every (frame, slot).
    Independent,
}

/// What a query slot represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryBinding {
    /// One slot per actor, classified independently at every frame.
    #[default]
    Person,
    /// One slot per (actor, action); class logits come from the time-pooled slot.
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_t: usize,
    pub patch_hw: usize,
    pub d_enc: usize,
    pub layers_spatial: usize,
    pub layers_temporal: usize,
    pub heads: usize,
    pub d_mlp: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_t: 2,
            patch_hw: 16,
            d_enc: 32,
            layers_spatial: 1,
            layers_temporal: 1,
            heads: 2,
            d_mlp: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Clip length `T`.
    pub frames: usize,
    /// Spatial query count `S`.
    pub queries: usize,
    /// Action classes `C` (the background channel is extra).
    pub classes: usize,
    /// Decoder layers `L`; 0 applies the heads directly to the features.
    pub layers: usize,
    pub d_dec: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub encoder: EncoderConfig,
    pub attention: AttentionMode,
    pub query_mode: QueryMode,
    pub binding: QueryBinding,
    /// Decoder dropout rate; only applied when a forward pass asks for it.
    pub dropout: f64,
    /// Standard deviation of learned query embeddings.
    pub query_init_std: f64,
    /// Standard deviation of positional embeddings.
    pub pos_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            queries: 4,
            classes: 4,
            layers: 2,
            d_dec: 32,
            d_mlp: 64,
            heads: 2,
            height: 64,
            width: 64,
            channels: 3,
            encoder: EncoderConfig::default(),
            attention: AttentionMode::Factorised,
            query_mode: QueryMode::Factorised,
            binding: QueryBinding::Person,
            dropout: 0.1,
            query_init_std: 1.0,
            pos_init_std: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let positive = [
            ("frames", self.frames),
            ("queries", self.queries),
            ("classes", self.classes),
            ("d_dec", self.d_dec),
            ("d_mlp", self.d_mlp),
            ("heads", self.heads),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("encoder.patch_t", e.patch_t),
            ("encoder.patch_hw", e.patch_hw),
            ("encoder.d_enc", e.d_enc),
            ("encoder.heads", e.heads),
            ("encoder.d_mlp", e.d_mlp),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_dec % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_dec {} not divisible by heads {}",
                self.d_dec, self.heads
            )));
        }
        if e.d_enc % e.heads != 0 {
            return Err(Error::Config(format!(
                "encoder d_enc {} not divisible by heads {}",
                e.d_enc, e.heads
            )));
        }
        if self.frames % e.patch_t != 0 {
            return Err(Error::Config(format!(
                "frames {} not divisible by patch_t {}",
                self.frames, e.patch_t
            )));
        }
        if self.height % e.patch_hw != 0 || self.width % e.patch_hw != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} not divisible by patch_hw {}",
                self.height, self.width, e.patch_hw
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn token_frames(&self) -> usize {
        self.frames / self.encoder.patch_t
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.encoder.patch_hw, self.width / self.encoder.patch_hw)
    }

    pub fn grid_cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.encoder.patch_t * self.encoder.patch_hw * self.encoder.patch_hw * self.channels
    }

    /// Output slots per frame: `S`, or the feature grid when there is no decoder.
    pub fn slots(&self) -> usize {
        if self.layers == 0 {
            self.grid_cells()
        } else {
            self.queries
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d_dec: 30,
            heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            frames: 15,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            width: 60,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn derived_sizes() {
        let c = ModelConfig {
            frames: 4,
            height: 32,
            width: 32,
            ..Default::default()
        };
        assert_eq!(c.token_frames(), 2);
        assert_eq!(c.grid(), (2, 2));
        assert_eq!(c.slots(), 4);
        assert_eq!(ModelConfig { layers: 0, ..c }.slots(), 4);
    }
}
