use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Text encoder depth; the class-attention trace has one entry per layer.
    pub text_layers: usize,
    pub image_layers: usize,
    pub cross_layers: usize,
    /// Includes the class and boundary tokens.
    pub max_text_len: usize,
    /// Images are `patch_side × patch_side` grids of patch vectors.
    pub patch_side: usize,
    pub patch_dim: usize,
    pub ffn_mult: usize,
    /// Width of the contrastive projection space.
    pub embed_dim: usize,
    pub tie_mlm_weights: bool,
    pub init_std: f64,
    /// Filled from the corpus vocabulary when the model is built.
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            text_layers: 6,
            image_layers: 4,
            cross_layers: 2,
            max_text_len: 32,
            patch_side: 4,
            patch_dim: 16,
            ffn_mult: 4,
            embed_dim: 32,
            tie_mlm_weights: true,
            init_std: 0.02,
            vocab_size: 0,
        }
    }
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: format!("encoder.{path}"),
                message,
            })
        };
        if self.num_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(
                "num_heads",
                format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads),
            );
        }
        for (name, v) in [
            ("text_layers", self.text_layers),
            ("image_layers", self.image_layers),
            ("cross_layers", self.cross_layers),
            ("patch_side", self.patch_side),
            ("patch_dim", self.patch_dim),
            ("ffn_mult", self.ffn_mult),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if self.max_text_len < 3 {
            return bad("max_text_len", "needs room for class, boundary and one word".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std", "must be positive".into());
        }
        Ok(())
    }
}
