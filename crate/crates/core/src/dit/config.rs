use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the diffusion transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub frame_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub task_vocab: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Learned text tokens per task label.
    #[serde(default = "default_text_tokens")]
    pub text_tokens: usize,
}

fn default_channels() -> usize {
    1
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_text_tokens() -> usize {
    1
}

impl Default for ModelConfig {
    /// The desk-scale toy model: 2x2 grid of 16px frames, 4px patches.
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            depth: 4,
            patch_size: 4,
            frame_size: 16,
            grid_rows: 2,
            grid_cols: 2,
            channels: 1,
            task_vocab: 3,
            rope_base: default_rope_base(),
            mlp_ratio: 4,
            text_tokens: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4 * self.heads)
        {
            return fail(format!(
                "embed_dim {} must be a positive multiple of 4 * heads ({})",
                self.embed_dim,
                4 * self.heads
            ));
        }
        if !matches!(self.grid_rows * self.grid_cols, 4 | 9)
            || !(2..=3).contains(&self.grid_rows)
            || !(2..=3).contains(&self.grid_cols)
        {
            return fail(format!(
                "grid must be 2x2 or 3x3, got {}x{}",
                self.grid_rows, self.grid_cols
            ));
        }
        if self.patch_size == 0 || !self.frame_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "frame_size {} not divisible by patch_size {}",
                self.frame_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.task_vocab == 0 || self.text_tokens == 0 {
            return fail("channels, task_vocab and text_tokens must be positive".into());
        }
        if self.mlp_ratio == 0 || !(self.rope_base > 1.0) {
            return fail("mlp_ratio must be positive and rope_base > 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn frames(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn image_height(&self) -> usize {
        self.grid_rows * self.frame_size
    }

    pub fn image_width(&self) -> usize {
        self.grid_cols * self.frame_size
    }

    /// Token grid extent (rows, cols) of the full grid image.
    pub fn token_grid(&self) -> (usize, usize) {
        (
            self.image_height() / self.patch_size,
            self.image_width() / self.patch_size,
        )
    }

    /// Tokens per frame side, `f / p`.
    pub fn cell_tokens(&self) -> usize {
        self.frame_size / self.patch_size
    }

    /// N, the number of image tokens.
    pub fn image_tokens(&self) -> usize {
        let (r, c) = self.token_grid();
        r * c
    }

    pub fn seq_len(&self) -> usize {
        self.image_tokens() + self.text_tokens
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [
            batch,
            self.channels,
            self.image_height(),
            self.image_width(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let mut c = ModelConfig::default();
        assert_eq!(c.image_tokens(), 64);
        c.grid_rows = 3;
        c.grid_cols = 3;
        assert_eq!(c.image_tokens(), 144);
    }

    #[test]
    fn rejects_bad_shapes() {
        let ok = ModelConfig::default();
        ok.validate().unwrap();
        for bad in [
            ModelConfig {
                embed_dim: 40,
                ..ok.clone()
            },
            ModelConfig {
                frame_size: 18,
                ..ok.clone()
            },
            ModelConfig {
                grid_rows: 2,
                grid_cols: 3,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
