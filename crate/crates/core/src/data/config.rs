use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global dimensions of the model and its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Maximum visits per patient.
    pub n_v: usize,
    /// Number of distinct medical codes (informational; no parameter depends on it).
    pub n_c: usize,
    /// Maximum criterion length in tokens.
    pub n_s: usize,
    /// Token vocabulary size (informational).
    pub n_w: usize,
    /// Memory slot dimension.
    pub n_m: usize,
    /// Text-embedding dimension.
    pub n_e: usize,
    pub attention_heads: usize,
    /// Transformer feed-forward width as a multiple of `n_e`.
    pub ffn_multiplier: usize,
    /// Width of the second hidden layer of the prediction head.
    pub head_hidden: usize,
    pub inference_beam: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_v: 64,
            n_c: 0,
            n_s: 32,
            n_w: 0,
            n_m: 128,
            n_e: 768,
            attention_heads: 4,
            ffn_multiplier: 4,
            head_hidden: 32,
            inference_beam: 4,
        }
    }
}

impl ModelConfig {
    /// Small dimensions that train in minutes on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            n_m: 64,
            n_e: 32,
            ffn_multiplier: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_v", self.n_v),
            ("n_s", self.n_s),
            ("n_m", self.n_m),
            ("n_e", self.n_e),
            ("attention_heads", self.attention_heads),
            ("ffn_multiplier", self.ffn_multiplier),
            ("head_hidden", self.head_hidden),
            ("inference_beam", self.inference_beam),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.n_m % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "n_m={} must be even",
                self.n_m
            )));
        }
        if self.n_e % self.attention_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention_heads={} must divide n_e={}",
                self.attention_heads, self.n_e
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_e / self.attention_heads
    }

    pub fn ffn_width(&self) -> usize {
        self.n_e * self.ffn_multiplier
    }
}
