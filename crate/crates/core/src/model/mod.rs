//! Transformer encoder numerics: parameter store, tape-based reverse-mode
//! differentiation, the encoder forward pass with its heads, and the
//! checkpoint file format.

mod checkpoint;
mod encoder;
mod params;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use encoder::{
    embed, encode_batch, encoder_forward, reconstruct_batch, reconstruction_head, regress_batch,
    regression_head, transformer_blocks, LatentOutput,
};
pub use params::{init_head, init_params, param_count, ParamStore, ParamSubset, Tensor};
pub use tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Tokens per sequence plus the CLS slot.
    pub seq_positions: usize,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 125,
            d_model: 64,
            d_ff: 32,
            n_heads: 4,
            n_layers: 2,
            seq_positions: 16,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn toy() -> Self {
        Self {
            input_dim: 3,
            d_model: 4,
            d_ff: 2,
            n_heads: 1,
            n_layers: 1,
            seq_positions: 2,
            layernorm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tokens_per_sequence(&self) -> usize {
        self.seq_positions - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_positions < 2 {
            return Err(Error::Config("model.seq_positions must leave room for CLS and a token".into()));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("model.layernorm_eps must be positive".into()));
        }
        Ok(())
    }
}
