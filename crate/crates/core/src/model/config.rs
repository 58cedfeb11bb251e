use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::kv_config;

/// Architecture hyperparameters.
///
/// Structural rules enforced by [`ModelConfig::validate`]: `d_v * n_heads ==
/// d_model` and `d_k * 2 == d_v` (keys and queries use half the value width).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_text_blocks: usize,
    pub n_audio_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub ffn_hidden: usize,
    pub gate_rank: usize,
    pub dropout_text: f64,
    pub conv_pos_kernel: usize,
    pub top_k: usize,
    pub max_len: usize,
}

kv_config!(ModelConfig {
    d_model,
    n_heads,
    d_k,
    d_v,
    n_text_blocks,
    n_audio_enc_blocks,
    n_dec_blocks,
    text_vocab,
    audio_vocab,
    ffn_hidden,
    gate_rank,
    dropout_text,
    conv_pos_kernel,
    top_k,
    max_len,
});

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size reference configuration (about 174M parameters).
    pub fn paper() -> Self {
        Self {
            d_model: 1024,
            n_heads: 16,
            d_k: 32,
            d_v: 64,
            n_text_blocks: 6,
            n_audio_enc_blocks: 6,
            n_dec_blocks: 6,
            text_vocab: 256,
            audio_vocab: 4096,
            ffn_hidden: 1536,
            gate_rank: 16,
            dropout_text: 0.1,
            conv_pos_kernel: 7,
            top_k: 100,
            max_len: 1500,
        }
    }

    /// Small configuration used for the toy corpus.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            d_k: 8,
            d_v: 16,
            n_text_blocks: 1,
            n_audio_enc_blocks: 1,
            n_dec_blocks: 2,
            text_vocab: 256,
            audio_vocab: 64,
            ffn_hidden: 64,
            gate_rank: 8,
            dropout_text: 0.1,
            conv_pos_kernel: 7,
            top_k: 100,
            max_len: 256,
        }
    }

    /// The smallest configuration satisfying the structural rules, used by
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            d_k: 4,
            d_v: 8,
            n_text_blocks: 1,
            n_audio_enc_blocks: 1,
            n_dec_blocks: 1,
            text_vocab: 12,
            audio_vocab: 10,
            ffn_hidden: 24,
            gate_rank: 4,
            dropout_text: 0.1,
            conv_pos_kernel: 3,
            top_k: 100,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.d_model > 0 && self.n_heads > 0, "d_model and n_heads must be positive");
        ensure!(
            self.d_v * self.n_heads == self.d_model,
            "d_v ({}) * n_heads ({}) must equal d_model ({})",
            self.d_v,
            self.n_heads,
            self.d_model
        );
        ensure!(
            self.d_k * 2 == self.d_v,
            "d_k ({}) must be half of d_v ({})",
            self.d_k,
            self.d_v
        );
        ensure!(self.d_model % 2 == 0, "rotary embedding needs an even d_model");
        ensure!(
            self.n_text_blocks > 0 && self.n_audio_enc_blocks > 0 && self.n_dec_blocks > 0,
            "every stack needs at least one block"
        );
        ensure!(
            self.text_vocab > 0 && self.audio_vocab > 0,
            "vocabularies must be non-empty"
        );
        ensure!(self.ffn_hidden > 0 && self.gate_rank > 0, "ffn_hidden and gate_rank must be positive");
        ensure!(
            (0.0..1.0).contains(&self.dropout_text),
            "dropout_text {} outside [0, 1)",
            self.dropout_text
        );
        ensure!(
            self.conv_pos_kernel % 2 == 1,
            "conv_pos_kernel must be odd, got {}",
            self.conv_pos_kernel
        );
        ensure!(self.top_k >= 1 && self.max_len >= 1, "top_k and max_len must be positive");
        Ok(())
    }

    pub fn hk(&self) -> usize {
        self.n_heads * self.d_k
    }

    pub fn hv(&self) -> usize {
        self.n_heads * self.d_v
    }

    pub fn eos_id(&self) -> usize {
        self.audio_vocab
    }

    pub fn n_gla_layers(&self) -> usize {
        self.n_audio_enc_blocks + self.n_dec_blocks
    }

    fn ffn_params(&self) -> usize {
        3 * self.d_model * self.ffn_hidden
    }

    pub fn text_block_params(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + self.ffn_params()
    }

    pub fn gla_block_params(&self) -> usize {
        let (d, hk, hv, r) = (self.d_model, self.hk(), self.hv(), self.gate_rank);
        2 * d                       // two norms
            + 2 * d * hk            // W_q, W_k
            + 2 * d * hv            // W_v, output gate
            + hv * d                // W_o
            + d * r + r * hk + hk   // low-rank decay gate
            + self.d_v              // per-head output norm
            + self.ffn_params()
    }

    pub fn cross_params(&self) -> usize {
        let d = self.d_model;
        2 * d + 2 * self.conv_pos_kernel * d + 4 * d * d
    }

    /// Analytic parameter count; equals the number of scalars a freshly
    /// initialized model allocates.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let text = self.text_vocab * d + self.n_text_blocks * self.text_block_params() + d;
        let audio = self.audio_vocab * d + d;
        let gla = self.n_gla_layers() * self.gla_block_params();
        let head = d + d * (self.audio_vocab + 1) + (self.audio_vocab + 1);
        text + audio + gla + self.cross_params() + head
    }
}
