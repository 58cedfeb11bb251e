//! Text-conditioned autoregressive audio-token model: a bidirectional text
//! encoder, a causal GLA audio encoder, one convolutional position-aware
//! cross-attention layer, a causal GLA decoder and a head over the codec
//! vocabulary plus EOS.

pub mod checkpoint;
mod config;
pub mod layers;
mod net;
mod params;
mod states;

pub use config::ModelConfig;
pub use layers::Mode;
pub use net::{
    sample_top_k, ChunkVars, Generation, InferenceState, Model, SamplingOptions, TextContext,
};
pub use params::{Bound, ParamId, ParamStore};
pub use states::{HeadState, StateBundle, StateRank, StateVars, Stack};

#[cfg(test)]
mod tests;
