//! Minimal neural-network building blocks on top of candle tensors.

pub mod conv;
pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{Conv3x3, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{Init, ParamBuilder, ParamStore};
