//! Uncertainty-gated fusion: one extra text cross-attention update applied to
//! each of the stride 8/16/32 levels before decoding, scaled per position by
//! a gate computed from the uncertainty logits.
//!
//! ```text
//! ΔV = Dropout(Linear(CrossAttn(V, T, m)))
//! g  = σ(α · resize(U) + β)
//! V⁺ = LN(V + g ⊙ ΔV)
//! ```
//!
//! All three levels share one parameter set.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::{flatten_map, resize_logits, FeaturePyramid, LogitMap, Resolution, TextTokens, TokenGrid};
use crate::nn::ops::{dropout, sigmoid};
use crate::nn::{Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};

pub const FUSED_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct UgfConfig {
    pub heads: usize,
    pub dropout: f64,
}

impl Default for UgfConfig {
    fn default() -> Self {
        Self { heads: 4, dropout: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct Ugf {
    pub attn: MultiHeadAttention,
    pub proj: Linear,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl Ugf {
    pub const SCOPE: &'static str = "ugf";

    pub fn new(store: &mut ParamStore, width: usize, cfg: &UgfConfig, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", cfg.dropout)));
        }
        let mut pb = store.builder(Self::SCOPE, seed);
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), width, cfg.heads)?,
            proj: Linear::new(&mut pb.pp("proj"), width, width)?,
            alpha: pb.tensor("alpha", &[1], Init::Const(1.0))?,
            beta: pb.tensor("beta", &[1], Init::Zeros)?,
            norm: LayerNorm::new(&mut pb.pp("norm"), width)?,
            dropout: cfg.dropout,
        })
    }

    /// `rng = None` is eval mode.
    pub fn cross_modal_delta(&self, v: &TokenGrid, text: &TextTokens, rng: Option<&mut ChaCha8Rng>) -> Result<TokenGrid> {
        let bias = text.attention_bias()?;
        let ctx = self.attn.forward(&v.tokens, &text.embeddings, Some(&bias))?;
        let dv = dropout(&self.proj.forward(&ctx)?, self.dropout, rng)?;
        v.with_tokens(dv)
    }

    /// `u: (B, N, 1)` logits → gates in `(0, 1)`.
    pub fn gate(&self, u: &Tensor) -> Result<Tensor> {
        gate(u, &self.alpha, &self.beta)
    }

    pub fn fuse(&self, v: &TokenGrid, dv: &TokenGrid, g: &Tensor) -> Result<TokenGrid> {
        let x = (&v.tokens + dv.tokens.broadcast_mul(g)?)?;
        v.with_tokens(self.norm.forward(&x)?)
    }

    /// Gates for each fused level, resizing the logits first.
    pub fn level_gates(&self, pyramid: &FeaturePyramid, u: &LogitMap) -> Result<Vec<Tensor>> {
        if u.resolution() != Resolution::Stride(32) {
            return Err(Error::WrongStride {
                expected: 32,
                got: match u.resolution() {
                    Resolution::Stride(s) => s,
                    Resolution::Full => 1,
                },
            });
        }
        FUSED_STRIDES
            .iter()
            .map(|&s| {
                let level = pyramid.level(s)?;
                let resized = resize_logits(u, level.h, level.w)?;
                self.gate(&flatten_map(&resized)?)
            })
            .collect()
    }

    /// Fuses strides 8/16/32 once; stride 4 passes through unchanged.
    pub fn apply(
        &self,
        pyramid: &FeaturePyramid,
        text: &TextTokens,
        u: &LogitMap,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FeaturePyramid> {
        let gates = self.level_gates(pyramid, u)?;
        let mut levels = pyramid.levels.clone();
        for (s, g) in FUSED_STRIDES.iter().zip(&gates) {
            let idx = FeaturePyramid::STRIDES.iter().position(|x| x == s).expect("fused stride");
            let v = &pyramid.levels[idx];
            let dv = self.cross_modal_delta(v, text, rng.as_deref_mut())?;
            levels[idx] = self.fuse(v, &dv, g)?;
        }
        FeaturePyramid::new(levels)
    }
}

/// `σ(α u + β)` with scalar `α`, `β` of shape `(1,)`.
pub fn gate(u: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    sigmoid(&u.broadcast_mul(alpha)?.broadcast_add(beta)?)
}
