//! Referring uncertainty scorer: predicts where the coarse mask is likely to
//! be wrong from the stride-32 visual tokens and the expression, and builds
//! the online error-aligned target that supervises it.
//!
//! Scoring, per visual position `i`:
//!
//! ```text
//! V' = V W_v        T' = T W_t
//! A  = softmax_L(γ V' T'ᵀ + pad_bias)
//! u_i = MLP([V_i ; (A T')_i])          (2C → C → 1, ReLU)
//! ```
//!
//! The result stays in logit form. Supervision compares `ŷ = [σ(P_fg) > 0.5]`
//! with the ground truth, optionally blurs the disagreement map, and weights
//! the per-pixel BCE by sample difficulty and class balance.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::maps::{binarize, blur, check_binary, reshape_tokens, resize_logits, LogitMap, ProbMap, Resolution, TextTokens, TokenGrid};
use crate::nn::ops::{bce_with_logits, softmax_last};
use crate::nn::{Init, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct UncLossConfig {
    /// IoU below which a sample counts as hard.
    pub delta: f64,
    /// Extra weight for hard samples.
    pub lambda_s: f64,
    /// Stabiliser in the positive-pixel weight `(n0 + ε) / (n1 + ε)`.
    pub eps: f64,
    pub warmup_steps: usize,
    pub target_blur: bool,
}

impl Default for UncLossConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            lambda_s: 1.0,
            eps: 1.0,
            warmup_steps: 0,
            target_blur: false,
        }
    }
}

impl UncLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.lambda_s >= 0.0) {
            return Err(Error::Config(format!("lambda_s must be >= 0, got {}", self.lambda_s)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Rus {
    pub w_v: Linear,
    pub w_t: Linear,
    /// Scalar attention scale, shape `(1,)`.
    pub gamma: Tensor,
    pub mlp: Mlp,
}

impl Rus {
    pub const SCOPE: &'static str = "rus";
    pub const INIT_STD: f64 = 1e-3;

    pub fn new(store: &mut ParamStore, width: usize, seed: u64) -> Result<Self> {
        let mut pb = store.builder(Self::SCOPE, seed);
        let near_id = Init::NearIdentity { std: Self::INIT_STD };
        Ok(Self {
            w_v: Linear::no_bias(&mut pb.pp("w_v"), width, width, near_id)?,
            w_t: Linear::no_bias(&mut pb.pp("w_t"), width, width, near_id)?,
            gamma: pb.tensor("gamma", &[1], Init::Const(1.0 / (width as f64).sqrt()))?,
            mlp: Mlp::new(&mut pb.pp("mlp"), 2 * width, width, 1)?,
        })
    }

    /// Attention of every visual position over the text tokens, `(B, N, L)`.
    pub fn attention(&self, v: &TokenGrid, text: &TextTokens) -> Result<(Tensor, Tensor)> {
        let vp = self.w_v.forward(&v.tokens)?;
        let tp = self.w_t.forward(&text.embeddings)?;
        let scores = vp.matmul(&tp.transpose(1, 2)?.contiguous()?)?.broadcast_mul(&self.gamma)?;
        let a = softmax_last(&scores.broadcast_add(&text.attention_bias()?)?)?;
        Ok((a, tp))
    }

    /// Uncertainty logits at the stride-32 grid.
    pub fn score_uncertainty(&self, v32: &TokenGrid, text: &TextTokens) -> Result<LogitMap> {
        if v32.stride != 32 {
            return Err(Error::WrongStride { expected: 32, got: v32.stride });
        }
        let (a, tp) = self.attention(v32, text)?;
        let attended = a.matmul(&tp)?;
        let u = self.mlp.forward(&Tensor::cat(&[&v32.tokens, &attended], 2)?)?;
        reshape_tokens(&u, v32.h, v32.w, Resolution::Stride(32))
    }
}

/// Online supervision for the scorer.
#[derive(Debug, Clone)]
pub struct ErrorTarget {
    /// Hard coarse prediction `ŷ`.
    pub pred: Tensor,
    /// Binary disagreement map `e = [ŷ ≠ y]`.
    pub error: ProbMap,
    /// Regression target: `e`, or its blur when enabled.
    pub z: ProbMap,
}

/// Builds `e` and `z` from the detached coarse logits.
pub fn build_error_target(p_fg: &LogitMap, y: &ProbMap, cfg: &UncLossConfig) -> Result<ErrorTarget> {
    if p_fg.dims() != y.dims() {
        return Err(Error::shape("build_error_target", format!("{:?}", p_fg.dims()), format!("{:?}", y.dims())));
    }
    check_binary(y.values(), "ground-truth mask")?;
    let pred = binarize(&p_fg.detach())?;
    let gt = y.values().detach().to_dtype(pred.dtype())?;
    let e = pred.ne(&gt)?.to_dtype(pred.dtype())?;
    let error = ProbMap::new(e, Resolution::Full)?;
    let z = blur(&error, cfg.target_blur)?;
    Ok(ErrorTarget { pred, error, z })
}

/// IoU of two hard masks; an empty union counts as a perfect match.
pub fn hard_iou(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as u8 as f64;
        union += (p || g) as u8 as f64;
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

pub fn weight_for_iou(iou: f64, cfg: &UncLossConfig) -> f64 {
    if iou < cfg.delta {
        1.0 + cfg.lambda_s
    } else {
        1.0
    }
}

/// Per-sample difficulty weights `(B,)`.
pub fn sample_weight(pred: &Tensor, y: &Tensor, cfg: &UncLossConfig) -> Result<Tensor> {
    let b = pred.dims()[0];
    let p = pred.to_dtype(DType::F64)?.reshape((b, ()))?.to_vec2::<f64>()?;
    let g = y.to_dtype(DType::F64)?.reshape((b, ()))?.to_vec2::<f64>()?;
    let w: Vec<f64> = p.iter().zip(&g).map(|(p, g)| weight_for_iou(hard_iou(p, g), cfg)).collect();
    Ok(Tensor::from_vec(w, b, pred.device())?.to_dtype(pred.dtype())?)
}

/// Class-rebalancing weights: `(n0 + ε) / (n1 + ε)` on positive pixels of the
/// binary error map, 1 elsewhere, counted per sample.
pub fn pixel_weights(error: &ProbMap, eps: f64) -> Result<Tensor> {
    let t = error.values();
    check_binary(t, "error map")?;
    let (b, h, w) = error.dims();
    let rows = t.to_dtype(DType::F64)?.reshape((b, h * w))?.to_vec2::<f64>()?;
    let mut out = Vec::with_capacity(b * h * w);
    for row in rows {
        let n1: f64 = row.iter().sum();
        let n0 = row.len() as f64 - n1;
        let pos = (n0 + eps) / (n1 + eps);
        out.extend(row.iter().map(|&e| if e == 1.0 { pos } else { 1.0 }));
    }
    Ok(Tensor::from_vec(out, (b, 1, h, w), t.device())?.to_dtype(t.dtype())?)
}

/// Weighted per-pixel BCE of the resized uncertainty logits against `z`,
/// averaged over `B·H·W`. Exactly zero (and graph-free) during warm-up.
pub fn uncertainty_loss(
    u: &LogitMap,
    z: &ProbMap,
    sample_w: &Tensor,
    pixel_w: &Tensor,
    step: usize,
    cfg: &UncLossConfig,
) -> Result<Tensor> {
    let dtype = u.values().dtype();
    if step < cfg.warmup_steps {
        return Ok(Tensor::zeros((), dtype, u.values().device())?);
    }
    let (b, h, w) = z.dims();
    let up = resize_logits(u, h, w)?;
    if up.dims() != (b, h, w) || pixel_w.dims() != [b, 1, h, w] || sample_w.dims() != [b] {
        return Err(Error::shape(
            "uncertainty_loss",
            format!("({b}, 1, {h}, {w}) maps and ({b},) sample weights"),
            format!("{:?} / {:?} / {:?}", up.dims(), pixel_w.dims(), sample_w.dims()),
        ));
    }
    let bce = bce_with_logits(up.values(), &z.values().to_dtype(dtype)?)?;
    let weighted = bce
        .mul(&pixel_w.to_dtype(dtype)?)?
        .broadcast_mul(&sample_w.to_dtype(dtype)?.reshape((b, 1, 1, 1))?)?;
    Ok(weighted.mean_all()?)
}
