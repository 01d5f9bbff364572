//! Uncertainty-driven local refinement: a small convolutional head predicts a
//! residual on the coarse logits, and a soft mask derived from the uncertainty
//! probabilities confines where the residual applies.
//!
//! ```text
//! M     = stopgrad(σ((Blur(U^p) - τ) / t))
//! Δ     = R([F↑ ; P_fg ; U^p])      3x3 conv, ReLU, 3x3 conv, ReLU, 1x1 conv
//! P_ref = P_fg + M ⊙ Δ
//! ```
//!
//! The 1x1 output layer starts at zero, so `P_ref = P_fg` exactly until the
//! head has been trained.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::losses::{seg_loss, SegLossKind};
use crate::maps::{blur, LogitMap, ProbMap, Resolution};
use crate::nn::ops::sigmoid;
use crate::nn::{Conv3x3, Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub tau: f64,
    pub temperature: f64,
    pub mask_blur: bool,
    /// Hidden width of the refinement head.
    pub hidden: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            tau: 0.35,
            temperature: 0.1,
            mask_blur: true,
            hidden: 16,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("refinement hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Soft refinement mask. Carries no gradient back to `u_p`.
pub fn soft_mask(u_p: &ProbMap, tau: f64, temperature: f64, mask_blur: bool) -> Result<ProbMap> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let src = blur(&u_p.detach(), mask_blur)?;
    let m = sigmoid(&((src.values() - tau)? / temperature)?)?;
    Ok(ProbMap::trusted(m, u_p.resolution()))
}

/// `P_fg + M ⊙ Δ`.
pub fn apply_refinement(p_fg: &LogitMap, m: &ProbMap, delta: &LogitMap) -> Result<LogitMap> {
    if p_fg.dims() != m.dims() || p_fg.dims() != delta.dims() {
        return Err(Error::shape(
            "apply_refinement",
            format!("{:?}", p_fg.dims()),
            format!("{:?} / {:?}", m.dims(), delta.dims()),
        ));
    }
    let v = (p_fg.values() + m.values().mul(delta.values())?)?;
    Ok(LogitMap::trusted(v, p_fg.resolution()))
}

/// Segmentation loss on the refined logits.
pub fn refinement_loss(p_ref: &LogitMap, y: &ProbMap, kind: SegLossKind) -> Result<Tensor> {
    seg_loss(p_ref, y, kind)
}

#[derive(Debug, Clone)]
pub struct Udlr {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub head: Linear,
    pub cfg: RefineConfig,
}

impl Udlr {
    pub const SCOPE: &'static str = "udlr";

    pub fn new(store: &mut ParamStore, feature_width: usize, cfg: &RefineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = store.builder(Self::SCOPE, seed);
        Ok(Self {
            conv1: Conv3x3::new(&mut pb.pp("conv1"), feature_width + 2, cfg.hidden)?,
            conv2: Conv3x3::new(&mut pb.pp("conv2"), cfg.hidden, cfg.hidden)?,
            head: Linear::with_init(&mut pb.pp("head"), cfg.hidden, 1, Init::Zeros, Init::Zeros)?,
            cfg: cfg.clone(),
        })
    }

    /// `feature: (B, H, W, C)` channels-last, already at full resolution.
    /// Inputs are concatenated in the order `[F, P_fg, U^p]`.
    pub fn refine_residual(&self, feature: &Tensor, p_fg: &LogitMap, u_p: &ProbMap) -> Result<LogitMap> {
        let (b, h, w, _) = feature.dims4()?;
        if p_fg.dims() != (b, h, w) || u_p.dims() != (b, h, w) {
            return Err(Error::shape(
                "refine_residual",
                format!("({b}, {h}, {w})"),
                format!("{:?} / {:?}", p_fg.dims(), u_p.dims()),
            ));
        }
        let p = p_fg.values().reshape((b, h, w, 1))?;
        let u = u_p.values().reshape((b, h, w, 1))?;
        let x = Tensor::cat(&[feature, &p, &u], 3)?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        let d = self.head.forward(&x)?.reshape((b, 1, h, w))?;
        Ok(LogitMap::trusted(d, Resolution::Full))
    }

    pub fn mask(&self, u_p: &ProbMap) -> Result<ProbMap> {
        soft_mask(u_p, self.cfg.tau, self.cfg.temperature, self.cfg.mask_blur)
    }
}
