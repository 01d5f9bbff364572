//! Full pipeline: backbone plus the optional scorer, gated fusion and local
//! refinement, switched by independent flags.
//!
//! Forward order: encode image and text; score uncertainty on the stride-32
//! tokens; fuse strides 8/16/32 under the uncertainty gates; decode coarse
//! logits and the mask feature; refine the coarse logits inside the soft
//! uncertainty mask.
//!
//! Every module draws its initial weights from its own random stream, so
//! switching one module on or off leaves the others' weights untouched.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::losses::{seg_loss, total_loss, LossWeights, SegLossKind};
use crate::maps::{binarize, resize_logits, to_prob, LogitMap, ProbMap, Resolution};
use crate::nn::ParamStore;
use crate::rus::{build_error_target, pixel_weights, sample_weight, uncertainty_loss, Rus, UncLossConfig};
use crate::udlr::{apply_refinement, refinement_loss, RefineConfig, Udlr};
use crate::ugf::{Ugf, UgfConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub use_ugf: bool,
    pub use_udlr: bool,
    pub use_unc_loss: bool,
}

impl Flags {
    pub const BASE: Flags = Flags { use_ugf: false, use_udlr: false, use_unc_loss: false };
    pub const UGF: Flags = Flags { use_ugf: true, use_udlr: false, use_unc_loss: true };
    pub const UDLR: Flags = Flags { use_ugf: false, use_udlr: true, use_unc_loss: true };
    pub const FULL: Flags = Flags { use_ugf: true, use_udlr: true, use_unc_loss: true };

    /// The scorer exists whenever anything consumes or supervises it.
    pub fn needs_scorer(&self) -> bool {
        self.use_ugf || self.use_udlr || self.use_unc_loss
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ugf: UgfConfig,
    pub refine: RefineConfig,
    pub unc: UncLossConfig,
    pub weights: LossWeights,
    pub seg_loss: SegLossKind,
    pub flags: Flags,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.refine.validate()?;
        self.unc.validate()?;
        self.weights.validate()?;
        if self.ugf.heads == 0 || !self.backbone.embed_width.is_multiple_of(self.ugf.heads) {
            return Err(Error::Config("embed_width must be divisible by the fusion heads".into()));
        }
        Ok(())
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub p_fg: LogitMap,
    /// Uncertainty logits on the stride-32 grid.
    pub u: Option<LogitMap>,
    /// `σ` of the full-resolution resized uncertainty logits.
    pub u_p: Option<ProbMap>,
    pub mask: Option<ProbMap>,
    pub delta: Option<LogitMap>,
    /// Final logits: refined when refinement is on, else `p_fg`.
    pub p_ref: LogitMap,
}

impl ForwardOutput {
    /// Hard final prediction `σ(P_ref) > 0.5`.
    pub fn prediction(&self) -> Result<Tensor> {
        binarize(&self.p_ref)
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub seg: Tensor,
    pub unc: Tensor,
    pub refine: Option<Tensor>,
    pub total: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub rus: Option<Rus>,
    pub ugf: Option<Ugf>,
    pub udlr: Option<Udlr>,
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let c = cfg.backbone.embed_width;
        let backbone = Backbone::new(&mut store, &cfg.backbone, seed)?;
        let rus = if cfg.flags.needs_scorer() { Some(Rus::new(&mut store, c, seed)?) } else { None };
        let ugf = if cfg.flags.use_ugf { Some(Ugf::new(&mut store, c, &cfg.ugf, seed)?) } else { None };
        let udlr = if cfg.flags.use_udlr { Some(Udlr::new(&mut store, c, &cfg.refine, seed)?) } else { None };
        Ok(Self {
            store,
            backbone,
            rus,
            ugf,
            udlr,
            cfg: cfg.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `rng = None` runs in eval mode (no dropout).
    pub fn forward(&self, images: &Tensor, tokens: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput> {
        let (_, _, h, w) = images.dims4()?;
        let images = images.to_dtype(self.dtype())?;
        let mut pyramid = self.backbone.encode_image(&images)?;
        let text = self.backbone.encode_text(tokens)?;

        let u = match &self.rus {
            Some(rus) => Some(rus.score_uncertainty(pyramid.level(32)?, &text)?),
            None => None,
        };
        if let (Some(ugf), Some(u)) = (&self.ugf, &u) {
            pyramid = ugf.apply(&pyramid, &text, u, rng)?;
        }
        let dec = self.backbone.decode(&pyramid, &text, h, w)?;

        let u_p = match &u {
            Some(u) if self.udlr.is_some() => Some(to_prob(&resize_logits(u, h, w)?)?),
            _ => None,
        };
        let (mask, delta, p_ref) = match (&self.udlr, &u_p) {
            (Some(udlr), Some(u_p)) => {
                let m = udlr.mask(u_p)?;
                let d = udlr.refine_residual(&dec.feature_full_res()?, &dec.p_fg, u_p)?;
                let p_ref = apply_refinement(&dec.p_fg, &m, &d)?;
                (Some(m), Some(d), p_ref)
            }
            _ => (None, None, dec.p_fg.clone()),
        };
        Ok(ForwardOutput {
            p_fg: dec.p_fg,
            u,
            u_p,
            mask,
            delta,
            p_ref,
        })
    }

    /// Full-resolution uncertainty probabilities, whether or not refinement
    /// consumed them.
    pub fn uncertainty_prob(&self, out: &ForwardOutput) -> Result<Option<ProbMap>> {
        if let Some(p) = &out.u_p {
            return Ok(Some(p.clone()));
        }
        let (_, h, w) = out.p_fg.dims();
        match &out.u {
            Some(u) => Ok(Some(to_prob(&resize_logits(u, h, w)?)?)),
            None => Ok(None),
        }
    }

    /// Training objective for one batch. `step` gates the uncertainty loss
    /// warm-up.
    pub fn losses(&self, out: &ForwardOutput, masks: &Tensor, step: usize) -> Result<LossBreakdown> {
        let y = ProbMap::new(masks.to_dtype(self.dtype())?, Resolution::Full)?;
        let seg = seg_loss(&out.p_fg, &y, self.cfg.seg_loss)?;
        let unc = match (&out.u, self.cfg.flags.use_unc_loss) {
            (Some(u), true) => {
                let target = build_error_target(&out.p_fg, &y, &self.cfg.unc)?;
                let sw = sample_weight(&target.pred, y.values(), &self.cfg.unc)?;
                let pw = pixel_weights(&target.error, self.cfg.unc.eps)?;
                uncertainty_loss(u, &target.z, &sw, &pw, step, &self.cfg.unc)?
            }
            _ => Tensor::zeros((), self.dtype(), masks.device())?,
        };
        let refine = match &out.delta {
            Some(_) => Some(refinement_loss(&out.p_ref, &y, self.cfg.seg_loss)?),
            None => None,
        };
        let total = total_loss(&seg, &unc, refine.as_ref(), &self.cfg.weights)?;
        Ok(LossBreakdown { seg, unc, refine, total })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, Batch, SceneConfig};

    fn batch(n: usize, dtype: DType) -> Batch {
        let cfg = SceneConfig::default();
        let recs: Vec<_> = (0..n as u64).map(|s| generate_scene(&cfg, s).unwrap()).collect();
        Batch::from_records(&recs.iter().collect::<Vec<_>>(), dtype).unwrap()
    }

    fn with_flags(flags: Flags) -> ModelConfig {
        ModelConfig { flags, ..Default::default() }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn base_model_has_no_optional_modules() {
        let m = Model::new(&with_flags(Flags::BASE), 1, DType::F32).unwrap();
        assert!(m.rus.is_none() && m.ugf.is_none() && m.udlr.is_none());
        assert_eq!(m.store.names_with_prefix("rus").count(), 0);
        let full = Model::new(&with_flags(Flags::FULL), 1, DType::F32).unwrap();
        for (name, var) in m.store.iter() {
            let other = full.store.get(name).unwrap();
            assert_eq!(max_diff(var.as_tensor(), other.as_tensor()), 0.0, "{name}");
        }
    }

    #[test]
    fn flags_do_not_change_the_base_prediction_path() {
        let b = batch(2, DType::F32);
        let base = Model::new(&with_flags(Flags::BASE), 3, DType::F32).unwrap();
        let unc_only = Model::new(&with_flags(Flags { use_unc_loss: true, ..Flags::BASE }), 3, DType::F32).unwrap();
        let a = base.forward(&b.images, &b.tokens, None).unwrap();
        let c = unc_only.forward(&b.images, &b.tokens, None).unwrap();
        assert_eq!(max_diff(a.p_ref.values(), c.p_ref.values()), 0.0);
        assert!(a.u.is_none() && c.u.is_some());
    }

    #[test]
    fn full_at_init_matches_fusion_only() {
        let b = batch(3, DType::F32);
        let ugf = Model::new(&with_flags(Flags::UGF), 5, DType::F32).unwrap();
        let full = Model::new(&with_flags(Flags::FULL), 5, DType::F32).unwrap();
        let a = ugf.forward(&b.images, &b.tokens, None).unwrap();
        let f = full.forward(&b.images, &b.tokens, None).unwrap();
        assert_eq!(max_diff(f.p_ref.values(), f.p_fg.values()), 0.0);
        assert_eq!(max_diff(a.p_ref.values(), f.p_ref.values()), 0.0);
    }

    #[test]
    fn losses_are_finite_and_shaped() {
        let b = batch(2, DType::F32);
        let m = Model::new(&with_flags(Flags::FULL), 7, DType::F32).unwrap();
        let out = m.forward(&b.images, &b.tokens, None).unwrap();
        assert_eq!(out.p_ref.dims(), (2, 64, 64));
        assert_eq!(out.u.as_ref().unwrap().dims(), (2, 2, 2));
        let l = m.losses(&out, &b.masks, 0).unwrap();
        let total = l.total.to_scalar::<f32>().unwrap();
        assert!(total.is_finite() && total > 0.0);
        assert!(l.refine.is_some());
        let base = Model::new(&with_flags(Flags::BASE), 7, DType::F32).unwrap();
        let out = base.forward(&b.images, &b.tokens, None).unwrap();
        let l = base.losses(&out, &b.masks, 0).unwrap();
        assert_eq!(l.unc.to_scalar::<f32>().unwrap(), 0.0);
        assert!(l.refine.is_none());
    }
}
