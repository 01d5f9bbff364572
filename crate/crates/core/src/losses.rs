//! Segmentation loss and the weighted training objective.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::maps::{check_binary, LogitMap, ProbMap};
use crate::nn::ops::{bce_with_logits, sigmoid};

pub const DICE_SMOOTH: f64 = 1.0;

/// Which terms make up the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegLossKind {
    #[default]
    BceDice,
    Bce,
    Dice,
}

impl std::str::FromStr for SegLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce+dice" => Ok(Self::BceDice),
            "bce" => Ok(Self::Bce),
            "dice" => Ok(Self::Dice),
            other => Err(Error::Config(format!("unknown seg loss {other:?} (bce+dice | bce | dice)"))),
        }
    }
}

impl std::fmt::Display for SegLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BceDice => "bce+dice",
            Self::Bce => "bce",
            Self::Dice => "dice",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_unc: f64,
    pub lambda_ref: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_unc: 0.5,
            lambda_ref: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_unc >= 0.0 && self.lambda_ref >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean pixel BCE over the batch.
pub fn bce_term(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(bce_with_logits(p, y)?.mean_all()?)
}

/// Per-sample soft Dice loss `1 - (2 Σ σ(p) y + s) / (Σ σ(p) + Σ y + s)`,
/// averaged over the batch.
pub fn dice_term(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    let b = p.dims()[0];
    let prob = sigmoid(p)?.reshape((b, ()))?;
    let y = y.reshape((b, ()))?;
    let inter = (prob.mul(&y)?.sum(1)? * 2.0)?;
    let total = (prob.sum(1)? + y.sum(1)?)?;
    let ratio = ((inter + DICE_SMOOTH)? / (total + DICE_SMOOTH)?)?;
    Ok((1.0 - ratio)?.mean_all()?)
}

pub fn seg_loss(p: &LogitMap, y: &ProbMap, kind: SegLossKind) -> Result<Tensor> {
    if p.dims() != y.dims() {
        return Err(Error::shape("seg_loss", format!("{:?}", p.dims()), format!("{:?}", y.dims())));
    }
    check_binary(y.values(), "ground-truth mask")?;
    let x = p.values();
    let t = y.values().to_dtype(x.dtype())?;
    match kind {
        SegLossKind::BceDice => Ok((bce_term(x, &t)? + dice_term(x, &t)?)?),
        SegLossKind::Bce => bce_term(x, &t),
        SegLossKind::Dice => dice_term(x, &t),
    }
}

fn finite_scalar(t: &Tensor, what: &'static str) -> Result<()> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { what });
    }
    Ok(())
}

/// `L_seg + λ_unc L_unc + λ_ref L_ref`; the refinement term is skipped when
/// absent or when `λ_ref = 0`. Any non-finite component aborts the step.
pub fn total_loss(seg: &Tensor, unc: &Tensor, refine: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    finite_scalar(seg, "segmentation loss")?;
    finite_scalar(unc, "uncertainty loss")?;
    let mut total = (seg + (unc * w.lambda_unc)?)?;
    if let Some(r) = refine {
        finite_scalar(r, "refinement loss")?;
        if w.lambda_ref > 0.0 {
            total = (total + (r * w.lambda_ref)?)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Resolution;
    use candle_core::{Device, Var};

    fn maps(p: Vec<f64>, y: Vec<f64>, b: usize, h: usize, w: usize) -> (LogitMap, ProbMap) {
        (
            LogitMap::new(Tensor::from_vec(p, (b, 1, h, w), &Device::Cpu).unwrap(), Resolution::Full).unwrap(),
            ProbMap::new(Tensor::from_vec(y, (b, 1, h, w), &Device::Cpu).unwrap(), Resolution::Full).unwrap(),
        )
    }

    fn val(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn zero_logits_on_empty_target() {
        let n = 12usize;
        let (p, y) = maps(vec![0.0; n], vec![0.0; n], 1, 3, 4);
        let got = val(&seg_loss(&p, &y, SegLossKind::BceDice).unwrap());
        let oracle = std::f64::consts::LN_2 + 1.0 - 1.0 / (n as f64 / 2.0 + 1.0);
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_reach_the_minimum() {
        let y = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let p: Vec<f64> = y.iter().map(|v| if *v == 1.0 { 40.0 } else { -40.0 }).collect();
        let (p, y) = maps(p, y, 1, 2, 3);
        assert!(val(&seg_loss(&p, &y, SegLossKind::BceDice).unwrap()) < 1e-5);
        assert!(val(&seg_loss(&p, &y, SegLossKind::Bce).unwrap()) < 1e-6);
    }

    #[test]
    fn permutation_symmetric_and_non_negative() {
        let a = vec![0.3, -1.0, 2.0, 0.0, -0.5, 1.5, 0.2, -2.0];
        let ya = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let (p, y) = maps(a.clone(), ya.clone(), 2, 2, 2);
        let swap = |v: &[f64]| [&v[4..], &v[..4]].concat();
        let (q, z) = maps(swap(&a), swap(&ya), 2, 2, 2);
        let l1 = val(&seg_loss(&p, &y, SegLossKind::BceDice).unwrap());
        let l2 = val(&seg_loss(&q, &z, SegLossKind::BceDice).unwrap());
        assert!((l1 - l2).abs() < 1e-15);
        assert!(l1 >= 0.0);
    }

    #[test]
    fn loss_approaches_minimum_as_logits_grow() {
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let mut prev = f64::INFINITY;
        for scale in [1.0, 5.0, 10.0, 20.0] {
            let p = y.iter().map(|v| if *v == 1.0 { scale } else { -scale }).collect();
            let (p, yy) = maps(p, y.clone(), 1, 2, 2);
            let l = val(&seg_loss(&p, &yy, SegLossKind::BceDice).unwrap());
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn total_combines_linearly() {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let w = LossWeights::default();
        assert!((val(&total_loss(&s(1.0), &s(0.2), Some(&s(0.4)), &w).unwrap()) - 1.5).abs() < 1e-15);
        let off = LossWeights { lambda_unc: 0.0, lambda_ref: 0.0 };
        assert_eq!(val(&total_loss(&s(1.0), &s(0.2), Some(&s(0.4)), &off).unwrap()), 1.0);
        assert!(matches!(
            total_loss(&s(1.0), &s(f64::NAN), None, &w),
            Err(Error::NonFinite { what: "uncertainty loss" })
        ));
    }

    #[test]
    fn total_gradient_is_weighted_sum() {
        let x = Var::new(&[0.5f64, -1.0], &Device::Cpu).unwrap();
        let t = x.as_tensor();
        let seg = t.sqr().unwrap().sum_all().unwrap();
        let unc = (t * 3.0).unwrap().sum_all().unwrap();
        let refine = t.exp().unwrap().sum_all().unwrap();
        let w = LossWeights { lambda_unc: 0.5, lambda_ref: 2.0 };
        let g = total_loss(&seg, &unc, Some(&refine), &w).unwrap().backward().unwrap();
        let got = g.get(&x).unwrap().to_vec1::<f64>().unwrap();
        for (i, xv) in [0.5f64, -1.0].iter().enumerate() {
            let expect = 2.0 * xv + 0.5 * 3.0 + 2.0 * xv.exp();
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for k in [SegLossKind::BceDice, SegLossKind::Bce, SegLossKind::Dice] {
            assert_eq!(k.to_string().parse::<SegLossKind>().unwrap(), k);
        }
        assert!("focal".parse::<SegLossKind>().is_err());
    }
}
