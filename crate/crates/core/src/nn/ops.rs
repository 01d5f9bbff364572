use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Numerically stable `ln(1 + e^x)` with derivative `σ(x)`.
struct Softplus;

fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a, b) = match l.contiguous_offsets() {
            Some(o) => o,
            None => candle_core::bail!("softplus expects a contiguous input"),
        };
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(
                s.as_slice::<f32>()?[a..b]
                    .iter()
                    .map(|&x| softplus_scalar(x as f64) as f32)
                    .collect(),
            ),
            DType::F64 => CpuStorage::F64(
                s.as_slice::<f64>()?[a..b]
                    .iter()
                    .map(|&x| softplus_scalar(x))
                    .collect(),
            ),
            dt => candle_core::bail!("softplus: unsupported dtype {dt:?}"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.mul(&candle_nn::ops::sigmoid(arg)?)?))
    }
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softplus)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Elementwise `BCE(σ(x), z) = softplus(x) - x z`, without forming `σ(x)`.
pub fn bce_with_logits(x: &Tensor, z: &Tensor) -> Result<Tensor> {
    Ok((softplus(x)? - x.mul(z)?)?)
}

/// Softmax over the last dimension. The max shift is detached: it cancels
/// analytically and only guards against overflow.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Additive key-padding bias `(B, 1, L)`: `-inf` where `pad == 1`, else 0.
pub fn padding_bias(pad: &Tensor, dtype: DType) -> Result<Tensor> {
    let (b, l) = pad.dims2()?;
    let neg = Tensor::full(f64::NEG_INFINITY, (b, l), pad.device())?.to_dtype(dtype)?;
    let zero = Tensor::zeros((b, l), dtype, pad.device())?;
    let keep = pad.to_dtype(DType::U8)?;
    Ok(keep.where_cond(&neg, &zero)?.unsqueeze(1)?)
}

/// Layer normalisation over the last dimension with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Inverted dropout with an explicit random stream. `rng = None` means eval
/// mode (identity).
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let rng = match rng {
        Some(r) if p > 0.0 => r,
        _ => return Ok(x.clone()),
    };
    let n = x.elem_count();
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Space-to-depth with factor `f`: `(B, H, W, C)` → `(B, H/f, W/f, f*f*C)`.
/// Followed by a linear map this is exactly an `f×f`, stride-`f` convolution.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x
        .reshape((b, h / f, f, w / f, f * c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, h / f, w / f, f * f * c))?;
    Ok(y)
}

/// Nearest-neighbour 2× upsampling of a channels-last grid.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn softplus_is_stable_and_differentiable() {
        let x = Var::new(&[-800.0f64, -2.0, 0.0, 2.0, 800.0], &Device::Cpu).unwrap();
        let y = softplus(x.as_tensor()).unwrap();
        let v = y.to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.126_928_011_042_972_6).abs() < 1e-15);
        assert!((v[2] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[4] - 800.0).abs() < 1e-12);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gv = g.get(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gv[2], 0.5);
        assert!((gv[3] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_ignores_padded_keys() {
        let scores = Tensor::new(&[[[1.0f64, 5.0, -3.0]]], &Device::Cpu).unwrap();
        let pad = Tensor::new(&[[0u8, 1, 0]], &Device::Cpu).unwrap();
        let bias = padding_bias(&pad, DType::F64).unwrap();
        let a = softmax_last(&scores.broadcast_add(&bias).unwrap()).unwrap();
        let v = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn space_to_depth_groups_patches() {
        // 1x2x2x1 → 1x1x1x4 in (dy, dx) row-major order.
        let x = Tensor::new(&[1.0f32, 2.0, 3.0, 4.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 2, 1))
            .unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let x = Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap().reshape((1, 1, 2, 1)).unwrap();
        let y = upsample_nearest2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
