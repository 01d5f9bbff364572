//! 3x3, stride-1, zero-padded convolution over channels-last `(B, H, W, C)`
//! tensors.
//!
//! The input is zero-padded to `(H+2, W+2)` and viewed as a flat row-major
//! matrix of `B*(H+2)*(W+2)` rows by `C_in` columns. Every kernel tap then
//! becomes one GEMM against a row-shifted view of that matrix, so neither the
//! forward nor the backward pass materialises an im2col buffer. Rows that land
//! on padding are computed and discarded.
//!
//! Weights are laid out `(9, C_in, C_out)`, tap index `ky * 3 + kx`.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

trait Gemm: WithDType + Copy {
    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Gemm for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Gemm for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    h: usize,
    w: usize,
}

impl Geom {
    fn hp(&self) -> usize {
        self.h + 2
    }
    fn wp(&self) -> usize {
        self.w + 2
    }
    fn padded_rows(&self) -> usize {
        self.b * self.hp() * self.wp()
    }
    /// Number of output rows on the padded grid that every tap can address.
    fn gemm_rows(&self) -> usize {
        self.padded_rows() - 2 * self.wp() - 2
    }
    fn tap_offset(&self, tap: usize) -> usize {
        (tap / 3) * self.wp() + tap % 3
    }
    /// Padded-grid row holding output pixel `(b, y, x)`.
    fn out_row(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.hp() + y) * self.wp() + x
    }
    /// Padded-grid row holding input pixel `(b, y, x)`.
    fn in_row(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.hp() + y + 1) * self.wp() + x + 1
    }
}

fn pad_input<T: WithDType>(x: &[T], g: Geom, c: usize) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); g.padded_rows() * c];
    for b in 0..g.b {
        for y in 0..g.h {
            let src = ((b * g.h + y) * g.w) * c;
            let dst = g.in_row(b, y, 0) * c;
            out[dst..dst + g.w * c].copy_from_slice(&x[src..src + g.w * c]);
        }
    }
    out
}

/// Scatter a dense `(B, H, W, C)` gradient onto the output rows of the padded grid.
fn scatter_output<T: WithDType>(gy: &[T], g: Geom, c: usize) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); g.padded_rows() * c];
    for b in 0..g.b {
        for y in 0..g.h {
            let src = ((b * g.h + y) * g.w) * c;
            let dst = g.out_row(b, y, 0) * c;
            out[dst..dst + g.w * c].copy_from_slice(&gy[src..src + g.w * c]);
        }
    }
    out
}

fn gather_output<T: WithDType>(padded: &[T], g: Geom, c: usize) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); g.b * g.h * g.w * c];
    for b in 0..g.b {
        for y in 0..g.h {
            let dst = ((b * g.h + y) * g.w) * c;
            let src = g.out_row(b, y, 0) * c;
            out[dst..dst + g.w * c].copy_from_slice(&padded[src..src + g.w * c]);
        }
    }
    out
}

fn gather_input<T: WithDType>(padded: &[T], g: Geom, c: usize) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); g.b * g.h * g.w * c];
    for b in 0..g.b {
        for y in 0..g.h {
            let dst = ((b * g.h + y) * g.w) * c;
            let src = g.in_row(b, y, 0) * c;
            out[dst..dst + g.w * c].copy_from_slice(&padded[src..src + g.w * c]);
        }
    }
    out
}

fn forward<T: Gemm>(x: &[T], w: &[T], g: Geom, cin: usize, cout: usize) -> Vec<T> {
    let xp = pad_input(x, g, cin);
    let m = g.gemm_rows();
    let mut acc = vec![T::from_f64(0.0); g.padded_rows() * cout];
    for tap in 0..9 {
        let off = g.tap_offset(tap);
        let beta = if tap == 0 { T::from_f64(0.0) } else { T::from_f64(1.0) };
        unsafe {
            T::gemm(
                m,
                cin,
                cout,
                xp.as_ptr().add(off * cin),
                cin as isize,
                1,
                w.as_ptr().add(tap * cin * cout),
                cout as isize,
                1,
                beta,
                acc.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
    }
    gather_output(&acc, g, cout)
}

fn grad_input<T: Gemm>(gy: &[T], w: &[T], g: Geom, cin: usize, cout: usize) -> Vec<T> {
    let gp = scatter_output(gy, g, cout);
    let m = g.gemm_rows();
    let mut gx = vec![T::from_f64(0.0); g.padded_rows() * cin];
    for tap in 0..9 {
        let off = g.tap_offset(tap);
        unsafe {
            // gx[r + off] += gy[r] @ W_tap^T
            T::gemm(
                m,
                cout,
                cin,
                gp.as_ptr(),
                cout as isize,
                1,
                w.as_ptr().add(tap * cin * cout),
                1,
                cout as isize,
                T::from_f64(1.0),
                gx.as_mut_ptr().add(off * cin),
                cin as isize,
                1,
            );
        }
    }
    gather_input(&gx, g, cin)
}

fn grad_weight<T: Gemm>(x: &[T], gy: &[T], g: Geom, cin: usize, cout: usize) -> Vec<T> {
    let xp = pad_input(x, g, cin);
    let gp = scatter_output(gy, g, cout);
    let m = g.gemm_rows();
    let mut gw = vec![T::from_f64(0.0); 9 * cin * cout];
    for tap in 0..9 {
        let off = g.tap_offset(tap);
        unsafe {
            // gW_tap = X_shift^T @ gy
            T::gemm(
                cin,
                m,
                cout,
                xp.as_ptr().add(off * cin),
                1,
                cin as isize,
                gp.as_ptr(),
                cout as isize,
                1,
                T::from_f64(0.0),
                gw.as_mut_ptr().add(tap * cin * cout),
                cout as isize,
                1,
            );
        }
    }
    gw
}

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv3x3 expects contiguous inputs"),
    }
}

struct Conv3x3Fwd;
struct Conv3x3GradInput {
    h: usize,
    w: usize,
}
struct Conv3x3GradWeight;

impl CustomOp2 for Conv3x3Fwd {
    fn name(&self) -> &'static str {
        "conv3x3-nhwc"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, cin) = l1.shape().dims4()?;
        let (_, _, cout) = l2.shape().dims3()?;
        let g = Geom { b, h, w };
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(forward(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                g,
                cin,
                cout,
            )),
            DType::F64 => CpuStorage::F64(forward(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                g,
                cin,
                cout,
            )),
            dt => candle_core::bail!("conv3x3: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((b, h, w, cout))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, h, wd, _) = x.dims4()?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &Conv3x3GradInput { h, w: wd })?;
        let gw = x.apply_op2_no_bwd(&grad, &Conv3x3GradWeight)?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for Conv3x3GradInput {
    fn name(&self) -> &'static str {
        "conv3x3-nhwc-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, cout) = l1.shape().dims4()?;
        debug_assert_eq!((h, w), (self.h, self.w));
        let (_, cin, _) = l2.shape().dims3()?;
        let g = Geom { b, h, w };
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(grad_input(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                g,
                cin,
                cout,
            )),
            DType::F64 => CpuStorage::F64(grad_input(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                g,
                cin,
                cout,
            )),
            dt => candle_core::bail!("conv3x3: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((b, h, w, cin))))
    }
}

impl CustomOp2 for Conv3x3GradWeight {
    fn name(&self) -> &'static str {
        "conv3x3-nhwc-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, cin) = l1.shape().dims4()?;
        let (_, _, _, cout) = l2.shape().dims4()?;
        let g = Geom { b, h, w };
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(grad_weight(
                contiguous_slice::<f32>(s1, l1)?,
                contiguous_slice::<f32>(s2, l2)?,
                g,
                cin,
                cout,
            )),
            DType::F64 => CpuStorage::F64(grad_weight(
                contiguous_slice::<f64>(s1, l1)?,
                contiguous_slice::<f64>(s2, l2)?,
                g,
                cin,
                cout,
            )),
            dt => candle_core::bail!("conv3x3: unsupported dtype {dt:?}"),
        };
        Ok((out, Shape::from((9, cin, cout))))
    }
}

/// `x: (B, H, W, C_in)`, `weight: (9, C_in, C_out)` → `(B, H, W, C_out)`.
pub fn conv3x3(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, _, _, cin) = x.dims4()?;
    let (taps, wcin, _) = weight.dims3()?;
    if taps != 9 || wcin != cin {
        return Err(Error::shape(
            "conv3x3",
            format!("weight (9, {cin}, _)"),
            format!("{:?}", weight.dims()),
        ));
    }
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    Ok(x.apply_op2(&weight, Conv3x3Fwd)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    /// Direct-summation oracle, channels-last.
    fn naive(x: &[f64], w: &[f64], b: usize, h: usize, wd: usize, cin: usize, cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; b * h * wd * cout];
        for n in 0..b {
            for y in 0..h {
                for xx in 0..wd {
                    for co in 0..cout {
                        let mut s = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x[((n * h + iy as usize) * wd + ix as usize) * cin + ci];
                                    let wv = w[((ky * 3 + kx) * cin + ci) * cout + co];
                                    s += xv * wv;
                                }
                            }
                        }
                        out[((n * h + y) * wd + xx) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = crate::nn::params::splitmix64(s);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn forward_matches_direct_sum() {
        let (b, h, w, cin, cout) = (2, 5, 4, 3, 2);
        let x = pseudo(b * h * w * cin, 1);
        let k = pseudo(9 * cin * cout, 2);
        let xt = Tensor::from_vec(x.clone(), (b, h, w, cin), &Device::Cpu).unwrap();
        let kt = Tensor::from_vec(k.clone(), (9, cin, cout), &Device::Cpu).unwrap();
        let y = conv3x3(&xt, &kt).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect = naive(&x, &k, b, h, w, cin, cout);
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (b, h, w, cin, cout) = (1, 3, 4, 2, 2);
        let x = pseudo(b * h * w * cin, 3);
        let k = pseudo(9 * cin * cout, 4);
        let probe = pseudo(b * h * w * cout, 5);
        let dev = Device::Cpu;
        let xv = Var::from_tensor(&Tensor::from_vec(x.clone(), (b, h, w, cin), &dev).unwrap()).unwrap();
        let kv = Var::from_tensor(&Tensor::from_vec(k.clone(), (9, cin, cout), &dev).unwrap()).unwrap();
        let pt = Tensor::from_vec(probe.clone(), (b, h, w, cout), &dev).unwrap();
        let loss = conv3x3(xv.as_tensor(), kv.as_tensor()).unwrap().mul(&pt).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let gx = grads.get(&xv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gk = grads.get(&kv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();

        let f = |x: &[f64], k: &[f64]| -> f64 {
            naive(x, k, b, h, w, cin, cout).iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (f(&xp, &k) - f(&xm, &k)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-8, "dx[{i}] {fd} vs {}", gx[i]);
        }
        for i in 0..k.len() {
            let mut kp = k.clone();
            let mut km = k.clone();
            kp[i] += eps;
            km[i] -= eps;
            let fd = (f(&x, &kp) - f(&x, &km)) / (2.0 * eps);
            assert!((fd - gk[i]).abs() < 1e-8, "dk[{i}] {fd} vs {}", gk[i]);
        }
    }

    #[test]
    fn rejects_mismatched_weight() {
        let x = Tensor::zeros((1, 4, 4, 3), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::zeros((9, 2, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(conv3x3(&x, &w).is_err());
    }
}
