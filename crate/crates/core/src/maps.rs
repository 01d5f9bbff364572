//! Spatial and token tensor contracts shared by every stage of the pipeline.
//!
//! Conventions:
//! * single-channel maps are `(B, 1, H, W)`;
//! * token grids are `(B, N, C)` with `N = H * W` in row-major spatial order,
//!   which is also the memory order of a channels-last `(B, H, W, C)` grid;
//! * bilinear resizing uses half-pixel centres (align-corners off), with
//!   source coordinates clamped to the valid range;
//! * the blur is a 3x3 box filter with half-sample symmetric padding, which
//!   for a 3x3 kernel repeats the edge row/column.
//!
//! Uncertainty logits only ever get resized as [`LogitMap`]; there is no resize
//! for [`ProbMap`]:
//!
//! ```compile_fail
//! use riskseg_core::maps::{resize_logits, ProbMap};
//! fn shrink(p: &ProbMap) {
//!     let _ = resize_logits(p, 2, 2);
//! }
//! ```

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Where a map lives relative to the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Full,
    Stride(usize),
}

fn check_map(values: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = values.dims4().map_err(|_| {
        Error::shape(op, "(B, 1, H, W)", format!("{:?}", values.dims()))
    })?;
    if c != 1 || h == 0 || w == 0 {
        return Err(Error::shape(op, "(B, 1, H>=1, W>=1)", format!("{:?}", values.dims())));
    }
    Ok((b, h, w))
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Real-valued single-channel map (logits, residuals).
#[derive(Debug, Clone)]
pub struct LogitMap {
    values: Tensor,
    res: Resolution,
}

impl LogitMap {
    pub fn new(values: Tensor, res: Resolution) -> Result<Self> {
        check_map(&values, "LogitMap::new")?;
        if !all_finite(&values)? {
            return Err(Error::NonFinite { what: "logit map" });
        }
        Ok(Self { values, res })
    }

    /// Skips the finiteness scan; for maps produced inside a forward pass.
    pub(crate) fn trusted(values: Tensor, res: Resolution) -> Self {
        Self { values, res }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[2], d[3])
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
            res: self.res,
        }
    }
}

/// Single-channel map with entries in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ProbMap {
    values: Tensor,
    res: Resolution,
}

impl ProbMap {
    pub fn new(values: Tensor, res: Resolution) -> Result<Self> {
        check_map(&values, "ProbMap::new")?;
        let v = values.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::shape("ProbMap::new", "entries in [0, 1]", "out-of-range entry"));
        }
        Ok(Self { values, res })
    }

    pub(crate) fn trusted(values: Tensor, res: Resolution) -> Self {
        Self { values, res }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[0], d[2], d[3])
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
            res: self.res,
        }
    }
}

/// Flattened visual tokens `(B, N, C)` with their spatial layout.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, h: usize, w: usize, stride: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != h * w {
            return Err(Error::shape("TokenGrid::new", format!("N = {}", h * w), n));
        }
        Ok(Self { tokens, h, w, stride })
    }

    /// From a channels-last grid `(B, H, W, C)`.
    pub fn from_grid(grid: &Tensor, stride: usize) -> Result<Self> {
        let (b, h, w, c) = grid.dims4()?;
        Self::new(grid.reshape((b, h * w, c))?, h, w, stride)
    }

    /// Channels-last view `(B, H, W, C)`.
    pub fn grid(&self) -> Result<Tensor> {
        let (b, _, c) = self.tokens.dims3()?;
        Ok(self.tokens.reshape((b, self.h, self.w, c))?)
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(tokens, self.h, self.w, self.stride)
    }
}

/// Embedded expression with its padding mask (`1` = ignore).
#[derive(Debug, Clone)]
pub struct TextTokens {
    pub embeddings: Tensor,
    pub pad: Tensor,
}

impl TextTokens {
    pub fn new(embeddings: Tensor, pad: Tensor) -> Result<Self> {
        let (b, l, _) = embeddings.dims3()?;
        let (pb, pl) = pad.dims2()?;
        if (b, l) != (pb, pl) || l == 0 {
            return Err(Error::shape("TextTokens::new", format!("pad ({b}, {l}), L >= 1"), format!("({pb}, {pl})")));
        }
        let rows = pad.to_dtype(DType::U32)?.to_vec2::<u32>()?;
        for (row, r) in rows.iter().enumerate() {
            if r.iter().all(|&m| m == 1) {
                return Err(Error::AllPadding { row });
            }
        }
        Ok(Self {
            embeddings,
            pad: pad.to_dtype(DType::U8)?,
        })
    }

    /// Additive attention bias `(B, 1, L)`.
    pub fn attention_bias(&self) -> Result<Tensor> {
        crate::nn::ops::padding_bias(&self.pad, self.embeddings.dtype())
    }
}

/// Four token grids at strides 4, 8, 16, 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [TokenGrid; 4],
}

impl FeaturePyramid {
    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

    pub fn new(levels: [TokenGrid; 4]) -> Result<Self> {
        let c = levels[0].width();
        for (lvl, s) in levels.iter().zip(Self::STRIDES) {
            if lvl.stride != s {
                return Err(Error::WrongStride { expected: s, got: lvl.stride });
            }
            if lvl.width() != c {
                return Err(Error::shape("FeaturePyramid::new", format!("C = {c}"), lvl.width()));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, stride: usize) -> Result<&TokenGrid> {
        self.levels
            .iter()
            .find(|l| l.stride == stride)
            .ok_or(Error::WrongStride { expected: stride, got: 0 })
    }
}

/// Row-major `(n_out, n_in)` weights of 1-D linear interpolation with
/// half-pixel centres.
pub fn interp_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    m
}

/// Row-major `(n, n)` weights of a 3-tap box filter with half-sample
/// symmetric padding (the edge sample is mirrored, i.e. repeated).
pub fn box_weights(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for d in [-1isize, 0, 1] {
            let j = (i as isize + d).clamp(0, n as isize - 1) as usize;
            m[i * n + j] += 1.0 / 3.0;
        }
    }
    m
}

fn matrix(w: Vec<f64>, rows: usize, cols: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(w, (rows, cols), dev)?.to_dtype(dtype)?)
}

/// Applies `R_h · X · R_wᵀ` to every `(H, W)` slice of a `(B, 1, H, W)` tensor.
fn separable(x: &Tensor, rh: &Tensor, rw_t: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let (h_out, _) = rh.dims2()?;
    let (_, w_out) = rw_t.dims2()?;
    let y = rh
        .broadcast_matmul(&x.reshape((b, h, w))?)?
        .broadcast_matmul(rw_t)?;
    Ok(y.reshape((b, 1, h_out, w_out))?)
}

/// Bilinear resize performed on logit values.
pub fn resize_logits(u: &LogitMap, target_h: usize, target_w: usize) -> Result<LogitMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("resize_logits", "target >= 1", format!("{target_h}x{target_w}")));
    }
    if !all_finite(u.values())? {
        return Err(Error::NonFinite { what: "resize_logits input" });
    }
    Ok(LogitMap::trusted(
        resize_tensor(u.values(), target_h, target_w)?,
        u.res,
    ))
}

/// Bilinear resize of a `(B, 1, h, w)` tensor, keeping the autodiff graph.
pub(crate) fn resize_tensor(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (target_h, target_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = matrix(interp_weights(h, target_h), target_h, h, x.dtype(), dev)?;
    let rw_t = matrix(interp_weights(w, target_w), target_w, w, x.dtype(), dev)?.t()?;
    separable(x, &rh, &rw_t)
}

/// Bilinear resize of a channels-last grid `(B, h, w, C)` to `(B, H, W, C)`.
pub fn resize_grid(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if (h, w) == (target_h, target_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = matrix(interp_weights(h, target_h), target_h, h, x.dtype(), dev)?;
    let rw = matrix(interp_weights(w, target_w), target_w, w, x.dtype(), dev)?;
    let y = rh.broadcast_matmul(&x.reshape((b, h, w * c))?)?;
    let y = rw.broadcast_matmul(&y.reshape((b * target_h, w, c))?)?;
    Ok(y.reshape((b, target_h, target_w, c))?)
}

fn blur_tensor(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let bh = matrix(box_weights(h), h, h, x.dtype(), dev)?;
    let bw_t = matrix(box_weights(w), w, w, x.dtype(), dev)?.t()?;
    separable(x, &bh, &bw_t)
}

/// Maps that carry a `(B, 1, H, W)` tensor and can be rebuilt around a new one.
pub trait SpatialMap: Sized {
    fn tensor(&self) -> &Tensor;
    fn rebuild(&self, values: Tensor) -> Self;
}

impl SpatialMap for LogitMap {
    fn tensor(&self) -> &Tensor {
        &self.values
    }
    fn rebuild(&self, values: Tensor) -> Self {
        LogitMap::trusted(values, self.res)
    }
}

impl SpatialMap for ProbMap {
    fn tensor(&self) -> &Tensor {
        &self.values
    }
    fn rebuild(&self, values: Tensor) -> Self {
        ProbMap::trusted(values, self.res)
    }
}

/// 3x3 box blur with symmetric padding, or the identity when disabled.
pub fn blur<M: SpatialMap + Clone>(x: &M, enabled: bool) -> Result<M> {
    if !enabled {
        return Ok(x.clone());
    }
    Ok(x.rebuild(blur_tensor(x.tensor())?))
}

pub fn to_prob(u: &LogitMap) -> Result<ProbMap> {
    Ok(ProbMap::trusted(crate::nn::ops::sigmoid(u.values())?, u.res))
}

/// Hard mask `σ(x) > 0.5` as a detached 0/1 tensor of the input dtype.
pub fn binarize(x: &LogitMap) -> Result<Tensor> {
    let p = crate::nn::ops::sigmoid(&x.values.detach())?;
    Ok(p.gt(0.5)?.to_dtype(x.values.dtype())?)
}

/// Rejects tensors with entries outside `{0, 1}`.
pub fn check_binary(t: &Tensor, what: &'static str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::NotBinary { what });
    }
    Ok(())
}

/// `(B, 1, H, W)` → `(B, H*W, 1)`, row-major.
pub fn flatten_map(u: &LogitMap) -> Result<Tensor> {
    let (b, h, w) = u.dims();
    Ok(u.values().reshape((b, h * w, 1))?)
}

/// `(B, N, 1)` → `(B, 1, H, W)`, row-major.
pub fn reshape_tokens(col: &Tensor, h: usize, w: usize, res: Resolution) -> Result<LogitMap> {
    let (b, n, one) = col.dims3()?;
    if n != h * w || one != 1 {
        return Err(Error::shape("reshape_tokens", format!("(B, {}, 1)", h * w), format!("{:?}", col.dims())));
    }
    Ok(LogitMap::trusted(col.reshape((b, 1, h, w))?, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: Vec<f64>, b: usize, h: usize, w: usize) -> LogitMap {
        LogitMap::new(Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu).unwrap(), Resolution::Full).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    /// Scalar bilinear interpolation at half-pixel sample points, written
    /// independently of the matrix formulation.
    fn brute_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let at = |y: usize, x: usize| src[y * w + x];
        let mut out = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
        out
    }

    #[test]
    fn resize_constant_stays_constant() {
        let u = map(vec![0.7; 6], 1, 2, 3);
        let r = resize_logits(&u, 5, 7).unwrap();
        assert!(vals(r.values()).iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn resize_single_pixel_broadcasts() {
        let u = map(vec![-1.25], 1, 1, 1);
        let r = resize_logits(&u, 4, 3).unwrap();
        assert_eq!(vals(r.values()), vec![-1.25; 12]);
    }

    #[test]
    fn resize_2x2_to_2x3_midpoint() {
        let u = map(vec![0.0, 2.0, 0.0, 2.0], 1, 2, 2);
        let r = vals(resize_logits(&u, 2, 3).unwrap().values());
        let brute = brute_bilinear(&[0.0, 2.0, 0.0, 2.0], 2, 2, 2, 3);
        assert_eq!(r.len(), 6);
        assert!((r[1] - 1.0).abs() < 1e-15 && (r[4] - 1.0).abs() < 1e-15);
        for (a, b) in r.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn resize_same_size_is_exact_identity() {
        let v = vec![0.1, -3.0, 7.5, 2.25, 1e-9, -0.0];
        let u = map(v.clone(), 1, 2, 3);
        assert_eq!(vals(resize_logits(&u, 2, 3).unwrap().values()), v);
    }

    #[test]
    fn resize_rejects_non_finite() {
        let t = Tensor::from_vec(vec![0.0, f64::NAN, 1.0, 2.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        assert!(LogitMap::new(t.clone(), Resolution::Full).is_err());
        let u = LogitMap::trusted(t, Resolution::Full);
        assert!(matches!(resize_logits(&u, 4, 4), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn blur_disabled_is_identity() {
        let u = map(vec![1.0, 5.0, -2.0, 0.5], 1, 2, 2);
        assert_eq!(vals(blur(&u, false).unwrap().values()), vec![1.0, 5.0, -2.0, 0.5]);
    }

    #[test]
    fn blur_constant_and_impulse() {
        let c = map(vec![0.3; 12], 1, 3, 4);
        assert!(vals(blur(&c, true).unwrap().values()).iter().all(|v| (v - 0.3).abs() < 1e-15));

        let mut imp = vec![0.0; 9];
        imp[4] = 1.0;
        let r = vals(blur(&map(imp, 1, 3, 3), true).unwrap().values());
        for v in r {
            assert!((v - 1.0 / 9.0).abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn sigmoid_values() {
        let u = map(vec![0.0, 50.0, 1.0, -50.0], 1, 2, 2);
        let p = vals(to_prob(&u).unwrap().values());
        assert_eq!(p[0], 0.5);
        assert!((p[1] - 1.0).abs() < 1e-15);
        assert!((p[2] - 0.731_058_578_6).abs() < 1e-10);
        assert!(p[3] > 0.0 && p[3] < 1e-20);
    }

    #[test]
    fn flatten_is_row_major() {
        let u = map(vec![1.0, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(vals(&flatten_map(&u).unwrap()), vec![1.0, 2.0, 3.0, 4.0]);
        let col = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], (1, 6, 1), &Device::Cpu).unwrap();
        let m = reshape_tokens(&col, 2, 3, Resolution::Full).unwrap();
        assert_eq!(
            m.values().reshape((2, 3)).unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]
        );
        assert!(reshape_tokens(&col, 4, 2, Resolution::Full).is_err());
    }

    proptest! {
        #[test]
        fn resize_matches_scalar_oracle(h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9, seed in 0u64..1000) {
            let mut s = seed;
            let src: Vec<f64> = (0..h * w).map(|_| { s = crate::nn::params::splitmix64(s); (s % 2001) as f64 / 100.0 - 10.0 }).collect();
            let r = vals(resize_logits(&map(src.clone(), 1, h, w), oh, ow).unwrap().values());
            let b = brute_bilinear(&src, h, w, oh, ow);
            for (x, y) in r.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn blur_stays_within_range(h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
            let mut s = seed;
            let src: Vec<f64> = (0..h * w).map(|_| { s = crate::nn::params::splitmix64(s); (s % 1000) as f64 / 999.0 }).collect();
            let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let r = vals(blur(&map(src, 1, h, w), true).unwrap().values());
            for v in r {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn flatten_reshape_round_trip(b in 1usize..3, h in 1usize..6, w in 1usize..6) {
            let src: Vec<f64> = (0..b * h * w).map(|i| i as f64 * 0.5 - 3.0).collect();
            let u = map(src.clone(), b, h, w);
            let back = reshape_tokens(&flatten_map(&u).unwrap(), h, w, Resolution::Full).unwrap();
            prop_assert_eq!(vals(back.values()), src);
        }
    }
}
