//! Toy two-tower backbone: a strided-convolution image encoder producing a
//! four-level token pyramid, an embedding-table text encoder, and a
//! top-down mask decoder with per-level cross-modal interaction blocks.
//!
//! Image encoder layer plan (channels-last, `H = W = 64` shown):
//!
//! | stage | op                                        | out             |
//! |-------|-------------------------------------------|-----------------|
//! | stem  | 2x2/2 patch conv 3→s, ReLU                    | 32x32x s        |
//! | 1     | 2x2/2 patch conv, ReLU, k x residual 3x3 conv | 16x16x c0 (s4)  |
//! | 2     | same                                          | 8x8x c1 (s8)    |
//! | 3     | same                                          | 4x4x c2 (s16)   |
//! | 4     | same                                          | 2x2x c3 (s32)   |
//!
//! `k` is `convs_per_stage`; each residual unit is `x + ReLU(conv(x))`.
//!
//! Every level is projected to the shared width `C`, layer-normalised and
//! offset by a fixed 2-D sine/cosine position code.
//!
//! The decoder runs `interaction_layers` blocks (cross-attention to text,
//! self-attention, feed-forward; post-norm) on each of strides 8/16/32, then
//! merges top-down with nearest upsampling, lateral addition and one 3x3 conv
//! per merge. The stride-4 merge result is the mask feature `F`. Foreground
//! logits are a 1x1 projection of `F` followed by bilinear upsampling; since
//! both are linear and the interpolation weights sum to one, this equals
//! projecting the upsampled feature.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::maps::{resize_grid, resize_tensor, FeaturePyramid, LogitMap, Resolution, TextTokens, TokenGrid};
use crate::nn::ops::{space_to_depth, upsample_nearest2x};
use crate::nn::{Conv3x3, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder, ParamStore};

pub const PAD_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub embed_width: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub convs_per_stage: usize,
    pub interaction_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub ffn_mult: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_width: 32,
            stem_channels: 16,
            stage_channels: [32, 48, 64, 64],
            convs_per_stage: 1,
            interaction_layers: 2,
            heads: 4,
            vocab_size: 16,
            max_text_len: 12,
            ffn_mult: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_width {} must be divisible by heads {}",
                self.embed_width, self.heads
            )));
        }
        if !self.embed_width.is_multiple_of(4) {
            return Err(Error::Config("embed_width must be a multiple of 4".into()));
        }
        if self.max_text_len == 0 || self.vocab_size < 2 {
            return Err(Error::Config("need max_text_len >= 1 and vocab_size >= 2".into()));
        }
        Ok(())
    }
}

/// Fixed 2-D sine/cosine position code `(h*w, c)`; a quarter of the channels
/// per (axis, sin/cos) pair.
pub fn position_code(h: usize, w: usize, c: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let q = c / 4;
    let mut v = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            // Normalised centre coordinates in [0, 1].
            let py = (y as f64 + 0.5) / h as f64;
            let px = (x as f64 + 0.5) / w as f64;
            let mut row = vec![0.0; c];
            for k in 0..q {
                let freq = std::f64::consts::PI * (k + 1) as f64;
                row[k] = (freq * py).sin();
                row[q + k] = (freq * py).cos();
                row[2 * q + k] = (freq * px).sin();
                row[3 * q + k] = (freq * px).cos();
            }
            v.extend(row);
        }
    }
    Ok(Tensor::from_vec(v, (h * w, c), dev)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: Linear,
    convs: Vec<Conv3x3>,
}

impl EncoderStage {
    fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, n_convs: usize) -> Result<Self> {
        let down = Linear::new(&mut pb.pp("down"), 4 * c_in, c_out)?;
        let convs = (0..n_convs)
            .map(|i| Conv3x3::new(&mut pb.pp(&format!("conv{i}")), c_out, c_out))
            .collect::<Result<_>>()?;
        Ok(Self { down, convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.down.forward(&space_to_depth(x, 2)?)?.relu()?;
        for conv in &self.convs {
            y = (&y + conv.forward(&y)?.relu()?)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stem: Linear,
    stages: Vec<EncoderStage>,
    proj: Vec<Linear>,
    norm: Vec<LayerNorm>,
    width: usize,
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        let stem = Linear::new(&mut pb.pp("stem"), 12, cfg.stem_channels)?;
        let mut stages = Vec::new();
        let mut proj = Vec::new();
        let mut norm = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            stages.push(EncoderStage::new(&mut pb.pp(&format!("stage{i}")), c_in, c, cfg.convs_per_stage)?);
            proj.push(Linear::new(&mut pb.pp(&format!("proj{i}")), c, cfg.embed_width)?);
            norm.push(LayerNorm::new(&mut pb.pp(&format!("norm{i}")), cfg.embed_width)?);
            c_in = c;
        }
        Ok(Self {
            stem,
            stages,
            proj,
            norm,
            width: cfg.embed_width,
        })
    }

    /// `image: (B, 3, H, W)` → pyramid at strides 4, 8, 16, 32.
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape("encode_image", "(B, 3, H, W)", format!("{:?}", image.dims())));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                h,
                w,
                pad_h: h.div_ceil(32).max(1) * 32,
                pad_w: w.div_ceil(32).max(1) * 32,
            });
        }
        let x = image.permute((0, 2, 3, 1))?.contiguous()?;
        let mut x = self.stem.forward(&space_to_depth(&x, 2)?)?.relu()?;
        let mut levels = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x)?;
            let (b, gh, gw, _) = x.dims4()?;
            let t = self.norm[i].forward(&self.proj[i].forward(&x)?)?;
            let pos = position_code(gh, gw, self.width, t.dtype(), t.device())?;
            let t = t.reshape((b, gh * gw, self.width))?.broadcast_add(&pos)?;
            levels.push(TokenGrid::new(t, gh, gw, 4 << i)?);
        }
        let levels: [TokenGrid; 4] = levels.try_into().expect("four stages");
        FeaturePyramid::new(levels)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    table: Tensor,
    positions: Tensor,
    vocab: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            table: pb.tensor("table", &[cfg.vocab_size, cfg.embed_width], Init::Normal { std: 1.0 })?,
            positions: pb.tensor("positions", &[cfg.max_text_len, cfg.embed_width], Init::Normal { std: 0.1 })?,
            vocab: cfg.vocab_size,
            max_len: cfg.max_text_len,
        })
    }

    /// Embedding table (for gradient probes).
    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// `ids: (B, L)` u32 → embeddings `(B, L, C)` and pad mask (`id == PAD_ID`).
    pub fn forward(&self, ids: &Tensor) -> Result<TextTokens> {
        let (b, l) = ids.dims2()?;
        if l == 0 || l > self.max_len {
            return Err(Error::shape("encode_text", format!("1 <= L <= {}", self.max_len), l));
        }
        let host = ids.to_dtype(DType::U32)?.to_vec2::<u32>()?;
        for row in &host {
            if let Some(&id) = row.iter().find(|&&id| id as usize >= self.vocab) {
                return Err(Error::TokenOutOfRange { id, vocab: self.vocab });
            }
        }
        let pad: Vec<u8> = host.iter().flatten().map(|&id| (id == PAD_ID) as u8).collect();
        let pad = Tensor::from_vec(pad, (b, l), ids.device())?;
        let flat = ids.to_dtype(DType::U32)?.flatten_all()?;
        let c = self.table.dims()[1];
        let emb = self
            .table
            .index_select(&flat, 0)?
            .reshape((b, l, c))?
            .broadcast_add(&self.positions.narrow(0, 0, l)?)?;
        TextTokens::new(emb, pad)
    }
}

/// Cross-modal interaction block: text cross-attention, token self-attention,
/// feed-forward, each with a residual and post-norm.
#[derive(Debug, Clone)]
pub struct InteractionBlock {
    cross: MultiHeadAttention,
    norm1: LayerNorm,
    mix: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

impl InteractionBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        let c = cfg.embed_width;
        Ok(Self {
            cross: MultiHeadAttention::new(&mut pb.pp("cross"), c, cfg.heads)?,
            norm1: LayerNorm::new(&mut pb.pp("norm1"), c)?,
            mix: MultiHeadAttention::new(&mut pb.pp("mix"), c, cfg.heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), c)?,
            ffn: Mlp::new(&mut pb.pp("ffn"), c, c * cfg.ffn_mult, c)?,
            norm3: LayerNorm::new(&mut pb.pp("norm3"), c)?,
        })
    }

    pub fn forward(&self, v: &TokenGrid, text: &TextTokens) -> Result<TokenGrid> {
        let bias = text.attention_bias()?;
        let x = &v.tokens;
        let ca = self.cross.forward(x, &text.embeddings, Some(&bias))?;
        let x = self.norm1.forward(&(x + ca)?)?;
        let x = self.norm2.forward(&(&x + self.mix.forward(&x, &x, None)?)?)?;
        let x = self.norm3.forward(&(&x + self.ffn.forward(&x)?)?)?;
        v.with_tokens(x)
    }
}

/// Decoder output: coarse foreground logits and the stride-4 mask feature.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub p_fg: LogitMap,
    pub mask_feature: TokenGrid,
    pub image_h: usize,
    pub image_w: usize,
}

impl DecoderOutput {
    /// `F` bilinearly upsampled to the image resolution, channels-last.
    pub fn feature_full_res(&self) -> Result<Tensor> {
        resize_grid(&self.mask_feature.grid()?, self.image_h, self.image_w)
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    /// Indexed `[level][layer]` for strides 8, 16, 32.
    blocks: Vec<Vec<InteractionBlock>>,
    merge16: Conv3x3,
    merge8: Conv3x3,
    merge4: Conv3x3,
    lateral4: Linear,
    head: Linear,
}

impl MaskDecoder {
    pub const FUSED_STRIDES: [usize; 3] = [8, 16, 32];

    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        let c = cfg.embed_width;
        let mut blocks = Vec::new();
        for s in Self::FUSED_STRIDES {
            let mut level = Vec::new();
            for l in 0..cfg.interaction_layers {
                level.push(InteractionBlock::new(&mut pb.pp(&format!("s{s}.layer{l}")), cfg)?);
            }
            blocks.push(level);
        }
        Ok(Self {
            blocks,
            merge16: Conv3x3::new(&mut pb.pp("merge16"), c, c)?,
            merge8: Conv3x3::new(&mut pb.pp("merge8"), c, c)?,
            merge4: Conv3x3::new(&mut pb.pp("merge4"), c, c)?,
            lateral4: Linear::new(&mut pb.pp("lateral4"), c, c)?,
            head: Linear::new(&mut pb.pp("head"), c, 1)?,
        })
    }

    /// Runs the interaction stages on strides 8/16/32 (whatever the pyramid
    /// holds at those levels, e.g. after post-fusion) and merges top-down.
    pub fn forward(&self, pyramid: &FeaturePyramid, text: &TextTokens, image_h: usize, image_w: usize) -> Result<DecoderOutput> {
        let mut fused = Vec::with_capacity(3);
        for (i, s) in Self::FUSED_STRIDES.iter().enumerate() {
            let mut v = pyramid.level(*s)?.clone();
            for block in &self.blocks[i] {
                v = block.forward(&v, text)?;
            }
            fused.push(v.grid()?);
        }
        let m = fused[2].clone();
        let m = self.merge16.forward(&(&fused[1] + upsample_nearest2x(&m)?)?)?.relu()?;
        let m = self.merge8.forward(&(&fused[0] + upsample_nearest2x(&m)?)?)?.relu()?;
        let lat = self.lateral4.forward(&pyramid.level(4)?.grid()?)?;
        let f = self.merge4.forward(&(lat + upsample_nearest2x(&m)?)?)?.relu()?;

        let (b, h4, w4, _) = f.dims4()?;
        let coarse = self.head.forward(&f)?.reshape((b, 1, h4, w4))?;
        let p_fg = resize_tensor(&coarse, image_h, image_w)?;
        Ok(DecoderOutput {
            p_fg: LogitMap::trusted(p_fg, Resolution::Full),
            mask_feature: TokenGrid::from_grid(&f, 4)?,
            image_h,
            image_w,
        })
    }
}

/// The whole backbone: image tower, text tower and decoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub decoder: MaskDecoder,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub const SCOPE: &'static str = "backbone";

    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = store.builder(Self::SCOPE, seed);
        Ok(Self {
            image: ImageEncoder::new(&mut pb.pp("image"), cfg)?,
            text: TextEncoder::new(&mut pb.pp("text"), cfg)?,
            decoder: MaskDecoder::new(&mut pb.pp("decoder"), cfg)?,
            cfg: cfg.clone(),
        })
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.image.forward(image)
    }

    pub fn encode_text(&self, ids: &Tensor) -> Result<TextTokens> {
        self.text.forward(ids)
    }

    pub fn decode(&self, pyramid: &FeaturePyramid, text: &TextTokens, image_h: usize, image_w: usize) -> Result<DecoderOutput> {
        self.decoder.forward(pyramid, text, image_h, image_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dtype: DType) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new(dtype);
        let bb = Backbone::new(&mut store, &BackboneConfig::default(), 7).unwrap();
        (store, bb)
    }

    fn image(b: usize, h: usize, w: usize, dtype: DType) -> Tensor {
        let n = b * 3 * h * w;
        let v: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn ids(rows: &[&[u32]]) -> Tensor {
        let l = rows[0].len();
        let flat: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), l), &Device::Cpu).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let (_, bb) = setup(DType::F32);
        let p = bb.encode_image(&image(2, 64, 64, DType::F32)).unwrap();
        let ns: Vec<usize> = p.levels.iter().map(|l| l.h * l.w).collect();
        assert_eq!(ns, vec![256, 64, 16, 4]);
        for l in &p.levels {
            assert_eq!(l.tokens.dims(), &[2, l.h * l.w, 32]);
        }
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let (_, bb) = setup(DType::F32);
        let z = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let p = bb.encode_image(&z).unwrap();
        for l in &p.levels {
            assert!(crate::maps::all_finite(&l.tokens).unwrap());
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let (_, bb) = setup(DType::F32);
        match bb.encode_image(&image(1, 48, 64, DType::F32)) {
            Err(Error::Indivisible { pad_h, pad_w, .. }) => assert_eq!((pad_h, pad_w), (64, 64)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn text_mask_and_validation() {
        let (_, bb) = setup(DType::F32);
        let t = bb.encode_text(&ids(&[&[3]])).unwrap();
        assert_eq!(t.pad.to_vec2::<u8>().unwrap(), vec![vec![0]]);
        let t = bb.encode_text(&ids(&[&[1, 4, 0, 0]])).unwrap();
        assert_eq!(t.pad.to_vec2::<u8>().unwrap(), vec![vec![0, 0, 1, 1]]);
        assert!(matches!(bb.encode_text(&ids(&[&[0, 0]])), Err(Error::AllPadding { row: 0 })));
        assert!(matches!(bb.encode_text(&ids(&[&[99]])), Err(Error::TokenOutOfRange { .. })));
        let a = bb.encode_text(&ids(&[&[1, 2, 3]])).unwrap();
        let b = bb.encode_text(&ids(&[&[1, 2, 3]])).unwrap();
        let diff = (a.embeddings - b.embeddings).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn interaction_ignores_masked_tokens_and_rows_are_independent() {
        let (mut store, _) = setup(DType::F64);
        let cfg = BackboneConfig::default();
        let block = InteractionBlock::new(&mut store.builder("probe", 1).pp("blk"), &cfg).unwrap();
        let v = Tensor::randn(0.0f64, 1.0, (2, 16, 32), &Device::Cpu).unwrap();
        let v = TokenGrid::new(v.narrow(0, 0, 1).unwrap().repeat((2, 1, 1)).unwrap(), 4, 4, 8).unwrap();
        let emb = Tensor::randn(0.0f64, 1.0, (2, 3, 32), &Device::Cpu).unwrap();
        let pad = Tensor::new(&[[0u8, 0, 1], [0, 0, 1]], &Device::Cpu).unwrap();
        let t1 = TextTokens::new(emb.clone(), pad.clone()).unwrap();
        // Perturb only the padded position.
        let bump = Tensor::zeros((2, 3, 32), DType::F64, &Device::Cpu)
            .unwrap()
            .slice_assign(&[0..2, 2..3, 0..32], &Tensor::full(50.0f64, (2, 1, 32), &Device::Cpu).unwrap())
            .unwrap();
        let t2 = TextTokens::new((emb + bump).unwrap(), pad).unwrap();
        let o1 = block.forward(&v, &t1).unwrap();
        let o2 = block.forward(&v, &t2).unwrap();
        assert_eq!(o1.tokens.dims(), v.tokens.dims());
        let d = (&o1.tokens - &o2.tokens).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d <= 1e-12, "{d}");

        // Same text in both rows and identical visual rows → identical outputs.
        let same_t = TextTokens::new(
            t1.embeddings.narrow(0, 0, 1).unwrap().repeat((2, 1, 1)).unwrap(),
            t1.pad.clone(),
        )
        .unwrap();
        let o = block.forward(&v, &same_t).unwrap();
        let d = (o.tokens.get(0).unwrap() - o.tokens.get(1).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn decode_output_matches_image_size_and_is_deterministic() {
        let (_, bb) = setup(DType::F32);
        let img = image(2, 64, 64, DType::F32);
        let t = bb.encode_text(&ids(&[&[1, 2, 6, 0], &[1, 3, 7, 0]])).unwrap();
        let p = bb.encode_image(&img).unwrap();
        let a = bb.decode(&p, &t, 64, 64).unwrap();
        let b = bb.decode(&p, &t, 64, 64).unwrap();
        assert_eq!(a.p_fg.dims(), (2, 64, 64));
        assert_eq!(a.mask_feature.h, 16);
        let d = (a.p_fg.values() - b.p_fg.values()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(a.feature_full_res().unwrap().dims(), &[2, 64, 64, 32]);
    }

    #[test]
    fn logits_reach_the_text_embedding_table() {
        let (store, bb) = setup(DType::F64);
        let img = image(1, 64, 64, DType::F64);
        let t = bb.encode_text(&ids(&[&[1, 2, 6, 0]])).unwrap();
        let out = bb.decode(&bb.encode_image(&img).unwrap(), &t, 64, 64).unwrap();
        let grads = out.p_fg.values().sum_all().unwrap().backward().unwrap();
        let table = store.get("backbone.text.table").unwrap();
        let g = grads.get(table).unwrap().to_vec2::<f64>().unwrap();
        for id in [1usize, 2, 6] {
            assert!(g[id].iter().any(|v| *v != 0.0), "token {id} got no gradient");
        }
        // The pad row only enters through masked attention.
        assert!(g[0].iter().all(|v| *v == 0.0));
    }
}
