use candle_core::Tensor;

use super::ops;
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

/// `y = x W + b`, `W: (in, out)`. Applies to the last dimension of any rank.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform fan-in initialisation.
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(pb, d_in, d_out, Init::Uniform { bound }, Init::Uniform { bound })
    }

    pub fn with_init(
        pb: &mut ParamBuilder<'_>,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        let weight = pb.tensor("weight", &[d_in, d_out], weight)?;
        let bias = Some(pb.tensor("bias", &[d_out], bias)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(pb: &mut ParamBuilder<'_>, d_in: usize, d_out: usize, weight: Init) -> Result<Self> {
        let weight = pb.tensor("weight", &[d_in, d_out], weight)?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.tensor("gamma", &[dim], Init::Const(1.0))?,
            beta: pb.tensor("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, Self::EPS)
    }
}

/// 3x3 same-padding convolution on channels-last grids.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3x3 {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((9 * c_in) as f64).sqrt();
        Ok(Self {
            weight: pb.tensor("weight", &[9, c_in, c_out], Init::Uniform { bound })?,
            bias: pb.tensor("bias", &[c_out], Init::Uniform { bound })?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::conv::conv3x3(x, &self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Two-layer perceptron with ReLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), d_in, hidden)?,
            fc2: Linear::new(&mut pb.pp("fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Multi-head attention with an optional key-padding mask.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim)?,
            out: Linear::new(&mut pb.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query: (B, N, C)`, `kv: (B, L, C)`, `bias: (B, 1, L)` additive mask.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(&bias.unsqueeze(1)?)?;
        }
        let attn = ops::softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        self.out.forward(&ctx)
    }
}
