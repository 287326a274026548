use candle_core::{Tensor, D};

use super::{Init, ParamPath};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &ParamPath, inp: usize, out: usize) -> Result<Self> {
        let b = 1.0 / (inp as f64).sqrt();
        Ok(Self {
            weight: p.var("weight", &[out, inp], Init::Uniform(b))?,
            bias: Some(p.var("bias", &[out], Init::Uniform(b))?),
        })
    }

    pub fn no_bias(p: &ParamPath, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", &[out, inp], Init::Uniform(1.0 / (inp as f64).sqrt()))?,
            bias: None,
        })
    }

    pub fn with_init(p: &ParamPath, inp: usize, out: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", &[out, inp], w)?,
            bias: Some(p.var("bias", &[out], b)?),
        })
    }

    /// Applies to the last axis of any rank ≥ 2 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(p: &ParamPath, inp: usize, out: usize, k: usize, stride: usize) -> Result<Self> {
        let b = 1.0 / ((inp * k * k) as f64).sqrt();
        Self::with_init(p, inp, out, k, stride, Init::Uniform(b))
    }

    pub fn with_init(p: &ParamPath, inp: usize, out: usize, k: usize, stride: usize, w: Init) -> Result<Self> {
        let bias_init = match w {
            Init::Zeros => Init::Zeros,
            _ => Init::Uniform(1.0 / ((inp * k * k) as f64).sqrt()),
        };
        Ok(Self {
            weight: p.var("weight", &[out, inp, k, k], w)?,
            bias: p.var("bias", &[out], bias_init)?,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Normalizes `B × C × H × W` over channel groups and space (no affine).
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        return Err(Error::invalid(format!("{c} channels do not split into {groups} groups")));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(2)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Per-sample, per-channel normalization over spatial positions.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    group_norm(x, c, eps)
}

fn default_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl GroupNorm {
    pub fn new(p: &ParamPath, channels: usize) -> Result<Self> {
        Ok(Self {
            groups: default_groups(channels),
            gamma: p.var("gamma", &[channels], Init::Ones)?,
            beta: p.var("beta", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = group_norm(x, self.groups, 1e-5)?;
        Ok(n.broadcast_mul(&self.gamma.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(p: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.var("gamma", &[dim], Init::Ones)?,
            beta: p.var("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let c = x.broadcast_sub(&mean)?;
        let var = c.sqr()?.mean_keepdim(D::Minus1)?;
        let n = c.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(n.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// GroupNorm → SiLU → conv, twice, plus a (1×1 if needed) skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(p: &ParamPath, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), inp)?,
            conv1: Conv2d::new(&p.pp("conv1"), inp, out, 3, 1)?,
            norm2: GroupNorm::new(&p.pp("norm2"), out)?,
            conv2: Conv2d::new(&p.pp("conv2"), out, out, 3, 1)?,
            skip: if inp != out {
                Some(Conv2d::new(&p.pp("skip"), inp, out, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

/// Multi-head scaled dot-product attention. `q: B × Nq × C`,
/// `k, v: B × Nk × C`; returns the output and the head-averaged
/// probabilities `B × Nq × Nk` (softmax over keys).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (b, nq, c) = q.dims3()?;
    let nk = k.dim(1)?;
    if c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
    }
    let d = c / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> { Ok(t.reshape((b, n, heads, d))?.transpose(1, 2)?.contiguous()?) };
    let (qh, kh, vh) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
    let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let out = probs.matmul(&vh)?.transpose(1, 2)?.reshape((b, nq, c))?;
    Ok((out, probs.mean(1)?))
}

/// Spatial self-attention over a `B × C × H × W` map with a residual.
#[derive(Debug, Clone)]
pub struct SelfAttention2d {
    norm: GroupNorm,
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention2d {
    pub fn new(p: &ParamPath, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&p.pp("norm"), channels)?,
            qkv: Linear::new(&p.pp("qkv"), channels, 3 * channels)?,
            out: Linear::new(&p.pp("out"), channels, channels)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let qkv = self.qkv.forward(&seq)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let (o, _) = attention(&q, &k, &v, self.heads)?;
        let o = self.out.forward(&o)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}
