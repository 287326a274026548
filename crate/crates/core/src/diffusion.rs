//! Conditional latent denoiser. The physical condition `f_r` is concatenated
//! with the noisy latent, semantic tokens enter through cross-attention, and
//! the identity token modulates every residual block through AdaIN.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::identity::{adain_apply, AdaIn, AdaInParams};
use crate::nn::{self, attention, Conv2d, GroupNorm, Init, LayerNorm, Linear, ParamPath, ParamStore};
use crate::rsc::SemanticTokens;

/// Linear β schedule with `T` steps; timestep `t` runs over `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        if t == 0 || !(0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::invalid("schedule needs T ≥ 1 and 0 < β_start < β_end < 1"));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                let f = if t == 1 { 1.0 } else { i as f64 / (t - 1) as f64 };
                cfg.beta_start + f * (cfg.beta_end - cfg.beta_start)
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`, one `t` per batch element.
    pub fn q_sample(&self, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        let b = z0.dim(0)?;
        if t.len() != b {
            return Err(Error::dim("timesteps per batch", b, t.len()));
        }
        for &ti in t {
            self.check_t(ti)?;
        }
        let a: Vec<f64> = t.iter().map(|&ti| self.alpha_bar_at(ti).sqrt()).collect();
        let s: Vec<f64> = t.iter().map(|&ti| (1.0 - self.alpha_bar_at(ti)).sqrt()).collect();
        let shape = (b, 1, 1, 1);
        let a = Tensor::from_vec(a, shape, &Device::Cpu)?.to_dtype(z0.dtype())?;
        let s = Tensor::from_vec(s, shape, &Device::Cpu)?.to_dtype(z0.dtype())?;
        Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }

    /// Uniform subsequence `τ_1 < … < τ_S = T` with `τ_i = ⌊i·T/S⌋`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if steps == 0 || steps > t {
            return Err(Error::invalid(format!("DDIM steps must be in 1..={t}, got {steps}")));
        }
        Ok((1..=steps).map(|i| i * t / steps).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks: usize,
    /// Spatial sizes (in latent pixels) that get transformer blocks.
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub context_dim: usize,
    pub transformer_depth: usize,
    pub id_dim: usize,
    /// Inject the identity token through AdaIN.
    pub use_identity: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            res_blocks: 1,
            attention_resolutions: vec![8, 4],
            heads: 4,
            context_dim: 192,
            transformer_depth: 1,
            id_dim: 128,
            use_identity: true,
        }
    }
}

impl DenoiserConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.res_blocks == 0 || self.transformer_depth == 0 {
            return Err(Error::invalid("denoiser needs at least one level, residual block and transformer layer"));
        }
        if self.latent_size % (1 << (levels - 1)) != 0 {
            return Err(Error::invalid(format!(
                "latent size {} cannot be halved {} times",
                self.latent_size,
                levels - 1
            )));
        }
        for m in &self.channel_multipliers {
            let c = m * self.base_channels;
            if c % self.heads != 0 || c % 4 != 0 {
                return Err(Error::invalid(format!("{c} channels do not split into {} heads", self.heads)));
            }
        }
        Ok(())
    }
}

fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((ti as f64 * f).cos());
        }
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            v.push((ti as f64 * f).sin());
        }
        v.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Residual block with time embedding; its second normalization is an
/// instance norm whose affine comes from AdaIN (or learned, without f_id).
struct TimeResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    adain: Option<AdaIn>,
    gamma: Option<Tensor>,
    beta: Option<Tensor>,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    fn new(p: &ParamPath, inp: usize, out: usize, temb_dim: usize, cfg: &DenoiserConfig) -> Result<Self> {
        let (adain, gamma, beta) = if cfg.use_identity {
            (Some(AdaIn::new(&p.pp("adain"), cfg.id_dim, out)?), None, None)
        } else {
            (None, Some(p.var("norm2.gamma", &[out], Init::Ones)?), Some(p.var("norm2.beta", &[out], Init::Zeros)?))
        };
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), inp)?,
            conv1: Conv2d::new(&p.pp("conv1"), inp, out, 3, 1)?,
            temb: Linear::new(&p.pp("temb"), temb_dim, out)?,
            adain,
            gamma,
            beta,
            conv2: Conv2d::with_init(&p.pp("conv2"), out, out, 3, 1, Init::Zeros)?,
            skip: if inp != out {
                Some(Conv2d::new(&p.pp("skip"), inp, out, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, f_id: Option<&Tensor>) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = h.broadcast_add(&self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = match (&self.adain, f_id) {
            (Some(a), Some(id)) => a.forward(&h, id)?,
            (Some(_), None) => return Err(Error::invalid("this denoiser was built with identity injection and needs f_id")),
            (None, _) => {
                let b = h.dim(0)?;
                let p = AdaInParams {
                    scale: self.gamma.as_ref().expect("learned affine").unsqueeze(0)?.broadcast_as((b, h.dim(1)?))?,
                    bias: self.beta.as_ref().expect("learned affine").unsqueeze(0)?.broadcast_as((b, h.dim(1)?))?,
                };
                adain_apply(&h, &p)?
            }
        };
        let h = self.conv2.forward(&h.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

/// Spatial transformer: self-attention, cross-attention onto the semantic
/// tokens, and a gated feed-forward, each pre-normed and residual.
struct TransformerBlock {
    norm_in: GroupNorm,
    proj_in: Linear,
    layers: Vec<TransformerLayer>,
    proj_out: Linear,
}

struct TransformerLayer {
    norm1: LayerNorm,
    self_qkv: Linear,
    self_out: Linear,
    norm2: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_out: Linear,
    norm3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
}

impl TransformerLayer {
    fn new(p: &ParamPath, c: usize, ctx: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&p.pp("norm1"), c)?,
            self_qkv: Linear::no_bias(&p.pp("self_qkv"), c, 3 * c)?,
            self_out: Linear::new(&p.pp("self_out"), c, c)?,
            norm2: LayerNorm::new(&p.pp("norm2"), c)?,
            cross_q: Linear::no_bias(&p.pp("cross_q"), c, c)?,
            cross_k: Linear::no_bias(&p.pp("cross_k_ctx"), ctx, c)?,
            cross_v: Linear::no_bias(&p.pp("cross_v_ctx"), ctx, c)?,
            cross_out: Linear::new(&p.pp("cross_out"), c, c)?,
            norm3: LayerNorm::new(&p.pp("norm3"), c)?,
            ff_in: Linear::new(&p.pp("ff_in"), c, 8 * c)?,
            ff_out: Linear::new(&p.pp("ff_out"), 4 * c, c)?,
            heads,
        })
    }

    /// `x: B × P × C`, `ctx: B × N × D` → (output, cross-attention `B × P × N`).
    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = x.dim(2)?;
        let qkv = self.self_qkv.forward(&self.norm1.forward(x)?)?;
        let (sa, _) = attention(&qkv.narrow(2, 0, c)?, &qkv.narrow(2, c, c)?, &qkv.narrow(2, 2 * c, c)?, self.heads)?;
        let x = (x + self.self_out.forward(&sa)?)?;
        let q = self.cross_q.forward(&self.norm2.forward(&x)?)?;
        let (ca, probs) = attention(&q, &self.cross_k.forward(ctx)?, &self.cross_v.forward(ctx)?, self.heads)?;
        let x = (&x + self.cross_out.forward(&ca)?)?;
        let f = self.ff_in.forward(&self.norm3.forward(&x)?)?;
        let gated = (f.narrow(2, 0, 4 * c)? * f.narrow(2, 4 * c, 4 * c)?.gelu()?)?;
        let x = (&x + self.ff_out.forward(&gated)?)?;
        Ok((x, probs))
    }
}

impl TransformerBlock {
    fn new(p: &ParamPath, c: usize, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            norm_in: GroupNorm::new(&p.pp("norm_in"), c)?,
            proj_in: Linear::new(&p.pp("proj_in"), c, c)?,
            layers: (0..cfg.transformer_depth)
                .map(|d| TransformerLayer::new(&p.pp(format!("layer{d}")), c, cfg.context_dim, cfg.heads))
                .collect::<Result<Vec<_>>>()?,
            proj_out: Linear::with_init(&p.pp("proj_out"), c, c, Init::Zeros, Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor, record: &mut Vec<Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self.norm_in.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let mut s = self.proj_in.forward(&seq)?;
        for layer in &self.layers {
            let (out, probs) = layer.forward(&s, ctx)?;
            let n = probs.dim(2)?;
            record.push(probs.transpose(1, 2)?.reshape((b, n, h, w))?);
            s = out;
        }
        let out = self.proj_out.forward(&s)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Per-layer cross-attention maps, each `B × N_S × h_l × w_l`; at every
/// spatial position the maps hold a distribution over tokens.
#[derive(Debug, Clone, Default)]
pub struct CrossAttnRecord {
    pub layers: Vec<Tensor>,
}

struct Level {
    blocks: Vec<(TimeResBlock, Option<TransformerBlock>)>,
}

pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid1: TimeResBlock,
    mid_attn: TransformerBlock,
    mid2: TimeResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Conditioning of one batch.
#[derive(Debug, Clone)]
pub struct Conditions {
    /// Encoded physical condition `B × C_z × h × w`.
    pub f_r: Tensor,
    /// Semantic tokens `B × N_S × D`.
    pub tokens: Tensor,
    /// Identity tokens `B × D_id`, absent in the no-identity ablation.
    pub f_id: Option<Tensor>,
}

impl Conditions {
    pub fn select(&self, idx: &[usize]) -> Result<Conditions> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok(Conditions {
            f_r: self.f_r.index_select(&ids, 0)?,
            tokens: self.tokens.index_select(&ids, 0)?,
            f_id: match &self.f_id {
                Some(f) => Some(f.index_select(&ids, 0)?),
                None => None,
            },
        })
    }
}

pub const CHECKPOINT_KIND: &str = "denoiser";

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, schedule: &ScheduleConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::new(seed, dtype);
        let root = params.root();
        let base = cfg.base_channels;
        let temb_dim = 4 * base;
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * base).collect();
        let attn_at = |level: usize| cfg.attention_resolutions.contains(&(cfg.latent_size >> level));

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut skips = vec![];
        let mut ch = base;
        for (l, &w) in widths.iter().enumerate() {
            let lp = root.pp(format!("down{l}"));
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let bp = lp.pp(format!("block{b}"));
                let res = TimeResBlock::new(&bp.pp("res"), ch, w, temb_dim, cfg)?;
                let attn = if attn_at(l) { Some(TransformerBlock::new(&bp.pp("attn"), w, cfg)?) } else { None };
                blocks.push((res, attn));
                ch = w;
                skips.push(ch);
            }
            down.push(Level { blocks });
            if l + 1 < widths.len() {
                downsample.push(Conv2d::new(&lp.pp("downsample"), ch, ch, 3, 2)?);
            }
        }
        let top = ch;
        let mid1 = TimeResBlock::new(&root.pp("mid1"), top, top, temb_dim, cfg)?;
        let mid_attn = TransformerBlock::new(&root.pp("mid_attn"), top, cfg)?;
        let mid2 = TimeResBlock::new(&root.pp("mid2"), top, top, temb_dim, cfg)?;

        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for (l, &w) in widths.iter().enumerate().rev() {
            let lp = root.pp(format!("up{l}"));
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let bp = lp.pp(format!("block{b}"));
                let skip = skips.pop().expect("one skip per down block");
                let res = TimeResBlock::new(&bp.pp("res"), ch + skip, w, temb_dim, cfg)?;
                let attn = if attn_at(l) { Some(TransformerBlock::new(&bp.pp("attn"), w, cfg)?) } else { None };
                blocks.push((res, attn));
                ch = w;
            }
            up.push(Level { blocks });
            if l > 0 {
                upsample.push(Conv2d::new(&lp.pp("upsample"), ch, ch, 3, 1)?);
            }
        }

        Ok(Self {
            cfg: cfg.clone(),
            schedule: NoiseSchedule::linear(schedule)?,
            temb1: Linear::new(&root.pp("temb1"), base, temb_dim)?,
            temb2: Linear::new(&root.pp("temb2"), temb_dim, temb_dim)?,
            conv_in: Conv2d::new(&root.pp("conv_in"), cfg.in_channels(), base, 3, 1)?,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            norm_out: GroupNorm::new(&root.pp("norm_out"), ch)?,
            conv_out: Conv2d::with_init(&root.pp("conv_out"), ch, cfg.latent_channels, 3, 1, Init::Zeros)?,
            params,
        })
    }

    fn check(&self, z_t: &Tensor, t: &[usize], cond: &Conditions) -> Result<()> {
        let (b, c, h, w) = z_t.dims4()?;
        let s = self.cfg.latent_size;
        if c != self.cfg.latent_channels || h != s || w != s {
            return Err(Error::invalid(format!(
                "denoiser expects {}×{s}×{s} latents, got {c}×{h}×{w}",
                self.cfg.latent_channels
            )));
        }
        if cond.f_r.dims() != z_t.dims() {
            return Err(Error::invalid(format!("f_r shape {:?} differs from z_t shape {:?}", cond.f_r.dims(), z_t.dims())));
        }
        let (tb, _, td) = cond.tokens.dims3()?;
        if td != self.cfg.context_dim {
            return Err(Error::dim("token width (context dim)", self.cfg.context_dim, td));
        }
        if tb != b || t.len() != b {
            return Err(Error::dim("conditioning batch", b, tb.min(t.len())));
        }
        for &ti in t {
            self.schedule.check_t(ti)?;
        }
        Ok(())
    }

    /// Predicted noise, plus every cross-attention map.
    pub fn forward(&self, z_t: &Tensor, t: &[usize], cond: &Conditions) -> Result<(Tensor, CrossAttnRecord)> {
        self.check(z_t, t, cond)?;
        let dtype = self.params.dtype();
        let temb = timestep_embedding(t, self.cfg.base_channels, dtype)?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;
        let f_id = cond.f_id.as_ref();
        let ctx = &cond.tokens;
        let mut record = Vec::new();

        let mut h = self.conv_in.forward(&Tensor::cat(&[z_t, &cond.f_r], 1)?)?;
        let mut hs = Vec::new();
        for (l, level) in self.down.iter().enumerate() {
            for (res, attn) in &level.blocks {
                h = res.forward(&h, &temb, f_id)?;
                if let Some(a) = attn {
                    h = a.forward(&h, ctx, &mut record)?;
                }
                hs.push(h.clone());
            }
            if l < self.downsample.len() {
                h = self.downsample[l].forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb, f_id)?;
        h = self.mid_attn.forward(&h, ctx, &mut record)?;
        h = self.mid2.forward(&h, &temb, f_id)?;
        for (k, level) in self.up.iter().enumerate() {
            for (res, attn) in &level.blocks {
                let skip = hs.pop().expect("matching skip");
                h = res.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, f_id)?;
                if let Some(a) = attn {
                    h = a.forward(&h, ctx, &mut record)?;
                }
            }
            if k < self.upsample.len() {
                let (_, _, hh, ww) = h.dims4()?;
                h = self.upsample[k].forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        let eps = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok((eps, CrossAttnRecord { layers: record }))
    }

    /// Sets every token key/value projection to zero, cutting the tokens off.
    pub fn zero_token_projections(&self) -> Result<()> {
        for name in self.params.names() {
            if name.contains("cross_k_ctx") || name.contains("cross_v_ctx") {
                let v = self.params.get(&name).expect("listed name");
                v.set(&v.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: &str, schedule: &ScheduleConfig) -> Result<()> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_meta("config_digest", digest);
        c.set_meta("config", serde_json::to_string(&self.cfg)?);
        c.set_meta("schedule", serde_json::to_string(schedule)?);
        self.params.save_into(&mut c, "")?;
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let c = Container::read_kind(path.as_ref(), CHECKPOINT_KIND)?;
        let cfg: DenoiserConfig = serde_json::from_str(c.meta("config").unwrap_or("{}"))?;
        let schedule: ScheduleConfig = serde_json::from_str(c.meta("schedule").unwrap_or("{}"))?;
        let m = Self::new(&cfg, &schedule, 0, dtype)?;
        m.params.load_from(&c, "")?;
        Ok(m)
    }
}

/// Mean squared error between true and predicted noise.
pub fn loss_ldm(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::invalid("noise and prediction shapes differ"));
    }
    nn::mse(eps, eps_hat)
}

/// Resize every layer to `target × target`, average, renormalize over tokens.
pub fn merge_cross_attention(record: &CrossAttnRecord, target: usize) -> Result<Tensor> {
    if record.layers.is_empty() {
        return Err(Error::invalid("cross-attention record is empty"));
    }
    let resized = record
        .layers
        .iter()
        .map(|m| nn::resize_bilinear(m, target, target))
        .collect::<Result<Vec<_>>>()?;
    let mean = (Tensor::stack(&resized, 0)?.sum(0)? / resized.len() as f64)?;
    let total = mean.sum_keepdim(1)?;
    Ok(mean.broadcast_div(&total)?)
}

/// Mean squared difference between merged attention and slot masks; token
/// `i` of one is compared with token `i` of the other.
pub fn loss_acr(a_cross: &Tensor, m_q: &Tensor) -> Result<Tensor> {
    if a_cross.dims() != m_q.dims() {
        return Err(Error::invalid(format!(
            "attention maps {:?} and masks {:?} differ in shape",
            a_cross.dims(),
            m_q.dims()
        )));
    }
    nn::mse(a_cross, m_q)
}

/// A training batch: clean query latents, conditions, and the detached
/// query slot masks at latent resolution.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub z0: Tensor,
    pub cond: Conditions,
    pub m_q: Tensor,
}

pub struct LossTerms {
    pub total: Tensor,
    pub ldm: f64,
    pub acr: f64,
}

/// `L_LDM + δ·L_attn` at explicit timesteps and noise. With `δ = 0` the
/// attention term is not part of the graph at all.
pub fn loss_terms(model: &Denoiser, batch: &TrainBatch, t: &[usize], eps: &Tensor, delta: f64) -> Result<LossTerms> {
    let z_t = model.schedule.q_sample(&batch.z0, t, eps)?;
    let (eps_hat, record) = model.forward(&z_t, t, &batch.cond)?;
    let ldm = loss_ldm(eps, &eps_hat)?;
    let merged = merge_cross_attention(&record, model.cfg.latent_size)?;
    let acr = loss_acr(&merged, &batch.m_q.detach())?;
    let acr_value = nn::scalar(&acr)?;
    let total = if delta == 0.0 { ldm.clone() } else { (&ldm + (acr * delta)?)? };
    Ok(LossTerms {
        ldm: nn::scalar(&ldm)?,
        acr: acr_value,
        total,
    })
}

/// Draws `t ~ U{1..T}` per element and Gaussian noise.
pub fn sample_t_and_noise(model: &Denoiser, batch: &TrainBatch, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Tensor)> {
    let b = batch.z0.dim(0)?;
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=model.schedule.steps())).collect();
    let eps = nn::randn(rng, batch.z0.dims(), batch.z0.dtype())?;
    Ok((t, eps))
}

/// One optimizer step; returns the loss terms.
pub fn train_step(
    model: &Denoiser,
    opt: &mut candle_nn::AdamW,
    batch: &TrainBatch,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    use candle_nn::Optimizer;
    let (t, eps) = sample_t_and_noise(model, batch, rng)?;
    let terms = loss_terms(model, batch, &t, &eps, delta)?;
    let v = nn::scalar(&terms.total)?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("diffusion loss became {v}")));
    }
    opt.backward_step(&terms.total)?;
    Ok(terms)
}

/// Anything that predicts noise from `(z_t, t)`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// A denoiser bound to fixed conditions.
pub struct Conditioned<'a> {
    pub model: &'a Denoiser,
    pub cond: &'a Conditions,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        Ok(self.model.forward(z_t, &vec![t; b], self.cond)?.0.detach())
    }
}

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> NoisePredictor for F {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self(z_t, t)
    }
}

/// One visited state of a sampler.
#[derive(Debug, Clone)]
pub struct SamplerStep {
    pub t: usize,
    pub x0_pred: Tensor,
    pub z_prev: Tensor,
}

/// Deterministic (η = 0) DDIM from `z_T`, returning every step.
pub fn ddim_trajectory(
    schedule: &NoiseSchedule,
    predictor: &impl NoisePredictor,
    z_t: &Tensor,
    steps: usize,
) -> Result<Vec<SamplerStep>> {
    let taus = schedule.ddim_timesteps(steps)?;
    let mut z = z_t.clone();
    let mut out = Vec::with_capacity(steps);
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let (a_t, a_prev) = (schedule.alpha_bar_at(t), schedule.alpha_bar_at(prev));
        let eps = predictor.predict(&z, t)?;
        let x0 = ((&z - (&eps * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
        let next = ((&x0 * a_prev.sqrt())? + (&eps * (1.0 - a_prev).sqrt())?)?;
        out.push(SamplerStep {
            t,
            x0_pred: x0,
            z_prev: next.clone(),
        });
        z = next;
    }
    Ok(out)
}

/// DDIM sample with initial noise drawn from `seed`.
pub fn ddim_sample(model: &Denoiser, cond: &Conditions, steps: usize, seed: u64) -> Result<Tensor> {
    let b = cond.f_r.dim(0)?;
    let s = model.cfg.latent_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_t = nn::randn(&mut rng, &[b, model.cfg.latent_channels, s, s], model.params.dtype())?;
    let traj = ddim_trajectory(&model.schedule, &Conditioned { model, cond }, &z_t, steps)?;
    Ok(traj.last().expect("at least one step").z_prev.clone())
}

/// Replaces the tokens at `regions` with the donor's tokens at the same
/// indices. The masks no longer describe the mixed set and are dropped.
pub fn swap_tokens(source: &SemanticTokens, donor: &SemanticTokens, regions: &[usize]) -> Result<Tensor> {
    let (b, n, d) = source.tokens.dims3()?;
    if donor.tokens.dims() != [b, n, d] {
        return Err(Error::invalid("donor token set differs in shape"));
    }
    if let Some(&bad) = regions.iter().find(|&&r| r >= n) {
        return Err(Error::invalid(format!("token index {bad} out of range for {n} tokens")));
    }
    let mut pick = vec![0.0f64; n];
    for &r in regions {
        pick[r] = 1.0;
    }
    let pick = Tensor::from_vec(pick, (1, n, 1), &Device::Cpu)?.to_dtype(source.tokens.dtype())?;
    let keep = pick.affine(-1.0, 1.0)?;
    Ok((source.tokens.broadcast_mul(&keep)? + donor.tokens.broadcast_mul(&pick)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_cfg(use_identity: bool) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            latent_size: 4,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            res_blocks: 1,
            attention_resolutions: vec![4, 2],
            heads: 2,
            context_dim: 6,
            transformer_depth: 1,
            id_dim: 5,
            use_identity,
        }
    }

    fn toy_schedule() -> ScheduleConfig {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }

    fn conditions(seed: u64, b: usize, use_id: bool) -> Conditions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Conditions {
            f_r: nn::randn(&mut rng, &[b, 2, 4, 4], DType::F64).unwrap(),
            tokens: nn::randn(&mut rng, &[b, 3, 6], DType::F64).unwrap(),
            f_id: use_id.then(|| nn::randn(&mut rng, &[b, 5], DType::F64).unwrap()),
        }
    }

    #[test]
    fn schedule_sanity() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
        assert!(*s.alpha_bar.last().unwrap() < 1e-2);
        for &a in &s.alpha_bar {
            assert!((a.sqrt().powi(2) + (1.0 - a) - 1.0).abs() < 1e-15);
        }
        assert!(s.q_sample(&Tensor::zeros((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap(), &[0], &Tensor::zeros((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap()).is_err());
        assert_eq!(s.ddim_timesteps(4).unwrap(), vec![250, 500, 750, 1000]);
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn output_shape_record_and_determinism() {
        let m = Denoiser::new(&toy_cfg(true), &toy_schedule(), 0, DType::F64).unwrap();
        let cond = conditions(1, 2, true);
        let z = nn::randn(&mut ChaCha8Rng::seed_from_u64(2), &[2, 2, 4, 4], DType::F64).unwrap();
        let (eps, rec) = m.forward(&z, &[3, 40], &cond).unwrap();
        assert_eq!(eps.dims(), z.dims());
        // down level 0, down level 1, mid, up level 1, up level 0
        assert_eq!(rec.layers.len(), 5);
        for l in &rec.layers {
            let sums = l.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        }
        let merged = merge_cross_attention(&rec, 4).unwrap();
        let sums = merged.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        let (again, _) = m.forward(&z, &[3, 40], &cond).unwrap();
        assert_eq!(eps.flatten_all().unwrap().to_vec1::<f64>().unwrap(), again.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn rejects_wrong_context_and_missing_identity() {
        let m = Denoiser::new(&toy_cfg(true), &toy_schedule(), 0, DType::F64).unwrap();
        let z = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let mut cond = conditions(0, 1, true);
        cond.tokens = Tensor::zeros((1, 3, 7), DType::F64, &Device::Cpu).unwrap();
        assert!(m.forward(&z, &[1], &cond).is_err());
        assert!(m.forward(&z, &[1], &conditions(0, 1, false)).is_err());
    }

    #[test]
    fn zeroed_token_projections_cut_the_tokens_off() {
        let m = Denoiser::new(&toy_cfg(true), &toy_schedule(), 4, DType::F64).unwrap();
        // make the zero-initialized output paths live so tokens would matter
        for name in m.params.names() {
            if name.contains("proj_out") || name.contains("conv2") || name.contains("conv_out") {
                let v = m.params.get(&name).unwrap();
                v.set(&(v.as_tensor().ones_like().unwrap() * 0.05).unwrap()).unwrap();
            }
        }
        let z = nn::randn(&mut ChaCha8Rng::seed_from_u64(5), &[1, 2, 4, 4], DType::F64).unwrap();
        let a = conditions(1, 1, true);
        let mut b = a.clone();
        b.tokens = nn::randn(&mut ChaCha8Rng::seed_from_u64(9), &[1, 3, 6], DType::F64).unwrap();
        let ea = m.forward(&z, &[10], &a).unwrap().0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eb = m.forward(&z, &[10], &b).unwrap().0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(ea, eb);
        m.zero_token_projections().unwrap();
        let ea = m.forward(&z, &[10], &a).unwrap().0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eb = m.forward(&z, &[10], &b).unwrap().0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn ddim_is_deterministic() {
        let m = Denoiser::new(&toy_cfg(false), &toy_schedule(), 0, DType::F32).unwrap();
        let mut cond = conditions(3, 2, false);
        cond.f_r = cond.f_r.to_dtype(DType::F32).unwrap();
        cond.tokens = cond.tokens.to_dtype(DType::F32).unwrap();
        let a = ddim_sample(&m, &cond, 10, 7).unwrap();
        let b = ddim_sample(&m, &cond, 10, 7).unwrap();
        assert_eq!(a.dims(), &[2, 2, 4, 4]);
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn swap_tokens_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mk = |rng: &mut ChaCha8Rng| SemanticTokens {
            tokens: nn::randn(rng, &[2, 4, 3], DType::F64).unwrap(),
            masks: Tensor::zeros((2, 4, 2, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        let (s, d) = (mk(&mut rng), mk(&mut rng));
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v(&swap_tokens(&s, &d, &[]).unwrap()), v(&s.tokens));
        assert_eq!(v(&swap_tokens(&s, &d, &[0, 1, 2, 3]).unwrap()), v(&d.tokens));
        let mixed = swap_tokens(&s, &d, &[2]).unwrap().to_vec3::<f64>().unwrap();
        let (sv, dv) = (s.tokens.to_vec3::<f64>().unwrap(), d.tokens.to_vec3::<f64>().unwrap());
        assert_eq!(mixed[1][2], dv[1][2]);
        assert_eq!(mixed[1][1], sv[1][1]);
        assert!(swap_tokens(&s, &d, &[4]).is_err());
    }

    #[test]
    fn delta_zero_loss_is_pure_ldm() {
        let m = Denoiser::new(&toy_cfg(true), &toy_schedule(), 1, DType::F64).unwrap();
        let cond = conditions(2, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = TrainBatch {
            z0: nn::randn(&mut rng, &[2, 2, 4, 4], DType::F64).unwrap(),
            m_q: candle_nn::ops::softmax(&nn::randn(&mut rng, &[2, 3, 4, 4], DType::F64).unwrap(), 1).unwrap(),
            cond,
        };
        let eps = nn::randn(&mut rng, &[2, 2, 4, 4], DType::F64).unwrap();
        let a = loss_terms(&m, &batch, &[5, 9], &eps, 0.0).unwrap();
        let z_t = m.schedule.q_sample(&batch.z0, &[5, 9], &eps).unwrap();
        let pure = loss_ldm(&eps, &m.forward(&z_t, &[5, 9], &batch.cond).unwrap().0).unwrap();
        let ga = a.total.backward().unwrap();
        let gp = pure.backward().unwrap();
        for var in m.params.all_vars() {
            let x = ga.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
            let y = gp.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
            assert_eq!(x, y);
        }
        assert!(a.acr > 0.0);
    }
}
