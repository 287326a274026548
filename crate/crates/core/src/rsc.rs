//! Region-responsive semantic composition: a CNN U-Net feature encoder,
//! iterative slot attention that splits the features into `N_S` tokens, and
//! a spatial-broadcast decoder used to pretrain both by reconstruction.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::latent_ae::TrainConfig;
use crate::nn::{self, Conv2d, GroupNorm, Init, LayerNorm, Linear, ParamPath, ParamStore, ResBlock, SelfAttention2d};

/// Added to the per-slot attention mass before the weighted mean.
pub const SLOT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RscConfig {
    pub image_size: usize,
    pub output_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks: usize,
    pub heads: usize,
    /// Feature and token width `D`.
    pub slot_dim: usize,
    pub num_slots: usize,
    pub iterations: usize,
    pub mlp_hidden: usize,
    pub decoder_channels: usize,
}

impl Default for RscConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            output_size: 8,
            base_channels: 16,
            channel_multipliers: vec![1, 1, 2, 4],
            res_blocks: 1,
            heads: 4,
            slot_dim: 192,
            num_slots: 4,
            iterations: 3,
            mlp_hidden: 384,
            decoder_channels: 32,
        }
    }
}

impl RscConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 {
            return Err(Error::invalid("channel_multipliers must not be empty"));
        }
        if self.output_size == 0 || self.image_size % self.output_size != 0 {
            return Err(Error::invalid(format!(
                "output size {} does not divide input size {}",
                self.output_size, self.image_size
            )));
        }
        if self.image_size >> (levels - 1) != self.output_size || self.output_size % 2 != 0 {
            return Err(Error::invalid(format!(
                "{levels} encoder levels map {} to {}, not {} (the output must also be even)",
                self.image_size,
                self.image_size >> (levels - 1),
                self.output_size
            )));
        }
        if self.num_slots == 0 || self.iterations == 0 {
            return Err(Error::invalid("num_slots and iterations must be at least 1"));
        }
        let top = self.base_channels * self.channel_multipliers[levels - 1];
        if top % self.heads != 0 {
            return Err(Error::invalid(format!("{top} channels do not split into {} heads", self.heads)));
        }
        Ok(())
    }

    fn upsamples(&self) -> usize {
        (self.image_size / self.output_size).trailing_zeros() as usize
    }
}

/// U-Net: strided levels down to the output resolution, one more level with
/// self-attention, then back up to the output resolution with a skip.
struct UNetEncoder {
    conv_in: Conv2d,
    down: Vec<(Vec<ResBlock>, Option<Conv2d>)>,
    mid_down: Conv2d,
    mid_res: ResBlock,
    mid_attn: SelfAttention2d,
    up_res: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNetEncoder {
    fn new(p: &ParamPath, cfg: &RscConfig) -> Result<Self> {
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.base_channels).collect();
        let mut down = Vec::new();
        let mut prev = widths[0];
        for (l, &w) in widths.iter().enumerate() {
            let lp = p.pp(format!("level{l}"));
            // the full-resolution level only gets the stem and a strided conv
            let blocks = if l == 0 { 0 } else { cfg.res_blocks };
            let res = (0..blocks)
                .map(|b| ResBlock::new(&lp.pp(format!("res{b}")), if b == 0 { prev } else { w }, w))
                .collect::<Result<Vec<_>>>()?;
            let next = widths.get(l + 1).copied().unwrap_or(w);
            let downsample = if l + 1 < widths.len() {
                Some(Conv2d::new(&lp.pp("down"), if blocks == 0 { prev } else { w }, next, 3, 2)?)
            } else {
                None
            };
            down.push((res, downsample));
            prev = next;
        }
        let top = *widths.last().expect("validated non-empty");
        Ok(Self {
            conv_in: Conv2d::new(&p.pp("conv_in"), 3, widths[0], 3, 1)?,
            down,
            mid_down: Conv2d::new(&p.pp("mid_down"), top, top, 3, 2)?,
            mid_res: ResBlock::new(&p.pp("mid_res"), top, top)?,
            mid_attn: SelfAttention2d::new(&p.pp("mid_attn"), top, cfg.heads)?,
            up_res: ResBlock::new(&p.pp("up_res"), 2 * top, top)?,
            norm_out: GroupNorm::new(&p.pp("norm_out"), top)?,
            conv_out: Conv2d::new(&p.pp("conv_out"), top, cfg.slot_dim, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(&x.affine(2.0, -1.0)?)?;
        for (res, down) in &self.down {
            for r in res {
                h = r.forward(&h)?;
            }
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
        }
        let skip = h.clone();
        let (_, _, s, _) = h.dims4()?;
        let m = self.mid_attn.forward(&self.mid_res.forward(&self.mid_down.forward(&h)?)?)?;
        let up = m.upsample_nearest2d(s, s)?;
        let h = self.up_res.forward(&Tensor::cat(&[&up, &skip], 1)?)?;
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Gated recurrent cell `h' = (1 − z) ⊙ n + z ⊙ h`.
struct GruCell {
    input: Linear,
    hidden: Linear,
    dim: usize,
}

impl GruCell {
    fn new(p: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(&p.pp("input"), dim, 3 * dim)?,
            hidden: Linear::new(&p.pp("hidden"), dim, 3 * dim)?,
            dim,
        })
    }

    fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let d = self.dim;
        let r = candle_nn::ops::sigmoid(&(gi.narrow(D::Minus1, 0, d)? + gh.narrow(D::Minus1, 0, d)?)?)?;
        let z = candle_nn::ops::sigmoid(&(gi.narrow(D::Minus1, d, d)? + gh.narrow(D::Minus1, d, d)?)?)?;
        let n = (gi.narrow(D::Minus1, 2 * d, d)? + (r * gh.narrow(D::Minus1, 2 * d, d)?)?)?.tanh()?;
        let one_minus_z = z.affine(-1.0, 1.0)?;
        Ok(((one_minus_z * n)? + (z * h)?)?)
    }
}

/// Tokens `B × N_S × D` and their last-iteration attention masks
/// `B × N_S × h × w` (softmax over the token axis).
#[derive(Debug, Clone)]
pub struct SemanticTokens {
    pub tokens: Tensor,
    pub masks: Tensor,
}

struct SlotAttention {
    norm_inputs: LayerNorm,
    norm_slots: LayerNorm,
    norm_mlp: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    gru: GruCell,
    mlp1: Linear,
    mlp2: Linear,
    dim: usize,
}

impl SlotAttention {
    fn new(p: &ParamPath, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm_inputs: LayerNorm::new(&p.pp("norm_inputs"), dim)?,
            norm_slots: LayerNorm::new(&p.pp("norm_slots"), dim)?,
            norm_mlp: LayerNorm::new(&p.pp("norm_mlp"), dim)?,
            to_q: Linear::no_bias(&p.pp("to_q"), dim, dim)?,
            to_k: Linear::no_bias(&p.pp("to_k"), dim, dim)?,
            to_v: Linear::no_bias(&p.pp("to_v"), dim, dim)?,
            gru: GruCell::new(&p.pp("gru"), dim)?,
            mlp1: Linear::new(&p.pp("mlp1"), dim, hidden)?,
            mlp2: Linear::new(&p.pp("mlp2"), hidden, dim)?,
            dim,
        })
    }

    /// `features: B × P × D`, `slots: B × N × D`; returns refined slots and
    /// the final `B × P × N` attention.
    fn forward(&self, features: &Tensor, slots: &Tensor, iterations: usize) -> Result<(Tensor, Tensor)> {
        if iterations == 0 {
            return Err(Error::invalid("slot attention needs at least one iteration"));
        }
        let inputs = self.norm_inputs.forward(features)?;
        let k = self.to_k.forward(&inputs)?;
        let v = self.to_v.forward(&inputs)?;
        let mut slots = slots.clone();
        let mut attn = None;
        for it in 0..iterations {
            let prev = slots.clone();
            let q = self.to_q.forward(&self.norm_slots.forward(&slots)?)?;
            let logits = (k.matmul(&q.transpose(1, 2)?.contiguous()?)? / (self.dim as f64).sqrt())?;
            nn::ensure_finite(&logits, &format!("slot attention logits (iteration {it})"))?;
            let a = candle_nn::ops::softmax(&logits, D::Minus1)?;
            let mass = (a.sum_keepdim(1)? + SLOT_EPS)?;
            let weights = a.broadcast_div(&mass)?;
            let updates = weights.transpose(1, 2)?.contiguous()?.matmul(&v)?;
            slots = self.gru.forward(&updates, &prev)?;
            let m = self.mlp2.forward(&self.mlp1.forward(&self.norm_mlp.forward(&slots)?)?.relu()?)?;
            slots = (slots + m)?;
            attn = Some(a);
        }
        Ok((slots, attn.expect("at least one iteration")))
    }
}

/// Spatial-broadcast decoder: every token is tiled over the output grid,
/// given positions, and upsampled to RGB plus an alpha logit.
struct SlotDecoder {
    pos: Tensor,
    conv_in: Conv2d,
    ups: Vec<Conv2d>,
    conv_out: Conv2d,
}

impl SlotDecoder {
    fn new(p: &ParamPath, cfg: &RscConfig) -> Result<Self> {
        let s = cfg.output_size;
        let c = cfg.decoder_channels;
        let mut ups = Vec::new();
        let mut width = c;
        for u in 0..cfg.upsamples() {
            let next = if u + 2 >= cfg.upsamples() { (c / 2).max(4) } else { c };
            ups.push(Conv2d::new(&p.pp(format!("up{u}")), width, next, 3, 1)?);
            width = next;
        }
        Ok(Self {
            pos: p.var("pos", &[1, cfg.slot_dim, s, s], Init::Normal(0.02))?,
            conv_in: Conv2d::new(&p.pp("conv_in"), cfg.slot_dim, c, 3, 1)?,
            ups,
            conv_out: Conv2d::new(&p.pp("conv_out"), width, 4, 3, 1)?,
        })
    }

    /// `tokens: B × N × D` → `(rgb: B × N × 3 × H × W, alpha logits: B × N × H × W)`.
    fn forward(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = tokens.dims3()?;
        let (_, _, s, _) = self.pos.dims4()?;
        let tiled = tokens.reshape((b * n, d, 1, 1))?.broadcast_as((b * n, d, s, s))?;
        let mut h = self.conv_in.forward(&tiled.broadcast_add(&self.pos)?)?.silu()?;
        for u in &self.ups {
            let (_, _, hh, ww) = h.dims4()?;
            h = u.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?.silu()?;
        }
        let out = self.conv_out.forward(&h)?;
        let (_, _, hh, ww) = out.dims4()?;
        let out = out.reshape((b, n, 4, hh, ww))?;
        let rgb = candle_nn::ops::sigmoid(&out.narrow(2, 0, 3)?)?;
        let alpha = out.narrow(2, 3, 1)?.squeeze(2)?;
        Ok((rgb, alpha))
    }
}

/// Per-token images, normalized alphas and their merge.
#[derive(Debug, Clone)]
pub struct SlotDecoding {
    pub rgb: Tensor,
    pub alpha: Tensor,
    pub merged: Tensor,
}

pub struct RscModel {
    pub cfg: RscConfig,
    pub params: ParamStore,
    encoder: UNetEncoder,
    pos: Tensor,
    feat_norm: LayerNorm,
    feat_mlp1: Linear,
    feat_mlp2: Linear,
    slot_mu: Tensor,
    slot_log_sigma: Tensor,
    slots: SlotAttention,
    decoder: SlotDecoder,
}

pub const CHECKPOINT_KIND: &str = "rsc";

impl RscModel {
    pub fn new(cfg: &RscConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::new(seed, dtype);
        let root = params.root();
        let (s, d) = (cfg.output_size, cfg.slot_dim);
        let encoder = UNetEncoder::new(&root.pp("enc"), cfg)?;
        let pos = root.var("enc_pos", &[1, d, s, s], Init::Normal(0.02))?;
        let feat_norm = LayerNorm::new(&root.pp("feat_norm"), d)?;
        let feat_mlp1 = Linear::new(&root.pp("feat_mlp1"), d, d)?;
        let feat_mlp2 = Linear::new(&root.pp("feat_mlp2"), d, d)?;
        let slot_mu = root.var("slot_mu", &[cfg.num_slots, d], Init::Normal(1.0 / (d as f64).sqrt()))?;
        let slot_log_sigma = root.var("slot_log_sigma", &[cfg.num_slots, d], Init::Const(-2.0))?;
        let slots = SlotAttention::new(&root.pp("slots"), d, cfg.mlp_hidden)?;
        let decoder = SlotDecoder::new(&root.pp("dec"), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            pos,
            feat_norm,
            feat_mlp1,
            feat_mlp2,
            slot_mu,
            slot_log_sigma,
            slots,
            decoder,
        })
    }

    /// `B × P × D` features (P = output_size², row-major) with the learned
    /// positional encoding added.
    pub fn encode_features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::invalid(format!("encoder expects 3×{s}×{s} images, got {c}×{h}×{w}")));
        }
        let f = self.encoder.forward(x)?.broadcast_add(&self.pos)?;
        let (b, d, hh, ww) = f.dims4()?;
        let seq = f.reshape((b, d, hh * ww))?.transpose(1, 2)?.contiguous()?;
        let m = self.feat_mlp2.forward(&self.feat_mlp1.forward(&self.feat_norm.forward(&seq)?)?.relu()?)?;
        Ok((seq + m)?)
    }

    /// Initial tokens `B × N_S × D`: the learned means, plus scaled noise
    /// from `rng` when sampling.
    pub fn init_tokens(&self, batch: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (n, d) = self.slot_mu.dims2()?;
        let mu = self.slot_mu.unsqueeze(0)?.broadcast_as((batch, n, d))?;
        Ok(match rng {
            None => mu.contiguous()?,
            Some(rng) => {
                let noise = nn::randn(rng, &[batch, n, d], self.params.dtype())?;
                (mu + noise.broadcast_mul(&self.slot_log_sigma.exp()?.unsqueeze(0)?)?)?
            }
        })
    }

    /// Iterative attention from `init` tokens onto `features`.
    pub fn slot_attention(&self, features: &Tensor, init: &Tensor, iterations: usize) -> Result<SemanticTokens> {
        let (b, p, d) = features.dims3()?;
        if init.dim(2)? != d {
            return Err(Error::dim("token width", d, init.dim(2)?));
        }
        let side = (p as f64).sqrt().round() as usize;
        if side * side != p {
            return Err(Error::invalid(format!("{p} feature positions do not form a square grid")));
        }
        let (tokens, attn) = self.slots.forward(features, init, iterations)?;
        let n = init.dim(1)?;
        let masks = attn.transpose(1, 2)?.reshape((b, n, side, side))?;
        Ok(SemanticTokens { tokens, masks })
    }

    /// Deterministic tokens for inference.
    pub fn tokens(&self, x: &Tensor) -> Result<SemanticTokens> {
        let f = self.encode_features(x)?;
        let init = self.init_tokens(x.dim(0)?, None)?;
        self.slot_attention(&f, &init, self.cfg.iterations)
    }

    pub fn decode_slots(&self, tokens: &Tensor) -> Result<SlotDecoding> {
        let (rgb, logits) = self.decoder.forward(tokens)?;
        let alpha = candle_nn::ops::softmax(&logits, 1)?;
        let merged = rgb.broadcast_mul(&alpha.unsqueeze(2)?)?.sum(1)?;
        Ok(SlotDecoding { rgb, alpha, merged })
    }

    /// Token masks bilinearly resized to image resolution `B × N_S × H × W`.
    pub fn slot_masks(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.tokens(x)?;
        nn::resize_bilinear(&t.masks, self.cfg.image_size, self.cfg.image_size)
    }

    /// Pixel MSE of the merged reconstruction, with sampled initial tokens.
    pub fn reconstruction_loss(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let f = self.encode_features(x)?;
        let init = self.init_tokens(x.dim(0)?, Some(rng))?;
        let t = self.slot_attention(&f, &init, self.cfg.iterations)?;
        nn::mse(&self.decode_slots(&t.tokens)?.merged, x)
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: &str) -> Result<()> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_meta("config_digest", digest);
        c.set_meta("config", serde_json::to_string(&self.cfg)?);
        self.params.save_into(&mut c, "")?;
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let c = Container::read_kind(path.as_ref(), CHECKPOINT_KIND)?;
        let cfg: RscConfig = serde_json::from_str(c.meta("config").unwrap_or("{}"))?;
        let m = Self::new(&cfg, 0, dtype)?;
        m.params.load_from(&c, "")?;
        Ok(m)
    }
}

/// Reconstruction pretraining; no mask supervision is involved.
pub fn pretrain_rsc(model: &RscModel, images: &[RgbImage], tc: &TrainConfig, seed: u64, log: &mut nn::TrainLog) -> Result<Vec<f64>> {
    use candle_nn::Optimizer;
    if images.is_empty() {
        return Err(Error::invalid("RSC pretraining set is empty"));
    }
    tc.validate("pretrain-rsc")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = nn::adam(model.params.all_vars(), tc.lr)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&images[order[cursor]]);
            cursor += 1;
        }
        let x = nn::images_to_tensor(&batch, model.params.dtype())?;
        let loss = model.reconstruction_loss(&x, &mut rng)?;
        let v = nn::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("RSC loss became {v} at step {step}")));
        }
        opt.backward_step(&loss)?;
        losses.push(v);
        if step % tc.log_every.max(1) == 0 || step + 1 == tc.steps {
            log.record(serde_json::json!({ "step": step, "loss": v, "lr": tc.lr }))?;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    pub(crate) fn toy(num_slots: usize) -> RscConfig {
        RscConfig {
            image_size: 8,
            output_size: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 1, 2],
            res_blocks: 1,
            heads: 2,
            slot_dim: 8,
            num_slots,
            iterations: 2,
            mlp_hidden: 16,
            decoder_channels: 8,
        }
    }

    fn image_batch(dtype: DType) -> Tensor {
        let v: Vec<f64> = (0..2 * 3 * 64).map(|k| ((k * 37 % 17) as f64) / 17.0).collect();
        Tensor::from_vec(v, (2, 3, 8, 8), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn mask_sums(m: &Tensor) -> Vec<f64> {
        m.sum(1).unwrap().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn config_arithmetic() {
        assert!(RscConfig::default().validate().is_ok());
        let paper = RscConfig {
            image_size: 256,
            output_size: 32,
            ..RscConfig::default()
        };
        assert!(paper.validate().is_ok());
        assert!(RscConfig { output_size: 16, ..RscConfig::default() }.validate().is_err());
    }

    #[test]
    fn feature_shape_matches_config() {
        let m = RscModel::new(&toy(4), 0, DType::F32).unwrap();
        let f = m.encode_features(&image_batch(DType::F32)).unwrap();
        assert_eq!(f.dims(), &[2, 4, 8]);
    }

    #[test]
    fn masks_sum_to_one_and_single_slot_is_trivial() {
        let m = RscModel::new(&toy(4), 1, DType::F64).unwrap();
        let t = m.tokens(&image_batch(DType::F64)).unwrap();
        assert_eq!(t.masks.dims(), &[2, 4, 2, 2]);
        assert!(mask_sums(&t.masks).iter().all(|s| (s - 1.0).abs() < 1e-5));
        let up = m.slot_masks(&image_batch(DType::F64)).unwrap();
        assert_eq!(up.dims(), &[2, 4, 8, 8]);
        assert!(mask_sums(&up).iter().all(|s| (s - 1.0).abs() < 1e-4));

        let one = RscModel::new(&toy(1), 1, DType::F64).unwrap();
        let t = one.tokens(&image_batch(DType::F64)).unwrap();
        assert!(t.masks.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 1.0));
        let d = one.decode_slots(&t.tokens).unwrap();
        let merged = d.merged.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let rgb = d.rgb.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(merged, rgb);
    }

    #[test]
    fn inference_tokens_are_deterministic_and_sampling_is_seeded() {
        let m = RscModel::new(&toy(3), 2, DType::F32).unwrap();
        let a = m.init_tokens(2, None).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = m.init_tokens(2, None).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let s1 = m.init_tokens(2, Some(&mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        let s2 = m.init_tokens(2, Some(&mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        assert_eq!(s1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), s2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn decoded_alphas_are_a_partition_and_merge_is_bounded() {
        let m = RscModel::new(&toy(4), 3, DType::F64).unwrap();
        let t = m.tokens(&image_batch(DType::F64)).unwrap();
        let d = m.decode_slots(&t.tokens).unwrap();
        assert!(mask_sums(&d.alpha).iter().all(|s| (s - 1.0).abs() < 1e-12));
        let merged = d.merged.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(merged.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nan_features_are_reported() {
        let m = RscModel::new(&toy(2), 0, DType::F64).unwrap();
        let f = Tensor::full(f64::NAN, (1, 4, 8), &Device::Cpu).unwrap();
        let init = m.init_tokens(1, None).unwrap();
        let err = m.slot_attention(&f, &init, 1).unwrap_err();
        assert!(err.to_string().contains("logits"));
    }
}
