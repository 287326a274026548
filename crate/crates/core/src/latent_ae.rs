//! Image ↔ latent compression: a convolutional autoencoder with an optional
//! vector-quantization bottleneck, downsampling by 8.
//!
//! Diffusion runs on the continuous pre-quantization code `z_e`, divided by a
//! latent scale measured on the training set so its entries are roughly unit
//! variance. [`Autoencoder::decode`] therefore takes continuous codes; the
//! quantizer is used during training and by [`Autoencoder::code_indices`].

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::nn::{self, Conv2d, GroupNorm, Init, ParamPath, ParamStore, ResBlock};

pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeMode {
    Vq,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub codebook_size: usize,
    /// Channels of the latent code.
    pub code_dim: usize,
    pub commitment: f64,
    pub mode: AeMode,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 32,
            codebook_size: 512,
            code_dim: 4,
            commitment: 0.25,
            mode: AeMode::Vq,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!("image_size {} is not divisible by {DOWNSAMPLE}", self.image_size)));
        }
        if self.codebook_size < 16 {
            return Err(Error::invalid(format!("codebook_size must be at least 16, got {}", self.codebook_size)));
        }
        if self.code_dim == 0 || self.base_channels == 0 {
            return Err(Error::invalid("code_dim and base_channels must be positive"));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / DOWNSAMPLE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid(format!("{stage}: steps, batch_size and lr must be positive")));
        }
        Ok(())
    }
}

struct Encoder {
    conv_in: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(p: &ParamPath, c: usize, code_dim: usize) -> Result<Self> {
        let widths = [c, c, 2 * c, 2 * c];
        let mut down = Vec::new();
        let mut res = Vec::new();
        for l in 0..3 {
            down.push(Conv2d::new(&p.pp(format!("down{l}")), widths[l], widths[l + 1], 3, 2)?);
            if l > 0 {
                res.push(ResBlock::new(&p.pp(format!("res{l}")), widths[l + 1], widths[l + 1])?);
            }
        }
        Ok(Self {
            conv_in: Conv2d::new(&p.pp("conv_in"), 3, c, 3, 1)?,
            down,
            res,
            norm_out: GroupNorm::new(&p.pp("norm_out"), 2 * c)?,
            conv_out: Conv2d::new(&p.pp("conv_out"), 2 * c, code_dim, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(&x.affine(2.0, -1.0)?)?;
        for (l, d) in self.down.iter().enumerate() {
            h = d.forward(&h)?;
            if l > 0 {
                h = self.res[l - 1].forward(&h)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

struct Decoder {
    conv_in: Conv2d,
    res: Vec<ResBlock>,
    up: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(p: &ParamPath, c: usize, code_dim: usize) -> Result<Self> {
        let widths = [2 * c, 2 * c, c, c / 2 + 1];
        let mut res = Vec::new();
        let mut up = Vec::new();
        for l in 0..3 {
            if l < 2 {
                res.push(ResBlock::new(&p.pp(format!("res{l}")), widths[l], widths[l])?);
            }
            up.push(Conv2d::new(&p.pp(format!("up{l}")), widths[l], widths[l + 1], 3, 1)?);
        }
        Ok(Self {
            conv_in: Conv2d::new(&p.pp("conv_in"), code_dim, 2 * c, 3, 1)?,
            res,
            up,
            norm_out: GroupNorm::new(&p.pp("norm_out"), widths[3])?,
            conv_out: Conv2d::new(&p.pp("conv_out"), widths[3], 3, 3, 1)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (l, u) in self.up.iter().enumerate() {
            if l < self.res.len() {
                h = self.res[l].forward(&h)?;
            }
            let (_, _, hh, ww) = h.dims4()?;
            h = u.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(candle_nn::ops::sigmoid(&out)?)
    }
}

/// Loss terms of one training batch.
pub struct AeLoss {
    pub total: Tensor,
    pub reconstruction: f64,
    pub vq: f64,
    pub indices: Vec<u32>,
    pub z_e: Tensor,
}

pub struct Autoencoder {
    pub cfg: AeConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Tensor,
    /// Standard deviation of `z_e` on the training set.
    pub latent_scale: f64,
    /// Fraction of codebook entries used on the training set.
    pub code_usage: f64,
}

pub const CHECKPOINT_KIND: &str = "autoencoder";

impl Autoencoder {
    pub fn new(cfg: &AeConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::new(seed, dtype);
        let root = params.root();
        let encoder = Encoder::new(&root.pp("enc"), cfg.base_channels, cfg.code_dim)?;
        let decoder = Decoder::new(&root.pp("dec"), cfg.base_channels, cfg.code_dim)?;
        let k = cfg.codebook_size as f64;
        let codebook = root.var("codebook", &[cfg.codebook_size, cfg.code_dim], Init::Uniform(1.0 / k))?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            decoder,
            codebook,
            latent_scale: 1.0,
            code_usage: 0.0,
        })
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::invalid(format!("autoencoder expects 3×{s}×{s} images, got {c}×{h}×{w}")));
        }
        Ok(())
    }

    /// Continuous pre-quantization code `B × code_dim × H/8 × W/8`.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        self.encoder.forward(x)
    }

    /// Diffusion latent: `z_e / latent_scale`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.encode_raw(x)? / self.latent_scale)?)
    }

    /// Inverse of [`Self::encode`]; output in [0, 1].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        let l = self.cfg.latent_size();
        if c != self.cfg.code_dim || h != l || w != l {
            return Err(Error::invalid(format!(
                "decoder expects {}×{l}×{l} latents, got {c}×{h}×{w}",
                self.cfg.code_dim
            )));
        }
        self.decode_raw(&(z * self.latent_scale)?)
    }

    fn decode_raw(&self, z_e: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z_e)
    }

    /// Nearest codebook entries of a raw code; returns the quantized code and
    /// flat indices in `(b, y, x)` order.
    pub fn quantize(&self, z_e: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let (b, c, h, w) = z_e.dims4()?;
        let flat = z_e.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
        let dist = flat
            .sqr()?
            .sum_keepdim(1)?
            .broadcast_sub(&(flat.matmul(&self.codebook.t()?)? * 2.0)?)?
            .broadcast_add(&self.codebook.sqr()?.sum(1)?.unsqueeze(0)?)?;
        let idx = dist.argmin(D::Minus1)?;
        let zq = self.codebook.index_select(&idx, 0)?.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?;
        Ok((zq.contiguous()?, idx.to_vec1::<u32>()?))
    }

    pub fn code_indices(&self, x: &Tensor) -> Result<Vec<u32>> {
        Ok(self.quantize(&self.encode_raw(x)?)?.1)
    }

    /// Reconstruction through the bottleneck the model was trained with.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_raw(x)?;
        match self.cfg.mode {
            AeMode::Vq => self.decode_raw(&self.quantize(&z)?.0),
            AeMode::Plain => self.decode_raw(&z),
        }
    }

    /// L1 reconstruction plus, in VQ mode, codebook and commitment terms with
    /// a straight-through gradient.
    pub fn loss(&self, x: &Tensor) -> Result<AeLoss> {
        let z_e = self.encode_raw(x)?;
        let (recon_in, vq, indices) = match self.cfg.mode {
            AeMode::Plain => (z_e.clone(), None, Vec::new()),
            AeMode::Vq => {
                let (zq, idx) = self.quantize(&z_e)?;
                let codebook = nn::mse(&zq, &z_e.detach())?;
                let commit = nn::mse(&z_e, &zq.detach())?;
                let st = (&z_e + (zq - &z_e)?.detach())?;
                (st, Some((codebook + (commit * self.cfg.commitment)?)?), idx)
            }
        };
        let recon = self.decode_raw(&recon_in)?;
        let l1 = (recon - x)?.abs()?.mean_all()?;
        let (total, vq_value) = match vq {
            Some(v) => ((&l1 + &v)?, nn::scalar(&v)?),
            None => (l1.clone(), 0.0),
        };
        Ok(AeLoss {
            total,
            reconstruction: nn::scalar(&l1)?,
            vq: vq_value,
            indices,
            z_e,
        })
    }

    pub fn encode_images(&self, images: &[&RgbImage]) -> Result<Tensor> {
        Ok(self.encode(&nn::images_to_tensor(images, self.params.dtype())?)?.detach())
    }

    pub fn decode_images(&self, z: &Tensor) -> Result<Vec<RgbImage>> {
        nn::tensor_to_images(&self.decode(z)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: &str) -> Result<()> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_meta("config_digest", digest);
        c.set_meta("config", serde_json::to_string(&self.cfg)?);
        c.put_f64("latent_scale", &[1], &[self.latent_scale])?;
        c.put_f64("code_usage", &[1], &[self.code_usage])?;
        self.params.save_into(&mut c, "")?;
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let c = Container::read_kind(path.as_ref(), CHECKPOINT_KIND)?;
        let cfg: AeConfig = serde_json::from_str(c.meta("config").unwrap_or("{}"))?;
        let mut ae = Self::new(&cfg, 0, dtype)?;
        ae.params.load_from(&c, "")?;
        ae.latent_scale = c.get_f64_vec("latent_scale")?[0];
        ae.code_usage = c.get_f64_vec("code_usage")?[0];
        Ok(ae)
    }
}

/// Training report.
#[derive(Debug, Clone, PartialEq)]
pub struct AeTrainSummary {
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub code_usage: f64,
    pub latent_scale: f64,
}

/// Codes unused over this many steps are re-seeded from batch encodings.
const RESTART_EVERY: usize = 100;

pub fn train_ae(
    ae: &mut Autoencoder,
    images: &[RgbImage],
    tc: &TrainConfig,
    seed: u64,
    log: &mut nn::TrainLog,
) -> Result<AeTrainSummary> {
    use candle_nn::Optimizer;
    if images.is_empty() {
        return Err(Error::invalid("autoencoder training set is empty"));
    }
    tc.validate("train-ae")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = nn::adam(ae.params.all_vars(), tc.lr)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let k = ae.cfg.codebook_size;
    let mut used = vec![false; k];
    let mut losses = Vec::with_capacity(tc.steps);
    let codebook_var = ae.params.get("codebook").expect("codebook parameter");

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
        let x = nn::images_to_tensor(&batch, ae.params.dtype())?;
        let out = ae.loss(&x)?;
        let total = nn::scalar(&out.total)?;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("autoencoder loss became {total} at step {step}")));
        }
        opt.backward_step(&out.total)?;
        losses.push(total);
        for &i in &out.indices {
            used[i as usize] = true;
        }

        if ae.cfg.mode == AeMode::Vq && (step + 1) % RESTART_EVERY == 0 {
            let z = out.z_e.permute((0, 2, 3, 1))?.flatten_to(2)?.to_dtype(DType::F32)?;
            let z = z.to_vec2::<f32>()?;
            let mut cb = codebook_var.as_tensor().to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let mut restarted = false;
            for (code, u) in cb.iter_mut().zip(used.iter()) {
                if !u {
                    let src = &z[rng.random_range(0..z.len())];
                    for (c, s) in code.iter_mut().zip(src) {
                        *c = s + rng.random_range(-1e-3..1e-3);
                    }
                    restarted = true;
                }
            }
            if restarted {
                let flat: Vec<f32> = cb.into_iter().flatten().collect();
                codebook_var.set(&Tensor::from_vec(flat, (k, ae.cfg.code_dim), ae.params.device())?.to_dtype(ae.params.dtype())?)?;
            }
            used.iter_mut().for_each(|u| *u = false);
        }

        if step % tc.log_every.max(1) == 0 || step + 1 == tc.steps {
            log.record(serde_json::json!({
                "step": step, "loss": total, "l1": out.reconstruction, "vq": out.vq, "lr": tc.lr,
            }))?;
        }
    }

    let (scale, usage) = latent_statistics(ae, images)?;
    ae.latent_scale = scale;
    ae.code_usage = usage;
    if ae.cfg.mode == AeMode::Vq && usage < 0.25 {
        log::warn!("only {:.1}% of codebook entries are in use", 100.0 * usage);
    }
    Ok(AeTrainSummary {
        final_loss: *losses.last().expect("at least one step"),
        losses,
        code_usage: usage,
        latent_scale: scale,
    })
}

/// Standard deviation of `z_e` and the used-code fraction over a set.
pub fn latent_statistics(ae: &Autoencoder, images: &[RgbImage]) -> Result<(f64, f64)> {
    let mut used = vec![false; ae.cfg.codebook_size];
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0usize);
    for chunk in images.chunks(32) {
        let x = nn::images_to_tensor(&chunk.iter().collect::<Vec<_>>(), ae.params.dtype())?;
        let z = ae.encode_raw(&x)?;
        for v in z.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            s1 += v;
            s2 += v * v;
            n += 1;
        }
        if ae.cfg.mode == AeMode::Vq {
            for i in ae.quantize(&z)?.1 {
                used[i as usize] = true;
            }
        }
    }
    let mean = s1 / n as f64;
    let std = (s2 / n as f64 - mean * mean).max(1e-12).sqrt();
    let usage = used.iter().filter(|&&u| u).count() as f64 / used.len() as f64;
    Ok((std, usage))
}

/// Peak signal-to-noise ratio for signals in [0, 1].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::invalid("PSNR needs equal image sizes"));
    }
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    Ok(10.0 * (1.0 / mse.max(1e-12)).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: AeMode) -> AeConfig {
        AeConfig {
            image_size: 16,
            base_channels: 8,
            codebook_size: 16,
            code_dim: 4,
            commitment: 0.25,
            mode,
        }
    }

    fn checker(seed: u64) -> RgbImage {
        let mut img = RgbImage::new(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        for i in 0..16 {
            for j in 0..16 {
                let t = if (i / 4 + j / 4) % 2 == 0 { 1.0 } else { 0.4 };
                img.set(i, j, base.map(|b| b * t));
            }
        }
        img
    }

    #[test]
    fn shapes_range_and_determinism() {
        for mode in [AeMode::Vq, AeMode::Plain] {
            let ae = Autoencoder::new(&tiny(mode), 0, DType::F32).unwrap();
            let x = nn::images_to_tensor(&[&checker(1), &checker(2)], DType::F32).unwrap();
            let z = ae.encode(&x).unwrap();
            assert_eq!(z.dims(), &[2, 4, 2, 2]);
            assert_eq!(
                z.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                ae.encode(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
            let zero = Tensor::zeros((1, 4, 2, 2), DType::F32, &candle_core::Device::Cpu).unwrap();
            let img = ae.decode(&zero).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_wrong_sizes() {
        assert!(AeConfig { image_size: 12, ..tiny(AeMode::Vq) }.validate().is_err());
        assert!(AeConfig { codebook_size: 8, ..tiny(AeMode::Vq) }.validate().is_err());
        let ae = Autoencoder::new(&tiny(AeMode::Vq), 0, DType::F32).unwrap();
        let bad = Tensor::zeros((1, 3, 8, 8), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(ae.encode(&bad).is_err());
    }

    #[test]
    fn quantizer_picks_the_nearest_code() {
        let ae = Autoencoder::new(&tiny(AeMode::Vq), 3, DType::F64).unwrap();
        let z = nn::randn(&mut ChaCha8Rng::seed_from_u64(1), &[1, 4, 2, 2], DType::F64).unwrap();
        let (_, idx) = ae.quantize(&z).unwrap();
        let cb = ae.params.get("codebook").unwrap().as_tensor().to_vec2::<f64>().unwrap();
        let zf = z.permute((0, 2, 3, 1)).unwrap().flatten_to(2).unwrap().to_vec2::<f64>().unwrap();
        for (v, &i) in zf.iter().zip(&idx) {
            let d = |c: &Vec<f64>| c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = cb.iter().map(d).fold(f64::INFINITY, f64::min);
            assert!((d(&cb[i as usize]) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn short_training_reduces_loss_and_is_reproducible() {
        let images: Vec<RgbImage> = (0..8).map(checker).collect();
        let tc = TrainConfig {
            steps: 60,
            batch_size: 4,
            lr: 3e-3,
            log_every: 10,
        };
        let run = || {
            let mut ae = Autoencoder::new(&tiny(AeMode::Vq), 5, DType::F32).unwrap();
            let s = train_ae(&mut ae, &images, &tc, 11, &mut nn::TrainLog::new(None).unwrap()).unwrap();
            (ae, s)
        };
        let (ae, a) = run();
        let (_, b) = run();
        assert!((a.final_loss - b.final_loss).abs() <= 1e-3);
        let head: f64 = a.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = a.losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(a.latent_scale > 0.0);

        let dir = tempfile::tempdir().unwrap();
        ae.save(dir.path().join("ae.bin"), "d").unwrap();
        let back = Autoencoder::load(dir.path().join("ae.bin"), DType::F32).unwrap();
        let x = nn::images_to_tensor(&[&images[0]], DType::F32).unwrap();
        assert_eq!(
            ae.encode(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            back.encode(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn psnr_of_identical_images_is_large() {
        let a = checker(0);
        assert!(psnr(&a, &a).unwrap() > 100.0);
    }
}
