//! Toy face-recognition embedder trained with an additive angular margin, and
//! the AdaIN layer that injects its unit-norm identity token.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::latent_ae::TrainConfig;
use crate::nn::{self, instance_norm, Conv2d, GroupNorm, Init, Linear, ParamPath, ParamStore, ResBlock};

/// Instance-norm epsilon used by AdaIN.
pub const IN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    /// Additive angular margin `m`, radians.
    pub margin: f64,
    /// Logit scale `s`.
    pub scale: f64,
}

impl Default for IdConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
            embed_dim: 128,
            margin: 0.2,
            scale: 16.0,
        }
    }
}

impl IdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 16 != 0 || self.embed_dim == 0 || self.base_channels == 0 {
            return Err(Error::invalid("identity embedder needs image_size divisible by 16 and positive widths"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) || !(self.scale > 0.0) {
            return Err(Error::invalid("margin must lie in [0, π/2) and scale must be positive"));
        }
        Ok(())
    }
}

pub struct IdentityEmbedder {
    pub cfg: IdConfig,
    pub params: ParamStore,
    stem: Conv2d,
    stages: Vec<(Conv2d, ResBlock)>,
    norm: GroupNorm,
    proj: Linear,
    /// Class centers of the training identities, absent until trained.
    classifier: Option<Tensor>,
    pub trained: bool,
}

pub const CHECKPOINT_KIND: &str = "identity";

impl IdentityEmbedder {
    pub fn new(cfg: &IdConfig, n_classes: usize, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::new(seed, dtype);
        let root = params.root();
        let c = cfg.base_channels;
        let widths = [c, 2 * c, 4 * c, 4 * c];
        let stages = (0..3)
            .map(|l| -> Result<(Conv2d, ResBlock)> {
                let p = root.pp(format!("stage{l}"));
                Ok((
                    Conv2d::new(&p.pp("down"), widths[l], widths[l + 1], 3, 2)?,
                    ResBlock::new(&p.pp("res"), widths[l + 1], widths[l + 1])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = if n_classes > 0 {
            Some(root.var("classifier", &[n_classes, cfg.embed_dim], Init::Normal(1.0))?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            stem: Conv2d::new(&root.pp("stem"), 3, c, 3, 2)?,
            stages,
            norm: GroupNorm::new(&root.pp("norm"), 4 * c)?,
            proj: Linear::new(&root.pp("proj"), 4 * c, cfg.embed_dim)?,
            classifier,
            params,
            trained: false,
        })
    }

    /// Pooled penultimate features `B × 4c`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::invalid(format!("embedder expects 3×{s}×{s} images, got {c}×{h}×{w}")));
        }
        let mut h = self.stem.forward(&x.affine(2.0, -1.0)?)?;
        for (down, res) in &self.stages {
            h = res.forward(&down.forward(&h)?)?;
        }
        Ok(self.norm.forward(&h)?.silu()?.mean((2, 3))?)
    }

    /// Unit-norm identity tokens `B × D_id`, without the trained-flag check.
    pub fn embed_unchecked(&self, x: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.proj.forward(&self.features(x)?)?)
    }

    /// Unit-norm identity tokens; refuses untrained weights.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        if !self.trained {
            return Err(Error::invalid("identity embedder checkpoint is untrained"));
        }
        self.embed_unchecked(x)
    }

    pub fn embed_images(&self, images: &[&RgbImage]) -> Result<Tensor> {
        Ok(self.embed(&nn::images_to_tensor(images, self.params.dtype())?)?.detach())
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.as_ref().map(|c| c.dim(0).unwrap_or(0)).unwrap_or(0)
    }

    /// Margin cross-entropy of a batch against class `labels`.
    pub fn margin_loss(&self, x: &Tensor, labels: &[u32]) -> Result<(Tensor, f64)> {
        let w = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::invalid("embedder was built without a classifier"))?;
        let e = self.embed_unchecked(x)?;
        let cos = e.matmul(&l2_normalize(w)?.t()?)?;
        let logits = arc_margin_logits(&cos, labels, self.cfg.margin, self.cfg.scale)?;
        let loss = cross_entropy(&logits, labels)?;
        let pred = cos.argmax(D::Minus1)?.to_vec1::<u32>()?;
        let acc = pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        Ok((loss, acc))
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: &str) -> Result<()> {
        let mut c = Container::new(CHECKPOINT_KIND);
        c.set_meta("config_digest", digest);
        c.set_meta("config", serde_json::to_string(&self.cfg)?);
        c.set_meta("n_classes", self.n_classes().to_string());
        c.set_meta("trained", self.trained.to_string());
        self.params.save_into(&mut c, "")?;
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let c = Container::read_kind(path.as_ref(), CHECKPOINT_KIND)?;
        let cfg: IdConfig = serde_json::from_str(c.meta("config").unwrap_or("{}"))?;
        let n: usize = c.meta("n_classes").and_then(|v| v.parse().ok()).unwrap_or(0);
        let mut m = Self::new(&cfg, n, 0, dtype)?;
        m.params.load_from(&c, "")?;
        m.trained = c.meta("trained") == Some("true");
        Ok(m)
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// `s·cos(θ + m)` for the target class and `s·cos θ` elsewhere; past
/// `θ > π − m` the target logit falls back to `cos θ − m·sin m` so it stays
/// monotone in θ.
pub fn arc_margin_logits(cos: &Tensor, labels: &[u32], margin: f64, scale: f64) -> Result<Tensor> {
    let (b, k) = cos.dims2()?;
    if labels.len() != b {
        return Err(Error::dim("label count", b, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut onehot = vec![0.0f64; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, k), &Device::Cpu)?.to_dtype(cos.dtype())?;
    if margin == 0.0 {
        return Ok((cos * scale)?);
    }
    let cos = cos.clamp(-1.0 + 1e-7, 1.0 - 1e-7)?;
    let sin = cos.sqr()?.affine(-1.0, 1.0)?.sqrt()?;
    let phi = ((&cos * margin.cos())? - (&sin * margin.sin())?)?;
    let fallback = (&cos - margin * margin.sin())?;
    let threshold = (std::f64::consts::PI - margin).cos();
    let use_phi = cos.gt(threshold)?;
    let target = use_phi.where_cond(&phi, &fallback)?;
    let mixed = ((onehot.clone() * target)? + (onehot.affine(-1.0, 1.0)? * cos)?)?;
    Ok((mixed * scale)?)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(labels.to_vec(), (labels.len(), 1), &Device::Cpu)?;
    Ok(logp.gather(&idx, 1)?.neg()?.mean_all()?)
}

/// Per-image training labels: index of the identity in `classes`.
pub fn train_embedder(
    model: &mut IdentityEmbedder,
    images: &[(RgbImage, u32)],
    tc: &TrainConfig,
    seed: u64,
    log: &mut nn::TrainLog,
) -> Result<f64> {
    use candle_nn::Optimizer;
    if images.is_empty() {
        return Err(Error::invalid("identity training set is empty"));
    }
    tc.validate("train-id")?;
    let k = model.n_classes();
    if let Some(bad) = images.iter().map(|(_, l)| *l as usize).find(|&l| l >= k) {
        return Err(Error::invalid(format!(
            "identity label {bad} does not fit the {k}-class classifier; class count must match the manifest identities"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = nn::adam(model.params.all_vars(), tc.lr)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut acc_window = Vec::new();
    for step in 0..tc.steps {
        let mut batch = Vec::new();
        let mut labels = Vec::new();
        while batch.len() < tc.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (img, l) = &images[order[cursor]];
            // brightness jitter of ±10% so the embedding ignores exposure
            let gain: f32 = rng.random_range(0.9..1.1);
            let mut img = img.clone();
            img.data.iter_mut().for_each(|v| *v = (*v * gain).clamp(0.0, 1.0));
            batch.push(img);
            labels.push(*l);
            cursor += 1;
        }
        let x = nn::images_to_tensor(&batch.iter().collect::<Vec<_>>(), model.params.dtype())?;
        let (loss, acc) = model.margin_loss(&x, &labels)?;
        let v = nn::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("identity loss became {v} at step {step}")));
        }
        opt.backward_step(&loss)?;
        acc_window.push(acc);
        if step % tc.log_every.max(1) == 0 || step + 1 == tc.steps {
            log.record(serde_json::json!({ "step": step, "loss": v, "accuracy": acc, "lr": tc.lr }))?;
        }
    }
    model.trained = true;
    let tail = &acc_window[acc_window.len().saturating_sub(20)..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// `AdaIN(f, f_id) = h_s ⊙ IN(f) + h_b` with `[h_s − 1, h_b] = W·SiLU(f_id) + b`.
/// Weights start at zero, so a fresh layer is plain instance norm.
#[derive(Debug, Clone)]
pub struct AdaIn {
    mlp: Linear,
    channels: usize,
}

/// Scale and bias produced for one batch.
#[derive(Debug, Clone)]
pub struct AdaInParams {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl AdaIn {
    pub fn new(p: &ParamPath, id_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            mlp: Linear::with_init(p, id_dim, 2 * channels, Init::Zeros, Init::Zeros)?,
            channels,
        })
    }

    /// `B × D_id` → `(h_s, h_b)`, each `B × C`.
    pub fn params(&self, f_id: &Tensor) -> Result<AdaInParams> {
        let raw = self.mlp.forward(&f_id.silu()?)?;
        Ok(AdaInParams {
            scale: (raw.narrow(1, 0, self.channels)? + 1.0)?,
            bias: raw.narrow(1, self.channels, self.channels)?,
        })
    }

    pub fn forward(&self, f: &Tensor, f_id: &Tensor) -> Result<Tensor> {
        let c = f.dim(1)?;
        if c != self.channels {
            return Err(Error::dim("AdaIN channels", self.channels, c));
        }
        adain_apply(f, &self.params(f_id)?)
    }
}

pub fn adain_apply(f: &Tensor, p: &AdaInParams) -> Result<Tensor> {
    let n = instance_norm(f, IN_EPS)?;
    let s = p.scale.unsqueeze(2)?.unsqueeze(3)?;
    let b = p.bias.unsqueeze(2)?.unsqueeze(3)?;
    Ok(n.broadcast_mul(&s)?.broadcast_add(&b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> IdConfig {
        IdConfig {
            image_size: 16,
            base_channels: 4,
            embed_dim: 8,
            margin: 0.2,
            scale: 16.0,
        }
    }

    fn batch(seed: u64, n: usize) -> Tensor {
        nn::randn(&mut ChaCha8Rng::seed_from_u64(seed), &[n, 3, 16, 16], DType::F64)
            .unwrap()
            .affine(0.2, 0.5)
            .unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_gated_on_training() {
        let mut m = IdentityEmbedder::new(&tiny(), 3, 0, DType::F64).unwrap();
        assert!(m.embed(&batch(0, 2)).is_err());
        m.trained = true;
        let e = m.embed(&batch(0, 2)).unwrap();
        for row in e.to_vec2::<f64>().unwrap() {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
        }
        let again = m.embed(&batch(0, 2)).unwrap();
        assert_eq!(e.to_vec2::<f64>().unwrap(), again.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn zero_margin_is_plain_cosine_softmax() {
        let cos = Tensor::new(&[[0.3f64, -0.2, 0.9], [0.1, 0.5, -0.4]], &Device::Cpu).unwrap();
        let labels = [2u32, 0];
        let l0 = cross_entropy(&arc_margin_logits(&cos, &labels, 0.0, 16.0).unwrap(), &labels).unwrap();
        // oracle: softmax cross entropy written out by hand
        let rows = [[0.3f64, -0.2, 0.9], [0.1, 0.5, -0.4]];
        let mut expected = 0.0;
        for (r, &l) in rows.iter().zip(&labels) {
            let z: f64 = r.iter().map(|c| (16.0 * c).exp()).sum();
            expected += -(16.0 * r[l as usize] - z.ln());
        }
        assert!((nn::scalar(&l0).unwrap() - expected / 2.0).abs() < 1e-12);
        let lm = cross_entropy(&arc_margin_logits(&cos, &labels, 0.2, 16.0).unwrap(), &labels).unwrap();
        assert!(nn::scalar(&lm).unwrap() > nn::scalar(&l0).unwrap());
    }

    #[test]
    fn margin_logit_matches_angle_addition() {
        let cos = Tensor::new(&[[0.6f64, 0.2]], &Device::Cpu).unwrap();
        let l = arc_margin_logits(&cos, &[0], 0.3, 1.0).unwrap().to_vec2::<f64>().unwrap();
        assert!((l[0][0] - (0.6f64.acos() + 0.3).cos()).abs() < 1e-6);
        assert!((l[0][1] - 0.2).abs() < 1e-12);
        assert!(arc_margin_logits(&cos, &[5], 0.3, 1.0).is_err());
    }

    #[test]
    fn fresh_adain_is_instance_norm_and_sets_statistics() {
        let ps = ParamStore::new(0, DType::F64);
        let ada = AdaIn::new(&ps.root().pp("ada"), 8, 3).unwrap();
        let f = batch(1, 2).narrow(2, 0, 4).unwrap().narrow(3, 0, 4).unwrap();
        let f_id = l2_normalize(&nn::randn(&mut ChaCha8Rng::seed_from_u64(2), &[2, 8], DType::F64).unwrap()).unwrap();
        let out = ada.forward(&f, &f_id).unwrap();
        let reference = instance_norm(&f, IN_EPS).unwrap();
        let d = (out - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
        let wrong = Tensor::zeros((2, 5, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(ada.forward(&wrong, &f_id).is_err());

        let p = AdaInParams {
            scale: Tensor::new(&[[2.0f64, -0.5, 1.5], [1.0, 3.0, 0.25]], &Device::Cpu).unwrap(),
            bias: Tensor::new(&[[0.1f64, -1.0, 2.0], [0.0, 0.5, -0.3]], &Device::Cpu).unwrap(),
        };
        // unit-scale input so the ε in the variance is negligible
        let y = adain_apply(&(f * 5.0).unwrap(), &p).unwrap();
        let ys = y.reshape((6, 16)).unwrap().to_vec2::<f64>().unwrap();
        let s = p.scale.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = p.bias.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (k, row) in ys.iter().enumerate() {
            let m = row.iter().sum::<f64>() / 16.0;
            let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!((m - b[k]).abs() < 1e-4);
            assert!((sd - s[k].abs()).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_channel_maps_to_bias() {
        let f = Tensor::full(0.7f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let p = AdaInParams {
            scale: Tensor::new(&[[3.0f64, 1.0]], &Device::Cpu).unwrap(),
            bias: Tensor::new(&[[0.25f64, -0.5]], &Device::Cpu).unwrap(),
        };
        let y = adain_apply(&f, &p).unwrap().reshape((2, 16)).unwrap().to_vec2::<f64>().unwrap();
        // (x − mean)/sqrt(0 + ε) is exactly 0 for a constant channel
        for (row, b) in y.iter().zip([0.25, -0.5]) {
            assert!(row.iter().all(|v| (v - b).abs() < 1e-2));
        }
    }

    #[test]
    fn short_training_learns_separable_classes() {
        let mut m = IdentityEmbedder::new(&tiny(), 2, 1, DType::F32).unwrap();
        let mut images = Vec::new();
        for k in 0..8 {
            let mut img = RgbImage::new(16, 16);
            let color = if k % 2 == 0 { [0.9, 0.2, 0.2] } else { [0.1, 0.3, 0.9] };
            for i in 0..16 {
                for j in 0..16 {
                    let t = ((i + j + k) % 5) as f32 * 0.02;
                    img.set(i, j, color.map(|c: f32| c - t));
                }
            }
            images.push((img, (k % 2) as u32));
        }
        let tc = TrainConfig {
            steps: 40,
            batch_size: 8,
            lr: 1e-2,
            log_every: 10,
        };
        let acc = train_embedder(&mut m, &images, &tc, 0, &mut nn::TrainLog::new(None).unwrap()).unwrap();
        assert!(acc > 0.9, "accuracy {acc}");
        let bad = vec![(images[0].0.clone(), 7)];
        assert!(train_embedder(&mut m, &bad, &tc, 0, &mut nn::TrainLog::new(None).unwrap()).is_err());
    }
}
