//! Stage orchestration: every command of the CLI is a method here. Stage
//! outputs live under the configured checkpoint directory and carry the
//! digest of the configuration that produced them.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageDigests};
use crate::container::Container;
use crate::diffusion::{self, Conditions, Denoiser, TrainBatch};
use crate::editing::{masked_change_ratio, region_mask, Models};
use crate::error::{Error, Result};
use crate::flame::{make_toy_template_with_albedo, HeadTemplate};
use crate::identity::{train_embedder, IdentityEmbedder};
use crate::imaging::RgbImage;
use crate::latent_ae::{train_ae, AeTrainSummary, Autoencoder};
use crate::metrics::{self, Attributes, Estimator, EstimatorSummary, EvalReport};
use crate::nn::{self, TrainLog};
use crate::render::{AttributeSelection, PhysicalCoefficients};
use crate::rsc::{pretrain_rsc, RscModel};
use crate::synth::{build_dataset, compose_portrait, sample_identity, DatasetSpec, FrameAttributes, Manifest, Region, SamplePair, Split};

/// Tensors are float32 throughout training and inference.
pub const DTYPE: DType = DType::F32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Autoencoder,
    Rsc,
    Identity,
    Estimator,
    Diffusion,
}

impl StageKind {
    /// CLI command that produces this stage's checkpoint.
    pub fn command(self) -> &'static str {
        match self {
            StageKind::Autoencoder => "train-ae",
            StageKind::Rsc => "pretrain-rsc",
            StageKind::Identity => "train-id",
            StageKind::Estimator => "train-estimator",
            StageKind::Diffusion => "train-diffusion",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            StageKind::Autoencoder => "autoencoder.bin",
            StageKind::Rsc => "rsc.bin",
            StageKind::Identity => "identity.bin",
            StageKind::Estimator => "estimator.bin",
            StageKind::Diffusion => "denoiser.bin",
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            StageKind::Autoencoder => 0xA1,
            StageKind::Rsc => 0xB2,
            StageKind::Identity => 0xC3,
            StageKind::Estimator => 0xD4,
            StageKind::Diffusion => 0xE5,
        }
    }
}

/// Per-stage outcome of `train-diffusion`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSummary {
    pub steps: usize,
    /// Means over the last (up to) 100 steps.
    pub loss_ldm: f64,
    pub loss_acr: f64,
}

/// Precomputed conditioning of a set of pairs, all `N`-first.
pub struct DiffusionData {
    pub z0: Tensor,
    pub f_r: Tensor,
    pub tokens: Tensor,
    pub f_id: Option<Tensor>,
    pub m_q: Tensor,
    /// Source and query images `N × 3 × H × W`, kept when the token encoder
    /// is finetuned and tokens must be recomputed every step.
    pub images: Option<(Tensor, Tensor)>,
}

impl DiffusionData {
    pub fn len(&self) -> usize {
        self.z0.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Result<TrainBatch> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok(TrainBatch {
            z0: self.z0.index_select(&ids, 0)?,
            cond: Conditions {
                f_r: self.f_r.index_select(&ids, 0)?,
                tokens: self.tokens.index_select(&ids, 0)?,
                f_id: match &self.f_id {
                    Some(f) => Some(f.index_select(&ids, 0)?),
                    None => None,
                },
            },
            m_q: self.m_q.index_select(&ids, 0)?,
        })
    }

    /// Like `batch`, with tokens and query masks recomputed by `rsc` so
    /// gradients reach the encoder. Query masks stay detached targets.
    pub fn batch_through(&self, idx: &[usize], rsc: &RscModel) -> Result<TrainBatch> {
        let (sources, queries) = self
            .images
            .as_ref()
            .ok_or_else(|| Error::invalid("diffusion data was precomputed without images"))?;
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let mut b = self.batch(idx)?;
        b.cond.tokens = rsc.tokens(&sources.index_select(&ids, 0)?)?.tokens;
        b.m_q = rsc.tokens(&queries.index_select(&ids, 0)?)?.masks.detach();
        Ok(b)
    }
}

/// Encodes query latents, condition renders, source tokens/identity and the
/// query slot masks at latent resolution.
pub fn precompute_diffusion_data(
    template: &HeadTemplate,
    ae: &Autoencoder,
    rsc: &RscModel,
    embedder: Option<&IdentityEmbedder>,
    pairs: &[SamplePair],
    keep_images: bool,
) -> Result<DiffusionData> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to precompute"));
    }
    let s = ae.cfg.image_size;
    let (mut z0, mut f_r, mut tokens, mut f_id, mut m_q) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut src_img, mut qry_img) = (vec![], vec![]);
    for chunk in pairs.chunks(32) {
        let sources: Vec<&RgbImage> = chunk.iter().map(|p| &p.source.image).collect();
        let queries: Vec<&RgbImage> = chunk.iter().map(|p| &p.query.image).collect();
        let renders = chunk
            .iter()
            .map(|p| Ok(crate::render::render_condition(template, &p.query.coeffs, s, s)?.image))
            .collect::<Result<Vec<_>>>()?;
        // detach per chunk, or every chunk's activations stay alive until the end
        z0.push(ae.encode_images(&queries)?.detach());
        f_r.push(ae.encode_images(&renders.iter().collect::<Vec<_>>())?.detach());
        let (xs, xq) = (nn::images_to_tensor(&sources, DTYPE)?, nn::images_to_tensor(&queries, DTYPE)?);
        tokens.push(rsc.tokens(&xs)?.tokens.detach());
        m_q.push(rsc.tokens(&xq)?.masks.detach());
        if keep_images {
            src_img.push(xs);
            qry_img.push(xq);
        }
        if let Some(e) = embedder {
            f_id.push(e.embed_images(&sources)?.detach());
        }
    }
    let cat = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::cat(&v, 0)?.detach()) };
    Ok(DiffusionData {
        z0: cat(z0)?,
        f_r: cat(f_r)?,
        tokens: cat(tokens)?,
        f_id: if embedder.is_some() { Some(cat(f_id)?) } else { None },
        m_q: cat(m_q)?,
        images: if keep_images { Some((cat(src_img)?, cat(qry_img)?)) } else { None },
    })
}

/// Trains a denoiser on precomputed data. With `rsc`, the token encoder is
/// optimized jointly and tokens come from it at every step.
pub fn train_denoiser(
    model: &Denoiser,
    rsc: Option<&RscModel>,
    data: &DiffusionData,
    tc: &crate::latent_ae::TrainConfig,
    delta: f64,
    seed: u64,
    log: &mut TrainLog,
) -> Result<DiffusionSummary> {
    if data.is_empty() {
        return Err(Error::invalid("diffusion training set is empty"));
    }
    tc.validate("train-diffusion")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars = model.params.all_vars();
    if let Some(r) = rsc {
        vars.extend(r.params.all_vars());
    }
    let mut opt = nn::adam(vars, tc.lr)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let (mut ldm, mut acr) = (Vec::with_capacity(tc.steps), Vec::with_capacity(tc.steps));
    for step in 0..tc.steps {
        let mut idx = Vec::with_capacity(tc.batch_size);
        while idx.len() < tc.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = match rsc {
            Some(r) => data.batch_through(&idx, r)?,
            None => data.batch(&idx)?,
        };
        let terms = diffusion::train_step(model, &mut opt, &batch, delta, &mut rng)?;
        ldm.push(terms.ldm);
        acr.push(terms.acr);
        if step % tc.log_every.max(1) == 0 || step + 1 == tc.steps {
            log.record(serde_json::json!({
                "step": step, "loss_ldm": terms.ldm, "loss_acr": terms.acr, "lr": tc.lr,
            }))?;
        }
    }
    let tail = |v: &[f64]| {
        let t = &v[v.len().saturating_sub(100)..];
        t.iter().sum::<f64>() / t.len() as f64
    };
    Ok(DiffusionSummary {
        steps: tc.steps,
        loss_ldm: tail(&ldm),
        loss_acr: tail(&acr),
    })
}

/// Mean ‖A_cross − M_Q‖² over a data set at seeded timesteps and noise.
pub fn attention_mse(model: &Denoiser, data: &DiffusionData, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut count) = (0.0, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(16) {
        let batch = data.batch(idx)?;
        let (t, eps) = diffusion::sample_t_and_noise(model, &batch, &mut rng)?;
        let z_t = model.schedule.q_sample(&batch.z0, &t, &eps)?;
        let (_, record) = model.forward(&z_t, &t, &batch.cond)?;
        let merged = diffusion::merge_cross_attention(&record, model.cfg.latent_size)?;
        sum += nn::scalar(&diffusion::loss_acr(&merged, &batch.m_q)?)? * idx.len() as f64;
        count += idx.len();
    }
    Ok(sum / count as f64)
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub digests: StageDigests,
    produced: Vec<PathBuf>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let digests = cfg.stage_digests()?;
        Ok(Self {
            cfg,
            digests,
            produced: Vec::new(),
        })
    }

    /// Files written so far by this pipeline object.
    pub fn produced(&self) -> &[PathBuf] {
        &self.produced
    }

    fn record(&mut self, p: &Path) {
        if !self.produced.iter().any(|q| q == p) {
            self.produced.push(p.to_path_buf());
        }
    }

    pub fn stage_seed(&self, stage: StageKind) -> u64 {
        self.cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(stage.seed_offset())
    }

    pub fn checkpoint_path(&self, stage: StageKind) -> PathBuf {
        self.cfg.paths.checkpoints.join(stage.file_name())
    }

    fn digest(&self, stage: StageKind) -> &str {
        match stage {
            StageKind::Autoencoder => &self.digests.ae,
            StageKind::Rsc => &self.digests.rsc,
            StageKind::Identity => &self.digests.identity,
            StageKind::Estimator => &self.digests.estimator,
            StageKind::Diffusion => &self.digests.diffusion,
        }
    }

    /// Missing file → missing prerequisite; foreign digest → mismatch.
    pub fn check_checkpoint(&self, stage: StageKind) -> Result<PathBuf> {
        let path = self.checkpoint_path(stage);
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: stage.command().into(),
                what: path,
            });
        }
        let c = Container::read(&path)?;
        let found = c.meta("config_digest").unwrap_or("").to_string();
        let expected = self.digest(stage).to_string();
        if found != expected {
            return Err(Error::DigestMismatch { path, expected, found });
        }
        Ok(path)
    }

    fn log(&mut self, name: &str) -> Result<TrainLog> {
        std::fs::create_dir_all(&self.cfg.paths.checkpoints)?;
        let path = self.cfg.paths.checkpoints.join(format!("{name}.log.jsonl"));
        self.record(&path);
        TrainLog::new(Some(&path))
    }

    pub fn build_template(&self) -> Result<HeadTemplate> {
        let s = &self.cfg.synth;
        make_toy_template_with_albedo(self.cfg.seed, s.template_vertices, s.shape_dim, s.expr_dim, s.albedo_dim)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_identities: self.cfg.synth.n_identities,
            pairs_per_identity: self.cfg.synth.pairs_per_identity,
            split_seed: self.cfg.synth.split_seed,
            seed: self.cfg.seed,
            height: self.cfg.image_size,
            width: self.cfg.image_size,
        }
    }

    pub fn synth_data(&mut self) -> Result<Manifest> {
        let template = self.build_template()?;
        let m = build_dataset(&self.cfg.paths.dataset, &template, &self.dataset_spec())?;
        let root = self.cfg.paths.dataset.clone();
        self.record(&root.join(crate::synth::MANIFEST_FILE));
        self.record(&root.join(crate::synth::TEMPLATE_FILE));
        for r in &m.records {
            for f in [&r.paths.source, &r.paths.query, &r.paths.record] {
                self.record(&root.join(f));
            }
        }
        Ok(m)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::read(&self.cfg.paths.dataset)
    }

    fn train_pairs(&self) -> Result<Vec<SamplePair>> {
        self.manifest()?.load_split(Split::Train)
    }

    fn portraits(pairs: &[SamplePair]) -> Vec<RgbImage> {
        pairs.iter().flat_map(|p| [p.source.image.clone(), p.query.image.clone()]).collect()
    }

    pub fn train_ae(&mut self) -> Result<AeTrainSummary> {
        let images = Self::portraits(&self.train_pairs()?);
        let seed = self.stage_seed(StageKind::Autoencoder);
        let mut ae = Autoencoder::new(&self.cfg.ae.model, seed, DTYPE)?;
        let mut log = self.log("autoencoder")?;
        let summary = train_ae(&mut ae, &images, &self.cfg.ae.train, seed, &mut log)?;
        let path = self.checkpoint_path(StageKind::Autoencoder);
        ae.save(&path, self.digest(StageKind::Autoencoder))?;
        self.record(&path);
        Ok(summary)
    }

    pub fn pretrain_rsc(&mut self) -> Result<f64> {
        let images = Self::portraits(&self.train_pairs()?);
        let seed = self.stage_seed(StageKind::Rsc);
        let model = RscModel::new(&self.cfg.rsc.model, seed, DTYPE)?;
        let mut log = self.log("rsc")?;
        let losses = pretrain_rsc(&model, &images, &self.cfg.rsc.train, seed, &mut log)?;
        let path = self.checkpoint_path(StageKind::Rsc);
        model.save(&path, self.digest(StageKind::Rsc))?;
        self.record(&path);
        Ok(*losses.last().expect("at least one step"))
    }

    /// Returns the tail training accuracy.
    pub fn train_id(&mut self) -> Result<f64> {
        let m = self.manifest()?;
        let ids = m.identities(Split::Train);
        let pairs = m.load_split(Split::Train)?;
        let labeled: Vec<(RgbImage, u32)> = pairs
            .iter()
            .flat_map(|p| {
                let l = ids.binary_search(&p.identity_id).expect("train identity") as u32;
                [(p.source.image.clone(), l), (p.query.image.clone(), l)]
            })
            .collect();
        let seed = self.stage_seed(StageKind::Identity);
        let mut model = IdentityEmbedder::new(&self.cfg.identity.model, ids.len(), seed, DTYPE)?;
        let mut log = self.log("identity")?;
        let acc = train_embedder(&mut model, &labeled, &self.cfg.identity.train, seed, &mut log)?;
        let path = self.checkpoint_path(StageKind::Identity);
        model.save(&path, self.digest(StageKind::Identity))?;
        self.record(&path);
        Ok(acc)
    }

    pub fn train_estimator(&mut self) -> Result<EstimatorSummary> {
        let m = self.manifest()?;
        let train = m.load_split(Split::Train)?;
        let test = m.load_split(Split::Test)?;
        let labeled = |pairs: &[SamplePair]| -> Vec<(RgbImage, Attributes)> {
            pairs
                .iter()
                .flat_map(|p| {
                    [
                        (p.source.image.clone(), Attributes::from_coefficients(&p.source.coeffs)),
                        (p.query.image.clone(), Attributes::from_coefficients(&p.query.coeffs)),
                    ]
                })
                .collect()
        };
        let (tr, va) = (labeled(&train), labeled(&test[..test.len().min(200)]));
        let tr_refs: Vec<(&RgbImage, Attributes)> = tr.iter().map(|(i, a)| (i, a.clone())).collect();
        let va_refs: Vec<(&RgbImage, Attributes)> = va.iter().map(|(i, a)| (i, a.clone())).collect();
        let seed = self.stage_seed(StageKind::Estimator);
        let template = m.template()?;
        let mut est = Estimator::new(&self.cfg.estimator.model, template.shape_dim(), template.expr_dim(), seed, DTYPE)?;
        let mut log = self.log("estimator")?;
        let summary = metrics::train_estimator(
            &mut est,
            &tr_refs,
            &va_refs,
            &self.cfg.estimator.train,
            seed,
            &mut log,
        )?;
        let path = self.checkpoint_path(StageKind::Estimator);
        est.save(&path, self.digest(StageKind::Estimator))?;
        self.record(&path);
        let summary_path = self.cfg.paths.checkpoints.join("estimator.summary.json");
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
        self.record(&summary_path);
        Ok(summary)
    }

    pub fn load_ae(&self) -> Result<Autoencoder> {
        Autoencoder::load(self.check_checkpoint(StageKind::Autoencoder)?, DTYPE)
    }

    pub fn load_rsc(&self) -> Result<RscModel> {
        RscModel::load(self.check_checkpoint(StageKind::Rsc)?, DTYPE)
    }

    /// Token encoder finetuned along with the denoiser.
    pub fn joint_rsc_path(&self) -> PathBuf {
        self.cfg.paths.checkpoints.join("rsc_joint.bin")
    }

    /// The token encoder the denoiser was trained against: the jointly
    /// finetuned one when finetuning is on, the pretrained one otherwise.
    pub fn load_editing_rsc(&self) -> Result<RscModel> {
        if !self.cfg.diffusion.finetune_rsc {
            return self.load_rsc();
        }
        self.check_checkpoint(StageKind::Diffusion)?;
        let path = self.joint_rsc_path();
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: StageKind::Diffusion.command().into(),
                what: path,
            });
        }
        let found = Container::read(&path)?.meta("config_digest").unwrap_or("").to_string();
        let expected = self.digest(StageKind::Diffusion).to_string();
        if found != expected {
            return Err(Error::DigestMismatch { path, expected, found });
        }
        RscModel::load(path, DTYPE)
    }

    pub fn load_embedder(&self) -> Result<IdentityEmbedder> {
        IdentityEmbedder::load(self.check_checkpoint(StageKind::Identity)?, DTYPE)
    }

    pub fn load_estimator(&self) -> Result<Estimator> {
        Estimator::load(self.check_checkpoint(StageKind::Estimator)?, DTYPE)
    }

    pub fn load_denoiser(&self) -> Result<Denoiser> {
        Denoiser::load(self.check_checkpoint(StageKind::Diffusion)?, DTYPE)
    }

    /// Conditioning data for a split, from the frozen upstream models.
    pub fn diffusion_data(&self, split: Split, limit: Option<usize>) -> Result<DiffusionData> {
        let m = self.manifest()?;
        let (ae, rsc) = (self.load_ae()?, self.load_rsc()?);
        let embedder = if self.cfg.diffusion.model.use_identity {
            Some(self.load_embedder()?)
        } else {
            None
        };
        let mut records = m.split(split);
        if let Some(n) = limit {
            records.truncate(n);
        }
        let pairs = records.into_iter().map(|r| m.load_pair(r)).collect::<Result<Vec<_>>>()?;
        precompute_diffusion_data(&m.template()?, &ae, &rsc, embedder.as_ref(), &pairs, self.cfg.diffusion.finetune_rsc)
    }

    pub fn train_diffusion(&mut self) -> Result<DiffusionSummary> {
        let data = self.diffusion_data(Split::Train, None)?;
        let seed = self.stage_seed(StageKind::Diffusion);
        let d = self.cfg.diffusion.clone();
        let model = Denoiser::new(&d.model, &d.schedule, seed, DTYPE)?;
        let rsc = if d.finetune_rsc { Some(self.load_rsc()?) } else { None };
        let mut log = self.log("denoiser")?;
        let summary = train_denoiser(&model, rsc.as_ref(), &data, &d.train, d.delta, seed, &mut log)?;
        let path = self.checkpoint_path(StageKind::Diffusion);
        model.save(&path, self.digest(StageKind::Diffusion), &d.schedule)?;
        self.record(&path);
        if let Some(r) = rsc {
            let joint = self.joint_rsc_path();
            r.save(&joint, self.digest(StageKind::Diffusion))?;
            self.record(&joint);
        }
        Ok(summary)
    }

    pub fn load_models(&self) -> Result<Models> {
        Ok(Models {
            template: self.manifest()?.template()?,
            ae: self.load_ae()?,
            rsc: self.load_editing_rsc()?,
            embedder: self.load_embedder()?,
            denoiser: self.load_denoiser()?,
            sample_steps: self.cfg.diffusion.sample_steps,
        })
    }

    /// Cross-identity evaluation over `n` held-out source/query pairs.
    pub fn eval(&mut self, n: usize, seed: u64) -> Result<EvalReport> {
        let models = self.load_models()?;
        let estimator = self.load_estimator()?;
        let m = self.manifest()?;
        let report = eval_suite(&models, &estimator, &m, n, seed, &self.cfg.eval_digest()?)?;
        let out = &self.cfg.paths.output;
        std::fs::create_dir_all(out)?;
        let (txt, json) = (out.join("eval_report.txt"), out.join("eval_report.json"));
        std::fs::write(&txt, report.to_text())?;
        std::fs::write(&json, serde_json::to_string_pretty(&report)?)?;
        self.record(&txt);
        self.record(&json);
        Ok(report)
    }
}

/// Deterministic cross-identity (source, query) choices from the test split.
pub fn cross_identity_pairs(test: &[SamplePair], n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let ids: std::collections::BTreeSet<u64> = test.iter().map(|p| p.identity_id).collect();
    if ids.len() < 2 {
        return Err(Error::invalid("cross-identity evaluation needs at least two test identities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let s = k % test.len();
        loop {
            let q = rng.random_range(0..test.len());
            if test[q].identity_id != test[s].identity_id {
                out.push((s, q));
                break;
            }
        }
    }
    Ok(out)
}

/// Ground-truth portrait of the source identity under new frame attributes.
pub fn ground_truth_target(template: &HeadTemplate, identity_id: u64, coeffs: &PhysicalCoefficients, size: usize) -> Result<crate::synth::Portrait> {
    let identity = sample_identity(template, identity_id);
    compose_portrait(template, &identity, &FrameAttributes::from_coefficients(coeffs), size, size)
}

const EVAL_BATCH: usize = 16;

/// All metrics of the evaluation report. Full edits (pose, expression and
/// lighting from the query) drive APD/AED/ALD, CSIM and the FID proxy;
/// pose-only edits drive the background-change measure.
pub fn eval_suite(models: &Models, estimator: &Estimator, manifest: &Manifest, n: usize, seed: u64, digest: &str) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::invalid("evaluation needs n ≥ 1"));
    }
    let test = manifest.load_split(Split::Test)?;
    let chosen = cross_identity_pairs(&test, n, seed)?;
    let size = models.image_size();

    let mut full_out = Vec::with_capacity(n);
    let mut full_coeffs = Vec::with_capacity(n);
    let mut pose_out = Vec::with_capacity(n);
    let mut pose_coeffs = Vec::with_capacity(n);
    for (b, chunk) in chosen.chunks(EVAL_BATCH).enumerate() {
        let sources: Vec<&RgbImage> = chunk.iter().map(|&(s, _)| &test[s].source.image).collect();
        let full: Vec<PhysicalCoefficients> = chunk
            .iter()
            .map(|&(s, q)| test[s].source.coeffs.recombine(&test[q].query.coeffs, AttributeSelection::ALL))
            .collect();
        let pose: Vec<PhysicalCoefficients> = chunk
            .iter()
            .map(|&(s, q)| test[s].source.coeffs.recombine(&test[q].query.coeffs, AttributeSelection::POSE))
            .collect();
        let batch_seed = seed.wrapping_add(b as u64);
        full_out.extend(models.edit(&sources, &full.iter().collect::<Vec<_>>(), batch_seed)?.outputs);
        pose_out.extend(models.edit(&sources, &pose.iter().collect::<Vec<_>>(), batch_seed)?.outputs);
        full_coeffs.extend(full);
        pose_coeffs.extend(pose);
    }
    let sources: Vec<&RgbImage> = chosen.iter().map(|&(s, _)| &test[s].source.image).collect();
    let outs: Vec<&RgbImage> = full_out.iter().collect();

    let (apd, aed, ald) = metrics::attribute_distances(&outs, &full_coeffs.iter().collect::<Vec<_>>(), estimator)?;
    let csim = metrics::csim(&outs, &sources, &models.embedder)?;
    let targets = chosen
        .iter()
        .zip(&full_coeffs)
        .map(|(&(s, _), c)| Ok(ground_truth_target(&models.template, test[s].identity_id, c, size)?.image))
        .collect::<Result<Vec<_>>>()?;
    let fid_proxy = metrics::fid_proxy(&outs, &targets.iter().collect::<Vec<_>>(), &models.embedder)?;

    // slot-mask quality on the sources, per image for the weighting below
    let mut per_image_miou = Vec::with_capacity(n);
    for chunk in chosen.chunks(EVAL_BATCH) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|&(s, _)| &test[s].source.image).collect();
        let masks = models.rsc.slot_masks(&nn::images_to_tensor(&imgs, DTYPE)?)?;
        for (i, &(s, _)) in chunk.iter().enumerate() {
            per_image_miou.push(metrics::miou(&masks.narrow(0, i, 1)?, &[&test[s].source.mask])?);
        }
    }
    let miou = per_image_miou.iter().sum::<f64>() / n as f64;

    let (mut weighted, mut weights) = (0.0, 0.0);
    let mut plain = 0.0;
    for (k, &(s, _)) in chosen.iter().enumerate() {
        let target = ground_truth_target(&models.template, test[s].identity_id, &pose_coeffs[k], size)?;
        let static_bg: Vec<bool> = region_mask(&test[s].source.mask, Region::Background)
            .into_iter()
            .zip(region_mask(&target.mask, Region::Background))
            .map(|(a, b)| a && b)
            .collect();
        let change = mean_change_inside(&pose_out[k], &test[s].source.image, &static_bg);
        weighted += per_image_miou[k] * change;
        weights += per_image_miou[k];
        plain += change;
    }
    let background_change = if weights > 0.0 { weighted / weights } else { plain / n as f64 };

    let held_out: Vec<SamplePair> = test.iter().take(n).cloned().collect();
    let data = precompute_diffusion_data(
        &models.template,
        &models.ae,
        &models.rsc,
        models.denoiser.cfg.use_identity.then_some(&models.embedder),
        &held_out,
        false,
    )?;
    let attn_mse = attention_mse(&models.denoiser, &data, seed)?;

    Ok(EvalReport {
        apd,
        aed,
        ald,
        csim,
        miou,
        fid_proxy,
        attn_mse,
        background_change,
        n_samples: n,
        config_digest: digest.to_string(),
    })
}

/// Mean absolute per-pixel change inside a mask (0 for an empty mask).
pub fn mean_change_inside(a: &RgbImage, b: &RgbImage, mask: &[bool]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (k, &m) in mask.iter().enumerate() {
        if m {
            let (pa, pb) = (a.get(k / a.width, k % a.width), b.get(k / a.width, k % a.width));
            sum += (0..3).map(|c| (pa[c] - pb[c]).abs() as f64).sum::<f64>() / 3.0;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Fraction of swap edits whose changed-pixel mass lies at least
/// `min_inside` within the source's ground-truth region.
pub fn token_swap_concentration(
    models: &Models,
    manifest: &Manifest,
    region: Region,
    n: usize,
    seed: u64,
    threshold: f64,
    min_inside: f64,
) -> Result<(f64, Vec<Option<f64>>)> {
    let test = manifest.load_split(Split::Test)?;
    let chosen = cross_identity_pairs(&test, n, seed)?;
    let mut ratios = Vec::with_capacity(n);
    for (k, &(s, d)) in chosen.iter().enumerate() {
        let src = &test[s].source;
        let donor = &test[d].source;
        let sample_seed = seed.wrapping_add(k as u64);
        let base = models.edit(&[&src.image], &[&src.coeffs], sample_seed)?.outputs.remove(0);
        let swapped = models.swap_edit((&src.image, &src.mask), (&donor.image, &donor.mask), &src.coeffs, &[region], sample_seed)?;
        ratios.push(masked_change_ratio(&base, &swapped, &region_mask(&src.mask, region), threshold)?);
    }
    let hits = ratios.iter().filter(|r| r.is_some_and(|v| v >= min_inside)).count();
    Ok((hits as f64 / n as f64, ratios))
}

/// Mean L1 between self-edits (query = source coefficients) and sources.
pub fn self_edit_l1(models: &Models, manifest: &Manifest, n: usize, seed: u64) -> Result<f64> {
    let test = manifest.load_split(Split::Test)?;
    let take = n.min(test.len());
    let mut sum = 0.0;
    for (b, chunk) in test[..take].chunks(EVAL_BATCH).enumerate() {
        let sources: Vec<&RgbImage> = chunk.iter().map(|p| &p.source.image).collect();
        let coeffs: Vec<&PhysicalCoefficients> = chunk.iter().map(|p| &p.source.coeffs).collect();
        let out = models.edit(&sources, &coeffs, seed.wrapping_add(b as u64))?.outputs;
        for (o, s) in out.iter().zip(&sources) {
            sum += o.mean_abs_diff(s)?;
        }
    }
    Ok(sum / take as f64)
}
