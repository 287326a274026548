//! Evaluation against synthetic ground truth: a coefficient regressor for
//! pose/expression/lighting distances, identity similarity, slot-mask mIoU
//! and a Fréchet distance over embedder features.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::flame::POSE_DIM;
use crate::identity::IdentityEmbedder;
use crate::imaging::RgbImage;
use crate::latent_ae::TrainConfig;
use crate::nn::{self, Conv2d, GroupNorm, Linear, ParamStore, ResBlock};
use crate::render::{PhysicalCoefficients, SH_COEFFS};

/// Minimum-cost assignment of rows to distinct columns (`rows ≤ cols`
/// after an internal transpose). Returns, per row, its column; for a wide
/// matrix every row is assigned, for a tall one only `cols` rows are.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = hungarian(&t);
        let mut rows = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                rows[i] = Some(j);
            }
        }
        return rows;
    }
    // potentials formulation, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Intersection-over-union of two label maps for one label pair.
fn iou(pred: &[usize], gt: &[u8], slot: usize, class: u8) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == slot, g == class);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Hungarian-matched mIoU of one image: slots are matched one-to-one to the
/// ground-truth classes present; a class left without a slot scores 0.
pub fn matched_miou(pred: &[usize], n_slots: usize, gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("label map length", gt.len(), pred.len()));
    }
    let mut classes: Vec<u8> = gt.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::invalid("empty ground-truth mask"));
    }
    let ious: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| (0..n_slots).map(|s| iou(pred, gt, s, c)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = ious.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let assign = hungarian(&cost);
    let total: f64 = assign
        .iter()
        .enumerate()
        .map(|(ci, s)| s.map(|s| ious[ci][s]).unwrap_or(0.0))
        .sum();
    Ok(total / classes.len() as f64)
}

/// Per-pixel argmax over a `N × H × W` stack of soft masks.
pub fn argmax_labels(masks: &Tensor) -> Result<Vec<usize>> {
    let idx = masks.argmax(0)?.flatten_all()?.to_vec1::<u32>()?;
    Ok(idx.into_iter().map(|i| i as usize).collect())
}

/// Mean matched mIoU over a batch of soft masks `B × N × H × W`.
pub fn miou(masks: &Tensor, gt: &[&[u8]]) -> Result<f64> {
    let (b, n, _, _) = masks.dims4()?;
    if b != gt.len() {
        return Err(Error::dim("ground-truth masks", b, gt.len()));
    }
    let mut sum = 0.0;
    for (i, g) in gt.iter().enumerate() {
        sum += matched_miou(&argmax_labels(&masks.get(i)?)?, n, g)?;
    }
    Ok(sum / b as f64)
}

/// Regressed attribute blocks of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Attributes {
    pub shape: Vec<f64>,
    pub pose: Vec<f64>,
    pub expr: Vec<f64>,
    pub light: Vec<f64>,
}

impl Attributes {
    pub fn from_coefficients(c: &PhysicalCoefficients) -> Self {
        Self {
            shape: c.shape.0.clone(),
            pose: c.pose.values().to_vec(),
            expr: c.expr.0.clone(),
            light: c.light.to_flat().to_vec(),
        }
    }

    fn flat(&self) -> Vec<f64> {
        [&self.shape[..], &self.pose, &self.expr, &self.light].concat()
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean per-sample L2 distance of the pose, expression and lighting blocks.
pub fn block_distances(estimated: &[Attributes], truth: &[Attributes]) -> Result<(f64, f64, f64)> {
    if estimated.len() != truth.len() {
        return Err(Error::dim("attribute lists", truth.len(), estimated.len()));
    }
    if estimated.is_empty() {
        return Err(Error::invalid("no samples to compare"));
    }
    let n = estimated.len() as f64;
    let mut d = (0.0, 0.0, 0.0);
    for (e, t) in estimated.iter().zip(truth) {
        d.0 += l2(&e.pose, &t.pose);
        d.1 += l2(&e.expr, &t.expr);
        d.2 += l2(&e.light, &t.light);
    }
    Ok((d.0 / n, d.1 / n, d.2 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub image_size: usize,
    pub base_channels: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
        }
    }
}

/// Small CNN regressing standardized (β, ρ, ψ, l).
pub struct Estimator {
    pub cfg: EstimatorConfig,
    pub params: ParamStore,
    pub shape_dim: usize,
    pub expr_dim: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    stem: Conv2d,
    stages: Vec<(Conv2d, ResBlock)>,
    norm: GroupNorm,
    hidden: Linear,
    head: Linear,
}

pub const ESTIMATOR_KIND: &str = "estimator";

impl Estimator {
    pub fn new(cfg: &EstimatorConfig, shape_dim: usize, expr_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        if cfg.image_size % 16 != 0 || cfg.image_size == 0 || cfg.base_channels == 0 {
            return Err(Error::invalid("estimator image size must be a positive multiple of 16"));
        }
        let params = ParamStore::new(seed, dtype);
        let root = params.root();
        let c = cfg.base_channels;
        let widths = [c, c, 2 * c, 2 * c, 4 * c];
        let stages = (0..4)
            .map(|l| {
                let p = root.pp(format!("stage{l}"));
                Ok((
                    Conv2d::new(&p.pp("down"), widths[l], widths[l + 1], 3, 2)?,
                    ResBlock::new(&p.pp("res"), widths[l + 1], widths[l + 1])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let side = cfg.image_size / 16;
        let out = shape_dim + POSE_DIM + expr_dim + 3 * SH_COEFFS;
        Ok(Self {
            cfg: cfg.clone(),
            shape_dim,
            expr_dim,
            mean: vec![0.0; out],
            std: vec![1.0; out],
            stem: Conv2d::new(&root.pp("stem"), 3, c, 3, 1)?,
            stages,
            norm: GroupNorm::new(&root.pp("norm"), 4 * c)?,
            hidden: Linear::new(&root.pp("hidden"), 4 * c * side * side, 256)?,
            head: Linear::new(&root.pp("head"), 256, out)?,
            params,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardized outputs `B × out_dim`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(&x.affine(2.0, -1.0)?)?;
        for (down, res) in &self.stages {
            h = res.forward(&down.forward(&h)?)?;
        }
        let h = self.norm.forward(&h)?.silu()?.flatten_from(1)?;
        self.head.forward(&self.hidden.forward(&h)?.silu()?)
    }

    fn split(&self, v: &[f64]) -> Attributes {
        let (s, p, e) = (self.shape_dim, POSE_DIM, self.expr_dim);
        Attributes {
            shape: v[..s].to_vec(),
            pose: v[s..s + p].to_vec(),
            expr: v[s + p..s + p + e].to_vec(),
            light: v[s + p + e..].to_vec(),
        }
    }

    pub fn predict(&self, images: &[&RgbImage]) -> Result<Vec<Attributes>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let y = self.forward(&nn::images_to_tensor(chunk, self.params.dtype())?)?;
            for row in y.to_dtype(DType::F64)?.to_vec2::<f64>()? {
                let v: Vec<f64> = row.iter().enumerate().map(|(k, z)| z * self.std[k] + self.mean[k]).collect();
                out.push(self.split(&v));
            }
        }
        Ok(out)
    }

    fn standardized_targets(&self, targets: &[&Attributes]) -> Result<Tensor> {
        let n = self.out_dim();
        let mut v = Vec::with_capacity(targets.len() * n);
        for t in targets {
            let f = t.flat();
            if f.len() != n {
                return Err(Error::dim("estimator target", n, f.len()));
            }
            v.extend(f.iter().enumerate().map(|(k, x)| (x - self.mean[k]) / self.std[k]));
        }
        Ok(Tensor::from_vec(v, (targets.len(), n), &Device::Cpu)?.to_dtype(self.params.dtype())?)
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: &str) -> Result<()> {
        let mut c = Container::new(ESTIMATOR_KIND);
        c.set_meta("config_digest", digest);
        c.set_meta("config", serde_json::to_string(&self.cfg)?);
        c.set_meta("shape_dim", self.shape_dim.to_string());
        c.set_meta("expr_dim", self.expr_dim.to_string());
        c.put_f64("target.mean", &[self.mean.len()], &self.mean)?;
        c.put_f64("target.std", &[self.std.len()], &self.std)?;
        self.params.save_into(&mut c, "param.")?;
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let c = Container::read_kind(path.as_ref(), ESTIMATOR_KIND)?;
        let cfg: EstimatorConfig = serde_json::from_str(c.meta("config").unwrap_or("{}"))?;
        let dim = |k: &str| -> Result<usize> {
            c.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Container(format!("estimator checkpoint lacks {k}")))
        };
        let mut m = Self::new(&cfg, dim("shape_dim")?, dim("expr_dim")?, 0, dtype)?;
        m.mean = c.get_f64_vec("target.mean")?;
        m.std = c.get_f64_vec("target.std")?;
        m.params.load_from(&c, "param.")?;
        Ok(m)
    }
}

/// Validation error per attribute block, and the spread of the pose prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub final_loss: f64,
    pub val_shape: f64,
    pub val_pose: f64,
    pub val_expr: f64,
    pub val_light: f64,
    /// Root-mean-square distance of a training pose from the mean pose.
    pub pose_spread: f64,
}

pub fn train_estimator(
    model: &mut Estimator,
    train: &[(&RgbImage, Attributes)],
    val: &[(&RgbImage, Attributes)],
    tc: &TrainConfig,
    seed: u64,
    log: &mut nn::TrainLog,
) -> Result<EstimatorSummary> {
    use candle_nn::Optimizer;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("estimator needs non-empty training and validation sets"));
    }
    tc.validate("train-estimator")?;
    let n = model.out_dim();
    let flats: Vec<Vec<f64>> = train.iter().map(|(_, a)| a.flat()).collect();
    if let Some(f) = flats.iter().find(|f| f.len() != n) {
        return Err(Error::dim("estimator target", n, f.len()));
    }
    let count = flats.len() as f64;
    model.mean = (0..n).map(|k| flats.iter().map(|f| f[k]).sum::<f64>() / count).collect();
    model.std = (0..n)
        .map(|k| {
            let m = model.mean[k];
            (flats.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / count).sqrt().max(1e-3)
        })
        .collect();
    let mean_pose = &model.mean[model.shape_dim..model.shape_dim + POSE_DIM];
    let pose_spread =
        (train.iter().map(|(_, a)| l2(&a.pose, mean_pose).powi(2)).sum::<f64>() / count).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = nn::adam(model.params.all_vars(), tc.lr)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut last = f64::NAN;
    for step in 0..tc.steps {
        let mut idx = Vec::with_capacity(tc.batch_size);
        while idx.len() < tc.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<&RgbImage> = idx.iter().map(|&i| train[i].0).collect();
        let targets: Vec<&Attributes> = idx.iter().map(|&i| &train[i].1).collect();
        let y = model.standardized_targets(&targets)?;
        let loss = nn::mse(&model.forward(&nn::images_to_tensor(&images, model.params.dtype())?)?, &y)?;
        last = nn::scalar(&loss)?;
        if !last.is_finite() {
            return Err(Error::Numerical(format!("estimator loss became {last} at step {step}")));
        }
        opt.backward_step(&loss)?;
        if step % tc.log_every.max(1) == 0 || step + 1 == tc.steps {
            log.record(serde_json::json!({"step": step, "loss": last, "lr": tc.lr}))?;
        }
    }

    let images: Vec<&RgbImage> = val.iter().map(|(i, _)| *i).collect();
    let est = model.predict(&images)?;
    let truth: Vec<Attributes> = val.iter().map(|(_, a)| a.clone()).collect();
    let (val_pose, val_expr, val_light) = block_distances(&est, &truth)?;
    let val_shape = est.iter().zip(&truth).map(|(e, t)| l2(&e.shape, &t.shape)).sum::<f64>() / est.len() as f64;
    Ok(EstimatorSummary {
        final_loss: last,
        val_shape,
        val_pose,
        val_expr,
        val_light,
        pose_spread,
    })
}

/// (APD, AED, ALD) of edited outputs against their query coefficients.
pub fn attribute_distances(
    outputs: &[&RgbImage],
    query: &[&PhysicalCoefficients],
    estimator: &Estimator,
) -> Result<(f64, f64, f64)> {
    if outputs.len() != query.len() {
        return Err(Error::dim("outputs vs query coefficients", query.len(), outputs.len()));
    }
    let est = estimator.predict(outputs)?;
    let truth: Vec<Attributes> = query.iter().map(|c| Attributes::from_coefficients(c)).collect();
    block_distances(&est, &truth)
}

/// Mean cosine similarity between identity embeddings of outputs and sources.
pub fn csim(outputs: &[&RgbImage], sources: &[&RgbImage], embedder: &IdentityEmbedder) -> Result<f64> {
    if outputs.len() != sources.len() || outputs.is_empty() {
        return Err(Error::dim("outputs vs sources", sources.len(), outputs.len()));
    }
    let mut sum = 0.0;
    for (o, s) in outputs.chunks(32).zip(sources.chunks(32)) {
        let eo = embedder.embed_images(o)?;
        let es = embedder.embed_images(s)?;
        let cos = (eo * es)?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        sum += cos.iter().sum::<f64>();
    }
    Ok((sum / outputs.len() as f64).clamp(-1.0, 1.0))
}

fn feature_matrix(images: &[&RgbImage], embedder: &IdentityEmbedder) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let f = embedder.features(&nn::images_to_tensor(chunk, embedder.params.dtype())?)?;
        rows.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten()))
}

fn gaussian_fit(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n - 1.0).max(1.0);
    (mean, centered.transpose() * &centered / denom)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets, with `1e-6`
/// added to each covariance diagonal.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() || a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("Fréchet distance needs two sets of at least 2 samples with equal width"));
    }
    let (m1, c1) = gaussian_fit(a);
    let (m2, c2) = gaussian_fit(b);
    let eye = DMatrix::<f64>::identity(a.ncols(), a.ncols()) * 1e-6;
    let (c1, c2) = (c1 + &eye, c2 + &eye);
    let s1 = psd_sqrt(&c1);
    let cross = psd_sqrt(&(&s1 * &c2 * &s1));
    let d = (m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Fréchet distance over penultimate identity-embedder features. A proxy,
/// not comparable with Inception-based FID.
pub fn fid_proxy(outputs: &[&RgbImage], references: &[&RgbImage], embedder: &IdentityEmbedder) -> Result<f64> {
    frechet_distance(&feature_matrix(outputs, embedder)?, &feature_matrix(references, embedder)?)
}

/// Aggregate evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub apd: f64,
    pub aed: f64,
    pub ald: f64,
    pub csim: f64,
    pub miou: f64,
    pub fid_proxy: f64,
    /// Mean ‖A_cross − M_Q‖² on held-out pairs.
    pub attn_mse: f64,
    /// mIoU-weighted mean pixel change on static background under pose edits.
    pub background_change: f64,
    pub n_samples: usize,
    pub config_digest: String,
}

impl EvalReport {
    pub fn numeric_fields(&self) -> [(&'static str, f64); 8] {
        [
            ("apd", self.apd),
            ("aed", self.aed),
            ("ald", self.ald),
            ("csim", self.csim),
            ("miou", self.miou),
            ("fid_proxy", self.fid_proxy),
            ("attn_mse", self.attn_mse),
            ("background_change", self.background_change),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.numeric_fields().iter().all(|(_, v)| v.is_finite())
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.numeric_fields() {
            s.push_str(&format!("{k}: {v:.6}\n"));
        }
        s.push_str(&format!("n_samples: {}\nconfig_digest: {}\n", self.n_samples, self.config_digest));
        s
    }

    /// Largest absolute per-field difference (infinite if counts differ).
    pub fn max_abs_diff(&self, other: &EvalReport) -> f64 {
        if self.n_samples != other.n_samples {
            return f64::INFINITY;
        }
        self.numeric_fields()
            .iter()
            .zip(other.numeric_fields())
            .map(|((_, a), (_, b))| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
