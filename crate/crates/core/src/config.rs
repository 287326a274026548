//! Run configuration: one TOML file holding every stage, two presets, and
//! the per-stage digests embedded in checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::identity::IdConfig;
use crate::latent_ae::{AeConfig, TrainConfig};
use crate::metrics::EstimatorConfig;
use crate::rsc::RscConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub pairs_per_identity: usize,
    pub split_seed: u64,
    pub template_vertices: usize,
    pub shape_dim: usize,
    pub expr_dim: usize,
    pub albedo_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage<M> {
    pub model: M,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionStage {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Weight of the attention-consistency term.
    pub delta: f64,
    pub sample_steps: usize,
    /// Keep training the pretrained token encoder together with the denoiser.
    #[serde(default = "default_true")]
    pub finetune_rsc: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub image_size: usize,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub ae: Stage<AeConfig>,
    pub rsc: Stage<RscConfig>,
    pub identity: Stage<IdConfig>,
    pub estimator: Stage<EstimatorConfig>,
    pub diffusion: DiffusionStage,
    pub eval: EvalConfig,
}

fn train(steps: usize, batch_size: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size,
        lr,
        log_every: 50,
    }
}

/// Environment variables that may override the configured paths.
pub const ENV_DATASET: &str = "FACEDIT_DATASET";
pub const ENV_CHECKPOINTS: &str = "FACEDIT_CHECKPOINTS";
pub const ENV_OUTPUT: &str = "FACEDIT_OUTPUT";

impl RunConfig {
    /// 64×64 images, 8×8×4 latents, sized for a single CPU or small GPU.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            image_size: 64,
            paths: Paths {
                dataset: "data".into(),
                checkpoints: "checkpoints".into(),
                output: "out".into(),
            },
            synth: SynthConfig {
                n_identities: 200,
                pairs_per_identity: 20,
                split_seed: 0,
                template_vertices: 642,
                shape_dim: 10,
                expr_dim: 6,
                albedo_dim: 6,
            },
            ae: Stage {
                model: AeConfig::default(),
                train: train(6000, 32, 2e-4),
            },
            rsc: Stage {
                model: RscConfig::default(),
                train: train(8000, 32, 4e-4),
            },
            identity: Stage {
                model: IdConfig::default(),
                train: train(4000, 64, 1e-3),
            },
            estimator: Stage {
                model: EstimatorConfig::default(),
                train: train(4000, 64, 1e-3),
            },
            diffusion: DiffusionStage {
                model: DenoiserConfig::default(),
                schedule: ScheduleConfig::default(),
                train: train(20_000, 16, 1e-4),
                delta: 0.1,
                sample_steps: 50,
                finetune_rsc: true,
            },
            eval: EvalConfig { n: 200 },
        }
    }

    /// Published 256×256 hyperparameters; kept for reference, far beyond
    /// desk compute.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.image_size = 256;
        c.synth.template_vertices = 2562;
        c.ae.model.image_size = 256;
        c.ae.model.base_channels = 128;
        c.rsc.model = RscConfig {
            image_size: 256,
            output_size: 32,
            base_channels: 64,
            channel_multipliers: vec![1, 1, 2, 4],
            res_blocks: 2,
            heads: 8,
            slot_dim: 192,
            num_slots: 4,
            iterations: 3,
            mlp_hidden: 384,
            decoder_channels: 64,
        };
        c.identity.model.image_size = 256;
        c.identity.model.base_channels = 32;
        c.estimator.model.image_size = 256;
        c.estimator.model.base_channels = 32;
        c.diffusion.model = DenoiserConfig {
            latent_channels: 4,
            latent_size: 32,
            base_channels: 320,
            channel_multipliers: vec![1, 2, 4, 4],
            res_blocks: 2,
            attention_resolutions: vec![32, 16, 8],
            heads: 8,
            context_dim: 192,
            transformer_depth: 1,
            id_dim: 128,
            use_identity: true,
        };
        c.diffusion.train = train(100_000, 16, 1e-4);
        c
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Reads, applies path overrides from the environment, and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut c = Self::from_toml(&text)?;
        c.apply_env_overrides();
        c.validate()?;
        Ok(c)
    }

    pub fn apply_env_overrides(&mut self) {
        for (var, slot) in [
            (ENV_DATASET, &mut self.paths.dataset),
            (ENV_CHECKPOINTS, &mut self.paths.checkpoints),
            (ENV_OUTPUT, &mut self.paths.output),
        ] {
            if let Ok(v) = std::env::var(var) {
                if !v.is_empty() {
                    *slot = v.into();
                }
            }
        }
    }

    /// Checks each stage on its own, then every dimension shared between
    /// stages; cross-field errors name both fields.
    pub fn validate(&self) -> Result<()> {
        let single = |field: &str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                field_a: field.into(),
                field_b: field.into(),
                message: e.to_string(),
            })
        };
        single("ae.model", self.ae.model.validate())?;
        single("rsc.model", self.rsc.model.validate())?;
        single("identity.model", self.identity.model.validate())?;
        single("diffusion.model", self.diffusion.model.validate())?;
        single("diffusion.schedule", crate::diffusion::NoiseSchedule::linear(&self.diffusion.schedule).map(|_| ()))?;
        for (name, t) in [
            ("ae.train", &self.ae.train),
            ("rsc.train", &self.rsc.train),
            ("identity.train", &self.identity.train),
            ("estimator.train", &self.estimator.train),
            ("diffusion.train", &self.diffusion.train),
        ] {
            single(name, t.validate(name))?;
        }
        if self.synth.n_identities < 5 || self.synth.pairs_per_identity == 0 {
            return Err(Error::Config {
                field_a: "synth.n_identities".into(),
                field_b: "synth.pairs_per_identity".into(),
                message: "need at least 5 identities and 1 pair per identity".into(),
            });
        }
        if self.eval.n == 0 {
            return Err(Error::Config {
                field_a: "eval.n".into(),
                field_b: "eval.n".into(),
                message: "must be positive".into(),
            });
        }
        if !(self.diffusion.delta >= 0.0) {
            return Err(Error::Config {
                field_a: "diffusion.delta".into(),
                field_b: "diffusion.delta".into(),
                message: "must be non-negative".into(),
            });
        }

        let eq = |a: &str, va: usize, b: &str, vb: usize| {
            if va == vb {
                Ok(())
            } else {
                Err(Error::Config {
                    field_a: a.into(),
                    field_b: b.into(),
                    message: format!("{a} = {va} but {b} = {vb}"),
                })
            }
        };
        let s = self.image_size;
        eq("image_size", s, "ae.model.image_size", self.ae.model.image_size)?;
        eq("image_size", s, "rsc.model.image_size", self.rsc.model.image_size)?;
        eq("image_size", s, "identity.model.image_size", self.identity.model.image_size)?;
        eq("image_size", s, "estimator.model.image_size", self.estimator.model.image_size)?;
        let d = &self.diffusion.model;
        eq("ae.model.code_dim", self.ae.model.code_dim, "diffusion.model.latent_channels", d.latent_channels)?;
        eq("ae.model.image_size/8", self.ae.model.latent_size(), "diffusion.model.latent_size", d.latent_size)?;
        eq("rsc.model.output_size", self.rsc.model.output_size, "diffusion.model.latent_size", d.latent_size)?;
        eq("rsc.model.slot_dim", self.rsc.model.slot_dim, "diffusion.model.context_dim", d.context_dim)?;
        eq("identity.model.embed_dim", self.identity.model.embed_dim, "diffusion.model.id_dim", d.id_dim)?;
        if self.diffusion.sample_steps == 0 || self.diffusion.sample_steps > self.diffusion.schedule.steps {
            return Err(Error::Config {
                field_a: "diffusion.sample_steps".into(),
                field_b: "diffusion.schedule.steps".into(),
                message: format!(
                    "sample_steps = {} must lie in 1..={}",
                    self.diffusion.sample_steps, self.diffusion.schedule.steps
                ),
            });
        }
        Ok(())
    }

    pub fn stage_digests(&self) -> Result<StageDigests> {
        let shared = serde_json::json!({"seed": self.seed, "image_size": self.image_size, "synth": self.synth});
        let hash = |parts: &[serde_json::Value]| -> Result<String> {
            let mut h = Sha256::new();
            for p in parts {
                h.update(serde_json::to_vec(p)?);
                h.update([0u8]);
            }
            Ok(hex::encode(h.finalize())[..16].to_string())
        };
        let ae = hash(&[shared.clone(), serde_json::to_value(&self.ae)?])?;
        let rsc = hash(&[shared.clone(), serde_json::to_value(&self.rsc)?])?;
        let identity = hash(&[shared.clone(), serde_json::to_value(&self.identity)?])?;
        let estimator = hash(&[shared.clone(), serde_json::to_value(&self.estimator)?])?;
        let diffusion = hash(&[
            shared,
            serde_json::json!([ae, rsc, identity]),
            serde_json::json!({"model": self.diffusion.model, "schedule": self.diffusion.schedule,
                "train": self.diffusion.train, "delta": self.diffusion.delta,
                "finetune_rsc": self.diffusion.finetune_rsc}),
        ])?;
        Ok(StageDigests {
            ae,
            rsc,
            identity,
            estimator,
            diffusion,
        })
    }

    /// Digest of everything that influences an evaluation report.
    pub fn eval_digest(&self) -> Result<String> {
        let d = self.stage_digests()?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&serde_json::json!([
            d.diffusion,
            d.estimator,
            self.diffusion.sample_steps,
            self.eval.n
        ]))?);
        Ok(hex::encode(h.finalize())[..16].to_string())
    }
}

/// Short content digests of each training stage's configuration (and, for
/// the denoiser, of its upstream stages).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageDigests {
    pub ae: String,
    pub rsc: String,
    pub identity: String,
    pub estimator: String,
    pub diffusion: String,
}
