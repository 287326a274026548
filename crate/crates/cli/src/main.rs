use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use facedit::config::{Preset, RunConfig};
use facedit::editing::{mask_images, segmentation_image};
use facedit::imaging::RgbImage;
use facedit::nn;
use facedit::pipeline::{Pipeline, DTYPE};
use facedit::render::{render_condition, AttributeSelection, PhysicalCoefficients, SHLighting, WeakPerspectiveCamera};
use facedit::synth::{Manifest, Region};
use facedit::{Error, Result};

#[derive(Parser)]
#[command(name = "facedit", version, about = "Synthetic-portrait facial appearance editing")]
struct Cli {
    /// TOML run configuration; without it the preset defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for every artifact; relative dataset and checkpoint paths are
    /// resolved under it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Only {
    Pose,
    Expression,
    Lighting,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    Face,
    Hair,
    Clothes,
    Background,
}

impl From<RegionArg> for Region {
    fn from(r: RegionArg) -> Region {
        match r {
            RegionArg::Face => Region::Face,
            RegionArg::Hair => Region::Hair,
            RegionArg::Clothes => Region::Clothes,
            RegionArg::Background => Region::Background,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate the synthetic portrait dataset.
    SynthData,
    TrainAe,
    PretrainRsc,
    TrainId,
    TrainEstimator,
    TrainDiffusion,
    /// Edit one dataset source with another pair's query attributes.
    Edit {
        #[arg(long)]
        pair: u64,
        /// Pair whose query supplies the attributes (default: `--pair`).
        #[arg(long)]
        query: Option<u64>,
        /// Take only one attribute group from the query.
        #[arg(long, value_enum)]
        only: Option<Only>,
        /// Replace this region's token with the query image's token.
        #[arg(long, value_enum)]
        swap: Option<RegionArg>,
    },
    /// Per-token masks and an argmax segmentation of one image.
    Masks {
        #[arg(long, conflicts_with = "image")]
        pair: Option<u64>,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    Eval {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Render the condition image of a coefficient record (neutral head by default).
    Render {
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        /// JSON with optional fields shape, pose, expr, albedo, light, camera_scale, camera_translation.
        #[arg(long)]
        coeffs: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config {
                    field_a: "--config".into(),
                    field_b: "--config".into(),
                    message: format!("{} does not exist", p.display()),
                });
            }
            RunConfig::load(p)?
        }
        None => {
            let mut c = RunConfig::from_preset(match cli.preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            });
            c.apply_env_overrides();
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    // With --out every artifact lives under it: relative dataset and
    // checkpoint paths are rebased, outputs go to its root.
    if let Some(o) = &cli.out {
        for slot in [&mut cfg.paths.dataset, &mut cfg.paths.checkpoints] {
            if slot.is_relative() {
                *slot = o.join(&*slot);
            }
        }
        cfg.paths.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Merges newly written files into `<out>/produced.json`.
fn write_produced(out: &Path, files: &[PathBuf]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join("produced.json");
    let mut all: Vec<String> = match std::fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t)?,
        Err(_) => Vec::new(),
    };
    all.extend(files.iter().map(|p| p.display().to_string()));
    all.sort();
    all.dedup();
    std::fs::write(&path, serde_json::to_string_pretty(&all)?)?;
    Ok(())
}

fn parse_coeffs(base: PhysicalCoefficients, path: &Path) -> Result<PhysicalCoefficients> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let floats = |k: &str| -> Option<Vec<f64>> {
        v.get(k).and_then(|a| a.as_array()).map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
    };
    let mut c = base;
    if let Some(s) = floats("shape") {
        c.shape.0 = s;
    }
    if let Some(p) = floats("pose") {
        c.pose = facedit::flame::PoseVector::new(&p)?;
    }
    if let Some(e) = floats("expr") {
        c.expr.0 = e;
    }
    if let Some(a) = floats("albedo") {
        c.albedo.coefficients = a;
    }
    if let Some(l) = floats("light") {
        c.light = SHLighting::from_flat(&l)?;
    }
    let scale = v.get("camera_scale").and_then(|x| x.as_f64()).unwrap_or(c.camera.scale);
    let tr = floats("camera_translation").unwrap_or(c.camera.translation.to_vec());
    if tr.len() != 2 {
        return Err(Error::InvalidInput("camera_translation needs two values".into()));
    }
    c.camera = WeakPerspectiveCamera::new(scale, [tr[0], tr[1]])?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.paths.output.clone();
    let mut p = Pipeline::new(cfg)?;
    let mut written: Vec<PathBuf> = Vec::new();
    match cli.command {
        Command::Config => print!("{}", p.cfg.to_toml()?),
        Command::SynthData => {
            let m = p.synth_data()?;
            println!("synth-data: {} pairs under {}", m.records.len(), m.root.display());
        }
        Command::TrainAe => {
            let s = p.train_ae()?;
            println!(
                "train-ae: final loss {:.5}, code usage {:.3}, latent scale {:.4}",
                s.final_loss, s.code_usage, s.latent_scale
            );
        }
        Command::PretrainRsc => println!("pretrain-rsc: final loss {:.5}", p.pretrain_rsc()?),
        Command::TrainId => println!("train-id: tail accuracy {:.3}", p.train_id()?),
        Command::TrainEstimator => {
            let s = p.train_estimator()?;
            println!(
                "train-estimator: validation L2 pose {:.4} expr {:.4} light {:.4} (pose spread {:.4})",
                s.val_pose, s.val_expr, s.val_light, s.pose_spread
            );
        }
        Command::TrainDiffusion => {
            let s = p.train_diffusion()?;
            println!("train-diffusion: {} steps, loss_ldm {:.5}, loss_acr {:.5}", s.steps, s.loss_ldm, s.loss_acr);
        }
        Command::Edit { pair, query, only, swap } => {
            let m = p.manifest()?;
            let load = |id: u64| -> Result<facedit::synth::SamplePair> {
                let r = m
                    .records
                    .iter()
                    .find(|r| r.pair_id == id)
                    .ok_or_else(|| Error::InvalidInput(format!("pair {id} is not in the manifest")))?;
                m.load_pair(r)
            };
            let src = load(pair)?;
            let q = load(query.unwrap_or(pair))?;
            let select = match only {
                None => AttributeSelection::ALL,
                Some(Only::Pose) => AttributeSelection::POSE,
                Some(Only::Expression) => AttributeSelection::EXPRESSION,
                Some(Only::Lighting) => AttributeSelection::LIGHTING,
            };
            let built = src.source.coeffs.recombine(&q.query.coeffs, select);
            let changed = src.source.coeffs.diff_fields(&built);
            log::info!("coefficient fields changed from the source: {changed:?}");
            let models = p.load_models()?;
            let seed = p.cfg.seed;
            let batch = models.edit(&[&src.source.image], &[&built], seed)?;
            let output = match swap {
                Some(r) => models.swap_edit(
                    (&src.source.image, &src.source.mask),
                    (&q.query.image, &q.query.mask),
                    &built,
                    &[r.into()],
                    seed,
                )?,
                None => batch.outputs[0].clone(),
            };
            let x = nn::images_to_tensor(&[&src.source.image], DTYPE)?;
            let seg = segmentation_image(&models.rsc.slot_masks(&x)?.get(0)?)?;
            let grid = RgbImage::hstack(&[&src.source.image, &batch.renders[0], &output, &seg])?;
            std::fs::create_dir_all(&out)?;
            let png = out.join(format!("edit_{pair:06}.png"));
            let record = out.join(format!("edit_{pair:06}.json"));
            grid.save_png(&png)?;
            std::fs::write(
                &record,
                serde_json::to_string_pretty(&serde_json::json!({
                    "pair": pair, "query": query.unwrap_or(pair), "changed_fields": changed,
                    "swap": swap.map(|r| Region::from(r).name()),
                }))?,
            )?;
            println!("edit: changed fields {changed:?}; wrote {}", png.display());
            written.extend([png, record]);
        }
        Command::Masks { pair, image } => {
            let (img, stem) = match (pair, image) {
                (Some(id), _) => {
                    let m = p.manifest()?;
                    let r = m
                        .records
                        .iter()
                        .find(|r| r.pair_id == id)
                        .ok_or_else(|| Error::InvalidInput(format!("pair {id} is not in the manifest")))?;
                    (m.load_pair(r)?.source.image, format!("masks_{id:06}"))
                }
                (None, Some(path)) => (RgbImage::load_png(&path)?, "masks".to_string()),
                (None, None) => return Err(Error::InvalidInput("masks needs --pair or --image".into())),
            };
            let rsc = p.load_rsc()?;
            let masks = rsc.slot_masks(&nn::images_to_tensor(&[&img], DTYPE)?)?.get(0)?;
            std::fs::create_dir_all(&out)?;
            let token_images = mask_images(&masks)?;
            let n = token_images.len();
            let mut tiles = vec![img.clone()];
            for (k, tile) in token_images.into_iter().enumerate() {
                let path = out.join(format!("{stem}_token{k}.png"));
                tile.save_png(&path)?;
                written.push(path);
                tiles.push(tile);
            }
            let seg = segmentation_image(&masks)?;
            let seg_path = out.join(format!("{stem}_segmentation.png"));
            seg.save_png(&seg_path)?;
            tiles.push(seg);
            let grid_path = out.join(format!("{stem}_grid.png"));
            RgbImage::hstack(&tiles.iter().collect::<Vec<_>>())?.save_png(&grid_path)?;
            written.extend([seg_path, grid_path]);
            println!("masks: {n} token masks written to {}", out.display());
        }
        Command::Eval { n } => {
            let n = n.unwrap_or(p.cfg.eval.n);
            let seed = p.cfg.seed;
            let report = p.eval(n, seed)?;
            print!("{}", report.to_text());
        }
        Command::Render { size, coeffs } => {
            let template = match Manifest::read(&p.cfg.paths.dataset) {
                Ok(m) => m.template()?,
                Err(_) => p.build_template()?,
            };
            let mut c = PhysicalCoefficients::neutral(&template);
            if let Some(path) = coeffs {
                c = parse_coeffs(c, &path)?;
            }
            let r = render_condition(&template, &c, size[0], size[1])?;
            std::fs::create_dir_all(&out)?;
            let png = out.join("render.png");
            r.image.save_png(&png)?;
            println!("render: {} covered pixels; wrote {}", r.covered_pixels(), png.display());
            written.push(png);
        }
    }
    written.extend(p.produced().iter().cloned());
    if !written.is_empty() {
        write_produced(&out, &written)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
