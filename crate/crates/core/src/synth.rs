//! Procedural paired-portrait dataset with ground-truth coefficients and
//! four-class region masks.

use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::flame::{ExprVector, HeadTemplate, Joint, PoseVector, ShapeVector};
use crate::imaging::RgbImage;
use crate::render::{render_condition, AlbedoParams, PhysicalCoefficients, SHLighting, WeakPerspectiveCamera};

/// Semantic label of a portrait pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Face = 0,
    Hair = 1,
    Clothes = 2,
    Background = 3,
}

pub const NUM_REGIONS: usize = 4;

impl Region {
    pub const ALL: [Region; NUM_REGIONS] = [Region::Face, Region::Hair, Region::Clothes, Region::Background];

    pub fn from_u8(v: u8) -> Result<Region> {
        Region::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("region label {v} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Face => "face",
            Region::Hair => "hair",
            Region::Clothes => "clothes",
            Region::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HairStyle {
    /// Cap thickness in normalized image units, in [0.1, 0.3].
    pub band_height: f64,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClothesStyle {
    /// Band height in normalized image units, in [0.15, 0.35].
    pub height: f64,
    pub color: [f32; 3],
    /// Stripe period in pixels.
    pub stripe_period: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundStyle {
    pub colors: [[f32; 3]; 2],
    pub gradient_angle: f64,
    pub noise_amplitude: f32,
    pub noise_seed: u64,
}

/// Everything that stays fixed for one synthetic person.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub identity_id: u64,
    pub shape: ShapeVector,
    pub albedo: AlbedoParams,
    pub hair: HairStyle,
    pub clothes: ClothesStyle,
    pub background: BackgroundStyle,
}

fn rgb(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

const SKIN_TONES: [[f64; 3]; 5] = [
    [0.93, 0.78, 0.67],
    [0.85, 0.66, 0.52],
    [0.72, 0.53, 0.40],
    [0.55, 0.38, 0.27],
    [0.40, 0.27, 0.19],
];

/// Deterministic per seed; the identity id is the seed itself.
pub fn sample_identity(template: &HeadTemplate, seed: u64) -> IdentitySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1D_E7);
    let shape = ShapeVector((0..template.shape_dim()).map(|_| rng.random_range(-2.0..=2.0)).collect());
    let tone = SKIN_TONES[rng.random_range(0..SKIN_TONES.len())];
    let jitter = rng.random_range(-0.04..0.04);
    let albedo = AlbedoParams {
        coefficients: (0..template.albedo_dim()).map(|_| rng.random_range(-1.5..1.5)).collect(),
        base_tone: tone.map(|t| (t + jitter).clamp(0.0, 1.0)),
    };
    let hair = HairStyle {
        band_height: rng.random_range(0.1..=0.3),
        color: rgb(&mut rng, 0.05, 0.6),
    };
    let clothes = ClothesStyle {
        height: rng.random_range(0.15..=0.35),
        color: rgb(&mut rng, 0.1, 0.95),
        stripe_period: rng.random_range(3..10),
    };
    let background = BackgroundStyle {
        colors: [rgb(&mut rng, 0.2, 1.0), rgb(&mut rng, 0.2, 1.0)],
        gradient_angle: rng.random_range(0.0..std::f64::consts::TAU),
        noise_amplitude: rng.random_range(0.0..0.06),
        noise_seed: rng.random(),
    };
    IdentitySpec {
        identity_id: seed,
        shape,
        albedo,
        hair,
        clothes,
        background,
    }
}

/// Pose, expression, light and camera of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAttributes {
    pub pose: PoseVector,
    pub expr: ExprVector,
    pub light: SHLighting,
    pub camera: WeakPerspectiveCamera,
}

pub const MAX_YAW: f64 = std::f64::consts::FRAC_PI_3;
/// Standard deviation of the sampled head yaw, radians.
pub const YAW_STD: f64 = 0.45;

pub fn sample_attributes(template: &HeadTemplate, rng: &mut impl Rng) -> FrameAttributes {
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let yaw = loop {
        let y: f64 = rng.sample(normal) * YAW_STD;
        if y.abs() <= MAX_YAW {
            break y;
        }
    };
    let root = Vector3::new(rng.random_range(-0.25..0.25), yaw, rng.random_range(-0.15..0.15));
    let neck = Vector3::new(rng.sample(normal) * 0.05, rng.sample(normal) * 0.05, 0.0);
    let jaw = Vector3::new(rng.random_range(0.0..0.35), 0.0, 0.0);
    let pose = PoseVector::zero()
        .with_joint(Joint::Root, root)
        .and_then(|p| p.with_joint(Joint::Neck, neck))
        .and_then(|p| p.with_joint(Joint::Jaw, jaw))
        .expect("sampled rotations are below pi");
    let expr = ExprVector((0..template.expr_dim()).map(|_| rng.random_range(-1.5..1.5)).collect());

    let mut light = SHLighting::ambient(0.0);
    let dc: f64 = rng.random_range(2.6..3.6);
    let tint = rgb(rng, 0.92, 1.08);
    light.coefficients[0] = [0, 1, 2].map(|c| dc * tint[c] as f64);
    for band in 1..4 {
        let v: f64 = rng.random_range(-0.8..0.8);
        light.coefficients[band] = [0, 1, 2].map(|_| v + rng.random_range(-0.08..0.08));
    }
    for band in 4..9 {
        let v: f64 = rng.random_range(-0.3..0.3);
        light.coefficients[band] = [v; 3];
    }
    let camera = WeakPerspectiveCamera::new(
        rng.random_range(0.5..0.6),
        [rng.random_range(-0.08..0.08), rng.random_range(-0.12..0.0)],
    )
    .expect("positive scale");
    FrameAttributes {
        pose,
        expr,
        light,
        camera,
    }
}

impl FrameAttributes {
    /// The per-frame fields of a coefficient record.
    pub fn from_coefficients(c: &PhysicalCoefficients) -> Self {
        Self {
            pose: c.pose,
            expr: c.expr.clone(),
            light: c.light,
            camera: c.camera,
        }
    }
}

impl IdentitySpec {
    pub fn coefficients(&self, frame: &FrameAttributes) -> PhysicalCoefficients {
        PhysicalCoefficients {
            shape: self.shape.clone(),
            pose: frame.pose,
            expr: frame.expr.clone(),
            albedo: self.albedo.clone(),
            light: frame.light,
            camera: frame.camera,
        }
    }
}

/// Smooth per-identity noise, identical for every frame of that identity.
fn value_noise(seed: u64, i: usize, j: usize) -> f32 {
    let cell = |a: usize, b: usize| -> f32 {
        let mut h = seed ^ ((a as u64) << 32) ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 33;
        h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        h ^= h >> 33;
        (h >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
    };
    let (fi, fj) = (i as f32 / 4.0, j as f32 / 4.0);
    let (a, b) = (fi.floor() as usize, fj.floor() as usize);
    let (u, v) = (fi.fract(), fj.fract());
    let top = cell(a, b) * (1.0 - v) + cell(a, b + 1) * v;
    let bot = cell(a + 1, b) * (1.0 - v) + cell(a + 1, b + 1) * v;
    top * (1.0 - u) + bot * u
}

fn paint_background(style: &BackgroundStyle, image: &mut RgbImage) {
    let (h, w) = (image.height, image.width);
    let (s, c) = style.gradient_angle.sin_cos();
    for i in 0..h {
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let y = (i as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            let t = (((x * c + y * s) / std::f64::consts::SQRT_2 + 1.0) * 0.5).clamp(0.0, 1.0) as f32;
            let n = style.noise_amplitude * value_noise(style.noise_seed, i, j);
            let px = [0, 1, 2].map(|k| (style.colors[0][k] * (1.0 - t) + style.colors[1][k] * t + n).clamp(0.0, 1.0));
            image.set(i, j, px);
        }
    }
}

/// First row of the clothes band.
fn clothes_top(style: &ClothesStyle, h: usize) -> usize {
    let y0 = 1.0 - 2.0 * style.height;
    (((y0 + 1.0) * 0.5 * h as f64).round() as usize).min(h)
}

/// A rendered portrait with its per-pixel region labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Portrait {
    pub image: RgbImage,
    pub mask: Vec<u8>,
    pub coeffs: PhysicalCoefficients,
}

impl Portrait {
    pub fn region_fraction(&self, r: Region) -> f64 {
        self.mask.iter().filter(|&&m| m == r as u8).count() as f64 / self.mask.len() as f64
    }
}

/// Paints background, clothes, head and hair, in that order; the mask keeps
/// the topmost layer per pixel.
pub fn compose_portrait(
    template: &HeadTemplate,
    identity: &IdentitySpec,
    frame: &FrameAttributes,
    height: usize,
    width: usize,
) -> Result<Portrait> {
    let coeffs = identity.coefficients(frame);
    let rendered = render_condition(template, &coeffs, height, width)?;
    if rendered.covered_pixels() == 0 {
        return Err(Error::DegeneratePose("head is entirely off-screen".into()));
    }
    let mut image = RgbImage::new(height, width);
    let mut mask = vec![Region::Background as u8; height * width];
    paint_background(&identity.background, &mut image);

    let top = clothes_top(&identity.clothes, height);
    let period = identity.clothes.stripe_period.max(1);
    for i in top..height {
        let shade = if (i - top) / period % 2 == 0 { 1.0 } else { 0.78 };
        for j in 0..width {
            image.set(i, j, identity.clothes.color.map(|c| c * shade));
            mask[i * width + j] = Region::Clothes as u8;
        }
    }

    for k in 0..height * width {
        if rendered.coverage[k] {
            image.set(k / width, k % width, rendered.image.get(k / width, k % width));
            mask[k] = Region::Face as u8;
        }
    }

    // hair cap: a band straddling the head's upper silhouette in every column
    let band = ((identity.hair.band_height * 0.5 * height as f64).round() as usize).max(1);
    let overlap = (band / 2).max(1);
    for j in 0..width {
        let Some(first) = (0..height).find(|&i| rendered.coverage[i * width + j]) else {
            continue;
        };
        let streak = 0.88 + 0.12 * ((j as f32) * 1.7).sin().abs();
        for i in first.saturating_sub(band)..(first + overlap).min(height) {
            image.set(i, j, identity.hair.color.map(|c| c * streak));
            mask[i * width + j] = Region::Hair as u8;
        }
    }

    Ok(Portrait { image, mask, coeffs })
}

pub const MIN_FACE_FRACTION: f64 = 0.05;
pub const MIN_BACKGROUND_FRACTION: f64 = 0.10;
const MAX_ATTEMPTS: usize = 64;

/// Samples frames until the portrait satisfies the region-frequency floors.
pub fn sample_portrait(
    template: &HeadTemplate,
    identity: &IdentitySpec,
    rng: &mut impl Rng,
    height: usize,
    width: usize,
) -> Result<Portrait> {
    for _ in 0..MAX_ATTEMPTS {
        let frame = sample_attributes(template, rng);
        let p = match compose_portrait(template, identity, &frame, height, width) {
            Ok(p) => p,
            Err(Error::DegeneratePose(_)) => continue,
            Err(e) => return Err(e),
        };
        if p.region_fraction(Region::Face) >= MIN_FACE_FRACTION
            && p.region_fraction(Region::Background) >= MIN_BACKGROUND_FRACTION
        {
            return Ok(p);
        }
    }
    Err(Error::DegeneratePose(format!(
        "identity {} produced no valid portrait in {MAX_ATTEMPTS} attempts",
        identity.identity_id
    )))
}

/// Source and query portraits of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub identity_id: u64,
    pub source: Portrait,
    pub query: Portrait,
}

pub fn make_pair(template: &HeadTemplate, identity: &IdentitySpec, seed: u64, height: usize, width: usize) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ identity.identity_id.rotate_left(17));
    let source = sample_portrait(template, identity, &mut rng, height, width)?;
    let query = sample_portrait(template, identity, &mut rng, height, width)?;
    Ok(SamplePair {
        identity_id: identity.identity_id,
        source,
        query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPaths {
    pub source: String,
    pub query: String,
    pub record: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: u64,
    pub identity_id: u64,
    pub split: Split,
    pub paths: PairPaths,
}

/// Dataset index; paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TEMPLATE_FILE: &str = "template.bin";

impl Manifest {
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: "synth-data".into(),
                what: path,
            });
        }
        let file = std::io::BufReader::new(std::fs::File::open(&path)?);
        let mut records = Vec::new();
        for line in file.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { root, records })
    }

    pub fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(self.root.join(MANIFEST_FILE))?);
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn identities(&self, split: Split) -> Vec<u64> {
        let mut ids: Vec<u64> = self.split(split).iter().map(|r| r.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn template(&self) -> Result<HeadTemplate> {
        HeadTemplate::from_container(&Container::read_kind(self.root.join(TEMPLATE_FILE), "template")?)
    }

    /// Reads a pair back from disk (images carry 8-bit quantization).
    pub fn load_pair(&self, record: &ManifestRecord) -> Result<SamplePair> {
        let c = Container::read_kind(self.root.join(&record.paths.record), "pair")?;
        let load = |img: &str, prefix: &str| -> Result<Portrait> {
            Ok(Portrait {
                image: RgbImage::load_png(self.root.join(img))?,
                mask: c.get_u8(&format!("{prefix}mask"))?.1,
                coeffs: PhysicalCoefficients::read_from(&c, prefix)?,
            })
        };
        Ok(SamplePair {
            identity_id: record.identity_id,
            source: load(&record.paths.source, "source.")?,
            query: load(&record.paths.query, "query.")?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SamplePair>> {
        self.split(split).into_iter().map(|r| self.load_pair(r)).collect()
    }
}

/// Identity-level 8:2 split; returns the training identities.
pub fn split_identities(ids: &[u64], split_seed: u64) -> Result<Vec<u64>> {
    if ids.len() < 5 {
        return Err(Error::invalid(format!(
            "an 8:2 identity split needs at least 5 identities, got {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = (ids.len() * 4).div_ceil(5);
    let mut train = shuffled[..n_train].to_vec();
    train.sort_unstable();
    Ok(train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_identities: usize,
    pub pairs_per_identity: usize,
    pub split_seed: u64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

/// Seed of the `i`-th identity of a dataset.
pub fn identity_seed(dataset_seed: u64, i: usize) -> u64 {
    dataset_seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Writes images, coefficient/mask records, the template and the manifest.
pub fn build_dataset(root: impl AsRef<Path>, template: &HeadTemplate, spec: &DatasetSpec) -> Result<Manifest> {
    let root = root.as_ref().to_path_buf();
    let ids: Vec<u64> = (0..spec.n_identities).map(|i| identity_seed(spec.seed, i)).collect();
    let train = split_identities(&ids, spec.split_seed)?;
    std::fs::create_dir_all(root.join("pairs"))?;
    template.to_container()?.write(root.join(TEMPLATE_FILE))?;

    let mut records = Vec::with_capacity(spec.n_identities * spec.pairs_per_identity);
    for &id in &ids {
        let identity = sample_identity(template, id);
        let split = if train.binary_search(&id).is_ok() { Split::Train } else { Split::Test };
        for k in 0..spec.pairs_per_identity {
            let pair_id = records.len() as u64;
            let pair = make_pair(template, &identity, spec.seed.wrapping_add(k as u64), spec.height, spec.width)?;
            let paths = PairPaths {
                source: format!("pairs/{pair_id:06}_s.png"),
                query: format!("pairs/{pair_id:06}_q.png"),
                record: format!("pairs/{pair_id:06}.bin"),
            };
            pair.source.image.save_png(root.join(&paths.source))?;
            pair.query.image.save_png(root.join(&paths.query))?;
            let mut c = Container::new("pair");
            c.set_meta("identity_id", id.to_string());
            for (prefix, p) in [("source.", &pair.source), ("query.", &pair.query)] {
                p.coeffs.write_into(&mut c, prefix)?;
                c.put_u8(&format!("{prefix}mask"), &[spec.height, spec.width], &p.mask)?;
            }
            c.write(root.join(&paths.record))?;
            records.push(ManifestRecord {
                pair_id,
                identity_id: id,
                split,
                paths,
            });
        }
    }
    let manifest = Manifest { root, records };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flame::make_toy_template;
    use std::collections::HashSet;

    fn template() -> HeadTemplate {
        make_toy_template(7, 642, 10, 10).unwrap()
    }

    #[test]
    fn identity_sampling_is_deterministic_and_bounded() {
        let t = template();
        assert_eq!(sample_identity(&t, 3), sample_identity(&t, 3));
        let ids: HashSet<u64> = (0..1000).map(|s| sample_identity(&t, s).identity_id).collect();
        assert_eq!(ids.len(), 1000);
        for s in 0..200 {
            let spec = sample_identity(&t, s);
            assert!(spec.shape.0.iter().all(|b| (-2.0..=2.0).contains(b)));
            assert!((0.1..=0.3).contains(&spec.hair.band_height));
            assert!((0.15..=0.35).contains(&spec.clothes.height));
        }
    }

    fn dilate(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
        let mut out = mask.to_vec();
        for i in 0..h {
            for j in 0..w {
                if mask[i * w + j] {
                    for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                            out[a as usize * w + b as usize] = true;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hair_touches_the_face() {
        let t = template();
        for s in 0..10 {
            let pair = make_pair(&t, &sample_identity(&t, s), 1, 64, 64).unwrap();
            let face: Vec<bool> = pair.source.mask.iter().map(|&m| m == Region::Face as u8).collect();
            let grown = dilate(&face, 64, 64);
            assert!(pair.source.mask.iter().zip(&grown).any(|(&m, &g)| g && m == Region::Hair as u8));
        }
    }

    #[test]
    fn masks_partition_and_meet_frequency_floors() {
        let t = template();
        for s in 0..20 {
            let pair = make_pair(&t, &sample_identity(&t, s), 5, 64, 64).unwrap();
            for p in [&pair.source, &pair.query] {
                let counts: usize = Region::ALL.iter().map(|&r| p.mask.iter().filter(|&&m| m == r as u8).count()).sum();
                assert_eq!(counts, 64 * 64);
                assert!(p.region_fraction(Region::Face) >= MIN_FACE_FRACTION);
                assert!(p.region_fraction(Region::Background) >= MIN_BACKGROUND_FRACTION);
            }
        }
    }

    #[test]
    fn background_is_shared_where_uncovered() {
        let t = template();
        let pair = make_pair(&t, &sample_identity(&t, 11), 2, 64, 64).unwrap();
        let bg = Region::Background as u8;
        let mut shared = 0;
        for k in 0..64 * 64 {
            if pair.source.mask[k] == bg && pair.query.mask[k] == bg {
                assert_eq!(pair.source.image.get(k / 64, k % 64), pair.query.image.get(k / 64, k % 64));
                shared += 1;
            }
        }
        assert!(shared > 100);
    }

    #[test]
    fn pair_shares_identity_and_reproduces() {
        let t = template();
        let id = sample_identity(&t, 4);
        let a = make_pair(&t, &id, 9, 32, 32).unwrap();
        assert_eq!(a.source.coeffs.shape, a.query.coeffs.shape);
        assert_eq!(a.source.coeffs.albedo, a.query.coeffs.albedo);
        assert_ne!(a.source.coeffs.pose, a.query.coeffs.pose);
        assert_eq!(a, make_pair(&t, &id, 9, 32, 32).unwrap());
    }

    #[test]
    fn face_pixels_match_a_re_render() {
        let t = template();
        let pair = make_pair(&t, &sample_identity(&t, 6), 3, 64, 64).unwrap();
        let r = render_condition(&t, &pair.query.coeffs, 64, 64).unwrap();
        for k in 0..64 * 64 {
            if pair.query.mask[k] == Region::Face as u8 {
                assert_eq!(pair.query.image.get(k / 64, k % 64), r.image.get(k / 64, k % 64));
            }
        }
    }

    #[test]
    fn off_screen_head_is_degenerate() {
        let t = template();
        let id = sample_identity(&t, 1);
        let mut frame = sample_attributes(&t, &mut ChaCha8Rng::seed_from_u64(0));
        frame.camera = WeakPerspectiveCamera::new(0.5, [5.0, 5.0]).unwrap();
        assert!(matches!(compose_portrait(&t, &id, &frame, 32, 32), Err(Error::DegeneratePose(_))));
    }

    #[test]
    fn split_is_eight_to_two_without_overlap() {
        let ids: Vec<u64> = (0..100).collect();
        let train = split_identities(&ids, 0).unwrap();
        assert_eq!(train.len(), 80);
        assert!(split_identities(&ids[..4], 0).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let t = template();
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_identities: 5,
            pairs_per_identity: 2,
            split_seed: 1,
            seed: 0,
            height: 32,
            width: 32,
        };
        let m = build_dataset(dir.path(), &t, &spec).unwrap();
        assert_eq!(m.records.len(), 10);
        let back = Manifest::read(dir.path()).unwrap();
        assert_eq!(back.records, m.records);
        let train: HashSet<u64> = back.identities(Split::Train).into_iter().collect();
        let test: HashSet<u64> = back.identities(Split::Test).into_iter().collect();
        assert_eq!((train.len(), test.len()), (4, 1));
        assert!(train.is_disjoint(&test));
        let pair = back.load_pair(&back.records[0]).unwrap();
        let fresh = make_pair(&t, &sample_identity(&t, back.records[0].identity_id), 0, 32, 32).unwrap();
        assert_eq!(pair.source.image, fresh.source.image.quantized());
        assert_eq!(pair.source.coeffs, fresh.source.coeffs);
        assert_eq!(pair.query.mask, fresh.query.mask);
        assert_eq!(back.template().unwrap(), t);
    }
}
