//! Editing with trained models: build the condition render, pull tokens and
//! the identity token from the source, sample, decode.

use candle_core::Tensor;

use crate::diffusion::{ddim_sample, swap_tokens, Conditions, Denoiser};
use crate::error::{Error, Result};
use crate::flame::HeadTemplate;
use crate::identity::IdentityEmbedder;
use crate::imaging::RgbImage;
use crate::latent_ae::Autoencoder;
use crate::metrics::hungarian;
use crate::nn;
use crate::render::{render_condition, PhysicalCoefficients};
use crate::rsc::{RscModel, SemanticTokens};
use crate::synth::{Region, NUM_REGIONS};

/// Every trained component needed at edit time.
pub struct Models {
    pub template: HeadTemplate,
    pub ae: Autoencoder,
    pub rsc: RscModel,
    pub embedder: IdentityEmbedder,
    pub denoiser: Denoiser,
    pub sample_steps: usize,
}

/// Outputs of a batch of edits, with the condition renders that drove them.
#[derive(Debug, Clone)]
pub struct EditBatch {
    pub outputs: Vec<RgbImage>,
    pub renders: Vec<RgbImage>,
}

impl Models {
    pub fn image_size(&self) -> usize {
        self.ae.cfg.image_size
    }

    pub fn render_conditions(&self, coeffs: &[&PhysicalCoefficients]) -> Result<Vec<RgbImage>> {
        let s = self.image_size();
        coeffs
            .iter()
            .map(|c| Ok(render_condition(&self.template, c, s, s)?.image))
            .collect()
    }

    /// Encoded condition renders `f_r`.
    pub fn condition_latents(&self, renders: &[&RgbImage]) -> Result<Tensor> {
        self.ae.encode_images(renders)
    }

    /// Semantic tokens of the sources, and their identity tokens when the
    /// denoiser uses them.
    pub fn source_conditions(&self, sources: &[&RgbImage]) -> Result<(SemanticTokens, Option<Tensor>)> {
        let x = nn::images_to_tensor(sources, self.rsc.params.dtype())?;
        let tokens = self.rsc.tokens(&x)?;
        let f_id = if self.denoiser.cfg.use_identity {
            Some(self.embedder.embed_images(sources)?)
        } else {
            None
        };
        Ok((tokens, f_id))
    }

    /// Samples and decodes under explicit conditions.
    pub fn generate(&self, cond: &Conditions, seed: u64) -> Result<Vec<RgbImage>> {
        let z = ddim_sample(&self.denoiser, cond, self.sample_steps, seed)?;
        self.ae.decode_images(&z)
    }

    /// Edits each source toward its coefficient record (already recombined).
    pub fn edit(&self, sources: &[&RgbImage], coeffs: &[&PhysicalCoefficients], seed: u64) -> Result<EditBatch> {
        if sources.len() != coeffs.len() || sources.is_empty() {
            return Err(Error::dim("sources vs coefficient records", coeffs.len(), sources.len()));
        }
        let renders = self.render_conditions(coeffs)?;
        let f_r = self.condition_latents(&renders.iter().collect::<Vec<_>>())?;
        let (tokens, f_id) = self.source_conditions(sources)?;
        let outputs = self.generate(
            &Conditions {
                f_r,
                tokens: tokens.tokens,
                f_id,
            },
            seed,
        )?;
        Ok(EditBatch { outputs, renders })
    }

    /// Edits a single source after taking the tokens of `regions` from a donor
    /// image. Tokens are matched to regions through the ground-truth masks.
    pub fn swap_edit(
        &self,
        source: (&RgbImage, &[u8]),
        donor: (&RgbImage, &[u8]),
        coeffs: &PhysicalCoefficients,
        regions: &[Region],
        seed: u64,
    ) -> Result<RgbImage> {
        let (st, f_id) = self.source_conditions(&[source.0])?;
        let (dt, _) = self.source_conditions(&[donor.0])?;
        let s_match = match_tokens_to_regions(&self.upsampled(&st)?, source.1)?;
        let d_match = match_tokens_to_regions(&self.upsampled(&dt)?, donor.1)?;
        let mut rows: Vec<Tensor> = (0..st.tokens.dim(1)?).map(|i| st.tokens.get(0)?.get(i)).collect::<candle_core::Result<_>>()?;
        let mut indices = Vec::new();
        for r in regions {
            if let (Some(si), Some(di)) = (s_match[*r as usize], d_match[*r as usize]) {
                rows[si] = dt.tokens.get(0)?.get(di)?;
                indices.push(si);
            }
        }
        let aligned = SemanticTokens {
            tokens: Tensor::stack(&rows, 0)?.unsqueeze(0)?,
            masks: dt.masks.clone(),
        };
        let mixed = swap_tokens(&st, &aligned, &indices)?;
        let render = self.render_conditions(&[coeffs])?;
        let f_r = self.condition_latents(&[&render[0]])?;
        let out = self.generate(
            &Conditions {
                f_r,
                tokens: mixed,
                f_id,
            },
            seed,
        )?;
        Ok(out.into_iter().next().expect("one output"))
    }

    fn upsampled(&self, t: &SemanticTokens) -> Result<Tensor> {
        let s = self.image_size();
        nn::resize_bilinear(&t.masks, s, s)?.get(0).map_err(Into::into)
    }
}

/// For each region, the token whose argmax mask best overlaps it (one-to-one,
/// Hungarian on IoU); `None` for regions absent from the image or left over.
pub fn match_tokens_to_regions(masks: &Tensor, gt: &[u8]) -> Result<[Option<usize>; NUM_REGIONS]> {
    let n = masks.dim(0)?;
    let pred = crate::metrics::argmax_labels(masks)?;
    if pred.len() != gt.len() {
        return Err(Error::dim("mask pixels", gt.len(), pred.len()));
    }
    let present: Vec<u8> = (0..NUM_REGIONS as u8).filter(|c| gt.contains(c)).collect();
    let cost: Vec<Vec<f64>> = present
        .iter()
        .map(|&c| {
            (0..n)
                .map(|s| {
                    let (mut i, mut u) = (0usize, 0usize);
                    for (&p, &g) in pred.iter().zip(gt) {
                        i += (p == s && g == c) as usize;
                        u += (p == s || g == c) as usize;
                    }
                    -(i as f64 / u.max(1) as f64)
                })
                .collect()
        })
        .collect();
    let mut out = [None; NUM_REGIONS];
    for (k, slot) in hungarian(&cost).into_iter().enumerate() {
        out[present[k] as usize] = slot;
    }
    Ok(out)
}

/// Share of changed-pixel mass (per-pixel mean absolute change above
/// `threshold`) that falls inside `mask`. `None` when nothing changed.
pub fn masked_change_ratio(a: &RgbImage, b: &RgbImage, mask: &[bool], threshold: f64) -> Result<Option<f64>> {
    if a.height != b.height || a.width != b.width || mask.len() != a.height * a.width {
        return Err(Error::invalid("images and mask must share a size"));
    }
    let (mut inside, mut total) = (0.0, 0.0);
    for (k, &m) in mask.iter().enumerate() {
        let (pa, pb) = (a.get(k / a.width, k % a.width), b.get(k / a.width, k % a.width));
        let d = (0..3).map(|c| (pa[c] - pb[c]).abs() as f64).sum::<f64>() / 3.0;
        if d > threshold {
            total += d;
            if m {
                inside += d;
            }
        }
    }
    Ok((total > 0.0).then(|| inside / total))
}

/// Color-coded argmax segmentation of a `N × H × W` mask stack.
pub fn segmentation_image(masks: &Tensor) -> Result<RgbImage> {
    const PALETTE: [[f32; 3]; 8] = [
        [0.90, 0.30, 0.25],
        [0.25, 0.55, 0.90],
        [0.30, 0.80, 0.35],
        [0.95, 0.80, 0.20],
        [0.65, 0.35, 0.85],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.15],
        [0.55, 0.55, 0.55],
    ];
    let (_, h, w) = masks.dims3()?;
    let labels = crate::metrics::argmax_labels(masks)?;
    let mut img = RgbImage::new(h, w);
    for (k, l) in labels.into_iter().enumerate() {
        img.set(k / w, k % w, PALETTE[l % PALETTE.len()]);
    }
    Ok(img)
}

/// One grayscale image per token of a `N × H × W` mask stack.
pub fn mask_images(masks: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, h, w) = masks.dims3()?;
    (0..n)
        .map(|k| {
            let v = masks.get(k)?.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
            crate::imaging::gray_to_rgb(h, w, &v)
        })
        .collect()
}

/// Ground-truth region mask as a boolean map.
pub fn region_mask(mask: &[u8], region: Region) -> Vec<bool> {
    mask.iter().map(|&m| m == region as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn one_hot_masks(labels: &[u8], n: usize, h: usize, w: usize) -> Result<Tensor> {
        let mut v = vec![0f32; n * h * w];
        for (k, &l) in labels.iter().enumerate() {
            v[l as usize * h * w + k] = 1.0;
        }
        Ok(Tensor::from_vec(v, (n, h, w), &Device::Cpu)?)
    }

    #[test]
    fn region_matching_recovers_a_permutation() {
        let gt: Vec<u8> = (0..36).map(|k| (k / 9) as u8).collect();
        let perm = [2u8, 0, 3, 1];
        let relabeled: Vec<u8> = gt.iter().map(|&g| perm[g as usize]).collect();
        let masks = one_hot_masks(&relabeled, 4, 6, 6).unwrap();
        let m = match_tokens_to_regions(&masks, &gt).unwrap();
        for r in 0..4 {
            assert_eq!(m[r], Some(perm[r] as usize));
        }
    }

    #[test]
    fn change_ratio_oracle() {
        let a = RgbImage::new(2, 2);
        let mut b = a.clone();
        b.set(0, 0, [0.3; 3]);
        b.set(1, 1, [0.1; 3]);
        b.set(0, 1, [0.01; 3]);
        let mask = [true, false, false, false];
        let r = masked_change_ratio(&a, &b, &mask, 0.05).unwrap().unwrap();
        assert!((r - 0.3 / 0.4).abs() < 1e-6);
        assert_eq!(masked_change_ratio(&a, &a, &mask, 0.05).unwrap(), None);
    }
}
