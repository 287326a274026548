//! Property checks across module boundaries, each against an oracle written
//! here rather than reused from the library.

use candle_core::{DType, Device, Tensor};
use facedit::diffusion::{
    ddim_trajectory, loss_acr, loss_ldm, loss_terms, merge_cross_attention, CrossAttnRecord, Conditions, Denoiser,
    DenoiserConfig, NoiseSchedule, ScheduleConfig, TrainBatch,
};
use facedit::nn;
use facedit::rsc::{RscConfig, RscModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    nn::randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, DType::F64).unwrap()
}

fn schedule(steps: usize) -> NoiseSchedule {
    NoiseSchedule::linear(&ScheduleConfig {
        steps,
        beta_start: 1e-3,
        beta_end: 0.2,
    })
    .unwrap()
}

/// `ᾱ_t` by direct product over the linearly spaced betas.
fn alpha_bar_oracle(steps: usize, lo: f64, hi: f64, t: usize) -> f64 {
    (0..t)
        .map(|i| {
            let beta = if steps == 1 { lo } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 };
            1.0 - beta
        })
        .product()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn q_sample_matches_closed_form(t in 1usize..=50, seed in 0u64..1000) {
        let s = schedule(50);
        let z0 = randn(seed, &[1, 2, 3, 3]);
        let eps = randn(seed + 1, &[1, 2, 3, 3]);
        let zt = to_vec(&s.q_sample(&z0, &[t], &eps).unwrap());
        let ab = alpha_bar_oracle(50, 1e-3, 0.2, t);
        for ((z, a), e) in zt.iter().zip(to_vec(&z0)).zip(to_vec(&eps)) {
            prop_assert!((z - (ab.sqrt() * a + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_with_the_true_noise_recovers_x0_at_every_step(steps in 1usize..=20, seed in 0u64..1000) {
        // A predictor that knows x0 returns the exact noise for any z_t; DDIM
        // must then predict x0 at each visited step and end on it.
        let s = schedule(20);
        let x0 = randn(seed, &[2, 2, 3, 3]);
        let oracle = |z: &Tensor, t: usize| -> facedit::Result<Tensor> {
            let ab = s.alpha_bar_at(t);
            Ok(((z - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        };
        let z_t = randn(seed + 7, &[2, 2, 3, 3]);
        let traj = ddim_trajectory(&s, &oracle, &z_t, steps).unwrap();
        prop_assert_eq!(traj.len(), steps);
        let want = to_vec(&x0);
        for step in &traj {
            for (a, b) in to_vec(&step.x0_pred).iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-9, "t = {}", step.t);
            }
        }
        for (a, b) in to_vec(&traj.last().unwrap().z_prev).iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn merging_identical_layers_is_the_layer(n in 1usize..5, copies in 1usize..4, seed in 0u64..1000) {
        let logits = randn(seed, &[2, n, 4, 4]);
        let layer = candle_nn::ops::softmax(&logits, 1).unwrap();
        let rec = CrossAttnRecord { layers: vec![layer.clone(); copies] };
        let merged = merge_cross_attention(&rec, 4).unwrap();
        for (a, b) in to_vec(&merged).iter().zip(to_vec(&layer)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictor_has_zero_ldm_loss(seed in 0u64..1000) {
        let eps = randn(seed, &[3, 4, 2, 2]);
        prop_assert_eq!(nn::scalar(&loss_ldm(&eps, &eps).unwrap()).unwrap(), 0.0);
    }
}

#[test]
fn zero_predictor_ldm_loss_is_the_noise_variance() {
    let eps = randn(11, &[64, 4, 8, 8]);
    let zero = eps.zeros_like().unwrap();
    let l = nn::scalar(&loss_ldm(&eps, &zero).unwrap()).unwrap();
    let oracle = to_vec(&eps).iter().map(|v| v * v).sum::<f64>() / eps.elem_count() as f64;
    assert!((l - oracle).abs() < 1e-12);
    // 16384 standard normals: the sample second moment sits within a few percent of 1.
    assert!((l - 1.0).abs() < 0.05, "{l}");
}

#[test]
fn acr_of_uniform_against_one_hot_four_tokens() {
    // Per pixel: (1/4 - 1)² + 3·(1/4)² = 3/4, averaged over 4 tokens = 3/16.
    let uniform = Tensor::full(0.25f64, (1, 4, 3, 3), &Device::Cpu).unwrap();
    let mut hot = vec![0.0f64; 36];
    for p in 0..9 {
        hot[(p % 4) * 9 + p] = 1.0;
    }
    let one_hot = Tensor::from_vec(hot, (1, 4, 3, 3), &Device::Cpu).unwrap();
    let l = nn::scalar(&loss_acr(&uniform, &one_hot).unwrap()).unwrap();
    assert!((l - 0.1875).abs() < 1e-12, "{l}");
}

fn toy_8x8(use_identity: bool) -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        latent_size: 8,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        res_blocks: 1,
        attention_resolutions: vec![8, 4],
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

fn toy_batch(seed: u64) -> TrainBatch {
    let masks = candle_nn::ops::softmax(&randn(seed + 3, &[2, 3, 8, 8]), 1).unwrap();
    TrainBatch {
        z0: randn(seed, &[2, 2, 8, 8]),
        cond: Conditions {
            f_r: randn(seed + 1, &[2, 2, 8, 8]),
            tokens: randn(seed + 2, &[2, 3, 6]),
            f_id: Some(randn(seed + 4, &[2, 5])),
        },
        m_q: masks,
    }
}

#[test]
fn denoiser_gradients_match_central_differences() {
    let model = Denoiser::new(&toy_8x8(true), &toy_schedule(), 5, DType::F64).unwrap();
    let batch = toy_batch(20);
    let t = [7usize, 31];
    let eps = randn(30, &[2, 2, 8, 8]);
    let delta = 0.1;
    let loss = |m: &Denoiser| nn::scalar(&loss_terms(m, &batch, &t, &eps, delta).unwrap().total).unwrap();
    let grads = loss_terms(&model, &batch, &t, &eps, delta).unwrap().total.backward().unwrap();

    // One block per kind of layer; the zero-initialized output convolutions
    // are included so their gradient is checked too.
    let mut checked = 0;
    for name in model.params.names() {
        let keep = ["conv_in", "temb1", "adain", "cross_k_ctx", "proj_in", "ff_in", "conv_out"];
        if !keep.iter().any(|k| name.contains(k)) {
            continue;
        }
        let var = model.params.get(&name).unwrap();
        let g = grads.get(var.as_tensor()).map(to_vec).unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = to_vec(var.as_tensor());
        let idx = [0, base.len() / 2, base.len() - 1];
        for &i in &idx {
            let h = 1e-5;
            let bump = |dv: f64| {
                let mut v = base.clone();
                v[i] += dv;
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let l = loss(&model);
                var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
                l
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / scale <= 1e-3, "{name}[{i}]: analytic {} vs numeric {fd}", g[i]);
            checked += 1;
        }
    }
    assert!(checked >= 15, "only {checked} entries checked");
}

#[test]
fn conditioning_inputs_each_reach_the_output() {
    let model = Denoiser::new(&toy_8x8(true), &toy_schedule(), 6, DType::F64).unwrap();
    // Zero-initialized output and AdaIN layers would hide the inputs; give them weights.
    for name in model.params.names() {
        if ["conv_out", "proj_out", "conv2", "adain"].iter().any(|k| name.contains(k)) {
            let v = model.params.get(&name).unwrap();
            v.set(&randn(name.len() as u64, v.dims()).affine(0.1, 0.0).unwrap()).unwrap();
        }
    }
    let batch = toy_batch(40);
    let z = randn(41, &[2, 2, 8, 8]);
    let out = |c: &Conditions| to_vec(&model.forward(&z, &[10, 10], c).unwrap().0);
    let base = out(&batch.cond);

    let mut c = batch.cond.clone();
    c.f_r = randn(50, &[2, 2, 8, 8]);
    assert_ne!(out(&c), base, "f_r ignored");
    let mut c = batch.cond.clone();
    c.tokens = randn(51, &[2, 3, 6]);
    assert_ne!(out(&c), base, "tokens ignored");
    let mut c = batch.cond.clone();
    c.f_id = Some(randn(52, &[2, 5]));
    assert_ne!(out(&c), base, "identity ignored");

    model.zero_token_projections().unwrap();
    let fixed = out(&batch.cond);
    let mut c = batch.cond.clone();
    c.tokens = randn(53, &[2, 3, 6]);
    assert_eq!(out(&c), fixed);
}

fn toy_rsc(slots: usize) -> RscConfig {
    RscConfig {
        image_size: 16,
        output_size: 8,
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        res_blocks: 1,
        heads: 2,
        slot_dim: 8,
        num_slots: slots,
        iterations: 3,
        mlp_hidden: 16,
        decoder_channels: 8,
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), perm.len(), &Device::Cpu).unwrap();
    t.index_select(&idx, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn slot_attention_is_permutation_equivariant(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let m = RscModel::new(&toy_rsc(4), seed, DType::F64).unwrap();
        let x = randn(seed + 1, &[2, 3, 16, 16]).affine(0.2, 0.5).unwrap();
        let feats = m.encode_features(&x).unwrap();
        let init = m.init_tokens(2, Some(&mut ChaCha8Rng::seed_from_u64(seed))).unwrap();
        let a = m.slot_attention(&feats, &init, 3).unwrap();
        let b = m.slot_attention(&feats, &permute_rows(&init, &perm), 3).unwrap();
        for (u, v) in to_vec(&permute_rows(&a.tokens, &perm)).iter().zip(to_vec(&b.tokens)) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
        for (u, v) in to_vec(&permute_rows(&a.masks, &perm)).iter().zip(to_vec(&b.masks)) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn slot_masks_partition_every_pixel() {
    let m = RscModel::new(&toy_rsc(4), 2, DType::F64).unwrap();
    let x = randn(3, &[3, 3, 16, 16]).affine(0.2, 0.5).unwrap();
    let t = m.tokens(&x).unwrap();
    for s in to_vec(&t.masks.sum(1).unwrap()) {
        assert!((s - 1.0).abs() <= 1e-5);
    }
    assert!(to_vec(&t.masks).iter().all(|&v| v >= 0.0));
}

#[test]
fn reconstruction_gradient_wrt_a_token_matches_central_differences() {
    let cfg = RscConfig {
        image_size: 8,
        output_size: 4,
        channel_multipliers: vec![1, 2],
        ..toy_rsc(3)
    };
    let m = RscModel::new(&cfg, 9, DType::F64).unwrap();
    let x = randn(10, &[1, 3, 8, 8]).affine(0.2, 0.5).unwrap();
    let tokens = candle_core::Var::from_tensor(&randn(11, &[1, 3, 8])).unwrap();
    let loss = |t: &Tensor| nn::mse(&m.decode_slots(t).unwrap().merged, &x).unwrap();
    let grads = loss(tokens.as_tensor()).backward().unwrap();
    let g = to_vec(grads.get(tokens.as_tensor()).unwrap());
    let base = to_vec(tokens.as_tensor());
    // token 1, every coordinate
    for i in 8..16 {
        let h = 1e-5;
        let at = |dv: f64| {
            let mut v = base.clone();
            v[i] += dv;
            nn::scalar(&loss(&Tensor::from_vec(v, (1, 3, 8), &Device::Cpu).unwrap())).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let scale = fd.abs().max(g[i].abs()).max(1e-6);
        assert!((fd - g[i]).abs() / scale <= 1e-3, "coordinate {i}: analytic {} vs numeric {fd}", g[i]);
    }
}
