use facedit::config::RunConfig;
use facedit::pipeline::{Pipeline, StageKind};
use facedit::rsc::RscModel;

const TINY: &str = include_str!("../../cli/tests/fixtures/tiny.toml");

fn upstream(root: &std::path::Path, finetune: bool) -> Pipeline {
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    cfg.paths.dataset = root.join("data");
    cfg.paths.checkpoints = root.join("checkpoints");
    cfg.paths.output = root.join("out");
    cfg.diffusion.finetune_rsc = finetune;
    let mut p = Pipeline::new(cfg).unwrap();
    p.synth_data().unwrap();
    p.train_ae().unwrap();
    p.pretrain_rsc().unwrap();
    p.train_id().unwrap();
    p
}

fn flat(m: &RscModel) -> Vec<f32> {
    m.params
        .all_vars()
        .iter()
        .flat_map(|v| v.as_tensor().flatten_all().unwrap().to_dtype(candle_core::DType::F32).unwrap().to_vec1::<f32>().unwrap())
        .collect()
}

#[test]
fn finetuning_moves_a_copy_of_the_token_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = upstream(dir.path(), true);
    let pretrained_file = p.checkpoint_path(StageKind::Rsc);
    let before = std::fs::read(&pretrained_file).unwrap();
    assert!(p.load_editing_rsc().is_err(), "no joint encoder before train-diffusion");

    p.train_diffusion().unwrap();
    assert_eq!(std::fs::read(&pretrained_file).unwrap(), before);
    let (pre, joint) = (flat(&p.load_rsc().unwrap()), flat(&p.load_editing_rsc().unwrap()));
    assert_eq!(pre.len(), joint.len());
    assert!(pre.iter().zip(&joint).any(|(a, b)| a != b));
}

#[test]
fn frozen_encoder_is_used_as_pretrained() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = upstream(dir.path(), false);
    p.train_diffusion().unwrap();
    assert!(!p.joint_rsc_path().exists());
    assert_eq!(flat(&p.load_rsc().unwrap()), flat(&p.load_editing_rsc().unwrap()));
}
