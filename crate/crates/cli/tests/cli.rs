use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn facedit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facedit"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("FACEDIT_DATASET")
        .env_remove("FACEDIT_CHECKPOINTS")
        .env_remove("FACEDIT_OUTPUT")
        .output()
        .expect("spawn facedit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_pipeline(out: &Path) {
    for stage in ["synth-data", "train-ae", "pretrain-rsc", "train-id", "train-estimator", "train-diffusion"] {
        let o = facedit(out, &["--config", TINY, stage]);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
}

fn read_report(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap()
}

#[test]
fn render_defaults_to_rest_pose_png() {
    let dir = tempfile::tempdir().unwrap();
    let o = facedit(dir.path(), &["render", "--size", "48", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = image::open(dir.path().join("render.png")).unwrap();
    assert_eq!((img.height(), img.width()), (48, 40));
    let produced: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("produced.json")).unwrap()).unwrap();
    assert_eq!(produced.len(), 1);
    assert!(produced[0].ends_with("render.png"));
}

#[test]
fn render_reads_a_coefficient_file() {
    let dir = tempfile::tempdir().unwrap();
    let coeffs = dir.path().join("c.json");
    std::fs::write(&coeffs, r#"{"pose": [0,0.4,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0]}"#).unwrap();
    let o = facedit(dir.path(), &["render", "--coeffs", coeffs.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(&coeffs, r#"{"pose": [1, 2]}"#).unwrap();
    let o = facedit(dir.path(), &["render", "--coeffs", coeffs.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(TINY).unwrap().replace("id_dim = 6", "id_dim = 7");
    std::fs::write(&bad, text).unwrap();
    let o = facedit(dir.path(), &["--config", bad.to_str().unwrap(), "train-ae"]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("identity.model.embed_dim") && msg.contains("diffusion.model.id_dim"), "{msg}");

    assert_eq!(code(&facedit(dir.path(), &["--no-such-flag", "eval"])), 2);
    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&facedit(dir.path(), &["--config", missing.to_str().unwrap(), "eval"])), 2);
}

#[test]
fn missing_prerequisites_exit_3_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = facedit(dir.path(), &["--config", TINY, "train-ae"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("synth-data"));

    assert_eq!(code(&facedit(dir.path(), &["--config", TINY, "synth-data"])), 0);
    let o = facedit(dir.path(), &["--config", TINY, "train-diffusion"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("train-ae"), "{}", stderr(&o));
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["synth-data", "train-ae"] {
        assert_eq!(code(&facedit(dir.path(), &["--config", TINY, stage])), 0);
    }
    let other = dir.path().join("other.toml");
    let text = std::fs::read_to_string(TINY).unwrap().replacen("commitment = 0.25", "commitment = 0.5", 1);
    std::fs::write(&other, text).unwrap();
    let o = facedit(dir.path(), &["--config", other.to_str().unwrap(), "masks", "--pair", "0"]);
    // masks needs only the RSC checkpoint, which is also missing here.
    assert_eq!(code(&o), 3);
    let o = facedit(dir.path(), &["--config", other.to_str().unwrap(), "train-diffusion"]);
    assert_eq!(code(&o), 3);
    let msg = stderr(&o);
    assert!(msg.contains("digest"), "{msg}");
}

#[test]
fn tiny_pipeline_end_to_end_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        run_pipeline(dir);
        let o = facedit(dir, &["--config", TINY, "eval"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ra, rb) = (read_report(a.path()), read_report(b.path()));
    let fields = ["apd", "aed", "ald", "csim", "miou", "fid_proxy", "attn_mse", "background_change"];
    for f in fields {
        let (x, y) = (ra[f].as_f64().unwrap(), rb[f].as_f64().unwrap());
        assert!(x.is_finite(), "{f} = {x}");
        assert!((x - y).abs() <= 1e-6, "{f}: {x} vs {y}");
    }
    assert_eq!(ra["config_digest"], rb["config_digest"]);

    let produced: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("produced.json")).unwrap()).unwrap();
    for f in &produced {
        assert!(Path::new(f).starts_with(a.path()), "{f} outside --out");
        assert!(Path::new(f).exists(), "{f}");
    }
    assert!(produced.iter().any(|f| f.ends_with("denoiser.bin")));
    assert!(produced.iter().any(|f| f.ends_with("rsc_joint.bin")));

    // --only lighting changes nothing but the lighting field.
    let o = facedit(a.path(), &["--config", TINY, "edit", "--pair", "0", "--query", "1", "--only", "lighting"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("edit_000000.json")).unwrap()).unwrap();
    assert_eq!(rec["changed_fields"], serde_json::json!(["lighting"]));
    let grid = image::open(a.path().join("edit_000000.png")).unwrap();
    assert_eq!((grid.height(), grid.width()), (32, 4 * 32));

    let o = facedit(a.path(), &["--config", TINY, "edit", "--pair", "0", "--query", "1", "--swap", "background"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = facedit(a.path(), &["--config", TINY, "masks", "--pair", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in 0..4 {
        assert!(a.path().join(format!("masks_000000_token{k}.png")).exists());
    }
    assert!(a.path().join("masks_000000_segmentation.png").exists());
}
