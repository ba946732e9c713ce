use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hypopose"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/bimodal_heatmap.bin")
}

fn digest(o: &Output) -> String {
    stdout(o).lines().find_map(|l| l.strip_prefix("sha256 ")).expect("digest line").to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(&["generate", "--seed", "7", "--count", "6", "--out", a.path().to_str().unwrap()]);
    let rb = run(&["generate", "--seed", "7", "--count", "6", "--out", b.path().to_str().unwrap()]);
    assert!(ra.status.success() && rb.status.success());
    assert_eq!(digest(&ra), digest(&rb));
    let c = tempfile::tempdir().unwrap();
    let rc = run(&["generate", "--seed", "8", "--count", "6", "--out", c.path().to_str().unwrap()]);
    assert_ne!(digest(&ra), digest(&rc));
}

#[test]
fn decode_recovers_the_bundled_bimodal_fixture() {
    let o = run(&["decode", fixture().to_str().unwrap(), "--n-hypo", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let depth = |h: usize| v["poses"][h][0][2].as_f64().unwrap();
    let mut z = [depth(0), depth(1)];
    z.sort_by(f64::total_cmp);
    assert!((z[0] - 16.0).abs() <= 0.5 && (z[1] - 48.0).abs() <= 0.5, "{z:?}");
    assert_eq!(v["valid_count"][0], 2);
}

#[test]
fn decode_writes_json_to_out() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/hyp.json");
    let o = run(&["decode", fixture().to_str().unwrap(), "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(v["poses"].as_array().unwrap().len(), 3);
}

#[test]
fn decode_failures_map_to_exit_codes() {
    assert_eq!(run(&["decode", "/nonexistent/heatmap.bin"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nan.bin");
    let mut bytes = br#"{"shape":[1,4,2,2],"dtype":"f64le"}"#.to_vec();
    bytes.push(b'\n');
    for i in 0..16 {
        let v = if i == 5 { f64::NAN } else { 0.1 };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(run(&["decode", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_defaults() {
    let o = run(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let worst: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(worst < 1e-4);
    for name in ["mask_loss", "lsgan_discriminator_loss", "lsgan_generator_wta_loss", "render_wta_loss", "skeleton_mask_render", "discriminator_forward"] {
        assert!(out.contains(name), "{name} missing");
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("quick.toml");
    std::fs::write(
        &config,
        "seed = 3\n[detector]\nhidden = 16\n[mask]\nphysique_hidden = 16\n[optimizer]\nstage1_epochs = 1\nstage2_epochs = 1\n[eval]\nval_samples = 4\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let data = root.join("data");
    let run_dir = root.join("run");
    assert!(run(&["--config", cfg, "generate", "--count", "24", "--out", data.to_str().unwrap()]).status.success());
    let t = run(&["--config", cfg, "train", "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    for f in ["config.toml", "train_log.csv", "stage1.ckpt", "stage2.ckpt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let ck = run_dir.join("stage2.ckpt");
    let eval_dir = root.join("eval");
    let e = run(&[
        "--config",
        cfg,
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--protocol",
        "best",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let csv = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("best,24,"));
    assert!(eval_dir.join("metrics.json").exists());
    // the saved config reproduces the hash; the built-in defaults do not
    let again = run(&["--config", run_dir.join("config.toml").to_str().unwrap(), "eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let refused = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(refused.status.code(), Some(1));
}
