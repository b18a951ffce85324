use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ldp_core::artifact::Artifact;

const TINY: &str = r#"
seed = 3

[data]
corpus_images = 12
held_out_images = 4

[autoencoder]
image_size = 32
downsample_factor = 8
training_epochs = 1
batch_size = 6

[diffusion]
base_width = 8
time_embed_dim = 8
train_steps = 10
batch_size = 4

[detector.grid]
image_size = 32
grid_size = 4
base_width = 4

[detector.train]
scenes = 12
epochs = 1
batch_size = 6

[attack]
train_scenes = 6

[attack.optimizer]
steps = 4
batch_size = 3
final_candidates = 2

[eval]
gt_threshold = 0.05
prediction_floor = 0.05
asr_threshold = 0.05
held_out_images = 6
"#;

fn ldp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldp")).args(args).arg("--quiet").output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Stack {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Stack {
    fn path(&self, name: &str) -> String {
        s(&self.root.join(name))
    }
}

/// Tiny trained artifacts shared by the tests of this file.
fn stack() -> &'static Stack {
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let st = Stack { _dir: dir, root, config };
        let c = s(&st.config);
        let ok = |args: &[&str]| {
            let o = ldp(args);
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        };
        ok(&["train-ae", "--config", &c, "--out", &st.path("ae.ldp")]);
        ok(&["train-diffusion", "--config", &c, "--ae", &st.path("ae.ldp"), "--out", &st.path("diff.ldp")]);
        ok(&["train-detector", "--config", &c, "--out", &st.path("det.ldp")]);
        ok(&["train-detector", "--config", &c, "--seed", "4", "--out", &st.path("det2.ldp")]);
        ok(&[
            "optimize-patch",
            "--config",
            &c,
            "--ae",
            &st.path("ae.ldp"),
            "--diffusion",
            &st.path("diff.ldp"),
            "--detector",
            &st.path("det.ldp"),
            "--out",
            &st.path("patch.ldp"),
        ]);
        st
    })
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

#[test]
fn artifacts_have_their_kinds() {
    let st = stack();
    for (file, kind) in [("ae.ldp", "autoencoder"), ("diff.ldp", "diffusion"), ("det.ldp", "detector"), ("patch.ldp", "patch")] {
        assert_eq!(Artifact::load(st.path(file)).unwrap().kind, kind);
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(st.path("ae.metrics.json")).unwrap()).unwrap();
    assert!(m["held_out_mse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_key_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[autoencoder]\nlatent_dept = 4\n").unwrap();
    let out = dir.path().join("ae.ldp");
    let o = ldp(&["train-ae", "--config", &s(&bad), "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn missing_corpus_without_synthetic_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\nsynthetic = false\n").unwrap();
    let o = ldp(&["train-ae", "--config", &s(&cfg), "--out", &s(&dir.path().join("ae.ldp"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("ae.ldp").exists());

    fs::write(&cfg, format!("[data]\nsynthetic = false\ncorpus_dir = {:?}\n", s(&dir.path().join("nowhere")))).unwrap();
    let o = ldp(&["train-ae", "--config", &s(&cfg), "--out", &s(&dir.path().join("ae.ldp"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn wrong_artifact_kind_exits_2() {
    let st = stack();
    let dir = tempfile::tempdir().unwrap();
    let o = ldp(&[
        "train-diffusion",
        "--config",
        &s(&st.config),
        "--ae",
        &st.path("det.ldp"),
        "--out",
        &s(&dir.path().join("d.ldp")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kind"));
}

#[test]
fn stale_autoencoder_shape_exits_2() {
    let st = stack();
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("downsample_factor = 8", "downsample_factor = 4");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, text).unwrap();
    let o = ldp(&["train-diffusion", "--config", &s(&cfg), "--ae", &st.path("ae.ldp"), "--out", &s(&dir.path().join("d.ldp"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trained for"));
}

#[test]
fn patch_outputs() {
    let st = stack();
    let png = image_size(&st.root.join("patch.png"));
    assert_eq!(png, (32, 32));
    let mut rdr = csv::Reader::from_path(st.root.join("patch_loss.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["step", "l_det", "l_kl", "l_tv", "l_nps", "l_total"]);
    let rows: Vec<Vec<f64>> = rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let total = r[1] + 0.5 * r[2] + 0.1 * r[3] + 0.01 * r[4];
        assert!((total - r[5]).abs() < 1e-12, "{r:?}");
    }
}

fn image_size(path: &Path) -> (u32, u32) {
    // PNG IHDR: width and height are the big-endian words at bytes 16..24.
    let b = fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    (u32::from_be_bytes(b[16..20].try_into().unwrap()), u32::from_be_bytes(b[20..24].try_into().unwrap()))
}

#[test]
fn evaluate_report_schema() {
    let st = stack();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = ldp(&[
        "evaluate",
        "--config",
        &s(&st.config),
        "--detector",
        &st.path("det.ldp"),
        "--patch",
        &st.path("patch.ldp"),
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    for key in ["clean_map", "patched_map", "asr", "mean_clean_conf", "mean_patched_conf"] {
        let x = v[key].as_f64().unwrap();
        assert!(x.is_finite() && x >= 0.0, "{key}");
    }
    assert_eq!(v["clean_map"].as_f64().unwrap(), 100.0);
    assert_eq!(v["train_model"], "det");
    assert_eq!(v["victim_model"], "det");
    let n = v["clean_max_conf"].as_array().unwrap().len();
    assert!((1..=6).contains(&n));
    assert!(v["config"]["gt_threshold"].is_number());
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("train_model,victim_model,clean_map,patched_map,asr\n"));
}

#[test]
fn no_ground_truth_exits_4() {
    let st = stack();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("gt_threshold = 0.05", "gt_threshold = 0.999");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("r.json");
    let o = ldp(&["evaluate", "--config", &s(&cfg), "--detector", &st.path("det.ldp"), "--patch", &st.path("patch.ldp"), "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!out.exists());
}

#[test]
fn cross_eval_writes_a_square_matrix() {
    let st = stack();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cross.json");
    let o = ldp(&[
        "cross-eval",
        "--config",
        &s(&st.config),
        "--detector",
        &st.path("det.ldp"),
        "--detector",
        &st.path("det2.ldp"),
        "--patch",
        &st.path("patch.ldp"),
        "--patch",
        &st.path("patch.ldp"),
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let matrix = fs::read_to_string(dir.path().join("cross_matrix.csv")).unwrap();
    let lines: Vec<&str> = matrix.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "train_model,det,det2");
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    let flat = fs::read_to_string(dir.path().join("cross.csv")).unwrap();
    assert_eq!(flat.lines().count(), 5);
}

#[test]
fn bad_thread_cap_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ldp"))
        .args(["train-ae", "--quiet", "--out", &s(&dir.path().join("a.ldp"))])
        .env("LDP_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
