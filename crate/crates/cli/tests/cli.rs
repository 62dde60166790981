use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 3
[phantom]
count = 2
[phantom.spec]
shape = [12, 12, 12]
r_et = [1.0, 1.3]
r_tc = [1.6, 2.0]
r_wt = [2.3, 2.8]
[segnet.baseline]
levels = 2
base_filters = 4
max_filters = 8
patch_shape = [8, 8, 8]
[segnet.expanded]
levels = 2
base_filters = 4
max_filters = 8
encoder_multiplier = 2
norm = "group"
group_count = 2
patch_shape = [8, 8, 8]
[strategy]
kind = "S_SSA"
target_steps = 3
pretrain_steps = 2
[sr_training]
epochs = 1
"#;

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Work { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tumorseg"))
            .current_dir(self.dir.path())
            .args(["--config", "tiny.toml", "--deterministic"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn phantom_writes_cases_and_manifest() {
    let w = Work::new();
    let stdout = w.ok(&["phantom", "--out", "a", "--count", "3"]);
    assert!(stdout.contains("3 cases"));
    assert_eq!(
        files(&w.path("a")),
        ["case_0000", "case_0001", "case_0002", "dataset.json", "run.json"]
    );
    let m = manifest(&w.path("a"));
    assert_eq!(m["command"], "phantom");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["checkpoint_format"], 1);
    let artifacts = m["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 3 * 5 + 1);
    assert!(artifacts.iter().all(|a| a["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn phantom_is_deterministic_and_seeded() {
    let w = Work::new();
    w.ok(&["phantom", "--out", "a"]);
    w.ok(&["phantom", "--out", "b"]);
    w.ok(&["phantom", "--out", "c", "--seed", "4"]);
    let a = manifest(&w.path("a"))["artifacts"].clone();
    assert_eq!(a, manifest(&w.path("b"))["artifacts"]);
    assert_ne!(a, manifest(&w.path("c"))["artifacts"]);
}

#[test]
fn zero_count_phantom_succeeds_but_training_needs_cases() {
    let w = Work::new();
    let stdout = w.ok(&["phantom", "--out", "empty", "--count", "0"]);
    assert!(stdout.contains("0 cases"));
    assert_eq!(code(&w.run(&["train", "--out", "t", "--target", "empty"])), 2);
}

#[test]
fn non_empty_output_needs_force() {
    let w = Work::new();
    w.ok(&["phantom", "--out", "a"]);
    let again = w.run(&["phantom", "--out", "a"]);
    assert_eq!(code(&again), 1);
    w.ok(&["phantom", "--out", "a", "--count", "1", "--force"]);
    assert_eq!(files(&w.path("a")), ["case_0000", "dataset.json", "run.json"]);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let w = Work::new();
    assert_eq!(code(&w.run(&["frobnicate"])), 1);
    assert_eq!(code(&w.run(&["phantom"])), 1, "missing --out");
    std::fs::write(w.path("bad.toml"), "[training]\nbatch = 3\n").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_tumorseg"))
        .current_dir(w.dir.path())
        .args(["--config", "bad.toml", "phantom", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
    assert!(!w.path("x").exists(), "config errors must not create output");
    assert_eq!(code(&w.run(&["eval", "--pred", "nope", "--gt", "nope", "--out", "e"])), 2);
    assert_eq!(code(&w.run(&["train", "--strategy", "S_XYZ", "--out", "t"])), 1);

    std::fs::write(
        w.path("hot.toml"),
        format!("{TINY}\n[strategy.target_optimizer]\nlr0 = 1e300\n"),
    )
    .unwrap();
    w.ok(&["phantom", "--out", "a"]);
    let diverge = Command::new(env!("CARGO_BIN_EXE_tumorseg"))
        .current_dir(w.dir.path())
        .args(["--config", "hot.toml", "train", "--target", "a", "--out", "t", "--steps", "20"])
        .output()
        .unwrap();
    assert_eq!(code(&diverge), 3, "{}", String::from_utf8_lossy(&diverge.stderr));
}

#[test]
fn sr_ssa_without_sr_model_is_rejected() {
    let w = Work::new();
    w.ok(&["phantom", "--out", "a"]);
    let out = w.run(&["train", "--strategy", "S_srSSA", "--target", "a", "--out", "t"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("super-resolution"));
    assert!(!w.path("t").exists());
}

#[test]
fn train_infer_eval_report_pipeline() {
    let w = Work::new();
    w.ok(&["phantom", "--out", "a"]);
    w.ok(&["phantom", "--out", "b", "--degraded"]);
    w.ok(&["train", "--strategy", "S_GLI_to_SSA", "--source", "a", "--target", "b", "--out", "t"]);
    assert_eq!(
        files(&w.path("t")),
        [
            "baseline.ckpt",
            "baseline_fine_tune.csv",
            "baseline_pretrain.csv",
            "expanded.ckpt",
            "expanded_fine_tune.csv",
            "expanded_pretrain.csv",
            "run.json"
        ]
    );
    let log = std::fs::read_to_string(w.path("t/baseline_fine_tune.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss,dice_term,bce_term"));
    assert_eq!(log.lines().count(), 1 + 3);
    assert_eq!(manifest(&w.path("t"))["details"]["strategy"], "S_GLI_to_SSA");

    w.ok(&[
        "infer",
        "--checkpoint",
        "t/baseline.ckpt",
        "--checkpoint",
        "t/expanded.ckpt",
        "--input",
        "b",
        "--out",
        "p",
        "--save-probabilities",
    ]);
    let p = files(&w.path("p"));
    assert!(p.contains(&"case_0001.nii.gz".to_string()));
    assert!(p.contains(&"case_0001_prob_wt.nii.gz".to_string()));

    let table = w.ok(&["eval", "--pred", "p", "--gt", "b", "--out", "e", "--label", "S_GLI_to_SSA"]);
    assert!(table.contains("S_GLI_to_SSA"));
    let metrics = std::fs::read_to_string(w.path("e/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    w.ok(&["report", "--metrics", "S_GLI_to_SSA=e/metrics.csv", "--images", "b", "--pred", "p", "--out", "r"]);
    assert_eq!(files(&w.path("r/overlays")).len(), 2 * 3);
    let summary = std::fs::read_to_string(w.path("r/summary.txt")).unwrap();
    assert!(summary.contains("Dice Score") && summary.contains("Hausdorff"));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let w = Work::new();
    w.ok(&["phantom", "--out", "g"]);
    std::fs::create_dir(w.path("pred")).unwrap();
    for id in ["case_0000", "case_0001"] {
        std::fs::copy(
            w.path(&format!("g/{id}/seg.nii.gz")),
            w.path(&format!("pred/{id}.nii.gz")),
        )
        .unwrap();
    }
    w.ok(&["eval", "--pred", "pred", "--gt", "g", "--out", "e"]);
    let text = std::fs::read_to_string(w.path("e/metrics.csv")).unwrap();
    let mut rows = text.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    for row in rows {
        for (name, value) in header.iter().zip(row.split(',')).skip(1) {
            let v: f64 = value.parse().unwrap();
            let expect = if name.starts_with("dice") { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "{name}");
        }
    }
}

#[test]
fn super_resolution_commands_double_the_grid() {
    let w = Work::new();
    w.ok(&["phantom", "--out", "a"]);
    w.ok(&["phantom", "--out", "b", "--degraded", "--count", "1"]);
    w.ok(&["sr-train", "--data", "a", "--out", "sr"]);
    let log = std::fs::read_to_string(w.path("sr/sr_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss\n"));
    w.ok(&["superres", "--input", "b", "--checkpoint", "sr/sr.ckpt", "--out", "bsr"]);
    let m = manifest(&w.path("bsr"));
    assert_eq!(m["details"]["cases"][0]["shape_in"], serde_json::json!([12, 12, 12]));
    assert_eq!(m["details"]["cases"][0]["shape_out"], serde_json::json!([24, 24, 24]));

    w.ok(&["train", "--strategy", "S_srSSA", "--target", "b", "--sr-checkpoint", "sr/sr.ckpt", "--out", "t"]);
    let missing_sr = w.run(&["infer", "--checkpoint", "t/baseline.ckpt", "--input", "b", "--out", "p"]);
    assert_eq!(code(&missing_sr), 1);
    w.ok(&["infer", "--checkpoint", "t/baseline.ckpt", "--input", "b", "--sr-checkpoint", "sr/sr.ckpt", "--out", "p"]);
    w.ok(&["eval", "--pred", "p", "--gt", "b", "--out", "e"]);
}

#[test]
fn infer_on_empty_input_succeeds() {
    let w = Work::new();
    w.ok(&["phantom", "--out", "a", "--count", "1"]);
    w.ok(&["train", "--target", "a", "--out", "t", "--steps", "1"]);
    std::fs::create_dir(w.path("none")).unwrap();
    let stdout = w.ok(&["infer", "--checkpoint", "t/baseline.ckpt", "--input", "none", "--out", "p"]);
    assert!(stdout.contains("0 cases"));
}
