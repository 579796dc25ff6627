use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convbn::harness::verify::{self, VerifyOptions};
use convbn::io::{self, TensorMap};
use convbn::{DType, Tensor};
use serde_json::Value;

fn convbn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convbn")).args(args).output().unwrap()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_report_is_deterministic() {
    let opts = VerifyOptions { seed: 42, instances: 10, ..Default::default() };
    let a = verify::run(&opts).unwrap();
    let b = verify::run(&opts).unwrap();
    assert!(a.passed());
    assert_eq!(a.deterministic_json(), b.deterministic_json());
}

#[test]
fn verify_passes_and_fault_fails() {
    let ok = convbn(&["verify", "--seed", "42", "--instances", "12"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(stderr(&ok).lines().all(|l| l.starts_with("PASS")));
    let mut a = json(&ok);
    let mut b = json(&convbn(&["verify", "--seed", "42", "--instances", "12"]));
    for v in [&mut a, &mut b] {
        v.as_object_mut().unwrap().remove("nondeterministic");
    }
    assert_eq!(a, b);

    let bad = convbn(&["verify", "--seed", "42", "--instances", "12", "--fault-instance", "3"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("FAIL"));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("instance 3 (seed 42)"));
}

#[test]
fn invalid_inputs_exit_with_two() {
    assert_eq!(code(&convbn(&["stability", "--coeffs", "1,0"])), 2);
    assert_eq!(code(&convbn(&["gradcheck", "--dtype", "f32"])), 2);
    assert_eq!(code(&convbn(&["train", "--steps", "2", "--batch-size", "0"])), 2);
    assert_eq!(code(&convbn(&["rewrite"])), 2);
    assert_eq!(code(&convbn(&["coeffs", "/nonexistent/stats.cbnt"])), 2);
}

#[test]
fn coeffs_names_missing_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("stats.cbnt");
    let mut m = TensorMap::new();
    m.insert("l1.gamma".into(), Tensor::ones(DType::F32, [3]));
    io::write(&p, &m).unwrap();
    let o = convbn(&["coeffs", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("l1.running_var"), "{}", stderr(&o));

    m.insert("l1.running_var".into(), Tensor::full(DType::F32, [3], 0.25));
    io::write(&p, &m).unwrap();
    let o = convbn(&["coeffs", p.to_str().unwrap(), "--bins", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let counts = &json(&o)["metrics"]["pooled"]["counts"];
    assert_eq!(counts.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>(), 3);
}

#[test]
fn stability_identity_and_scaled() {
    let o = convbn(&["stability", "--coeffs", "1,1,1", "--steps", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("identity_trajectory_gap"));
    let o = convbn(&["stability", "--coeffs", "0.1,1,10", "--steps", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn gradcheck_subset_passes() {
    let o = convbn(&["gradcheck", "--instances", "2", "--ops", "conv2d,block_tune"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn rewrite_then_revert_restores_files() {
    let dir = tempfile::tempdir().unwrap();
    let fused = dir.path().join("fused.json");
    let back = dir.path().join("back.json");
    let graph = fixture("seven_pattern.json");
    let o = convbn(&["rewrite", "--graph", &graph, "--mode", "deploy", "--out-graph", fused.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&o)["rewritten"].as_array().unwrap().len(), 5);
    let o = convbn(&["rewrite", "--graph", fused.to_str().unwrap(), "--revert", "--out-graph", back.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(&dir.path().join("back.cbnt")), read(Path::new(&fixture("seven_pattern.cbnt"))));
}

#[test]
fn memory_table_lists_every_mode() {
    let o = convbn(&["memory", "--graph", &fixture("toy_chain.json"), "--input", "4,3,8,8", "--table"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout).to_lowercase();
    for m in ["train", "eval", "tune", "deploy"] {
        assert!(text.contains(m), "{text}");
    }
}

#[test]
fn short_train_run_reports_losses() {
    let o = convbn(&["train", "--steps", "3", "--batch-size", "8", "--samples", "32", "--mode", "tune"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(json(&o)["metrics"].is_object());
}
