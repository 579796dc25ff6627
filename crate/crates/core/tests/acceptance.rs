//! The nine acceptance criteria. Each test prints one `PASS`/`FAIL` line
//! and fails if the criterion or its runtime budget is missed.
//!
//! Run with `cargo test -p convbn --test acceptance -- --nocapture` to see
//! the lines. Tests take a shared lock so runtimes and timings are not
//! disturbed by each other.
//!
//! The timing criterion depends on the machine. Its line always reports the
//! measured verdict, but it only fails the test when `CONVBN_STRICT_TIMING`
//! is set.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use convbn::fixtures;
use convbn::graph::{self, ExecOptions};
use convbn::harness::bench::{self, BenchOptions};
use convbn::harness::gradcheck::{self, GradcheckOptions};
use convbn::harness::stability::one_step;
use convbn::harness::train::{paired_eval_tune, TrainConfig, LOSS_GAP_TOL, PARAM_REL_TOL};
use convbn::harness::verify::{self, VerifyOptions};
use convbn::harness::ExperimentReport;
use convbn::memory::{count_saved, footprint_report_with, verify_against_engine};
use convbn::{io, DType, Graph, Mode, Rng, Shape};

static LOCK: Mutex<()> = Mutex::new(());

fn shipped(name: &str) -> Graph {
    Graph::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.json"))).unwrap()
}

/// Prints the verdict line and panics on failure.
fn verdict(id: u32, title: &str, ok: bool, detail: String, started: Instant, budget: Duration) {
    let line = report(id, title, ok, detail, started, budget);
    assert!(line.starts_with("PASS"), "{line}");
}

fn report(id: u32, title: &str, ok: bool, detail: String, started: Instant, budget: Duration) -> String {
    let took = started.elapsed();
    let status = if ok && took <= budget { "PASS" } else { "FAIL" };
    let line = format!("{status} [{id}] {title}: {detail}; {:.2}s (budget {}s)", took.as_secs_f64(), budget.as_secs());
    println!("{line}");
    line
}

/// Fraction of rounds in which `a` was no slower than `b`.
fn wins(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x <= y).count() as f64 / a.len() as f64
}

fn verify_report() -> ExperimentReport {
    verify::run(&VerifyOptions { seed: 42, instances: 50, ..Default::default() }).unwrap()
}

fn measured(r: &ExperimentReport, name: &str) -> f64 {
    r.criterion(name).unwrap().measured
}

#[test]
fn c1_eval_tune_forward() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let r = verify_report();
    let v = measured(&r, "eval_tune_forward_max_abs");
    verdict(1, "Eval/Tune forward", v <= 1e-10, format!("max abs {v:.3e} <= 1e-10 over 50 instances"), t, Duration::from_secs(10));
}

#[test]
fn c2_eval_tune_backward() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let r = verify_report();
    let v = measured(&r, "eval_tune_backward_max_rel");
    verdict(2, "Eval/Tune backward", v <= 1e-9, format!("max rel {v:.3e} <= 1e-9 over dX, dw, db, dgamma, dbeta"), t, Duration::from_secs(30));
}

#[test]
fn c3_deploy_relations() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let r = verify_report();
    let f = measured(&r, "deploy_forward_max_abs");
    let s = measured(&r, "deploy_gradient_scaling_max_rel");
    verdict(
        3,
        "Deploy relations",
        f <= 1e-10 && s <= 1e-10,
        format!("forward {f:.3e} <= 1e-10, gradient scaling {s:.3e} <= 1e-10"),
        t,
        Duration::from_secs(10),
    );
}

#[test]
fn c4_gradcheck() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let r = gradcheck::run(&GradcheckOptions { seed: 42, instances: 20, ..Default::default() }).unwrap();
    let per_op: Vec<_> = r.criteria.iter().filter(|c| c.name.starts_with("gradcheck_") && c.name != "gradcheck_zero_probe_magnitude").collect();
    let worst = per_op.iter().map(|c| c.measured).fold(0.0, f64::max);
    let failed: Vec<_> = r.criteria.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    verdict(
        4,
        "Finite-difference gradcheck",
        r.passed() && per_op.len() == gradcheck::OPS.len(),
        format!("{} ops x 20 instances, worst rel error {worst:.3e} <= 1e-5, failing {failed:?}", per_op.len()),
        t,
        Duration::from_secs(120),
    );
}

#[test]
fn c5_one_step_ratio() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let coeffs = [0.1, 1.0, 10.0];
    let r = one_step(42, &coeffs, 1e-3).unwrap();
    let ok = r.ratios.len() == 3 && r.max_rel_error <= 0.01;
    verdict(
        5,
        "One-step update ratio",
        ok,
        format!("ratios {:?} vs c^2 [0.01, 1, 100], max rel error {:.3e} <= 1e-2", r.ratios, r.max_rel_error),
        t,
        Duration::from_secs(5),
    );
}

#[test]
fn c6_rewriter() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let g = shipped("seven_pattern");
    let before = io::encode(&g.export_params()).unwrap();
    let x = Rng::new(42).normal_tensor(DType::F64, fixtures::SEVEN_PATTERN_INPUT, 1.0);
    let reference = graph::forward(&g, &x, &ExecOptions::default()).unwrap().output;
    let mut worst: f64 = 0.0;
    let mut counts = Vec::new();
    let mut restored = true;
    for mode in [Mode::Tune, Mode::Deploy] {
        let mut r = g.clone();
        let report = graph::turn_on(&mut r, mode).unwrap();
        counts.push((report.rewritten.len(), report.skipped.len()));
        let out = graph::forward(&r, &x, &ExecOptions::default()).unwrap().output;
        worst = worst.max(out.max_abs_diff(&reference).unwrap());
        graph::revert(&mut r).unwrap();
        restored &= io::encode(&r.export_params()).unwrap() == before;
    }
    let ok = counts.iter().all(|&c| c == (5, 2)) && worst <= 1e-10 && restored;
    verdict(
        6,
        "Rewriter soundness",
        ok,
        format!("(rewritten, skipped) {counts:?}, forward delta {worst:.3e} <= 1e-10, revert byte-identical {restored}"),
        t,
        Duration::from_secs(5),
    );
}

#[test]
fn c7_memory_model() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let cases = [
        ("seven_pattern", [2, 3, 8, 8]),
        ("toy_chain", [3, 3, 8, 8]),
        ("bench_stack", [4, 3, 16, 16]),
        ("single_block", [2, 3, 6, 6]),
        ("no_bn", [2, 3, 6, 6]),
    ];
    let mut mismatches = Vec::new();
    for (name, shape) in cases {
        let g = shipped(name);
        let dtype = g.params.values().next().unwrap().dtype();
        let x = Rng::new(42).normal_tensor(dtype, shape, 1.0);
        for mode in Mode::ALL {
            let m = verify_against_engine(&g, mode, &x).unwrap();
            if m != count_saved(&g, mode, x.shape(), dtype).unwrap() {
                mismatches.push(format!("{name}/{mode}"));
            }
        }
    }
    let (g, shapes) = fixtures::resnet50().unwrap();
    let r = footprint_report_with(&g, &shapes, &Shape::from(fixtures::RESNET50_INPUT), DType::F32).unwrap();
    let ratio = r.ratios.tune_over_eval;
    verdict(
        7,
        "Memory model",
        mismatches.is_empty() && (0.45..=0.65).contains(&ratio),
        format!("count mismatches {mismatches:?}, ResNet-50 tune/eval {ratio:.4} in [0.45, 0.65]"),
        t,
        Duration::from_secs(10),
    );
}

#[test]
fn c8_timing_order() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let g = shipped("bench_stack");
    let opts = BenchOptions { rounds: 30, inner: 2, warmup: 2, ..Default::default() };
    let cell = bench::time_cell(&g, 42, DType::F32, 16, 32, &opts).unwrap();
    let (e, tu, d) = (cell.median(Mode::Eval), cell.median(Mode::Tune), cell.median(Mode::Deploy));
    let samples = |m: Mode| cell.modes.iter().find(|t| t.mode == m).unwrap().samples_s.clone();
    let (se, st, sd) = (samples(Mode::Eval), samples(Mode::Tune), samples(Mode::Deploy));
    let line = report(
        8,
        "Timing order",
        cell.ordered,
        format!(
            "batch 16, 32x32 medians: deploy {:.2}ms <= tune {:.2}ms <= eval {:.2}ms; tune saving {:.1}%; \
             rounds won: deploy<=tune {:.0}%, tune<=eval {:.0}%",
            d * 1e3,
            tu * 1e3,
            e * 1e3,
            cell.tune_saving * 100.0,
            wins(&sd, &st) * 100.0,
            wins(&st, &se) * 100.0
        ),
        t,
        Duration::from_secs(180),
    );
    if std::env::var_os("CONVBN_STRICT_TIMING").is_some() {
        assert!(line.starts_with("PASS"), "{line}");
    }
}

#[test]
fn c9_training_equivalence() {
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let f32_run = paired_eval_tune(&TrainConfig { seed: 42, ..Default::default() }).unwrap();
    let f64_run = paired_eval_tune(&TrainConfig { seed: 42, dtype: DType::F64, ..Default::default() }).unwrap();
    let ok = f32_run.eval_losses.len() == 200
        && f32_run.max_loss_gap <= LOSS_GAP_TOL
        && f64_run.final_param_rel <= PARAM_REL_TOL;
    verdict(
        9,
        "Training equivalence",
        ok,
        format!(
            "200 steps: f32 max loss gap {:.3e} <= 1e-4, f64 final params rel {:.3e} <= 1e-6",
            f32_run.max_loss_gap, f64_run.final_param_rel
        ),
        t,
        Duration::from_secs(300),
    );
}
