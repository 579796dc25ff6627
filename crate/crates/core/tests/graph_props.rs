use std::path::PathBuf;

use convbn::graph::{self, BnMode, ExecOptions, SkipReason};
use convbn::{fixtures, io, DType, Error, Graph, Mode, Rng, Tensor};
use proptest::prelude::*;

fn shipped(name: &str) -> Graph {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.json"));
    Graph::load(path).unwrap()
}

/// Executable fixtures with the channel count their input expects.
const EXECUTABLE: [(&str, usize); 5] =
    [("seven_pattern", 3), ("toy_chain", 3), ("bench_stack", 3), ("single_block", 3), ("no_bn", 3)];

fn f64_graph(name: &str) -> Graph {
    let mut g = shipped(name);
    let params = g.params.iter().map(|(k, t)| (k.clone(), t.cast(DType::F64))).collect();
    g.params = params;
    g
}

fn output(g: &Graph, x: &Tensor) -> Tensor {
    graph::forward(g, x, &ExecOptions::default()).unwrap().output
}

fn cbnt(g: &Graph) -> Vec<u8> {
    io::encode(&g.export_params()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rewritten_graphs_compute_the_same_function(
        which in 0..EXECUTABLE.len(), n in 1usize..3, hw in 4usize..12, seed in any::<u64>(), deploy in any::<bool>()
    ) {
        let (name, c) = EXECUTABLE[which];
        let g = f64_graph(name);
        let x = Rng::new(seed).normal_tensor(DType::F64, [n, c, hw, hw], 1.0);
        let reference = output(&g, &x);
        let mut r = g.clone();
        graph::turn_on(&mut r, if deploy { Mode::Deploy } else { Mode::Tune }).unwrap();
        let got = output(&r, &x);
        prop_assert!(got.max_abs_diff(&reference).unwrap() <= 1e-10 * reference.max_abs().max(1.0), "{name}");
    }

    #[test]
    fn revert_restores_bytes(which in 0..EXECUTABLE.len(), deploy in any::<bool>(), via_switch in any::<bool>()) {
        let g = shipped(EXECUTABLE[which].0);
        let mut r = g.clone();
        let mode = if deploy { Mode::Deploy } else { Mode::Tune };
        graph::turn_on(&mut r, mode).unwrap();
        if via_switch {
            let other = if deploy { Mode::Tune } else { Mode::Deploy };
            graph::switch_mode(&mut r, other).unwrap();
        }
        graph::revert(&mut r).unwrap();
        prop_assert_eq!(cbnt(&r), cbnt(&g));
        prop_assert_eq!(r.to_json_string(), g.to_json_string());
    }

    #[test]
    fn tune_gradients_match_eval_end_to_end(seed in any::<u64>(), index in 0u64..1000) {
        let err = convbn::harness::gradcheck::graph_tune_vs_eval(seed, index).unwrap();
        prop_assert!(err <= 1e-9, "{err}");
    }
}

#[test]
fn seven_pattern_census() {
    let mut g = shipped("seven_pattern");
    let m = graph::find_convbn_pairs(&g);
    let convs: Vec<_> = m.pairs.iter().map(|p| p.conv.as_str()).collect();
    assert_eq!(convs, ["c1", "c2", "c4", "c6", "c7"]);
    let skips: Vec<_> = m.skipped.iter().map(|s| (s.node.as_str(), s.reason)).collect();
    assert_eq!(skips, [("c3", SkipReason::MultiConsumer), ("c5", SkipReason::NoBnFollower)]);
    let report = graph::turn_on(&mut g, Mode::Tune).unwrap();
    assert_eq!(report.rewritten.len(), 5);
    assert_eq!(report.skipped, m.skipped);
    // b3 still normalises; the five fused BNs are identities now.
    assert_eq!(g.reserved_bns().len(), 5);
}

#[test]
fn seven_pattern_gradients_survive_tune() {
    let g = f64_graph("seven_pattern");
    let mut t = g.clone();
    graph::turn_on(&mut t, Mode::Tune).unwrap();
    let mut rng = Rng::new(17);
    let x = rng.normal_tensor(DType::F64, fixtures::SEVEN_PATTERN_INPUT, 1.0);
    let opts = ExecOptions { bn_mode: BnMode::Eval };
    let fe = graph::forward(&g, &x, &opts).unwrap();
    let r = rng.normal_tensor(DType::F64, fe.output.shape().clone(), 1.0);
    let ge = graph::backward(&g, &fe, &r).unwrap();
    let ft = graph::forward(&t, &x, &opts).unwrap();
    let gt = graph::backward(&t, &ft, &r).unwrap();
    assert_eq!(ge.params.keys().collect::<Vec<_>>(), gt.params.keys().collect::<Vec<_>>());
    for (k, a) in &ge.params {
        assert!(a.rel_diff(&gt.params[k]).unwrap() <= 1e-9, "{k}");
    }
    assert!(ge.input.unwrap().rel_diff(gt.input.as_ref().unwrap()).unwrap() <= 1e-9);
}

#[test]
fn rewrite_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [Mode::Tune, Mode::Deploy] {
        let mut a = shipped("seven_pattern");
        let mut b = shipped("seven_pattern");
        graph::turn_on(&mut a, mode).unwrap();
        graph::turn_on(&mut b, mode).unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
        assert_eq!(cbnt(&a), cbnt(&b));
        let json = dir.path().join(format!("{mode:?}.json"));
        a.save(&json, Some(&format!("{mode:?}.cbnt"))).unwrap();
        a.set_params_file(Some(format!("{mode:?}.cbnt")));
        let mut loaded = Graph::load(&json).unwrap();
        assert_eq!(loaded.to_json_string(), a.to_json_string());
        assert_eq!(cbnt(&loaded), cbnt(&a));
        graph::revert(&mut loaded).unwrap();
        assert_eq!(cbnt(&loaded), cbnt(&shipped("seven_pattern")));
    }
}

#[test]
fn second_turn_on_is_rejected() {
    let mut g = shipped("toy_chain");
    graph::turn_on(&mut g, Mode::Tune).unwrap();
    let before = g.to_json_string();
    assert!(matches!(graph::turn_on(&mut g, Mode::Deploy), Err(Error::UnsupportedRewrite(_))));
    assert_eq!(g.to_json_string(), before);
}

#[test]
fn graphs_without_pairs_are_untouched() {
    for name in ["no_bn", "identity"] {
        let mut g = shipped(name);
        let before = (g.to_json_string(), cbnt(&g));
        let report = graph::turn_on(&mut g, Mode::Tune).unwrap();
        assert!(report.rewritten.is_empty(), "{name}");
        assert_eq!((g.to_json_string(), cbnt(&g)), before, "{name}");
        assert!(graph::revert(&mut g).unwrap().is_empty());
    }
}

#[test]
fn other_dimensionalities_are_reported_not_rewritten() {
    let mut g = shipped("mixed_dims");
    let report = graph::turn_on(&mut g, Mode::Tune).unwrap();
    assert!(report.rewritten.is_empty());
    assert!(report.skipped.iter().any(|s| s.reason == SkipReason::UnsupportedDim));
}

#[test]
fn identity_graph_passes_input_through() {
    let g = shipped("identity");
    let x = Rng::new(2).normal_tensor(DType::F64, [1, 2, 3, 3], 1.0);
    assert_eq!(output(&g, &x), x);
}
