use convbn::fixtures::{self, FIXTURE_SEED};
use convbn::memory::{count_saved, footprint_report, footprint_report_with, verify_against_engine};
use convbn::{DType, Mode, Rng, Shape};

#[test]
fn resnet50_tune_eval_ratio() {
    let (g, shapes) = fixtures::resnet50().unwrap();
    let input = Shape::from(fixtures::RESNET50_INPUT);
    let r = footprint_report_with(&g, &shapes, &input, DType::F32).unwrap();
    let ratio = r.ratios.tune_over_eval;
    println!(
        "eval {} B, tune {} B, deploy {} B, tune/eval {ratio:.4}",
        r.mode(Mode::Eval).total_bytes,
        r.mode(Mode::Tune).total_bytes,
        r.mode(Mode::Deploy).total_bytes
    );
    assert!((0.45..=0.65).contains(&ratio), "{ratio}");
}

#[test]
fn instrumented_equals_analytic_on_all_fixtures() {
    let graphs = [
        ("seven", fixtures::seven_pattern(FIXTURE_SEED, DType::F64).unwrap(), [2, 3, 8, 8]),
        ("toy", fixtures::toy_chain(FIXTURE_SEED, DType::F64, 4).unwrap(), [3, 3, 8, 8]),
        ("bench", fixtures::bench_stack(FIXTURE_SEED, DType::F32).unwrap(), [16, 3, 32, 32]),
        ("block", fixtures::single_block(FIXTURE_SEED, DType::F32, 3, 4, 3, true).unwrap(), [1, 3, 8, 8]),
        ("no_bn", fixtures::no_bn(FIXTURE_SEED, DType::F32).unwrap(), [2, 3, 6, 6]),
    ];
    for (name, g, shape) in graphs {
        let x = Rng::new(5).normal_tensor(g.params.values().next().unwrap().dtype(), shape, 1.0);
        for mode in Mode::ALL {
            let measured = verify_against_engine(&g, mode, &x).unwrap_or_else(|e| panic!("{name}: {e}"));
            let predicted = count_saved(&g, mode, x.shape(), x.dtype()).unwrap();
            assert_eq!(measured, predicted, "{name} {mode}");
        }
        let r = footprint_report(&g, x.shape(), x.dtype()).unwrap();
        let (e, t, d) = (
            r.mode(Mode::Eval).total_elements,
            r.mode(Mode::Tune).total_elements,
            r.mode(Mode::Deploy).total_elements,
        );
        assert!(d <= t && t <= e, "{name}: deploy {d} tune {t} eval {e}");
    }
}
