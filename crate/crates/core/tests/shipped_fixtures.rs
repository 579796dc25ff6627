//! The graphs under `fixtures/` must match the ones built in code.
//! Run with `CONVBN_REGENERATE_FIXTURES=1` to rewrite them.

use std::path::PathBuf;

use convbn::fixtures::{self, FIXTURE_SEED};
use convbn::{DType, Graph};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn built() -> Vec<(&'static str, Graph)> {
    let s = FIXTURE_SEED;
    let d = DType::F64;
    vec![
        ("seven_pattern", fixtures::seven_pattern(s, d).unwrap()),
        ("toy_chain", fixtures::toy_chain(s, d, 4).unwrap()),
        ("bench_stack", fixtures::bench_stack(s, DType::F32).unwrap()),
        ("single_block", fixtures::single_block(s, d, 3, 4, 3, false).unwrap()),
        ("no_bn", fixtures::no_bn(s, d).unwrap()),
        ("identity", fixtures::identity().unwrap()),
        ("mixed_dims", fixtures::mixed_dims().unwrap()),
    ]
}

#[test]
fn shipped_fixtures_match_code() {
    let regenerate = std::env::var_os("CONVBN_REGENERATE_FIXTURES").is_some();
    for (name, g) in built() {
        let json = dir().join(format!("{name}.json"));
        if regenerate {
            g.save(&json, Some(&format!("{name}.cbnt"))).unwrap();
        }
        let loaded = Graph::load(&json).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(loaded.to_json_string(), std::fs::read_to_string(&json).unwrap(), "{name}: not canonical");
        assert_eq!(loaded.params, g.params, "{name}: parameters differ");
        let mut expected = g.clone();
        expected.set_params_file(Some(format!("{name}.cbnt")));
        assert_eq!(loaded.to_json_string(), expected.to_json_string(), "{name}: structure differs");
    }
}
