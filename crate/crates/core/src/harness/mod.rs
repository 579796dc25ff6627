//! Experiments behind the `convbn` binary. Each returns an
//! [`ExperimentReport`] whose JSON form is byte-stable for a given seed;
//! wall-clock measurements are confined to fields flagged nondeterministic.

pub mod bench;
pub mod coeffs;
pub mod data;
pub mod gradcheck;
pub mod optim;
pub mod stability;
pub mod train;
pub mod verify;

use serde::Serialize;
use serde_json::Value;

use crate::block::ConvBnBlock;
use crate::ops::{BnParams, ConvGeometry, ConvParams, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub measured: f64,
    /// `"<="`, `">="` or `"in"`.
    pub comparison: &'static str,
    pub threshold: Value,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub nondeterministic: bool,
}

impl Criterion {
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Criterion {
        Criterion {
            name: name.into(),
            measured,
            comparison: "<=",
            threshold: Value::from(threshold),
            passed: measured <= threshold,
            detail: None,
            nondeterministic: false,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Criterion {
        Criterion {
            comparison: ">=",
            passed: measured >= threshold,
            ..Criterion::at_most(name, measured, threshold)
        }
    }

    pub fn within(name: impl Into<String>, measured: f64, lo: f64, hi: f64) -> Criterion {
        Criterion {
            name: name.into(),
            measured,
            comparison: "in",
            threshold: Value::from(vec![lo, hi]),
            passed: (lo..=hi).contains(&measured),
            detail: None,
            nondeterministic: false,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Criterion {
        self.detail = Some(detail.into());
        self
    }

    pub fn timing(mut self) -> Criterion {
        self.nondeterministic = true;
        self
    }

    pub fn summary_line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "{status} {}: measured {:e} {} {}",
            self.name, self.measured, self.comparison, self.threshold
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: Value,
    pub metrics: Value,
    pub criteria: Vec<Criterion>,
    /// Wall-clock data; excluded from determinism guarantees.
    #[serde(skip_serializing_if = "Value::is_null")]
    pub nondeterministic: Value,
}

impl ExperimentReport {
    pub fn new(experiment: &str, config: Value) -> ExperimentReport {
        ExperimentReport {
            experiment: experiment.to_string(),
            config,
            metrics: Value::Object(Default::default()),
            criteria: Vec::new(),
            nondeterministic: Value::Null,
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("plain data");
        self.metrics
            .as_object_mut()
            .expect("metrics is an object")
            .insert(key.to_string(), v);
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn criterion(&self, name: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.name == name)
    }

    /// Canonical JSON: sorted object keys, two-space indent, trailing newline.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(self).expect("plain data"))
            .expect("plain data");
        s.push('\n');
        s
    }

    /// The report without its nondeterministic section.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.nondeterministic = Value::Null;
        r.criteria.retain(|c| !c.nondeterministic);
        r.to_json_string()
    }
}

/// A random ConvBN block with an input and an upstream gradient.
#[derive(Clone, Debug)]
pub struct Instance {
    pub name: String,
    pub block: ConvBnBlock,
    pub x: Tensor,
    pub dz: Tensor,
}

/// Bounds on random instance shapes.
#[derive(Clone, Copy, Debug)]
pub struct InstanceLimits {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub kernel: usize,
}

impl InstanceLimits {
    /// Up to `2 x 8 x 16 x 16` inputs, kernels up to 3x3.
    pub const VERIFY: InstanceLimits = InstanceLimits { batch: 2, channels: 8, spatial: 16, kernel: 3 };
    /// Up to `2 x 3 x 6 x 6` inputs, kernels up to 3x3.
    pub const GRADCHECK: InstanceLimits = InstanceLimits { batch: 2, channels: 3, spatial: 6, kernel: 3 };
}

/// Instance `index` of the suite seeded with `seed`.
pub fn random_instance(seed: u64, index: u64, limits: InstanceLimits, dtype: DType) -> Instance {
    let mut rng = Rng::derive(seed, index);
    let n = rng.range(1, limits.batch);
    let c_in = rng.range(1, limits.channels);
    let c_out = rng.range(1, limits.channels);
    let kh = rng.range(1, limits.kernel);
    let kw = rng.range(1, limits.kernel);
    let h = rng.range(kh.max(2), limits.spatial);
    let w = rng.range(kw.max(2), limits.spatial);
    let stride = (rng.range(1, 2), rng.range(1, 2));
    let padding = (rng.range(0, kh / 2), rng.range(0, kw / 2));
    let bias = rng.below(2) == 1;
    let fan_in = (c_in * kh * kw) as f64;
    let weight = rng.normal_tensor(dtype, [c_out, c_in, kh, kw], 1.0 / fan_in.sqrt());
    let bias = bias.then(|| rng.normal_tensor(dtype, [c_out], 0.5));
    let geometry = ConvGeometry::new(stride, padding);
    let (ho, wo) = geometry.output_hw(h, w, kh, kw).expect("valid geometry");
    // Train-mode BN needs two elements per channel.
    let n = if n * ho * wo < 2 { 2 } else { n };
    let conv = ConvParams::new(weight, bias, geometry).expect("consistent shapes");
    let bn = BnParams {
        gamma: rng.uniform_tensor(dtype, [c_out], 0.2, 2.0),
        beta: rng.normal_tensor(dtype, [c_out], 0.5),
        running_mean: rng.normal_tensor(dtype, [c_out], 0.5),
        running_var: rng.uniform_tensor(dtype, [c_out], 0.1, 2.0),
        eps: DEFAULT_EPS,
        momentum: DEFAULT_MOMENTUM,
    };
    let block = ConvBnBlock::new(conv, bn).expect("consistent shapes");
    let x = rng.normal_tensor(dtype, [n, c_in, h, w], 1.0);
    let out = block.output_shape(x.shape()).expect("valid geometry");
    let dz = rng.normal_tensor(dtype, out, 1.0);
    Instance {
        name: format!("instance {index} (seed {seed})"),
        block,
        x,
        dz,
    }
}

/// Largest value and the label of the case that produced it.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Worst {
    pub value: f64,
    pub case: String,
}

impl Worst {
    /// NaN wins over everything so that it is never hidden.
    pub fn update(&mut self, value: f64, case: &str) {
        if self.value.is_nan() {
            return;
        }
        if self.case.is_empty() || value.is_nan() || value > self.value {
            self.value = value;
            self.case = case.to_string();
        }
    }
}
