//! Equivalence suite: Eval against Tune (forward and backward), Deploy
//! against Eval, the associativity of per-channel scaling with convolution,
//! and the broadcast/reduce adjoint identity.

use serde::Serialize;

use super::{random_instance, Criterion, ExperimentReport, Instance, InstanceLimits, Worst};
use crate::block::{BlockGrads, Mode};
use crate::error::Result;
use crate::ops::{conv2d, scale_out_channels, ConvGeometry};
use crate::rng::Rng;
use crate::tensor::{broadcast_to, reduce_to, DType, Shape};

pub const FORWARD_TOL: f64 = 1e-10;
pub const BACKWARD_TOL: f64 = 1e-9;
pub const DEPLOY_FORWARD_TOL: f64 = 1e-10;
pub const SCALING_TOL: f64 = 1e-10;
pub const ASSOC_TOL: f64 = 1e-10;
pub const ADJOINT_TOL: f64 = 1e-10;

/// Size of the fault injected into the Tune weights by the self-test.
pub const FAULT_SIZE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub instances: usize,
    pub assoc_instances: usize,
    pub adjoint_pairs: usize,
    /// Shift the fused Tune weights of this instance by [`FAULT_SIZE`].
    pub fault: Option<usize>,
}

impl Default for VerifyOptions {
    fn default() -> VerifyOptions {
        VerifyOptions {
            seed: 0,
            instances: 50,
            assoc_instances: 100,
            adjoint_pairs: 200,
            fault: None,
        }
    }
}

/// Per-instance measurements of the block checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct InstanceResult {
    pub name: String,
    pub eval_tune_forward: f64,
    pub eval_tune_backward: f64,
    pub deploy_forward: f64,
    pub deploy_scaling: f64,
}

fn grads_rel(a: &BlockGrads, b: &BlockGrads) -> Result<f64> {
    let mut worst = a.dx.rel_diff(&b.dx)?.max(a.dweight.rel_diff(&b.dweight)?);
    for (x, y) in [(&a.dbias, &b.dbias), (&a.dgamma, &b.dgamma), (&a.dbeta, &b.dbeta)] {
        if let (Some(x), Some(y)) = (x, y) {
            worst = worst.max(x.rel_diff(y)?);
        }
    }
    Ok(worst)
}

/// Runs the block checks on one instance. With `fault`, the Tune block's
/// weight is moved so that its fused weight shifts by [`FAULT_SIZE`].
pub fn check_instance(inst: &Instance, fault: bool) -> Result<InstanceResult> {
    let eval = &inst.block;
    let mut tune = eval.clone().with_mode(Mode::Tune)?;
    let deploy = eval.clone().with_mode(Mode::Deploy)?;
    let c = eval.scaling_coefficients()?;
    if fault {
        let shift = c.map(|v| FAULT_SIZE / v);
        let w = tune.trainables_mut().weight;
        let bumped = w.add(&broadcast_to(&shift.reshape([shift.numel(), 1, 1, 1])?, w.shape())?)?;
        *w = bumped;
    }
    let fe = eval.forward(&inst.x)?;
    let ft = tune.forward(&inst.x)?;
    let fd = deploy.forward(&inst.x)?;
    let ge = eval.backward(&fe.saved, &inst.dz)?;
    let gt = tune.backward(&ft.saved, &inst.dz)?;
    let gd = deploy.backward(&fd.saved, &inst.dz)?;
    let mut scaling = scale_out_channels(&gd.dweight, &c)?.rel_diff(&ge.dweight)?;
    if let (Some(db_eval), Some(db_deploy)) = (&ge.dbias, &gd.dbias) {
        scaling = scaling.max(db_deploy.mul(&c)?.rel_diff(db_eval)?);
    }
    Ok(InstanceResult {
        name: inst.name.clone(),
        eval_tune_forward: fe.z.max_abs_diff(&ft.z)?,
        eval_tune_backward: grads_rel(&ge, &gt)?,
        deploy_forward: fe.z.max_abs_diff(&fd.z)?,
        deploy_scaling: scaling,
    })
}

/// `max |gamma * conv(w, x) - conv(gamma * w, x)|` for a random bias-free
/// instance, with `gamma` scaling output channels.
pub fn associativity_gap(seed: u64, index: u64) -> Result<f64> {
    let inst = random_instance(seed, 1_000_000 + index, InstanceLimits::VERIFY, DType::F64);
    let mut rng = Rng::derive(seed, 2_000_000 + index);
    let conv = inst.block.conv();
    let geometry: ConvGeometry = conv.geometry;
    let c_out = conv.out_channels();
    let gamma = rng.uniform_tensor(DType::F64, [c_out], -3.0, 3.0);
    let lhs = conv2d(&inst.x, &conv.weight, None, geometry)?;
    let lhs = lhs.mul(&broadcast_to(&gamma.reshape([c_out, 1, 1])?, lhs.shape())?)?;
    let rhs = conv2d(&inst.x, &scale_out_channels(&conv.weight, &gamma)?, None, geometry)?;
    lhs.max_abs_diff(&rhs)
}

/// Random right-aligned compatible shape pair `(big, small)`.
pub fn random_shape_pair(rng: &mut Rng) -> (Shape, Shape) {
    let rank = rng.range(1, 4);
    let big: Vec<usize> = (0..rank).map(|_| rng.range(1, 5)).collect();
    let small_rank = rng.range(0, rank);
    let small: Vec<usize> = big[rank - small_rank..]
        .iter()
        .map(|&d| if rng.below(2) == 0 { 1 } else { d })
        .collect();
    (Shape::new(big).expect("rank <= 4"), Shape::new(small).expect("rank <= 4"))
}

/// `|<broadcast(v), u> - <v, reduce(u)>|` for a random pair.
pub fn adjoint_gap(rng: &mut Rng) -> Result<f64> {
    let (big, small) = random_shape_pair(rng);
    let v = rng.normal_tensor(DType::F64, small.clone(), 1.0);
    let u = rng.normal_tensor(DType::F64, big.clone(), 1.0);
    let lhs = broadcast_to(&v, &big)?.dot(&u)?;
    let rhs = v.dot(&reduce_to(&u, &small)?)?;
    Ok((lhs - rhs).abs())
}

fn collect(name: &str, tol: f64, results: &[InstanceResult], pick: impl Fn(&InstanceResult) -> f64) -> Criterion {
    let mut worst = Worst::default();
    let mut failing = Vec::new();
    for r in results {
        let v = pick(r);
        worst.update(v, &r.name);
        if !(v <= tol) {
            failing.push(r.name.clone());
        }
    }
    let c = Criterion::at_most(name, worst.value, tol);
    if failing.is_empty() {
        c.with_detail(format!("worst: {}", worst.case))
    } else {
        Criterion { passed: false, ..c }.with_detail(format!("failed: {}", failing.join(", ")))
    }
}

pub fn run(opts: &VerifyOptions) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("verify", serde_json::to_value(opts).expect("plain data"));
    let mut results = Vec::with_capacity(opts.instances);
    for i in 0..opts.instances {
        let inst = random_instance(opts.seed, i as u64, InstanceLimits::VERIFY, DType::F64);
        results.push(check_instance(&inst, opts.fault == Some(i))?);
    }
    report.criteria.push(collect("eval_tune_forward_max_abs", FORWARD_TOL, &results, |r| r.eval_tune_forward));
    report.criteria.push(collect("eval_tune_backward_max_rel", BACKWARD_TOL, &results, |r| r.eval_tune_backward));
    report.criteria.push(collect("deploy_forward_max_abs", DEPLOY_FORWARD_TOL, &results, |r| r.deploy_forward));
    report.criteria.push(collect("deploy_gradient_scaling_max_rel", SCALING_TOL, &results, |r| r.deploy_scaling));

    let mut assoc = Worst::default();
    for i in 0..opts.assoc_instances {
        assoc.update(associativity_gap(opts.seed, i as u64)?, &format!("assoc {i}"));
    }
    report.criteria.push(Criterion::at_most("associativity_max_abs", assoc.value, ASSOC_TOL).with_detail(format!("worst: {}", assoc.case)));

    let mut rng = Rng::derive(opts.seed, 3_000_000);
    let mut adj = Worst::default();
    for i in 0..opts.adjoint_pairs {
        adj.update(adjoint_gap(&mut rng)?, &format!("pair {i}"));
    }
    report.criteria.push(Criterion::at_most("broadcast_adjoint_max_abs", adj.value, ADJOINT_TOL).with_detail(format!("worst: {}", adj.case)));

    report.metric("instances", &results);
    report.metric("fault_instance", opts.fault.map(|i| results.get(i).map(|r| r.name.clone())));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes_and_is_deterministic() {
        let opts = VerifyOptions {
            seed: 42,
            instances: 6,
            assoc_instances: 6,
            adjoint_pairs: 20,
            fault: None,
        };
        let a = run(&opts).unwrap();
        assert!(a.passed(), "{}", a.to_json_string());
        assert_eq!(a.to_json_string(), run(&opts).unwrap().to_json_string());
    }

    #[test]
    fn fault_is_caught_and_named() {
        let opts = VerifyOptions {
            seed: 1,
            instances: 4,
            assoc_instances: 1,
            adjoint_pairs: 1,
            fault: Some(2),
        };
        let r = run(&opts).unwrap();
        assert!(!r.passed());
        let c = r.criterion("eval_tune_forward_max_abs").unwrap();
        assert!(!c.passed);
        assert!(c.detail.as_deref().unwrap().contains("instance 2 (seed 1)"));
    }
}
