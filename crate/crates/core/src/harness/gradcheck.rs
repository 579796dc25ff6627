//! Central-difference gradient checks.
//!
//! For an op with inputs `t_1..t_k` and output `out`, a random probe `R` of
//! the output's shape defines the scalar `J = sum(R * out)`. The analytic
//! gradients are the op's backward applied to `R`; the numeric ones are
//! `(J(t + h e_i) - J(t - h e_i)) / 2h` for every element of every input.
//! The error of a case is the largest absolute difference over all inputs
//! divided by the largest magnitude over both gradient vectors.

use serde::Serialize;

use super::{random_instance, Criterion, ExperimentReport, InstanceLimits, Worst};
use crate::block::{BlockGrads, ConvBnBlock, Mode};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::graph::{self, BnMode, ExecOptions, Graph, OpKind};
use crate::ops::{
    bn_eval_backward, bn_eval_forward, bn_train_backward, bn_train_forward, conv2d, conv2d_grads,
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward, relu_backward,
    relu_forward, softmax_xent, BnParams, ConvGeometry, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Analytic Tune gradients against analytic Eval gradients.
pub const TUNE_EVAL_TOL: f64 = 1e-9;
/// Minimum distance of any ReLU input from zero in the graph cases.
pub const KINK_MARGIN: f64 = 1e-3;
const KINK_ATTEMPTS: usize = 64;

pub const OPS: [&str; 14] = [
    "conv2d",
    "bn_eval",
    "bn_train",
    "relu",
    "global_avg_pool",
    "linear",
    "softmax_xent",
    "block_train",
    "block_eval",
    "block_tune",
    "block_deploy",
    "graph_train",
    "graph_eval",
    "graph_tune",
];

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    /// Restrict to these ops; empty means all of [`OPS`].
    pub ops: Vec<String>,
}

impl Default for GradcheckOptions {
    fn default() -> GradcheckOptions {
        GradcheckOptions { seed: 0, instances: 20, step: STEP, ops: Vec::new() }
    }
}

type Forward<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Numeric gradient of `sum(r * f(inputs))` with respect to every input.
pub fn numeric_grads(inputs: &[Tensor], r: &Tensor, h: f64, f: &Forward<'_>) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let base = inputs[k].data().to_vec();
        let mut grad = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut probe = |v: f64| -> Result<f64> {
                let mut d = base.clone();
                d[i] = v;
                work[k] = inputs[k].with_data(d)?;
                f(&work)?.dot(r)
            };
            grad[i] = (probe(base[i] + h)? - probe(base[i] - h)?) / (2.0 * h);
        }
        work[k] = inputs[k].clone();
        out.push(inputs[k].with_data(grad)?);
    }
    Ok(out)
}

/// `max|a - n| / max(max|a|, max|n|)` over the concatenation of all tensors.
pub fn grad_error(analytic: &[Tensor], numeric: &[Tensor]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::Input(format!(
            "{} analytic gradients for {} inputs",
            analytic.len(),
            numeric.len()
        )));
    }
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max(a.max_abs_diff(n)?);
        scale = scale.max(a.max_abs()).max(n.max_abs());
    }
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CaseResult {
    pub error: f64,
    /// Largest magnitude over both gradient vectors.
    pub magnitude: f64,
}

/// Draws the probe (scaled by `probe_scale`), runs both gradients and
/// compares them.
pub fn check(
    inputs: &[Tensor],
    rng: &mut Rng,
    h: f64,
    probe_scale: f64,
    forward: &Forward<'_>,
    analytic: &dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
) -> Result<CaseResult> {
    let out = forward(inputs)?;
    let r = rng.normal_tensor(DType::F64, out.shape().clone(), 1.0).scale(probe_scale);
    let a = analytic(inputs, &r)?;
    let n = numeric_grads(inputs, &r, h, forward)?;
    if let Some(bad) = a.iter().chain(&n).position(|t| !t.all_finite()) {
        return Err(Error::NonFinite(format!("gradient {bad} has non-finite entries")));
    }
    let magnitude = a.iter().chain(&n).fold(0.0f64, |m, t| m.max(t.max_abs()));
    Ok(CaseResult { error: grad_error(&a, &n)?, magnitude })
}

/// Moves values within `margin` of zero away from it, so that a relu kink
/// never falls inside the difference stencil.
fn off_kink(t: &Tensor, margin: f64) -> Tensor {
    t.map(|v| if v.abs() < margin { v + margin.copysign(v) } else { v })
}

fn bn_with(c: usize, gamma: &Tensor, beta: &Tensor, rng: &mut Rng) -> BnParams {
    BnParams {
        gamma: gamma.clone(),
        beta: beta.clone(),
        running_mean: rng.normal_tensor(DType::F64, [c], 0.5),
        running_var: rng.uniform_tensor(DType::F64, [c], 0.1, 2.0),
        eps: DEFAULT_EPS,
        momentum: DEFAULT_MOMENTUM,
    }
}

fn block_inputs(block: &mut ConvBnBlock, x: &Tensor) -> Vec<Tensor> {
    let t = block.trainables_mut();
    let mut v = vec![x.clone(), t.weight.clone()];
    v.extend(t.bias.map(|b| b.clone()));
    v.extend(t.gamma.map(|g| g.clone()));
    v.extend(t.beta.map(|b| b.clone()));
    v
}

fn load_block(block: &ConvBnBlock, inputs: &[Tensor]) -> ConvBnBlock {
    let mut b = block.clone();
    let t = b.trainables_mut();
    let mut it = inputs[1..].iter();
    *t.weight = it.next().expect("weight").clone();
    for slot in [t.bias, t.gamma, t.beta].into_iter().flatten() {
        *slot = it.next().expect("one input per trainable").clone();
    }
    b
}

fn block_grads(g: BlockGrads) -> Vec<Tensor> {
    let mut v = vec![g.dx, g.dweight];
    v.extend(g.dbias);
    v.extend(g.dgamma);
    v.extend(g.dbeta);
    v
}

/// Gradient check of one ConvBN block mode on `x` (the instance input when
/// `None`).
pub fn block_case(seed: u64, index: u64, mode: Mode, h: f64, probe: f64) -> Result<CaseResult> {
    let inst = random_instance(seed, index, InstanceLimits::GRADCHECK, DType::F64);
    let mut block = inst.block.with_mode(mode)?;
    let x = inst.x;
    let inputs = block_inputs(&mut block, &x);
    let fwd = |t: &[Tensor]| -> Result<Tensor> { Ok(load_block(&block, t).forward(&t[0])?.z) };
    let ana = |t: &[Tensor], r: &Tensor| -> Result<Vec<Tensor>> {
        let b = load_block(&block, t);
        let f = b.forward(&t[0])?;
        Ok(block_grads(b.backward(&f.saved, r)?))
    };
    let mut rng = Rng::derive(seed, 0x9c_0000 + index);
    check(&inputs, &mut rng, h, probe, &fwd, &ana)
}

fn graph_inputs(g: &Graph, x: &Tensor) -> Result<(Vec<String>, Vec<Tensor>)> {
    // Parameters that receive gradients; running statistics and the tune
    // buffers do not.
    let fp = graph::forward(g, x, &ExecOptions::default())?;
    let probe = graph::backward(g, &fp, &fp.output.ones_like())?;
    let names: Vec<String> = probe.params.keys().cloned().collect();
    let mut inputs = vec![x.clone()];
    for n in &names {
        inputs.push(g.param(n)?.clone());
    }
    Ok((names, inputs))
}

/// Analytic gradients of `sum(r * graph(x))` in `[input, params...]` order.
pub fn graph_grads(g: &Graph, names: &[String], bn_mode: BnMode, x: &Tensor, r: &Tensor) -> Result<Vec<Tensor>> {
    let fp = graph::forward(g, x, &ExecOptions { bn_mode })?;
    let grads = graph::backward(g, &fp, r)?;
    let mut v = vec![grads.input.ok_or_else(|| Error::Input("no input gradient".into()))?];
    for n in names {
        v.push(grads.params.get(n).cloned().ok_or_else(|| Error::Ingestion { missing: vec![n.clone()] })?);
    }
    Ok(v)
}

fn graph_with(g: &Graph, names: &[String], t: &[Tensor]) -> Graph {
    let mut g = g.clone();
    for (n, v) in names.iter().zip(&t[1..]) {
        g.params.insert(n.clone(), v.clone());
    }
    g
}

/// Smallest distance to zero over all ReLU inputs of `g` on `x`.
fn kink_distance(g: &Graph, x: &Tensor, bn_mode: BnMode) -> Result<f64> {
    let (_, values) = graph::forward_with_values(g, x, &ExecOptions { bn_mode })?;
    Ok(g.nodes()
        .iter()
        .filter(|n| n.op == OpKind::Relu)
        .flat_map(|n| values[&n.inputs[0]].data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

/// The toy chain with a `[2, 3, 6, 6]` input, optionally rewritten to Tune.
/// The input is redrawn until every ReLU input under `bn_mode` is at least
/// [`KINK_MARGIN`] from zero, so central differences never straddle a kink.
pub fn graph_fixture(seed: u64, index: u64, bn_mode: BnMode, tune: bool) -> Result<(Graph, Tensor)> {
    let mut g = fixtures::toy_chain(seed.wrapping_add(index), DType::F64, 3)?;
    let mut rng = Rng::derive(seed, 0x6a_0000 + index);
    let mut x = rng.normal_tensor(DType::F64, [2, 3, 6, 6], 1.0);
    for _ in 0..KINK_ATTEMPTS {
        if kink_distance(&g, &x, bn_mode)? >= KINK_MARGIN {
            break;
        }
        x = rng.normal_tensor(DType::F64, [2, 3, 6, 6], 1.0);
    }
    if tune {
        graph::turn_on(&mut g, Mode::Tune)?;
    }
    Ok((g, x))
}

fn graph_case(seed: u64, index: u64, mode: Mode, h: f64, probe: f64) -> Result<CaseResult> {
    let bn_mode = BnMode::for_mode(mode);
    let (g, x) = graph_fixture(seed, index, bn_mode, mode == Mode::Tune)?;
    let (names, inputs) = graph_inputs(&g, &x)?;
    let fwd = |t: &[Tensor]| -> Result<Tensor> {
        Ok(graph::forward(&graph_with(&g, &names, t), &t[0], &ExecOptions { bn_mode })?.output)
    };
    let ana = |t: &[Tensor], r: &Tensor| graph_grads(&graph_with(&g, &names, t), &names, bn_mode, &t[0], r);
    let mut rng = Rng::derive(seed, 0x9d_0000 + index);
    check(&inputs, &mut rng, h, probe, &fwd, &ana)
}

/// Analytic gradients of the Tune-rewritten toy chain against the original
/// graph run in Eval mode.
pub fn graph_tune_vs_eval(seed: u64, index: u64) -> Result<f64> {
    let (g, x) = graph_fixture(seed, index, BnMode::Eval, false)?;
    let (t, _) = graph_fixture(seed, index, BnMode::Eval, true)?;
    let (names, _) = graph_inputs(&g, &x)?;
    let mut rng = Rng::derive(seed, 0x9e_0000 + index);
    let fp = graph::forward(&g, &x, &ExecOptions::default())?;
    let r = rng.normal_tensor(DType::F64, fp.output.shape().clone(), 1.0);
    let a = graph_grads(&g, &names, BnMode::Eval, &x, &r)?;
    let b = graph_grads(&t, &names, BnMode::Eval, &x, &r)?;
    grad_error(&a, &b)
}

/// Gradient check of instance `index` of `op`. A `probe` of zero makes the
/// scalar objective identically zero.
pub fn op_case(op: &str, seed: u64, index: u64, h: f64, probe: f64) -> Result<CaseResult> {
    let inst = random_instance(seed, index, InstanceLimits::GRADCHECK, DType::F64);
    let mut rng = Rng::derive(seed, 0x9f_0000 + index);
    let conv = inst.block.conv().clone();
    let geometry: ConvGeometry = conv.geometry;
    let c = conv.out_channels();
    let x = inst.x;
    let y = conv2d(&x, &conv.weight, conv.bias.as_ref(), geometry)?;
    let gamma = rng.uniform_tensor(DType::F64, [c], 0.2, 2.0);
    let beta = rng.normal_tensor(DType::F64, [c], 0.5);
    let bn = bn_with(c, &gamma, &beta, &mut rng);
    match op {
        "conv2d" => {
            let bias = conv.bias.clone().unwrap_or_else(|| rng.normal_tensor(DType::F64, [c], 0.5));
            let fwd = |t: &[Tensor]| conv2d(&t[0], &t[1], Some(&t[2]), geometry);
            let ana = |t: &[Tensor], r: &Tensor| -> Result<Vec<Tensor>> {
                let g = conv2d_grads(&t[0], &t[1], geometry, r)?;
                Ok(vec![g.dx, g.dweight, g.dbias])
            };
            check(&[x, conv.weight, bias], &mut rng, h, probe, &fwd, &ana)
        }
        "bn_eval" | "bn_train" => {
            let train = op == "bn_train";
            let with = |t: &[Tensor]| BnParams { gamma: t[1].clone(), beta: t[2].clone(), ..bn.clone() };
            let fwd = |t: &[Tensor]| -> Result<Tensor> {
                if train {
                    Ok(bn_train_forward(&t[0], &with(t))?.z)
                } else {
                    bn_eval_forward(&t[0], &with(t))
                }
            };
            let ana = |t: &[Tensor], r: &Tensor| -> Result<Vec<Tensor>> {
                let p = with(t);
                let g = if train {
                    let out = bn_train_forward(&t[0], &p)?;
                    bn_train_backward(r, &t[0], &out.stats, &p)?
                } else {
                    bn_eval_backward(r, &t[0], &p)?
                };
                Ok(vec![g.dy, g.dgamma, g.dbeta])
            };
            check(&[y, gamma, beta], &mut rng, h, probe, &fwd, &ana)
        }
        "relu" => {
            let xs = off_kink(&y, 1e-3);
            let fwd = |t: &[Tensor]| Ok(relu_forward(&t[0]));
            let ana = |t: &[Tensor], r: &Tensor| Ok(vec![relu_backward(r, &t[0])?]);
            check(&[xs], &mut rng, h, probe, &fwd, &ana)
        }
        "global_avg_pool" => {
            let fwd = |t: &[Tensor]| global_avg_pool_forward(&t[0]);
            let ana = |t: &[Tensor], r: &Tensor| Ok(vec![global_avg_pool_backward(r, t[0].shape())?]);
            check(&[y], &mut rng, h, probe, &fwd, &ana)
        }
        "linear" => {
            let (n, f) = (y.dims()[0], y.numel() / y.dims()[0]);
            let xs = y.reshape([n, f])?;
            let w = rng.normal_tensor(DType::F64, [c + 1, f], 0.5);
            let b = rng.normal_tensor(DType::F64, [c + 1], 0.5);
            let fwd = |t: &[Tensor]| linear_forward(&t[0], &t[1], Some(&t[2]));
            let ana = |t: &[Tensor], r: &Tensor| -> Result<Vec<Tensor>> {
                let g = linear_backward(&t[0], &t[1], r)?;
                Ok(vec![g.dx, g.dweight, g.dbias])
            };
            check(&[xs, w, b], &mut rng, h, probe, &fwd, &ana)
        }
        "softmax_xent" => {
            let n = y.dims()[0];
            let k = c + 1;
            let logits = rng.normal_tensor(DType::F64, [n, k], 2.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let fwd = |t: &[Tensor]| -> Result<Tensor> { Ok(Tensor::scalar(DType::F64, softmax_xent(&t[0], &labels)?.0)) };
            let ana = |t: &[Tensor], r: &Tensor| -> Result<Vec<Tensor>> {
                Ok(vec![softmax_xent(&t[0], &labels)?.1.scale(r.data()[0])])
            };
            check(&[logits], &mut rng, h, probe, &fwd, &ana)
        }
        "block_train" => block_case(seed, index, Mode::Train, h, probe),
        "block_eval" => block_case(seed, index, Mode::Eval, h, probe),
        "block_tune" => block_case(seed, index, Mode::Tune, h, probe),
        "block_deploy" => block_case(seed, index, Mode::Deploy, h, probe),
        "graph_train" => graph_case(seed, index, Mode::Train, h, probe),
        "graph_eval" => graph_case(seed, index, Mode::Eval, h, probe),
        "graph_tune" => graph_case(seed, index, Mode::Tune, h, probe),
        other => Err(Error::Input(format!("unknown op {other:?}; expected one of {}", OPS.join(", ")))),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpResult {
    pub op: String,
    pub instances: usize,
    pub max_error: f64,
    pub worst_instance: String,
}

pub fn run(opts: &GradcheckOptions) -> Result<ExperimentReport> {
    let ops: Vec<String> = if opts.ops.is_empty() { OPS.iter().map(|s| s.to_string()).collect() } else { opts.ops.clone() };
    let mut report = ExperimentReport::new("gradcheck", serde_json::to_value(opts).expect("plain data"));
    let mut results = Vec::new();
    for op in &ops {
        let mut worst = Worst::default();
        for i in 0..opts.instances {
            let e = op_case(op, opts.seed, i as u64, opts.step, 1.0).map_err(|e| Error::at_node(op, e))?;
            worst.update(e.error, &format!("instance {i} (seed {})", opts.seed));
        }
        report.criteria.push(
            Criterion::at_most(format!("gradcheck_{op}"), worst.value, TOLERANCE)
                .with_detail(format!("worst: {}", worst.case)),
        );
        results.push(OpResult { op: op.clone(), instances: opts.instances, max_error: worst.value, worst_instance: worst.case });
    }
    let mut zero = Worst::default();
    for op in &ops {
        let z = op_case(op, opts.seed, 0, opts.step, 0.0).map_err(|e| Error::at_node(op, e))?;
        zero.update(z.magnitude, op);
    }
    // A zero upstream gradient must give exact zeros on both sides.
    report.criteria.push(Criterion::at_most("gradcheck_zero_probe_magnitude", zero.value, 0.0).with_detail(format!("worst: {}", zero.case)));
    if opts.ops.is_empty() {
        let mut tune = Worst::default();
        for i in 0..opts.instances.min(5) {
            tune.update(graph_tune_vs_eval(opts.seed, i as u64)?, &format!("instance {i}"));
        }
        report.criteria.push(Criterion::at_most("graph_tune_eval_grad_rel", tune.value, TUNE_EVAL_TOL).with_detail(format!("worst: {}", tune.case)));
    }
    report.metric("ops", &results);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_instances() {
        for op in OPS {
            for i in 0..2 {
                let e = op_case(op, 5, i, STEP, 1.0).unwrap();
                assert!(e.error <= TOLERANCE, "{op} instance {i}: {e:?}");
                assert!(e.magnitude > 0.0);
                assert_eq!(op_case(op, 5, i, STEP, 0.0).unwrap().magnitude, 0.0);
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        let x = Tensor::from_f64([3], vec![0.3, -1.2, 2.0]).unwrap();
        let mut rng = Rng::new(1);
        let fwd = |t: &[Tensor]| Ok(t[0].map(|v| v * v));
        let ana = |t: &[Tensor], r: &Tensor| Ok(vec![t[0].mul(r)?]);
        let e = check(&[x], &mut rng, STEP, 1.0, &fwd, &ana).unwrap();
        assert!((e.error - 0.5).abs() < 1e-6, "{e:?}");
    }
}
