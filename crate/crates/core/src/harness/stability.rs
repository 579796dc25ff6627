//! How per-channel scaling coefficients `c` distort Deploy-mode training.
//!
//! One step: an Eval step on `w` moves the fused weight by `c^2` times what
//! a Deploy step on `w'` moves it (BN affine frozen). Many steps: the toy
//! network trained in Eval and in Deploy from the same fused state.

use serde::Serialize;

use super::data::{Batches, Dataset};
use super::optim::Sgd;
use super::train::train_step;
use super::{Criterion, ExperimentReport, Worst};
use crate::block::{ConvBnBlock, Mode};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::graph::{self, ExecOptions, Graph, OpKind};
use crate::ops::{scale_out_channels, BnParams, ConvGeometry, ConvParams, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

pub const ONE_STEP_TOL: f64 = 1e-8;
/// Eval and Deploy loss curves when every coefficient is one.
pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CoeffSpec {
    /// Explicit values, reused cyclically across channels.
    List { values: Vec<f64> },
    LogUniform { lo: f64, hi: f64, channels: usize },
}

impl Default for CoeffSpec {
    fn default() -> CoeffSpec {
        CoeffSpec::LogUniform { lo: 0.1, hi: 10.0, channels: 8 }
    }
}

impl CoeffSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |v: f64| v == 0.0 || !v.is_finite();
        match self {
            CoeffSpec::List { values } => {
                if values.is_empty() {
                    return Err(Error::Input("empty coefficient list".into()));
                }
                if let Some(v) = values.iter().find(|v| bad(**v)) {
                    return Err(Error::Domain(format!(
                        "coefficient {v} rejected: the deploy gradient is undefined for c = 0"
                    )));
                }
            }
            CoeffSpec::LogUniform { lo, hi, channels } => {
                if !(*lo > 0.0 && lo <= hi && hi.is_finite()) || *channels == 0 {
                    return Err(Error::Input(format!("bad log-uniform range [{lo}, {hi}] x {channels}")));
                }
            }
        }
        Ok(())
    }

    /// `n` coefficients; sampled ones are drawn from `rng`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            CoeffSpec::List { values } => (0..n).map(|i| values[i % values.len()]).collect(),
            CoeffSpec::LogUniform { lo, hi, .. } => (0..n).map(|_| rng.log_uniform(*lo, *hi)).collect(),
        }
    }

    /// Channel count of the one-step block.
    pub fn channels(&self) -> usize {
        match self {
            CoeffSpec::List { values } => values.len(),
            CoeffSpec::LogUniform { channels, .. } => *channels,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CoeffSpec::List { values } if values.iter().all(|&v| v == 1.0))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityOptions {
    pub seed: u64,
    pub coeffs: CoeffSpec,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for StabilityOptions {
    fn default() -> StabilityOptions {
        StabilityOptions { seed: 0, coeffs: CoeffSpec::default(), lr: 0.02, steps: 50, batch_size: 16 }
    }
}

/// Gamma giving coefficient `c` for variance `var`.
fn gamma_for(c: &[f64], var: &Tensor, eps: f64) -> Tensor {
    let data = c.iter().zip(var.data()).map(|(c, v)| c * (v + eps).sqrt()).collect();
    var.with_data(data).expect("same length")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OneStep {
    pub coefficients: Vec<f64>,
    /// Per channel, the least-squares ratio of the Eval-induced fused-weight
    /// update to the Deploy update.
    pub ratios: Vec<f64>,
    /// `max |ratio / c^2 - 1|`.
    pub max_rel_error: f64,
}

/// One SGD step (no momentum, no decay) on a single block in Eval and in
/// Deploy, compared on the fused weight.
pub fn one_step(seed: u64, coeffs: &[f64], lr: f64) -> Result<OneStep> {
    CoeffSpec::List { values: coeffs.to_vec() }.validate()?;
    let mut rng = Rng::derive(seed, 0x57ab);
    let (c_out, c_in, k) = (coeffs.len(), 3, 3);
    let weight = rng.normal_tensor(DType::F64, [c_out, c_in, k, k], 0.3);
    let conv = ConvParams::new(weight, Some(rng.normal_tensor(DType::F64, [c_out], 0.1)), ConvGeometry::new((1, 1), (1, 1)))?;
    let running_var = rng.uniform_tensor(DType::F64, [c_out], 0.5, 1.5);
    let bn = BnParams {
        gamma: gamma_for(coeffs, &running_var, DEFAULT_EPS),
        beta: rng.normal_tensor(DType::F64, [c_out], 0.1),
        running_mean: rng.normal_tensor(DType::F64, [c_out], 0.1),
        running_var,
        eps: DEFAULT_EPS,
        momentum: DEFAULT_MOMENTUM,
    };
    let eval = ConvBnBlock::new(conv, bn)?;
    let c = eval.scaling_coefficients()?;
    let deploy = eval.clone().with_mode(Mode::Deploy)?;
    let x = rng.normal_tensor(DType::F64, [2, c_in, 8, 8], 1.0);
    let dz = rng.normal_tensor(DType::F64, [2, c_out, 8, 8], 1.0);

    let fe = eval.forward(&x)?;
    let ge = eval.backward(&fe.saved, &dz)?;
    // BN frozen, so the fused weight moves by c * (-lr * dw).
    let eval_update = scale_out_channels(&ge.dweight.scale(-lr), &c)?;
    let fd = deploy.forward(&x)?;
    let deploy_update = deploy.backward(&fd.saved, &dz)?.dweight.scale(-lr);

    let per = eval_update.numel() / c_out;
    let mut ratios = Vec::with_capacity(c_out);
    let mut max_rel_error = 0.0f64;
    for o in 0..c_out {
        let e = &eval_update.data()[o * per..][..per];
        let d = &deploy_update.data()[o * per..][..per];
        let num: f64 = e.iter().zip(d).map(|(a, b)| a * b).sum();
        let den: f64 = d.iter().map(|b| b * b).sum();
        let r = num / den;
        ratios.push(r);
        let target = c.data()[o] * c.data()[o];
        max_rel_error = max_rel_error.max((r / target - 1.0).abs());
    }
    Ok(OneStep { coefficients: c.data().to_vec(), ratios, max_rel_error })
}

/// Toy network whose BN coefficients are drawn from `spec`.
pub fn toy_with_coefficients(seed: u64, spec: &CoeffSpec) -> Result<Graph> {
    let mut g = fixtures::toy_chain(seed, DType::F64, 3)?;
    let mut rng = Rng::derive(seed, 0xc0ef);
    let bns: Vec<(String, String, f64)> = g
        .nodes()
        .iter()
        .filter(|n| n.op == OpKind::Bn2d)
        .map(|n| Ok((n.param_name("gamma")?, n.param_name("running_var")?, n.attrs.eps())))
        .collect::<Result<_>>()?;
    for (gamma, var, eps) in bns {
        let v = g.param(&var)?.clone();
        let c = spec.sample(v.numel(), &mut rng);
        g.params.insert(gamma, gamma_for(&c, &v, eps));
    }
    Ok(g)
}

/// BN affine parameters and conv biases; only conv and linear weights and
/// the linear bias train.
fn frozen_names(g: &Graph) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for n in g.nodes() {
        if n.op == OpKind::Bn2d {
            out.push(n.param_name("gamma")?);
            out.push(n.param_name("beta")?);
        }
        if n.op == OpKind::Conv2d {
            out.push(n.param_name("bias")?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelDispersion {
    pub conv: String,
    pub mode: Mode,
    /// Per-channel norm of the fused-weight update one plain SGD step makes.
    pub norms: Vec<f64>,
    pub max_over_min: f64,
    /// Standard deviation over mean.
    pub cv: f64,
}

fn dispersion(conv: &str, mode: Mode, update: &Tensor) -> ChannelDispersion {
    let c = update.dims()[0];
    let per = update.numel() / c;
    let norms: Vec<f64> = (0..c)
        .map(|o| update.data()[o * per..][..per].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = norms.iter().sum::<f64>() / c as f64;
    let var = norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / c as f64;
    ChannelDispersion {
        conv: conv.to_string(),
        mode,
        norms,
        max_over_min: max / min,
        cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiStep {
    pub eval_losses: Vec<f64>,
    pub deploy_losses: Vec<f64>,
    pub max_loss_gap: f64,
    pub dispersion: Vec<ChannelDispersion>,
}

/// Trains the toy network from identical fused state in Eval and Deploy.
pub fn multi_step(opts: &StabilityOptions) -> Result<MultiStep> {
    let eval_graph = toy_with_coefficients(opts.seed, &opts.coeffs)?;
    let mut deploy_graph = eval_graph.clone();
    graph::turn_on(&mut deploy_graph, Mode::Deploy)?;
    let data = Dataset::blobs(opts.seed, 96, 3, 6, 1.0, DType::F64)?;

    let mut dispersion_out = Vec::new();
    let (x0, y0) = data.batch(&(0..opts.batch_size.min(data.len())).collect::<Vec<_>>())?;
    for (g, mode) in [(&eval_graph, Mode::Eval), (&deploy_graph, Mode::Deploy)] {
        let fp = graph::forward(g, &x0, &ExecOptions::default())?;
        let (_, dl) = crate::ops::softmax_xent(&fp.output, &y0)?;
        let grads = graph::backward(g, &fp, &dl)?;
        for n in g.nodes().iter().filter(|n| n.op == OpKind::Conv2d) {
            let w = n.param_name("weight")?;
            let mut update = grads.params[&w].scale(-opts.lr);
            if mode == Mode::Eval {
                let bn = &g.node(&n.users[0]).expect("conv feeds bn");
                let p = BnParams {
                    gamma: g.param(&bn.param_name("gamma")?)?.clone(),
                    beta: g.param(&bn.param_name("beta")?)?.clone(),
                    running_mean: g.param(&bn.param_name("running_mean")?)?.clone(),
                    running_var: g.param(&bn.param_name("running_var")?)?.clone(),
                    eps: bn.attrs.eps(),
                    momentum: bn.attrs.momentum(),
                };
                update = scale_out_channels(&update, &crate::block::scaling_coefficients_of(&p)?)?;
            }
            dispersion_out.push(dispersion(&n.id, mode, &update));
        }
    }

    let mut curves = Vec::new();
    for (g, mode) in [(eval_graph, Mode::Eval), (deploy_graph, Mode::Deploy)] {
        let mut g = g;
        let mut sgd = Sgd::new(opts.lr, 0.0, 0.0);
        for name in frozen_names(&g)? {
            sgd.freeze(name);
        }
        let mut batches = Batches::new(data.len(), opts.batch_size, opts.seed);
        let mut losses = Vec::with_capacity(opts.steps);
        for step in 0..opts.steps {
            let (x, y) = data.batch(&batches.next_batch())?;
            let (loss, _) = train_step(&mut g, &mut sgd, mode, &x, &y).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step} in {mode} mode")),
                other => other,
            })?;
            losses.push(loss);
        }
        curves.push(losses);
    }
    let deploy_losses = curves.pop().expect("two runs");
    let eval_losses = curves.pop().expect("two runs");
    let mut gap = Worst::default();
    for (i, (a, b)) in eval_losses.iter().zip(&deploy_losses).enumerate() {
        gap.update((a - b).abs(), &i.to_string());
    }
    Ok(MultiStep { eval_losses, deploy_losses, max_loss_gap: gap.value, dispersion: dispersion_out })
}

pub fn run(opts: &StabilityOptions) -> Result<ExperimentReport> {
    opts.coeffs.validate()?;
    let mut report = ExperimentReport::new("stability", serde_json::to_value(opts).expect("plain data"));
    let mut rng = Rng::derive(opts.seed, 0x0c0e);
    let coeffs = opts.coeffs.sample(opts.coeffs.channels(), &mut rng);
    let one = one_step(opts.seed, &coeffs, opts.lr)?;
    report.criteria.push(Criterion::at_most("one_step_ratio_rel_error", one.max_rel_error, ONE_STEP_TOL));
    report.metric("one_step", &one);
    let multi = multi_step(opts)?;
    if opts.coeffs.is_identity() {
        report.criteria.push(Criterion::at_most("identity_trajectory_gap", multi.max_loss_gap, IDENTITY_TOL));
    }
    report.metric("multi_step", &multi);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_are_c_squared() {
        let r = one_step(3, &[0.1, 1.0, 10.0], 0.1).unwrap();
        for (got, want) in r.ratios.iter().zip([0.01, 1.0, 100.0]) {
            assert!((got / want - 1.0).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_coefficient_is_rejected() {
        assert!(matches!(one_step(0, &[1.0, 0.0], 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn identity_coefficients_give_identical_trajectories() {
        let opts = StabilityOptions { coeffs: CoeffSpec::List { values: vec![1.0] }, steps: 10, ..Default::default() };
        let r = run(&opts).unwrap();
        assert!(r.passed(), "{}", r.to_json_string());
    }

    #[test]
    fn spread_coefficients_diverge() {
        let opts = StabilityOptions { steps: 10, ..Default::default() };
        let m = multi_step(&opts).unwrap();
        let eval = m.dispersion.iter().find(|d| d.mode == Mode::Eval).unwrap();
        let deploy = m.dispersion.iter().find(|d| d.mode == Mode::Deploy && d.conv == eval.conv).unwrap();
        assert!(eval.max_over_min > deploy.max_over_min);
        assert!(m.max_loss_gap > 1e-6);
    }
}
