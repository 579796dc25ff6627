//! Whole-graph forward and backward.
//!
//! Per-node saved sets:
//!
//! | node                 | saved                               |
//! |----------------------|-------------------------------------|
//! | conv2d               | `X`                                 |
//! | conv2d (fused, tune) | `X`, `w_fused`, `b_fused`           |
//! | conv2d (fused, deploy) | `X`                               |
//! | bn2d (eval)          | `Y` (its input)                     |
//! | bn2d (train)         | `x_hat`, `batch_mean`, `batch_var`  |
//! | relu                 | its output                          |
//! | linear               | `X`                                 |
//! | others               | nothing                             |
//!
//! Each saved activation carries the id of the node that produced it, so a
//! tensor retained by two consumers can be counted once.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Graph, Node, OpKind};
use crate::block::{tune_backward, tune_fused_params, Mode, TuneBuffers};
use crate::error::{Error, Result};
use crate::ops::{
    bn_eval_backward, bn_eval_forward, bn_train_backward_normalized, bn_train_forward, conv2d, conv2d_grads,
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward, relu_backward,
    relu_forward, BatchStats, BnParams,
};
use crate::tensor::{Shape, Tensor};

/// How unfused BN nodes normalise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BnMode {
    Train,
    #[default]
    Eval,
}

impl BnMode {
    /// BN behaviour implied by a block mode.
    pub fn for_mode(mode: Mode) -> BnMode {
        if mode == Mode::Train {
            BnMode::Train
        } else {
            BnMode::Eval
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExecOptions {
    pub bn_mode: BnMode,
}

#[derive(Clone, Debug)]
pub struct SavedEntry {
    pub node: String,
    pub name: &'static str,
    /// Producer node id for activations, `node/name` for derived tensors.
    pub key: String,
    pub tensor: Arc<Tensor>,
}

enum Ctx {
    Nothing,
    Conv { x: Arc<Tensor>, fused_weight: Option<Arc<Tensor>> },
    BnEval { y: Arc<Tensor> },
    BnTrain { x_hat: Arc<Tensor>, stats: BatchStats },
    Relu { out: Arc<Tensor> },
    Linear { x: Arc<Tensor> },
}

pub struct ForwardPass {
    pub output: Tensor,
    pub saved: Vec<SavedEntry>,
    /// Train-mode running statistics keyed by parameter name.
    pub running_updates: BTreeMap<String, Tensor>,
    ctx: Vec<Ctx>,
    shapes: Vec<Shape>,
    bn_mode: BnMode,
}

impl ForwardPass {
    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn shape_of(&self, g: &Graph, id: &str) -> Option<&Shape> {
        g.index_of(id).map(|i| &self.shapes[i])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub input: Option<Tensor>,
}

fn bn_params(g: &Graph, n: &Node) -> Result<BnParams> {
    Ok(BnParams {
        gamma: g.param(&n.param_name("gamma")?)?.clone(),
        beta: g.param(&n.param_name("beta")?)?.clone(),
        running_mean: g.param(&n.param_name("running_mean")?)?.clone(),
        running_var: g.param(&n.param_name("running_var")?)?.clone(),
        eps: n.attrs.eps(),
        momentum: n.attrs.momentum(),
    })
}

fn tune_buffers(g: &Graph, n: &Node) -> Result<TuneBuffers> {
    Ok(TuneBuffers {
        weight_coeff: g.param(&n.param_name("weight_coeff")?)?.clone(),
        bias_delta: g.param(&n.param_name("bias_delta")?)?.clone(),
    })
}

fn unsupported(n: &Node) -> Error {
    Error::UnsupportedRewrite(format!("{} nodes are recognised but not executable", n.op))
}

pub fn forward(g: &Graph, x: &Tensor, opts: &ExecOptions) -> Result<ForwardPass> {
    run_forward(g, x, opts, false).map(|(fp, _)| fp)
}

/// [`forward`] that also returns every node's output, keyed by node id.
pub fn forward_with_values(g: &Graph, x: &Tensor, opts: &ExecOptions) -> Result<(ForwardPass, BTreeMap<String, Tensor>)> {
    run_forward(g, x, opts, true)
}

fn run_forward(g: &Graph, x: &Tensor, opts: &ExecOptions, keep: bool) -> Result<(ForwardPass, BTreeMap<String, Tensor>)> {
    let count = g.nodes().len();
    let mut values: Vec<Option<Arc<Tensor>>> = vec![None; count];
    let mut ctx: Vec<Ctx> = (0..count).map(|_| Ctx::Nothing).collect();
    let mut saved = Vec::new();
    let mut running_updates = BTreeMap::new();
    for &i in g.topo_order() {
        let n = &g.nodes()[i];
        let arg = |k: usize| -> Arc<Tensor> {
            values[g.index_of(&n.inputs[k]).expect("validated")].clone().expect("topological")
        };
        let key_of = |k: usize| g.value_source(&n.inputs[k]).to_string();
        let mut save = |name: &'static str, key: String, t: &Arc<Tensor>| {
            saved.push(SavedEntry {
                node: n.id.clone(),
                name,
                key,
                tensor: t.clone(),
            });
        };
        let mut step = || -> Result<(Arc<Tensor>, Ctx)> {
            Ok(match n.op {
                OpKind::Input => (Arc::new(x.clone()), Ctx::Nothing),
                OpKind::Output | OpKind::Identity => (arg(0), Ctx::Nothing),
                OpKind::Conv2d => {
                    let input = arg(0);
                    let geometry = n.attrs.geometry();
                    let weight = g.param(&n.param_name("weight")?)?;
                    let bias = g.params.get(&n.param_name("bias")?);
                    match &n.attrs.fused {
                        Some(f) if f.mode == Mode::Tune => {
                            let gamma = g.param(&format!("{}.gamma", f.bn_param))?;
                            let beta = g.param(&format!("{}.beta", f.bn_param))?;
                            let buffers = tune_buffers(g, n)?;
                            let (fw, fb) = tune_fused_params(weight, bias, gamma, beta, &buffers)?;
                            let z = conv2d(&input, &fw, Some(&fb), geometry)?;
                            let fw = Arc::new(fw);
                            let fb = Arc::new(fb);
                            save("X", key_of(0), &input);
                            save("w_fused", format!("{}/w_fused", n.id), &fw);
                            save("b_fused", format!("{}/b_fused", n.id), &fb);
                            (Arc::new(z), Ctx::Conv { x: input, fused_weight: Some(fw) })
                        }
                        _ => {
                            let z = conv2d(&input, weight, bias, geometry)?;
                            save("X", key_of(0), &input);
                            (Arc::new(z), Ctx::Conv { x: input, fused_weight: None })
                        }
                    }
                }
                OpKind::Bn2d => {
                    let y = arg(0);
                    let bn = bn_params(g, n)?;
                    match opts.bn_mode {
                        BnMode::Eval => {
                            let z = bn_eval_forward(&y, &bn)?;
                            save("Y", key_of(0), &y);
                            (Arc::new(z), Ctx::BnEval { y })
                        }
                        BnMode::Train => {
                            let out = bn_train_forward(&y, &bn)?;
                            let x_hat = Arc::new(out.x_hat);
                            save("x_hat", format!("{}/x_hat", n.id), &x_hat);
                            save("batch_mean", format!("{}/batch_mean", n.id), &Arc::new(out.stats.mean.clone()));
                            save("batch_var", format!("{}/batch_var", n.id), &Arc::new(out.stats.var.clone()));
                            running_updates.insert(n.param_name("running_mean")?, out.running_mean);
                            running_updates.insert(n.param_name("running_var")?, out.running_var);
                            (Arc::new(out.z), Ctx::BnTrain { x_hat, stats: out.stats })
                        }
                    }
                }
                OpKind::Relu => {
                    let out = Arc::new(relu_forward(&arg(0)));
                    save("out", n.id.clone(), &out);
                    (out.clone(), Ctx::Relu { out })
                }
                OpKind::Add => {
                    let (a, b) = (arg(0), arg(1));
                    if a.shape() != b.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "add",
                            left: a.shape().clone(),
                            right: b.shape().clone(),
                        });
                    }
                    (Arc::new(a.add(&b)?), Ctx::Nothing)
                }
                OpKind::GlobalAvgPool => (Arc::new(global_avg_pool_forward(&arg(0))?), Ctx::Nothing),
                OpKind::Linear => {
                    let input = arg(0);
                    let w = g.param(&n.param_name("weight")?)?;
                    let b = g.params.get(&n.param_name("bias")?);
                    let z = linear_forward(&input, w, b)?;
                    save("X", key_of(0), &input);
                    (Arc::new(z), Ctx::Linear { x: input })
                }
                OpKind::Conv1d | OpKind::Conv3d | OpKind::Bn1d | OpKind::Bn3d => return Err(unsupported(n)),
            })
        };
        let (value, c) = step().map_err(|e| Error::at_node(&n.id, e))?;
        values[i] = Some(value);
        ctx[i] = c;
    }
    let shapes = values
        .iter()
        .map(|v| v.as_ref().expect("all visited").shape().clone())
        .collect();
    let kept = if keep {
        g.nodes().iter().zip(&values).map(|(n, v)| (n.id.clone(), (**v.as_ref().expect("visited")).clone())).collect()
    } else {
        BTreeMap::new()
    };
    let out_idx = g.index_of(&g.output_node().id).expect("validated");
    let output = values[out_idx].take().expect("visited");
    drop(values);
    let output = Arc::try_unwrap(output).unwrap_or_else(|shared| (*shared).clone());
    let fp = ForwardPass {
        output,
        saved,
        running_updates,
        ctx,
        shapes,
        bn_mode: opts.bn_mode,
    };
    Ok((fp, kept))
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&t)?,
        None => t,
    });
    Ok(())
}

/// Gradients of `sum(d_out * output)` with respect to every trainable
/// parameter reached by the backward pass, keyed by store name.
pub fn backward(g: &Graph, fp: &ForwardPass, d_out: &Tensor) -> Result<Gradients> {
    let count = g.nodes().len();
    let out_idx = g.index_of(&g.output_node().id).expect("validated");
    if d_out.shape() != &fp.shapes[out_idx] {
        return Err(Error::ShapeMismatch {
            op: "backward seed",
            left: d_out.shape().clone(),
            right: fp.shapes[out_idx].clone(),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; count];
    grads[out_idx] = Some(d_out.clone());
    let mut result = Gradients::default();
    let mut param_grads: BTreeMap<String, Option<Tensor>> = BTreeMap::new();
    for &i in g.topo_order().iter().rev() {
        let Some(gi) = grads[i].take() else { continue };
        let n = &g.nodes()[i];
        let mut to_inputs: Vec<(usize, Tensor)> = Vec::new();
        let mut to_params: Vec<(String, Tensor)> = Vec::new();
        let input_idx = |k: usize| g.index_of(&n.inputs[k]).expect("validated");
        let step = || -> Result<(Vec<(usize, Tensor)>, Vec<(String, Tensor)>, Option<Tensor>)> {
            let mut ins = Vec::new();
            let mut ps = Vec::new();
            let mut input_grad = None;
            match (&fp.ctx[i], n.op) {
                (_, OpKind::Input) => input_grad = Some(gi.clone()),
                (_, OpKind::Output | OpKind::Identity) => ins.push((input_idx(0), gi.clone())),
                (Ctx::Conv { x, fused_weight }, OpKind::Conv2d) => {
                    let geometry = n.attrs.geometry();
                    let w_name = n.param_name("weight")?;
                    let b_name = n.param_name("bias")?;
                    let weight = g.param(&w_name)?;
                    let bias = g.params.get(&b_name);
                    match (&n.attrs.fused, fused_weight) {
                        (Some(f), Some(fw)) if f.mode == Mode::Tune => {
                            let gamma = g.param(&format!("{}.gamma", f.bn_param))?;
                            let buffers = tune_buffers(g, n)?;
                            let t = tune_backward(x, weight, bias, gamma, &buffers, fw, geometry, &gi)?;
                            ins.push((input_idx(0), t.dx));
                            ps.push((w_name, t.dweight));
                            if bias.is_some() {
                                ps.push((b_name, t.dbias));
                            }
                            ps.push((format!("{}.gamma", f.bn_param), t.dgamma));
                            ps.push((format!("{}.beta", f.bn_param), t.dbeta));
                        }
                        _ => {
                            let c = conv2d_grads(x, weight, geometry, &gi)?;
                            ins.push((input_idx(0), c.dx));
                            ps.push((w_name, c.dweight));
                            if bias.is_some() {
                                ps.push((b_name, c.dbias));
                            }
                        }
                    }
                }
                (Ctx::BnEval { y }, OpKind::Bn2d) => {
                    let b = bn_eval_backward(&gi, y, &bn_params(g, n)?)?;
                    ins.push((input_idx(0), b.dy));
                    ps.push((n.param_name("gamma")?, b.dgamma));
                    ps.push((n.param_name("beta")?, b.dbeta));
                }
                (Ctx::BnTrain { x_hat, stats }, OpKind::Bn2d) => {
                    let b = bn_train_backward_normalized(&gi, x_hat, stats, &bn_params(g, n)?)?;
                    ins.push((input_idx(0), b.dy));
                    ps.push((n.param_name("gamma")?, b.dgamma));
                    ps.push((n.param_name("beta")?, b.dbeta));
                }
                (Ctx::Relu { out }, OpKind::Relu) => ins.push((input_idx(0), relu_backward(&gi, out)?)),
                (_, OpKind::Add) => {
                    ins.push((input_idx(0), gi.clone()));
                    ins.push((input_idx(1), gi.clone()));
                }
                (_, OpKind::GlobalAvgPool) => {
                    let k = input_idx(0);
                    ins.push((k, global_avg_pool_backward(&gi, &fp.shapes[k])?));
                }
                (Ctx::Linear { x }, OpKind::Linear) => {
                    let w_name = n.param_name("weight")?;
                    let b_name = n.param_name("bias")?;
                    let l = linear_backward(x, g.param(&w_name)?, &gi)?;
                    ins.push((input_idx(0), l.dx));
                    ps.push((w_name, l.dweight));
                    if g.params.contains_key(&b_name) {
                        ps.push((b_name, l.dbias));
                    }
                }
                _ => return Err(Error::Mode(format!("no saved state for {} node", n.op))),
            }
            Ok((ins, ps, input_grad))
        };
        let (ins, ps, input_grad) = step().map_err(|e| Error::at_node(&n.id, e))?;
        to_inputs.extend(ins);
        to_params.extend(ps);
        if let Some(t) = input_grad {
            result.input = Some(t);
        }
        for (k, t) in to_inputs {
            accumulate(&mut grads[k], t).map_err(|e| Error::at_node(&n.id, e))?;
        }
        for (name, t) in to_params {
            accumulate(param_grads.entry(name).or_default(), t).map_err(|e| Error::at_node(&n.id, e))?;
        }
    }
    result.params = param_grads
        .into_iter()
        .filter_map(|(k, v)| v.map(|t| (k, t)))
        .collect();
    Ok(result)
}
