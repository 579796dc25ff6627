//! The Tune/Deploy rewrite pass and its inverse.

use serde::Serialize;

use super::matcher::{find_convbn_pairs, Skip};
use super::{Attrs, Fused, Graph, Node, OpKind, ReservedBn};
use crate::block::{fuse_params, Mode, TuneBuffers};
use crate::error::{Error, Result};
use crate::io::TensorMap;
use crate::ops::BnParams;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RewriteEntry {
    pub conv: String,
    pub bn: String,
    pub mode: Mode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RewriteReport {
    pub rewritten: Vec<RewriteEntry>,
    pub skipped: Vec<Skip>,
    pub reverted: Vec<RewriteEntry>,
}

impl RewriteReport {
    pub fn is_empty(&self) -> bool {
        self.rewritten.is_empty() && self.skipped.is_empty() && self.reverted.is_empty()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(self).expect("plain data"))
            .expect("plain data");
        s.push('\n');
        s
    }
}

/// Fuses every eligible 2D Conv->BN pair. Tune keeps `(w, b, gamma, beta)`
/// trainable and adds `P.weight_coeff` / `P.bias_delta`; Deploy overwrites
/// the conv parameters with their fused values. Either way the BN node
/// becomes an identity and its state moves into `reserved_bns`.
///
/// The graph is left untouched if any pair fails to rewrite.
pub fn turn_on(g: &mut Graph, mode: Mode) -> Result<RewriteReport> {
    if !matches!(mode, Mode::Tune | Mode::Deploy) {
        return Err(Error::UnsupportedRewrite(format!(
            "turn_on supports tune and deploy, not {mode}"
        )));
    }
    if g.is_rewritten() {
        return Err(Error::UnsupportedRewrite(
            "graph already contains rewritten pairs; revert or use switch_mode".into(),
        ));
    }
    let found = find_convbn_pairs(g);
    let mut report = RewriteReport {
        skipped: found.skipped,
        ..RewriteReport::default()
    };
    if found.pairs.is_empty() {
        return Ok(report);
    }
    let mut work = g.clone();
    for pair in &found.pairs {
        rewrite_pair(&mut work, &pair.conv, &pair.bn, mode).map_err(|e| Error::at_node(&pair.conv, e))?;
        report.rewritten.push(RewriteEntry {
            conv: pair.conv.clone(),
            bn: pair.bn.clone(),
            mode,
        });
    }
    work.refresh()?;
    *g = work;
    Ok(report)
}

fn rewrite_pair(g: &mut Graph, conv_id: &str, bn_id: &str, mode: Mode) -> Result<()> {
    let conv = g.node(conv_id).expect("matched").clone();
    let bn_node = g.node(bn_id).expect("matched").clone();
    let bn_param = bn_node.param.clone().expect("validated");
    let w_name = conv.param_name("weight")?;
    let b_name = conv.param_name("bias")?;
    let bn_names = ["gamma", "beta", "running_mean", "running_var"].map(|s| format!("{bn_param}.{s}"));
    let bn = BnParams {
        gamma: g.param(&bn_names[0])?.clone(),
        beta: g.param(&bn_names[1])?.clone(),
        running_mean: g.param(&bn_names[2])?.clone(),
        running_var: g.param(&bn_names[3])?.clone(),
        eps: bn_node.attrs.eps(),
        momentum: bn_node.attrs.momentum(),
    };
    let weight = g.param(&w_name)?.clone();
    let bias = g.params.get(&b_name).cloned();

    let mut tensors = TensorMap::new();
    let mut added = Vec::new();
    let mut insert_new = |g: &mut Graph, name: String, t| -> Result<()> {
        if g.params.contains_key(&name) {
            return Err(Error::UnsupportedRewrite(format!("parameter {name} already exists")));
        }
        g.params.insert(name.clone(), t);
        added.push(name);
        Ok(())
    };
    match mode {
        Mode::Tune => {
            let buffers = TuneBuffers::from_bn(&bn)?;
            insert_new(g, conv.param_name("weight_coeff")?, buffers.weight_coeff)?;
            insert_new(g, conv.param_name("bias_delta")?, buffers.bias_delta)?;
            for name in &bn_names[2..] {
                tensors.insert(name.clone(), g.params.remove(name).expect("read above"));
            }
        }
        Mode::Deploy => {
            let (fw, fb) = fuse_params(&weight, bias.as_ref(), &bn)?;
            for name in &bn_names {
                tensors.insert(name.clone(), g.params.remove(name).expect("read above"));
            }
            tensors.insert(w_name.clone(), weight);
            g.params.insert(w_name, fw);
            match bias {
                Some(b) => {
                    tensors.insert(b_name.clone(), b);
                    g.params.insert(b_name, fb);
                }
                None => insert_new(g, b_name, fb)?,
            }
        }
        Mode::Train | Mode::Eval => unreachable!("checked by turn_on"),
    }

    g.node_mut(conv_id).expect("matched").attrs.fused = Some(Fused {
        mode,
        bn: bn_id.to_string(),
        bn_param: bn_param.clone(),
    });
    let slot = g.node_mut(bn_id).expect("matched");
    *slot = Node {
        id: bn_node.id.clone(),
        op: OpKind::Identity,
        inputs: bn_node.inputs.clone(),
        param: None,
        attrs: Attrs::default(),
        users: Vec::new(),
    };
    g.reserved_mut().push(ReservedBn {
        conv: conv_id.to_string(),
        mode,
        bn_node,
        tensors,
        added,
    });
    Ok(())
}

/// Undoes every rewrite, restoring nodes and parameters bitwise. A graph
/// that was never rewritten is left as is and yields an empty report.
pub fn revert(g: &mut Graph) -> Result<RewriteReport> {
    let mut report = RewriteReport::default();
    if !g.is_rewritten() {
        return Ok(report);
    }
    let mut work = g.clone();
    let records = std::mem::take(work.reserved_mut());
    for r in records.into_iter().rev() {
        for name in &r.added {
            work.params.remove(name);
        }
        for (name, t) in r.tensors {
            work.params.insert(name, t);
        }
        let conv = work
            .node_mut(&r.conv)
            .ok_or_else(|| Error::schema(&r.conv, "reserved record names a missing conv"))?;
        conv.attrs.fused = None;
        let bn_id = r.bn_node.id.clone();
        let slot = work
            .node_mut(&bn_id)
            .ok_or_else(|| Error::schema(&bn_id, "reserved record names a missing node"))?;
        *slot = r.bn_node;
        report.reverted.push(RewriteEntry {
            conv: r.conv,
            bn: bn_id,
            mode: r.mode,
        });
    }
    report.reverted.reverse();
    work.refresh()?;
    *g = work;
    Ok(report)
}

/// Reverts, then rewrites into `target` when it is Tune or Deploy. Train and
/// Eval targets leave the graph in its original unfused form.
pub fn switch_mode(g: &mut Graph, target: Mode) -> Result<RewriteReport> {
    let reverted = revert(g)?;
    let mut report = match target {
        Mode::Tune | Mode::Deploy => turn_on(g, target)?,
        Mode::Train | Mode::Eval => RewriteReport::default(),
    };
    report.reverted = reverted.reverted;
    Ok(report)
}
