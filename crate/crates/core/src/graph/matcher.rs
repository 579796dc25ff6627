//! Finds Conv->BN pairs that can be fused.
//!
//! Every conv node not already fused is a candidate. It pairs with its sole
//! consumer when that consumer is a BN of the same dimensionality whose only
//! input is the conv. Otherwise it is skipped with a reason.

use serde::Serialize;

use super::{Graph, OpKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// The conv feeds a BN and something else.
    MultiConsumer,
    NoBnFollower,
    /// A 1d or 3d pair; matched but not executable.
    UnsupportedDim,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Pair {
    pub conv: String,
    pub bn: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Skip {
    pub node: String,
    pub reason: SkipReason,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub pairs: Vec<Pair>,
    pub skipped: Vec<Skip>,
}

pub fn find_convbn_pairs(g: &Graph) -> MatchResult {
    let mut out = MatchResult::default();
    for &i in g.topo_order() {
        let conv = &g.nodes()[i];
        let Some(dim) = conv.op.conv_dim() else { continue };
        if conv.attrs.fused.is_some() {
            continue;
        }
        let follows = |id: &String| {
            let n = g.node(id).expect("validated");
            n.op.bn_dim() == Some(dim) && n.inputs.len() == 1 && n.inputs[0] == conv.id
        };
        let bn_users: Vec<&String> = conv.users.iter().filter(|u| follows(u)).collect();
        let skip = |reason| Skip { node: conv.id.clone(), reason };
        if bn_users.is_empty() {
            out.skipped.push(skip(SkipReason::NoBnFollower));
        } else if conv.users.len() > 1 {
            out.skipped.push(skip(SkipReason::MultiConsumer));
        } else if dim != 2 {
            out.skipped.push(skip(SkipReason::UnsupportedDim));
        } else {
            out.pairs.push(Pair {
                conv: conv.id.clone(),
                bn: bn_users[0].clone(),
            });
        }
    }
    out
}

/// Whether `op` is a BN kind; used to census rewritten graphs.
pub fn is_bn(op: OpKind) -> bool {
    op.bn_dim().is_some()
}
