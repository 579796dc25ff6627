//! Saved-for-backward accounting.
//!
//! [`count_saved`] predicts, from shapes alone, which tensors each node keeps
//! for its backward in a given mode (see the table in [`crate::graph::exec`]).
//! [`verify_against_engine`] runs the executor and checks that what it
//! actually retained matches the prediction name for name.
//!
//! A tensor kept by several nodes (an activation read by two consumers, or a
//! ReLU output that is also the next conv's input) is owned by the first
//! saver in topological order; later savers list it as `shared` with zero
//! elements, so totals are plain sums over nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::block::Mode;
use crate::error::{Error, Result};
use crate::graph::exec::{self, BnMode, ExecOptions};
use crate::graph::{self, find_convbn_pairs, Graph, OpKind, ShapeSource};
use crate::tensor::{DType, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SavedTensor {
    pub name: String,
    /// Identity of the underlying value; equal keys are the same tensor.
    pub key: String,
    pub shape: Vec<usize>,
    /// Zero when `shared`.
    pub elements: usize,
    pub bytes: usize,
    pub shared: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeFootprint {
    pub node: String,
    pub op: String,
    pub tensors: Vec<SavedTensor>,
    pub elements: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModeFootprint {
    pub mode: Mode,
    pub nodes: Vec<NodeFootprint>,
    pub total_elements: usize,
    pub total_bytes: usize,
    /// Pre-fusion parameters kept so a Deploy rewrite can be reverted; not
    /// part of the mode comparison.
    pub snapshot_elements: usize,
    pub snapshot_bytes: usize,
}

impl ModeFootprint {
    pub fn node(&self, id: &str) -> Option<&NodeFootprint> {
        self.nodes.iter().find(|n| n.node == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ratios {
    pub tune_over_eval: f64,
    pub deploy_over_eval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FootprintReport {
    pub dtype: DType,
    pub input_shape: Vec<usize>,
    pub modes: Vec<ModeFootprint>,
    pub ratios: Ratios,
}

impl FootprintReport {
    pub fn mode(&self, mode: Mode) -> &ModeFootprint {
        self.modes.iter().find(|m| m.mode == mode).expect("all modes reported")
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(self).expect("plain data"))
            .expect("plain data");
        s.push('\n');
        s
    }

    /// Per-node element counts for every mode, then byte totals and ratios.
    pub fn to_table(&self) -> String {
        let modes: Vec<Mode> = self.modes.iter().map(|m| m.mode).collect();
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["node".to_string(), "op".to_string()];
        header.extend(modes.iter().map(|m| m.to_string()));
        rows.push(header);
        let first = &self.modes[0];
        for (i, n) in first.nodes.iter().enumerate() {
            let mut row = vec![n.node.clone(), n.op.clone()];
            row.extend(self.modes.iter().map(|m| m.nodes[i].elements.to_string()));
            rows.push(row);
        }
        let mut total = vec!["total elements".to_string(), String::new()];
        total.extend(self.modes.iter().map(|m| m.total_elements.to_string()));
        rows.push(total);
        let mut bytes = vec![format!("total bytes ({})", self.dtype.name()), String::new()];
        bytes.extend(self.modes.iter().map(|m| m.total_bytes.to_string()));
        rows.push(bytes);
        let mut snap = vec!["snapshot bytes".to_string(), String::new()];
        snap.extend(self.modes.iter().map(|m| m.snapshot_bytes.to_string()));
        rows.push(snap);

        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                if c < 2 {
                    let _ = write!(line, "{cell:<w$}  ", w = widths[c]);
                } else {
                    let _ = write!(line, "{cell:>w$}  ", w = widths[c]);
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        let _ = writeln!(out, "tune/eval   {:.6}", self.ratios.tune_over_eval);
        let _ = writeln!(out, "deploy/eval {:.6}", self.ratios.deploy_over_eval);
        out
    }
}

struct Raw {
    node: String,
    op: OpKind,
    tensors: Vec<(String, String, Shape)>,
}

fn assemble(mode: Mode, dtype: DType, raw: Vec<Raw>, snapshot_elements: usize) -> ModeFootprint {
    let width = dtype.size_in_bytes();
    let mut seen = BTreeSet::new();
    let mut nodes = Vec::with_capacity(raw.len());
    for r in raw {
        let tensors: Vec<SavedTensor> = r
            .tensors
            .into_iter()
            .map(|(name, key, shape)| {
                let shared = !seen.insert(key.clone());
                let elements = if shared { 0 } else { shape.numel() };
                SavedTensor {
                    name,
                    key,
                    shape: shape.dims().to_vec(),
                    elements,
                    bytes: elements * width,
                    shared,
                }
            })
            .collect();
        let elements = tensors.iter().map(|t| t.elements).sum();
        nodes.push(NodeFootprint {
            node: r.node,
            op: r.op.to_string(),
            tensors,
            elements,
            bytes: elements * width,
        });
    }
    let total_elements = nodes.iter().map(|n| n.elements).sum();
    ModeFootprint {
        mode,
        nodes,
        total_elements,
        total_bytes: total_elements * width,
        snapshot_elements,
        snapshot_bytes: snapshot_elements * width,
    }
}

/// Graph in its unfused form, reverting a rewritten one.
fn unfused(g: &Graph) -> Result<std::borrow::Cow<'_, Graph>> {
    if g.is_rewritten() {
        let mut c = g.clone();
        graph::revert(&mut c)?;
        Ok(std::borrow::Cow::Owned(c))
    } else {
        Ok(std::borrow::Cow::Borrowed(g))
    }
}

/// Analytic saved set of `g` in `mode` for an input of `input`, with
/// parameter shapes taken from the graph's own store.
pub fn count_saved(g: &Graph, mode: Mode, input: &Shape, dtype: DType) -> Result<ModeFootprint> {
    let base = unfused(g)?;
    count_saved_with(&base, &base.params, mode, input, dtype)
}

/// As [`count_saved`] but with parameter shapes from `shapes`; the graph
/// must not be rewritten.
pub fn count_saved_with(g: &Graph, shapes: &dyn ShapeSource, mode: Mode, input: &Shape, dtype: DType) -> Result<ModeFootprint> {
    if g.is_rewritten() {
        return Err(Error::Input("count_saved_with needs an unfused graph".into()));
    }
    let out_shapes = g.infer_shapes(input, shapes)?;
    let fusing = matches!(mode, Mode::Tune | Mode::Deploy);
    let pairs = if fusing { find_convbn_pairs(g).pairs } else { Vec::new() };
    let fused_convs: BTreeSet<&str> = pairs.iter().map(|p| p.conv.as_str()).collect();
    let absorbed: BTreeSet<&str> = pairs.iter().map(|p| p.bn.as_str()).collect();

    // Producer of a value once absorbed BNs have become identities.
    let source = |id: &str| -> String {
        let mut cur = id;
        loop {
            let n = g.node(cur).expect("validated");
            if n.op.is_alias() || absorbed.contains(cur) {
                cur = &n.inputs[0];
            } else {
                return cur.to_string();
            }
        }
    };
    let shape_of = |id: &str| out_shapes[g.index_of(id).expect("validated")].clone();
    let param_shape = |name: String| -> Result<Shape> {
        shapes.param_shape(&name).ok_or(Error::Ingestion { missing: vec![name] })
    };

    let mut raw = Vec::new();
    let mut snapshot = 0;
    for &i in g.topo_order() {
        let n = &g.nodes()[i];
        let mut tensors = Vec::new();
        let input_entry = |name: &str| (name.to_string(), source(&n.inputs[0]), shape_of(&n.inputs[0]));
        match n.op {
            OpKind::Conv2d => {
                tensors.push(input_entry("X"));
                if fused_convs.contains(n.id.as_str()) {
                    let w = param_shape(n.param_name("weight")?)?;
                    let c_out = Shape::from([w.dims()[0]]);
                    if mode == Mode::Tune {
                        tensors.push(("w_fused".into(), format!("{}/w_fused", n.id), w.clone()));
                        tensors.push(("b_fused".into(), format!("{}/b_fused", n.id), c_out.clone()));
                    } else {
                        let bias = shapes.param_shape(&n.param_name("bias")?).map_or(0, |s| s.numel());
                        snapshot += w.numel() + bias + 4 * c_out.numel();
                    }
                }
            }
            OpKind::Bn2d if absorbed.contains(n.id.as_str()) => {}
            OpKind::Bn2d => {
                if mode == Mode::Train {
                    let c = Shape::from([shape_of(&n.inputs[0]).dims()[1]]);
                    tensors.push(("x_hat".into(), format!("{}/x_hat", n.id), shape_of(&n.inputs[0])));
                    tensors.push(("batch_mean".into(), format!("{}/batch_mean", n.id), c.clone()));
                    tensors.push(("batch_var".into(), format!("{}/batch_var", n.id), c));
                } else {
                    tensors.push(input_entry("Y"));
                }
            }
            OpKind::Relu => tensors.push(("out".into(), n.id.clone(), shape_of(&n.id))),
            OpKind::Linear => tensors.push(input_entry("X")),
            _ => {}
        }
        let op = if absorbed.contains(n.id.as_str()) { OpKind::Identity } else { n.op };
        raw.push(Raw { node: n.id.clone(), op, tensors });
    }
    Ok(assemble(mode, dtype, raw, snapshot))
}

/// All four modes plus the Tune/Eval and Deploy/Eval ratios of saved bytes.
pub fn footprint_report(g: &Graph, input: &Shape, dtype: DType) -> Result<FootprintReport> {
    let base = unfused(g)?;
    footprint_report_with(&base, &base.params, input, dtype)
}

pub fn footprint_report_with(g: &Graph, shapes: &dyn ShapeSource, input: &Shape, dtype: DType) -> Result<FootprintReport> {
    let modes = [Mode::Eval, Mode::Tune, Mode::Deploy, Mode::Train]
        .into_iter()
        .map(|m| count_saved_with(g, shapes, m, input, dtype))
        .collect::<Result<Vec<_>>>()?;
    let eval = modes[0].total_bytes as f64;
    let ratio = |b: usize| if eval == 0.0 { 1.0 } else { b as f64 / eval };
    Ok(FootprintReport {
        dtype,
        input_shape: input.dims().to_vec(),
        ratios: Ratios {
            tune_over_eval: ratio(modes[1].total_bytes),
            deploy_over_eval: ratio(modes[2].total_bytes),
        },
        modes,
    })
}

/// Graph rewritten (or reverted) into the form `mode` executes.
pub fn prepare(g: &Graph, mode: Mode) -> Result<Graph> {
    let mut work = g.clone();
    graph::switch_mode(&mut work, mode)?;
    Ok(work)
}

/// Runs the executor in `mode` and checks its retained tensors against
/// [`count_saved`]. Returns the instrumented footprint.
pub fn verify_against_engine(g: &Graph, mode: Mode, x: &Tensor) -> Result<ModeFootprint> {
    let predicted = count_saved(g, mode, x.shape(), x.dtype())?;
    let work = prepare(g, mode)?;
    let fp = exec::forward(&work, x, &ExecOptions { bn_mode: BnMode::for_mode(mode) })?;
    let mut by_node: BTreeMap<&str, Vec<(String, String, Shape)>> = BTreeMap::new();
    for e in &fp.saved {
        by_node
            .entry(e.node.as_str())
            .or_default()
            .push((e.name.to_string(), e.key.clone(), e.tensor.shape().clone()));
    }
    let raw = work
        .topo_order()
        .iter()
        .map(|&i| {
            let n = &work.nodes()[i];
            Raw {
                node: n.id.clone(),
                op: n.op,
                tensors: by_node.remove(n.id.as_str()).unwrap_or_default(),
            }
        })
        .collect();
    let snapshot = work
        .reserved_bns()
        .iter()
        .filter(|r| r.mode == Mode::Deploy)
        .flat_map(|r| r.tensors.values())
        .map(|t| t.numel())
        .sum();
    let measured = assemble(mode, x.dtype(), raw, snapshot);

    let mut problems = Vec::new();
    let index: BTreeMap<&str, &NodeFootprint> = predicted.nodes.iter().map(|n| (n.node.as_str(), n)).collect();
    for m in &measured.nodes {
        let Some(p) = index.get(m.node.as_str()) else {
            problems.push(format!("{}: not predicted", m.node));
            continue;
        };
        let want: BTreeSet<_> = p.tensors.iter().map(|t| (&t.name, &t.key, t.elements, &t.shape)).collect();
        let got: BTreeSet<_> = m.tensors.iter().map(|t| (&t.name, &t.key, t.elements, &t.shape)).collect();
        let missing: Vec<_> = want.difference(&got).map(|t| t.0.as_str()).collect();
        let extra: Vec<_> = got.difference(&want).map(|t| t.0.as_str()).collect();
        if !missing.is_empty() || !extra.is_empty() {
            problems.push(format!("{}: missing {missing:?}, extra {extra:?}", m.node));
        }
    }
    if measured.nodes.len() != predicted.nodes.len() {
        problems.push(format!(
            "{} nodes predicted, {} executed",
            predicted.nodes.len(),
            measured.nodes.len()
        ));
    }
    if measured.total_elements != predicted.total_elements {
        problems.push(format!(
            "total {} predicted, {} retained",
            predicted.total_elements, measured.total_elements
        ));
    }
    if measured.snapshot_elements != predicted.snapshot_elements {
        problems.push(format!(
            "snapshot {} predicted, {} held",
            predicted.snapshot_elements, measured.snapshot_elements
        ));
    }
    if problems.is_empty() {
        Ok(measured)
    } else {
        Err(Error::FootprintMismatch(format!("{mode} mode: {}", problems.join("; "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn block() -> Graph {
        fixtures::single_block(1, DType::F32, 3, 4, 3, false).unwrap()
    }

    #[test]
    fn single_block_counts() {
        let input = Shape::from([1, 3, 8, 8]);
        let g = block();
        let count = |m| count_saved(&g, m, &input, DType::F32).unwrap().total_elements;
        assert_eq!(count(Mode::Eval), 448);
        assert_eq!(count(Mode::Tune), 304);
        assert_eq!(count(Mode::Deploy), 192);
        assert_eq!(count(Mode::Train), 192 + 256 + 8);
        let r = footprint_report(&g, &input, DType::F32).unwrap();
        assert_eq!(r.mode(Mode::Eval).total_bytes, 448 * 4);
        assert_eq!(r.mode(Mode::Deploy).snapshot_elements, 108 + 16);
        assert!(r.to_table().contains("448"));
    }

    #[test]
    fn saved_names_per_mode() {
        let g = block();
        let x = crate::Rng::new(2).normal_tensor(DType::F32, [1, 3, 8, 8], 1.0);
        let names = |m| -> Vec<String> {
            let f = verify_against_engine(&g, m, &x).unwrap();
            f.node("c").unwrap().tensors.iter().chain(&f.node("b").unwrap().tensors).map(|t| t.name.clone()).collect()
        };
        assert_eq!(names(Mode::Eval), ["X", "Y"]);
        assert_eq!(names(Mode::Tune), ["X", "w_fused", "b_fused"]);
        assert_eq!(names(Mode::Deploy), ["X"]);
        assert_eq!(names(Mode::Train), ["X", "x_hat", "batch_mean", "batch_var"]);
    }

    #[test]
    fn no_pairs_means_equal_totals() {
        let g = fixtures::no_bn(3, DType::F32).unwrap();
        let r = footprint_report(&g, &Shape::from([2, 3, 6, 6]), DType::F32).unwrap();
        assert_eq!(r.mode(Mode::Eval).total_elements, r.mode(Mode::Tune).total_elements);
        assert_eq!(r.mode(Mode::Eval).total_elements, r.mode(Mode::Deploy).total_elements);
    }
}
