//! Computation-graph IR.
//!
//! Graphs are stored as JSON (`"format": "cbn-graph/1"`):
//!
//! ```json
//! {
//!   "format": "cbn-graph/1",
//!   "params_file": "toy.cbnt",
//!   "nodes": [
//!     {"id": "x",  "op": "input",  "inputs": []},
//!     {"id": "c1", "op": "conv2d", "inputs": ["x"], "param": "c1",
//!      "attrs": {"stride": [1, 1], "padding": [1, 1]}},
//!     {"id": "b1", "op": "bn2d",   "inputs": ["c1"], "param": "b1", "attrs": {"eps": 1e-5}},
//!     {"id": "y",  "op": "output", "inputs": ["b1"]}
//!   ]
//! }
//! ```
//!
//! Parameter names are derived from a node's `param`:
//!
//! | op       | tensors                                                    |
//! |----------|------------------------------------------------------------|
//! | conv2d   | `P.weight`, optional `P.bias`                              |
//! | bn2d     | `P.gamma`, `P.beta`, `P.running_mean`, `P.running_var`      |
//! | linear   | `P.weight`, optional `P.bias`                              |
//!
//! A rewritten graph additionally records each detached BN in
//! `reserved_bns`; the tensors it holds live in the parameter store under
//! `reserved/<bn id>/<name>` when written to disk.

pub mod exec;
pub mod matcher;
pub mod rewrite;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::block::Mode;
use crate::error::{Error, Result};
use crate::io::{self, TensorMap};
use crate::ops::{ConvGeometry, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::tensor::{Shape, Tensor};

pub use exec::{backward, forward, forward_with_values, BnMode, ExecOptions, ForwardPass, Gradients, SavedEntry};
pub use matcher::{find_convbn_pairs, MatchResult, Pair, Skip, SkipReason};
pub use rewrite::{revert, switch_mode, turn_on, RewriteEntry, RewriteReport};

pub const FORMAT: &str = "cbn-graph/1";
const RESERVED_PREFIX: &str = "reserved/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Output,
    Conv1d,
    Conv2d,
    Conv3d,
    Bn1d,
    Bn2d,
    Bn3d,
    Relu,
    Add,
    GlobalAvgPool,
    Linear,
    Identity,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Output => "output",
            OpKind::Conv1d => "conv1d",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv3d => "conv3d",
            OpKind::Bn1d => "bn1d",
            OpKind::Bn2d => "bn2d",
            OpKind::Bn3d => "bn3d",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::Identity => "identity",
        }
    }

    pub fn conv_dim(self) -> Option<u8> {
        match self {
            OpKind::Conv1d => Some(1),
            OpKind::Conv2d => Some(2),
            OpKind::Conv3d => Some(3),
            _ => None,
        }
    }

    pub fn bn_dim(self) -> Option<u8> {
        match self {
            OpKind::Bn1d => Some(1),
            OpKind::Bn2d => Some(2),
            OpKind::Bn3d => Some(3),
            _ => None,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Input => 0,
            OpKind::Add => 2,
            _ => 1,
        }
    }

    pub fn takes_param(self) -> bool {
        self.conv_dim().is_some() || self.bn_dim().is_some() || self == OpKind::Linear
    }

    /// Nodes whose value is their input's value.
    pub fn is_alias(self) -> bool {
        matches!(self, OpKind::Identity | OpKind::Output)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<OpKind> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::Input(format!("unknown op {s:?}")))
    }
}

/// Marks a conv that absorbed its BN follower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fused {
    pub mode: Mode,
    pub bn: String,
    pub bn_param: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<Fused>,
}

impl Attrs {
    pub fn is_empty(&self) -> bool {
        *self == Attrs::default()
    }

    pub fn geometry(&self) -> ConvGeometry {
        let s = self.stride.unwrap_or([1, 1]);
        let p = self.padding.unwrap_or([0, 0]);
        ConvGeometry::new((s[0], s[1]), (p[0], p[1]))
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or(DEFAULT_EPS)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum.unwrap_or(DEFAULT_MOMENTUM)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    #[serde(skip_serializing_if = "Attrs::is_empty")]
    pub attrs: Attrs,
    /// Consumers, derived from the other nodes' inputs.
    #[serde(skip)]
    pub users: Vec<String>,
}

impl Node {
    pub fn new(id: &str, op: OpKind, inputs: &[&str]) -> Node {
        Node {
            id: id.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            param: None,
            attrs: Attrs::default(),
            users: Vec::new(),
        }
    }

    pub fn with_param(mut self, param: &str) -> Node {
        self.param = Some(param.to_string());
        self
    }

    pub fn with_attrs(mut self, attrs: Attrs) -> Node {
        self.attrs = attrs;
        self
    }

    /// `param.suffix`; errors when the node has no param reference.
    pub fn param_name(&self, suffix: &str) -> Result<String> {
        match &self.param {
            Some(p) => Ok(format!("{p}.{suffix}")),
            None => Err(Error::schema(&self.id, format!("{} node has no param", self.op))),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    op: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    param: Option<String>,
    #[serde(default)]
    attrs: Option<Value>,
}

/// A BN detached by the rewrite pass, with everything needed to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReservedBn {
    pub conv: String,
    pub mode: Mode,
    /// The BN node as it was before being replaced by an identity.
    pub bn_node: Node,
    /// Tensors removed from or overwritten in the store, by original name.
    pub tensors: TensorMap,
    /// Names the rewrite introduced into the store.
    pub added: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReservedRecord {
    conv: String,
    mode: Mode,
    bn_node: Value,
    tensors: Vec<String>,
    added: Vec<String>,
}

/// Graph plus parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
    order: Vec<usize>,
    pub params: TensorMap,
    reserved: Vec<ReservedBn>,
    params_file: Option<String>,
}

impl Graph {
    /// Builds and validates a graph from nodes in any order.
    pub fn new(nodes: Vec<Node>, params: TensorMap) -> Result<Graph> {
        let mut g = Graph {
            nodes,
            index: BTreeMap::new(),
            order: Vec::new(),
            params,
            reserved: Vec::new(),
            params_file: None,
        };
        g.refresh()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub(crate) fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.index.get(id).map(|&i| &mut self.nodes[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Node indices in a topological order (stable: ties broken by file order).
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn input_node(&self) -> &Node {
        self.nodes.iter().find(|n| n.op == OpKind::Input).expect("validated")
    }

    pub fn output_node(&self) -> &Node {
        self.nodes.iter().find(|n| n.op == OpKind::Output).expect("validated")
    }

    pub fn reserved_bns(&self) -> &[ReservedBn] {
        &self.reserved
    }

    pub(crate) fn reserved_mut(&mut self) -> &mut Vec<ReservedBn> {
        &mut self.reserved
    }

    pub fn params_file(&self) -> Option<&str> {
        self.params_file.as_deref()
    }

    pub fn set_params_file(&mut self, path: Option<String>) {
        self.params_file = path;
    }

    pub fn is_rewritten(&self) -> bool {
        !self.reserved.is_empty()
    }

    pub fn count_op(&self, op: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op == op).count()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Ingestion { missing: vec![name.to_string()] })
    }

    /// Follows identity/output nodes back to the node that produced the value.
    pub fn value_source<'a>(&'a self, id: &'a str) -> &'a str {
        let mut cur = id;
        loop {
            let n = self.node(cur).expect("validated id");
            if n.op.is_alias() {
                cur = &n.inputs[0];
            } else {
                return cur;
            }
        }
    }

    /// Rebuilds the index, user lists and topological order, validating
    /// structure. Called after every mutation.
    pub(crate) fn refresh(&mut self) -> Result<()> {
        self.index.clear();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.is_empty() {
                return Err(Error::schema("", "empty node id"));
            }
            if self.index.insert(n.id.clone(), i).is_some() {
                return Err(Error::schema(&n.id, "duplicate node id"));
            }
        }
        let mut inputs = 0;
        let mut outputs = 0;
        for n in &self.nodes {
            if n.inputs.len() != n.op.arity() {
                return Err(Error::schema(
                    &n.id,
                    format!("{} takes {} inputs, got {}", n.op, n.op.arity(), n.inputs.len()),
                ));
            }
            for inp in &n.inputs {
                if !self.index.contains_key(inp) {
                    return Err(Error::schema(&n.id, format!("input {inp:?} does not exist")));
                }
            }
            if n.op.takes_param() && n.param.is_none() {
                return Err(Error::schema(&n.id, format!("{} node needs a param", n.op)));
            }
            match n.op {
                OpKind::Input => inputs += 1,
                OpKind::Output => outputs += 1,
                _ => {}
            }
        }
        if inputs != 1 {
            return Err(Error::schema("", format!("expected exactly one input node, found {inputs}")));
        }
        if outputs != 1 {
            return Err(Error::schema("", format!("expected exactly one output node, found {outputs}")));
        }
        let n = self.nodes.len();
        let mut users: Vec<Vec<String>> = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                let j = self.index[inp];
                if !users[j].contains(&node.id) {
                    users[j].push(node.id.clone());
                }
                indegree[i] += 1;
            }
        }
        for (node, u) in self.nodes.iter_mut().zip(users) {
            node.users = u;
        }
        let out = self.nodes.iter().find(|n| n.op == OpKind::Output).expect("counted");
        if !out.users.is_empty() {
            return Err(Error::schema(&out.id, "output node has consumers"));
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            let mut next: Vec<usize> = Vec::new();
            for u in &self.nodes[i].users {
                let j = self.index[u];
                let edges = self.nodes[j].inputs.iter().filter(|s| **s == self.nodes[i].id).count();
                indegree[j] -= edges;
                if indegree[j] == 0 {
                    next.push(j);
                }
            }
            next.sort_unstable();
            queue.extend(next);
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).expect("cycle member");
            return Err(Error::schema(&self.nodes[stuck].id, "graph contains a cycle"));
        }
        self.order = order;
        Ok(())
    }

    /// Parses the JSON document. Parameters are left empty; see
    /// [`Graph::load`] and [`Graph::attach_params`].
    pub fn from_json_str(text: &str) -> Result<Graph> {
        let doc: Value = serde_json::from_str(text)?;
        Graph::from_json_value(&doc)
    }

    pub fn from_json_value(doc: &Value) -> Result<Graph> {
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::schema("", "graph document must be an object"))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "format" | "nodes" | "params_file" | "reserved_bns") {
                return Err(Error::schema("", format!("unknown top-level key {key:?}")));
            }
        }
        match obj.get("format").and_then(Value::as_str) {
            Some(FORMAT) => {}
            other => {
                return Err(Error::schema(
                    "",
                    format!("format must be {FORMAT:?}, got {other:?}"),
                ))
            }
        }
        let raw = obj
            .get("nodes")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::schema("", "missing nodes array"))?;
        let nodes = raw.iter().map(parse_node).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(nodes, TensorMap::new())?;
        g.params_file = match obj.get("params_file") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(Error::schema("", "params_file must be a string")),
        };
        if let Some(records) = obj.get("reserved_bns") {
            let records: Vec<ReservedRecord> = serde_json::from_value(records.clone())
                .map_err(|e| Error::schema("", format!("reserved_bns: {e}")))?;
            for r in records {
                let bn_node = parse_node(&r.bn_node)?;
                g.reserved.push(ReservedBn {
                    conv: r.conv,
                    mode: r.mode,
                    bn_node,
                    tensors: r.tensors.into_iter().map(|n| (n, placeholder())).collect(),
                    added: r.added,
                });
            }
        }
        Ok(g)
    }

    /// Reads a graph and, when it names one, its parameter file (resolved
    /// relative to the graph file).
    pub fn load(path: impl AsRef<Path>) -> Result<Graph> {
        let path = path.as_ref();
        let mut g = Graph::from_json_str(&std::fs::read_to_string(path)?)?;
        if let Some(pf) = g.params_file.clone() {
            let p = path.parent().unwrap_or(Path::new(".")).join(pf);
            g.attach_params(io::read(p)?)?;
        }
        Ok(g)
    }

    /// Installs a parameter store, splitting out `reserved/...` entries into
    /// the reserved BN records.
    pub fn attach_params(&mut self, mut store: TensorMap) -> Result<()> {
        let reserved_keys: Vec<String> = store
            .keys()
            .filter(|k| k.starts_with(RESERVED_PREFIX))
            .cloned()
            .collect();
        let mut stash: BTreeMap<String, Tensor> = BTreeMap::new();
        for k in reserved_keys {
            let t = store.remove(&k).expect("listed");
            stash.insert(k, t);
        }
        for r in &mut self.reserved {
            for (name, slot) in r.tensors.iter_mut() {
                let key = format!("{RESERVED_PREFIX}{}/{name}", r.bn_node.id);
                *slot = stash.remove(&key).ok_or_else(|| Error::Ingestion { missing: vec![key] })?;
            }
        }
        if let Some(extra) = stash.keys().next() {
            return Err(Error::Input(format!("reserved tensor {extra:?} has no matching record")));
        }
        self.params = store;
        Ok(())
    }

    /// Parameter store including reserved tensors, as written to disk.
    pub fn export_params(&self) -> TensorMap {
        let mut out = self.params.clone();
        for r in &self.reserved {
            for (name, t) in &r.tensors {
                out.insert(format!("{RESERVED_PREFIX}{}/{name}", r.bn_node.id), t.clone());
            }
        }
        out
    }

    /// Canonical JSON (object keys sorted).
    pub fn to_json_value(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("format".into(), Value::String(FORMAT.into()));
        obj.insert(
            "nodes".into(),
            Value::Array(self.nodes.iter().map(node_value).collect()),
        );
        if let Some(pf) = &self.params_file {
            obj.insert("params_file".into(), Value::String(pf.clone()));
        }
        if !self.reserved.is_empty() {
            let recs: Vec<Value> = self
                .reserved
                .iter()
                .map(|r| {
                    serde_json::to_value(ReservedRecord {
                        conv: r.conv.clone(),
                        mode: r.mode,
                        bn_node: node_value(&r.bn_node),
                        tensors: r.tensors.keys().cloned().collect(),
                        added: r.added.clone(),
                    })
                    .expect("plain data")
                })
                .collect();
            obj.insert("reserved_bns".into(), Value::Array(recs));
        }
        Value::Object(obj)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json_value()).expect("plain data");
        s.push('\n');
        s
    }

    /// Writes `<stem>.json` and, when parameters are present, the CBNT file
    /// named by `params_file` next to it.
    pub fn save(&self, json_path: impl AsRef<Path>, params_name: Option<&str>) -> Result<()> {
        let json_path = json_path.as_ref();
        let mut g = self.clone();
        if let Some(name) = params_name {
            g.params_file = Some(name.to_string());
            let p = json_path.parent().unwrap_or(Path::new(".")).join(name);
            io::write(p, &self.export_params())?;
        }
        std::fs::write(json_path, g.to_json_string())?;
        Ok(())
    }

    /// Checks that every parameter reference resolves against the store.
    pub fn check_params(&self) -> Result<()> {
        let mut missing = BTreeSet::new();
        for n in &self.nodes {
            for name in required_params(n)? {
                if !self.params.contains_key(&name) {
                    missing.insert(name);
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Ingestion { missing: missing.into_iter().collect() })
        }
    }

    /// Applies Train-mode running statistic updates keyed by tensor name.
    pub fn apply_running_updates(&mut self, updates: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in updates {
            let slot = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Ingestion { missing: vec![name.clone()] })?;
            if slot.shape() != t.shape() {
                return Err(Error::shape(format!("running update {name} has the wrong shape")));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Output shapes of every node for an input of `input`, by node index.
    pub fn infer_shapes(&self, input: &Shape, params: &dyn ShapeSource) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Option<Shape>> = vec![None; self.nodes.len()];
        for &i in &self.order {
            let n = &self.nodes[i];
            let s = infer_node(self, n, &shapes, input, params).map_err(|e| Error::at_node(&n.id, e))?;
            shapes[i] = Some(s);
        }
        Ok(shapes.into_iter().map(|s| s.expect("all visited")).collect())
    }
}

/// Where parameter shapes come from during shape inference.
pub trait ShapeSource {
    fn param_shape(&self, name: &str) -> Option<Shape>;
}

impl ShapeSource for TensorMap {
    fn param_shape(&self, name: &str) -> Option<Shape> {
        self.get(name).map(|t| t.shape().clone())
    }
}

impl ShapeSource for BTreeMap<String, Shape> {
    fn param_shape(&self, name: &str) -> Option<Shape> {
        self.get(name).cloned()
    }
}

fn infer_node(g: &Graph, n: &Node, shapes: &[Option<Shape>], input: &Shape, params: &dyn ShapeSource) -> Result<Shape> {
    let arg = |k: usize| -> &Shape { shapes[g.index[&n.inputs[k]]].as_ref().expect("topological") };
    let need = |name: String| -> Result<Shape> {
        params.param_shape(&name).ok_or(Error::Ingestion { missing: vec![name] })
    };
    match n.op {
        OpKind::Input => Ok(input.clone()),
        OpKind::Output | OpKind::Identity | OpKind::Relu => Ok(arg(0).clone()),
        OpKind::Add => {
            if arg(0) != arg(1) {
                return Err(Error::ShapeMismatch { op: "add", left: arg(0).clone(), right: arg(1).clone() });
            }
            Ok(arg(0).clone())
        }
        OpKind::Conv2d => {
            let x = arg(0).dims().to_vec();
            let w = need(n.param_name("weight")?)?;
            let wd = w.dims();
            if x.len() != 4 || wd.len() != 4 || x[1] != wd[1] {
                return Err(Error::ShapeMismatch { op: "conv2d", left: arg(0).clone(), right: w.clone() });
            }
            let (ho, wo) = n.attrs.geometry().output_hw(x[2], x[3], wd[2], wd[3])?;
            Ok(Shape::from([x[0], wd[0], ho, wo]))
        }
        OpKind::Bn2d => {
            let x = arg(0);
            let gamma = match &n.param {
                Some(p) => params.param_shape(&format!("{p}.gamma")),
                None => None,
            };
            if x.rank() != 4 || gamma.as_ref().is_some_and(|s| s.dims() != [x.dims()[1]]) {
                return Err(Error::shape(format!("bn2d input {x} does not match its parameters")));
            }
            Ok(x.clone())
        }
        OpKind::GlobalAvgPool => {
            let x = arg(0).dims();
            if x.len() != 4 {
                return Err(Error::shape("global_avg_pool expects rank 4"));
            }
            Ok(Shape::from([x[0], x[1]]))
        }
        OpKind::Linear => {
            let x = arg(0).dims();
            let w = need(n.param_name("weight")?)?;
            if x.len() != 2 || w.rank() != 2 || w.dims()[1] != x[1] {
                return Err(Error::ShapeMismatch { op: "linear", left: arg(0).clone(), right: w.clone() });
            }
            Ok(Shape::from([x[0], w.dims()[0]]))
        }
        OpKind::Conv1d | OpKind::Conv3d | OpKind::Bn1d | OpKind::Bn3d => Err(Error::UnsupportedRewrite(
            format!("{} nodes are recognised but not executable", n.op),
        )),
    }
}

fn required_params(n: &Node) -> Result<Vec<String>> {
    let names = match n.op {
        OpKind::Conv2d | OpKind::Linear => {
            let mut v = vec![n.param_name("weight")?];
            if let Some(f) = &n.attrs.fused {
                match f.mode {
                    Mode::Tune => {
                        v.push(n.param_name("weight_coeff")?);
                        v.push(n.param_name("bias_delta")?);
                        v.push(format!("{}.gamma", f.bn_param));
                        v.push(format!("{}.beta", f.bn_param));
                    }
                    _ => v.push(n.param_name("bias")?),
                }
            }
            v
        }
        OpKind::Bn2d => ["gamma", "beta", "running_mean", "running_var"]
            .iter()
            .map(|s| n.param_name(s))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    Ok(names)
}

fn placeholder() -> Tensor {
    Tensor::scalar(crate::tensor::DType::F64, 0.0)
}

fn parse_node(v: &Value) -> Result<Node> {
    let id = v.get("id").and_then(Value::as_str).unwrap_or("").to_string();
    let raw: RawNode = serde_json::from_value(v.clone()).map_err(|e| Error::schema(&id, e.to_string()))?;
    let op: OpKind = raw
        .op
        .parse()
        .map_err(|_| Error::schema(&raw.id, format!("unknown op {:?}", raw.op)))?;
    let attrs: Attrs = match raw.attrs {
        None => Attrs::default(),
        Some(a) => serde_json::from_value(a).map_err(|e| Error::schema(&raw.id, format!("attrs: {e}")))?,
    };
    Ok(Node {
        id: raw.id,
        op,
        inputs: raw.inputs,
        param: raw.param,
        attrs,
        users: Vec::new(),
    })
}

fn node_value(n: &Node) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), Value::String(n.id.clone()));
    obj.insert("op".into(), Value::String(n.op.name().into()));
    obj.insert(
        "inputs".into(),
        Value::Array(n.inputs.iter().cloned().map(Value::String).collect()),
    );
    if let Some(p) = &n.param {
        obj.insert("param".into(), Value::String(p.clone()));
    }
    if !n.attrs.is_empty() {
        obj.insert("attrs".into(), serde_json::to_value(&n.attrs).expect("plain data"));
    }
    Value::Object(obj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(nodes: &str) -> String {
        format!(r#"{{"format":"cbn-graph/1","nodes":[{nodes}]}}"#)
    }

    #[test]
    fn identity_graph_loads() {
        let g = Graph::from_json_str(&doc(
            r#"{"id":"x","op":"input","inputs":[]},{"id":"y","op":"output","inputs":["x"]}"#,
        ))
        .unwrap();
        assert_eq!(g.node("x").unwrap().users, ["y"]);
        assert_eq!(g.value_source("y"), "x");
    }

    #[test]
    fn dangling_input_names_the_missing_id() {
        let err = Graph::from_json_str(&doc(
            r#"{"id":"x","op":"input","inputs":[]},{"id":"y","op":"output","inputs":["x9"]}"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("x9"), "{err}");
        assert!(matches!(err, Error::Schema { ref node, .. } if node == "y"));
    }

    #[test]
    fn cycle_and_unknown_op_rejected() {
        let cyc = doc(
            r#"{"id":"x","op":"input","inputs":[]},
               {"id":"a","op":"add","inputs":["x","b"]},
               {"id":"b","op":"relu","inputs":["a"]},
               {"id":"y","op":"output","inputs":["b"]}"#,
        );
        let err = Graph::from_json_str(&cyc).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
        let unk = doc(
            r#"{"id":"x","op":"input","inputs":[]},{"id":"p","op":"maxpool","inputs":["x"]},
               {"id":"y","op":"output","inputs":["p"]}"#,
        );
        match Graph::from_json_str(&unk).unwrap_err() {
            Error::Schema { node, message } => {
                assert_eq!(node, "p");
                assert!(message.contains("maxpool"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn arity_and_io_count() {
        let bad = doc(r#"{"id":"x","op":"input","inputs":[]},{"id":"y","op":"output","inputs":["x","x"]}"#);
        assert!(Graph::from_json_str(&bad).is_err());
        let no_out = doc(r#"{"id":"x","op":"input","inputs":[]}"#);
        assert!(Graph::from_json_str(&no_out).is_err());
    }

    #[test]
    fn dump_is_canonical() {
        let text = doc(
            r#"{"inputs":[],"op":"input","id":"x"},
               {"id":"c","op":"conv2d","inputs":["x"],"param":"c","attrs":{"padding":[1,1],"stride":[1,1]}},
               {"id":"y","op":"output","inputs":["c"]}"#,
        );
        let g = Graph::from_json_str(&text).unwrap();
        let dumped = g.to_json_string();
        let again = Graph::from_json_str(&dumped).unwrap();
        assert_eq!(again.to_json_string(), dumped);
        assert_eq!(again, g);
    }
}
