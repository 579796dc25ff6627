//! Graphs used by the tests, the harness and the shipped fixture files.
//!
//! Parameter names equal the owning node's id. All parameters are drawn from
//! a seeded [`Rng`], so a `(builder, seed, dtype)` triple always yields the
//! same bytes.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{Attrs, Graph, Node, OpKind};
use crate::io::TensorMap;
use crate::rng::Rng;
use crate::tensor::{DType, Shape, Tensor};

/// Seed of the shipped fixture files.
pub const FIXTURE_SEED: u64 = 7;

/// Incremental graph builder. Shapes are always recorded; tensors only when
/// `materialize` is set.
pub struct Builder {
    nodes: Vec<Node>,
    shapes: BTreeMap<String, Shape>,
    params: TensorMap,
    rng: Rng,
    dtype: DType,
    materialize: bool,
}

impl Builder {
    pub fn new(seed: u64, dtype: DType) -> Builder {
        Builder {
            nodes: Vec::new(),
            shapes: BTreeMap::new(),
            params: TensorMap::new(),
            rng: Rng::new(seed),
            dtype,
            materialize: true,
        }
    }

    /// Records parameter shapes without allocating tensors.
    pub fn shapes_only() -> Builder {
        Builder {
            materialize: false,
            ..Builder::new(0, DType::F32)
        }
    }

    fn param(&mut self, name: String, shape: Shape, init: impl FnOnce(&mut Rng, DType, Shape) -> Tensor) {
        if self.materialize {
            let t = init(&mut self.rng, self.dtype, shape.clone());
            self.params.insert(name.clone(), t);
        }
        self.shapes.insert(name, shape);
    }

    pub fn input(&mut self, id: &str) -> &mut Self {
        self.nodes.push(Node::new(id, OpKind::Input, &[]));
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, id: &str, input: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> &mut Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.param(format!("{id}.weight"), Shape::from([c_out, c_in, k, k]), |r, d, s| r.normal_tensor(d, s, std));
        if bias {
            self.param(format!("{id}.bias"), Shape::from([c_out]), |r, d, s| r.normal_tensor(d, s, 0.1));
        }
        let attrs = Attrs {
            stride: Some([stride, stride]),
            padding: Some([pad, pad]),
            ..Attrs::default()
        };
        self.nodes.push(Node::new(id, OpKind::Conv2d, &[input]).with_param(id).with_attrs(attrs));
        self
    }

    pub fn bn(&mut self, id: &str, input: &str, c: usize) -> &mut Self {
        let s = Shape::from([c]);
        self.param(format!("{id}.gamma"), s.clone(), |r, d, s| r.uniform_tensor(d, s, 0.5, 1.5));
        self.param(format!("{id}.beta"), s.clone(), |r, d, s| r.normal_tensor(d, s, 0.1));
        self.param(format!("{id}.running_mean"), s.clone(), |r, d, s| r.normal_tensor(d, s, 0.1));
        self.param(format!("{id}.running_var"), s, |r, d, s| r.uniform_tensor(d, s, 0.5, 1.5));
        self.nodes.push(Node::new(id, OpKind::Bn2d, &[input]).with_param(id));
        self
    }

    /// Conv without bias followed by BN and ReLU: nodes `{p}c`, `{p}b`, `{p}r`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_relu(&mut self, p: &str, input: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> String {
        let (c, b, r) = (format!("{p}c"), format!("{p}b"), format!("{p}r"));
        self.conv(&c, input, c_in, c_out, k, stride, pad, false);
        self.bn(&b, &c, c_out);
        self.relu(&r, &b);
        r
    }

    pub fn relu(&mut self, id: &str, input: &str) -> &mut Self {
        self.nodes.push(Node::new(id, OpKind::Relu, &[input]));
        self
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> &mut Self {
        self.nodes.push(Node::new(id, OpKind::Add, &[a, b]));
        self
    }

    pub fn pool(&mut self, id: &str, input: &str) -> &mut Self {
        self.nodes.push(Node::new(id, OpKind::GlobalAvgPool, &[input]));
        self
    }

    pub fn linear(&mut self, id: &str, input: &str, c_in: usize, c_out: usize) -> &mut Self {
        let std = (1.0 / c_in as f64).sqrt();
        self.param(format!("{id}.weight"), Shape::from([c_out, c_in]), |r, d, s| r.normal_tensor(d, s, std));
        self.param(format!("{id}.bias"), Shape::from([c_out]), |_, d, s| Tensor::zeros(d, s));
        self.nodes.push(Node::new(id, OpKind::Linear, &[input]).with_param(id));
        self
    }

    pub fn node(&mut self, node: Node) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn output(&mut self, id: &str, input: &str) -> &mut Self {
        self.nodes.push(Node::new(id, OpKind::Output, &[input]));
        self
    }

    pub fn build(self) -> Result<Graph> {
        Graph::new(self.nodes, self.params)
    }

    pub fn build_with_shapes(self) -> Result<(Graph, BTreeMap<String, Shape>)> {
        let shapes = self.shapes;
        Ok((Graph::new(self.nodes, self.params)?, shapes))
    }
}

/// Input shape used with [`seven_pattern`].
pub const SEVEN_PATTERN_INPUT: [usize; 4] = [2, 3, 8, 8];

/// Seven conv nodes: five eligible Conv->BN pairs (`c1 c2 c4 c6 c7`), one conv
/// whose output also feeds a residual add (`c3`), and one bare conv (`c5`).
pub fn seven_pattern(seed: u64, dtype: DType) -> Result<Graph> {
    let mut b = Builder::new(seed, dtype);
    b.input("x");
    b.conv("c1", "x", 3, 4, 3, 1, 1, false).bn("b1", "c1", 4).relu("r1", "b1");
    b.conv("c2", "r1", 4, 4, 3, 1, 1, true).bn("b2", "c2", 4).relu("r2", "b2");
    b.conv("c3", "r2", 4, 4, 3, 1, 1, false).bn("b3", "c3", 4).relu("r3", "b3");
    b.add("a1", "r3", "c3");
    b.conv("c4", "a1", 4, 8, 3, 2, 1, false).bn("b4", "c4", 8).relu("r4", "b4");
    b.conv("c5", "r4", 8, 8, 3, 1, 1, true).relu("r5", "c5");
    b.conv("c6", "r5", 8, 8, 3, 1, 1, false).bn("b6", "c6", 8).relu("r6", "b6");
    b.conv("c7", "r6", 8, 8, 1, 1, 0, true).bn("b7", "c7", 8);
    b.add("a2", "b7", "r4").relu("r7", "a2");
    b.pool("gp", "r7").linear("fc", "gp", 8, 3).output("y", "fc");
    b.build()
}

/// `conv-bn-relu` twice, global pool, linear head with `classes` outputs.
/// Takes `[N, 3, H, W]` inputs.
pub fn toy_chain(seed: u64, dtype: DType, classes: usize) -> Result<Graph> {
    let mut b = Builder::new(seed, dtype);
    b.input("x");
    b.conv("c1", "x", 3, 8, 3, 1, 1, false).bn("b1", "c1", 8).relu("r1", "b1");
    b.conv("c2", "r1", 8, 16, 3, 2, 1, false).bn("b2", "c2", 16).relu("r2", "b2");
    b.pool("gp", "r2").linear("fc", "gp", 16, classes).output("y", "fc");
    b.build()
}

/// Channel widths of [`bench_stack`].
pub const BENCH_WIDTHS: [usize; 4] = [8, 16, 32, 64];

/// Four conv-bn-relu stages (stride 1, then three stride-2 stages), pool and
/// a 10-way head. Takes `[N, 3, H, W]` inputs.
pub fn bench_stack(seed: u64, dtype: DType) -> Result<Graph> {
    let mut b = Builder::new(seed, dtype);
    b.input("x");
    let mut prev = "x".to_string();
    let mut c_in = 3;
    for (i, &w) in BENCH_WIDTHS.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        prev = b.conv_bn_relu(&format!("s{i}"), &prev, c_in, w, 3, stride, 1);
        c_in = w;
    }
    b.pool("gp", &prev).linear("fc", "gp", c_in, 10).output("y", "fc");
    b.build()
}

/// One conv followed by one BN; `[c_out, c_in, k, k]` weight, stride 1,
/// padding `k / 2`, optional conv bias.
pub fn single_block(seed: u64, dtype: DType, c_in: usize, c_out: usize, k: usize, bias: bool) -> Result<Graph> {
    let mut b = Builder::new(seed, dtype);
    b.input("x");
    b.conv("c", "x", c_in, c_out, k, 1, k / 2, bias).bn("b", "c", c_out);
    b.output("y", "b");
    b.build()
}

/// A graph with no BN at all.
pub fn no_bn(seed: u64, dtype: DType) -> Result<Graph> {
    let mut b = Builder::new(seed, dtype);
    b.input("x");
    b.conv("c1", "x", 3, 4, 3, 1, 1, true).relu("r1", "c1");
    b.pool("gp", "r1").linear("fc", "gp", 4, 2).output("y", "fc");
    b.build()
}

pub fn identity() -> Result<Graph> {
    let mut b = Builder::new(0, DType::F64);
    b.input("x").output("y", "x");
    b.build()
}

/// 1d and 3d Conv->BN chains: matched, reported as unsupported, never run.
pub fn mixed_dims() -> Result<Graph> {
    let mut b = Builder::shapes_only();
    b.input("x");
    b.node(Node::new("k1", OpKind::Conv1d, &["x"]).with_param("k1"));
    b.node(Node::new("n1", OpKind::Bn1d, &["k1"]).with_param("n1"));
    b.node(Node::new("k3", OpKind::Conv3d, &["n1"]).with_param("k3"));
    b.node(Node::new("n3", OpKind::Bn3d, &["k3"]).with_param("n3"));
    b.node(Node::new("k2", OpKind::Conv2d, &["n3"]).with_param("k2"));
    b.node(Node::new("n2", OpKind::Bn1d, &["k2"]).with_param("n2"));
    b.output("y", "n2");
    b.build()
}

/// Input shape used with [`resnet50`] for the memory comparison.
pub const RESNET50_INPUT: [usize; 4] = [32, 3, 224, 224];

/// ResNet-50 topology with parameter shapes only.
///
/// Bottleneck blocks with the stride on the 3x3 conv and a projection
/// shortcut on the first block of each stage. There is no max-pool node, so
/// the first block of stage 1 carries stride 2 instead; every later stage
/// sees the usual 56/28/14/7 spatial extents.
pub fn resnet50() -> Result<(Graph, BTreeMap<String, Shape>)> {
    let mut b = Builder::shapes_only();
    b.input("x");
    let mut prev = b.conv_bn_relu("stem", "x", 3, 64, 7, 2, 3);
    let mut c_in = 64;
    let stages = [(64, 3), (128, 4), (256, 6), (512, 3)];
    for (s, &(width, blocks)) in stages.iter().enumerate() {
        for blk in 0..blocks {
            let stride = if blk == 0 { 2 } else { 1 };
            let p = format!("l{}b{}", s + 1, blk);
            let out = width * 4;
            let r1 = b.conv_bn_relu(&format!("{p}.1"), &prev, c_in, width, 1, 1, 0);
            let r2 = b.conv_bn_relu(&format!("{p}.2"), &r1, width, width, 3, stride, 1);
            let (c3, b3) = (format!("{p}.3c"), format!("{p}.3b"));
            b.conv(&c3, &r2, width, out, 1, 1, 0, false).bn(&b3, &c3, out);
            let shortcut = if blk == 0 {
                let (dc, db) = (format!("{p}.dc"), format!("{p}.db"));
                b.conv(&dc, &prev, c_in, out, 1, stride, 0, false).bn(&db, &dc, out);
                db
            } else {
                prev.clone()
            };
            let (a, r) = (format!("{p}.add"), format!("{p}.out"));
            b.add(&a, &b3, &shortcut).relu(&r, &a);
            prev = r;
            c_in = out;
        }
    }
    b.pool("gp", &prev).linear("fc", "gp", c_in, 1000).output("y", "fc");
    b.build_with_shapes()
}
