//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once, node by node, in topological order. Each
//! [`Graph::forward`] call evaluates every node for one set of bindings and
//! returns a [`Trace`]; [`Graph::backward`] and [`Graph::vjp`] replay the
//! trace in reverse. The graph itself is never mutated by evaluation, so one
//! graph can serve several concurrent forward/backward calls as long as its
//! parameters are not being updated.
//!
//! Named *taps* expose intermediate nodes. A tap value can be read from a
//! trace, differentiated against, and additively offset before evaluation.

mod gradcheck;
mod kernels;
pub mod random;

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use gradcheck::{gradcheck, gradcheck_with, GradcheckReport, RELATIVE_FLOOR};

pub type NodeId = usize;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Evaluation mode; only affects batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics are used and reported for the running-average update.
    Train,
    /// Running statistics are used.
    Eval,
}

#[derive(Clone, Debug)]
pub enum Op<T> {
    Input,
    Param(usize),
    Constant(Tensor<T>),
    /// Elementwise sum. The right operand may match the trailing dims of the
    /// left one, in which case it is broadcast over the leading dims.
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[N, K] x [K, M]`.
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: usize,
    },
    AvgPool {
        x: NodeId,
        kernel: usize,
    },
    Flatten(NodeId),
    /// Mean over the batch of `-log softmax(logits)[label]`.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: NodeId,
    },
    /// Euclidean norm (or its square) over every element.
    L2Norm {
        x: NodeId,
        squared: bool,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::AvgPool { .. } => "avgpool",
            Op::Flatten(_) => "flatten",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::L2Norm { .. } => "l2_norm",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Flatten(a) => vec![a],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::AvgPool { x, .. } | Op::L2Norm { x, .. } => vec![x],
            Op::SoftmaxCrossEntropy { logits, labels } => vec![logits, labels],
        }
    }
}

/// Static per-sample shape of a node. Batched nodes carry an extra leading
/// batch dimension at evaluation time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeShape {
    pub batched: bool,
    pub dims: Vec<usize>,
}

impl NodeShape {
    fn full(&self, batch: usize) -> Vec<usize> {
        if self.batched {
            let mut s = vec![batch];
            s.extend_from_slice(&self.dims);
            s
        } else {
            self.dims.clone()
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    name: String,
    op: Op<T>,
    shape: NodeShape,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Running mean/variance of one batch-normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<Parameter<T>>,
    stats: Vec<RunningStats<T>>,
    taps: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
    strict: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            stats: Vec::new(),
            taps: BTreeMap::new(),
            inputs: BTreeMap::new(),
            loss: None,
            strict: false,
        }
    }

    // ----- construction -----

    fn push(&mut self, op: Op<T>, shape: NodeShape) -> NodeId {
        let id = self.nodes.len();
        let name = format!("{}#{}", op.kind(), id);
        self.nodes.push(Node { name, op, shape });
        id
    }

    fn shape_err(&self, kind: &str, detail: String) -> Error {
        Error::NodeShape {
            node: format!("{}#{}", kind, self.nodes.len()),
            detail,
        }
    }

    fn check(&self, id: NodeId) -> Result<&NodeShape> {
        self.nodes
            .get(id)
            .map(|n| &n.shape)
            .ok_or_else(|| Error::UnknownName(format!("node #{id}")))
    }

    /// Declares a batched input with the given per-sample shape. The input is
    /// also registered as a tap of the same name.
    pub fn input(&mut self, name: &str, sample_shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) || self.taps.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate name `{name}`")));
        }
        let id = self.push(
            Op::Input,
            NodeShape {
                batched: true,
                dims: sample_shape.to_vec(),
            },
        );
        self.nodes[id].name = name.to_string();
        self.inputs.insert(name.to_string(), id);
        self.taps.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares a batched input of class indices (one scalar per sample).
    pub fn labels(&mut self, name: &str) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate name `{name}`")));
        }
        let id = self.push(
            Op::Input,
            NodeShape {
                batched: true,
                dims: vec![],
            },
        );
        self.nodes[id].name = name.to_string();
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let idx = self.params.len();
        let shape = NodeShape {
            batched: false,
            dims: value.shape().to_vec(),
        };
        self.params.push(Parameter {
            name: name.to_string(),
            value,
        });
        let id = self.push(Op::Param(idx), shape);
        self.nodes[id].name = name.to_string();
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = NodeShape {
            batched: false,
            dims: value.shape().to_vec(),
        };
        self.push(Op::Constant(value), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.clone(), self.check(b)?.clone());
        let ok = if sb.batched {
            sa.batched && sa.dims == sb.dims
        } else if sa.batched {
            sa.dims == sb.dims || sa.dims.ends_with(&sb.dims)
        } else {
            sa.dims.ends_with(&sb.dims)
        };
        if !ok {
            return Err(self.shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    /// Sum of a block output and its shortcut; both must have equal shapes.
    pub fn residual_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.clone(), self.check(b)?.clone());
        if sa != sb {
            return Err(self.shape_err("add", format!("residual {sa:?} + {sb:?}")));
        }
        self.add(a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let s = self.check(a)?.clone();
        Ok(self.push(Op::Scale(a, factor), s))
    }

    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (sa, sw) = (self.check(a)?.clone(), self.check(w)?.clone());
        let ok = sa.batched && sa.dims.len() == 1 && !sw.batched && sw.dims.len() == 2;
        if !ok || sa.dims[0] != sw.dims[0] {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sw:?}")));
        }
        Ok(self.push(
            Op::MatMul(a, w),
            NodeShape {
                batched: true,
                dims: vec![sw.dims[1]],
            },
        ))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (sx, sw) = (self.check(x)?.clone(), self.check(w)?.clone());
        if !sx.batched || sx.dims.len() != 3 || sw.batched || sw.dims.len() != 4 || stride == 0 {
            return Err(self.shape_err("conv2d", format!("{sx:?} * {sw:?}")));
        }
        let (c, h, wd) = (sx.dims[0], sx.dims[1], sx.dims[2]);
        let (o, ci, kh, kw) = (sw.dims[0], sw.dims[1], sw.dims[2], sw.dims[3]);
        if ci != c || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(self.shape_err("conv2d", format!("{sx:?} * {sw:?}")));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        Ok(self.push(
            Op::Conv2d { x, w, stride, padding },
            NodeShape {
                batched: true,
                dims: vec![o, oh, ow],
            },
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.clone();
        Ok(self.push(Op::Relu(a), s))
    }

    /// Per-channel batch normalization with learnable scale and shift
    /// parameters named `{prefix}.gamma` / `{prefix}.beta`.
    pub fn batchnorm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let sx = self.check(x)?.clone();
        if !sx.batched || sx.dims.is_empty() {
            return Err(self.shape_err("batchnorm", format!("{sx:?}")));
        }
        let c = sx.dims[0];
        let gamma = self.param(&format!("{prefix}.gamma"), Tensor::full(&[c], T::one()))?;
        let beta = self.param(&format!("{prefix}.beta"), Tensor::zeros(&[c]))?;
        let stats = self.stats.len();
        self.stats.push(RunningStats {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Ok(self.push(Op::BatchNorm { x, gamma, beta, stats }, sx))
    }

    /// Non-overlapping `kernel x kernel` average pooling.
    pub fn avg_pool(&mut self, x: NodeId, kernel: usize) -> Result<NodeId> {
        let sx = self.check(x)?.clone();
        if !sx.batched || sx.dims.len() != 3 || kernel == 0 || sx.dims[1] % kernel != 0 || sx.dims[2] % kernel != 0 {
            return Err(self.shape_err("avgpool", format!("{sx:?} / {kernel}")));
        }
        Ok(self.push(
            Op::AvgPool { x, kernel },
            NodeShape {
                batched: true,
                dims: vec![sx.dims[0], sx.dims[1] / kernel, sx.dims[2] / kernel],
            },
        ))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.check(x)?.clone();
        if !sx.batched {
            return Err(self.shape_err("flatten", format!("{sx:?}")));
        }
        Ok(self.push(
            Op::Flatten(x),
            NodeShape {
                batched: true,
                dims: vec![sx.numel()],
            },
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        let (sl, sy) = (self.check(logits)?.clone(), self.check(labels)?.clone());
        if !sl.batched || sl.dims.len() != 1 || !sy.batched || !sy.dims.is_empty() {
            return Err(self.shape_err("softmax_cross_entropy", format!("{sl:?}, {sy:?}")));
        }
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, labels },
            NodeShape {
                batched: false,
                dims: vec![],
            },
        ))
    }

    pub fn l2_norm(&mut self, x: NodeId, squared: bool) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(
            Op::L2Norm { x, squared },
            NodeShape {
                batched: false,
                dims: vec![],
            },
        ))
    }

    /// Exposes `node` under `name` for reading, differentiation and offsets.
    pub fn tap(&mut self, name: &str, node: NodeId) -> Result<()> {
        self.check(node)?;
        if self.taps.contains_key(name) || self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate tap `{name}`")));
        }
        self.taps.insert(name.to_string(), node);
        Ok(())
    }

    pub fn set_loss(&mut self, node: NodeId) -> Result<()> {
        let s = self.check(node)?;
        if s.batched || s.numel() != 1 {
            return Err(Error::InvalidArgument("loss node must be scalar".into()));
        }
        self.loss = Some(node);
        Ok(())
    }

    /// In strict mode, any non-finite intermediate aborts evaluation.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    // ----- inspection -----

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn tap_node(&self, name: &str) -> Result<NodeId> {
        self.taps
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.taps.keys().map(String::as_str)
    }

    pub fn node_shape(&self, id: NodeId) -> &NodeShape {
        &self.nodes[id].shape
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn param_value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    fn param_node(&self, name: &str) -> Option<NodeId> {
        let idx = self.params.iter().position(|p| p.name == name)?;
        self.nodes.iter().position(|n| matches!(n.op, Op::Param(i) if i == idx))
    }

    /// Copies the graph into another element width.
    pub fn cast<U: Element>(&self) -> Graph<U> {
        Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    name: n.name.clone(),
                    shape: n.shape.clone(),
                    op: match &n.op {
                        Op::Input => Op::Input,
                        Op::Param(i) => Op::Param(*i),
                        Op::Constant(t) => Op::Constant(t.cast()),
                        Op::Add(a, b) => Op::Add(*a, *b),
                        Op::Scale(a, f) => Op::Scale(*a, *f),
                        Op::MatMul(a, b) => Op::MatMul(*a, *b),
                        Op::Conv2d { x, w, stride, padding } => Op::Conv2d {
                            x: *x,
                            w: *w,
                            stride: *stride,
                            padding: *padding,
                        },
                        Op::Relu(a) => Op::Relu(*a),
                        Op::BatchNorm { x, gamma, beta, stats } => Op::BatchNorm {
                            x: *x,
                            gamma: *gamma,
                            beta: *beta,
                            stats: *stats,
                        },
                        Op::AvgPool { x, kernel } => Op::AvgPool { x: *x, kernel: *kernel },
                        Op::Flatten(a) => Op::Flatten(*a),
                        Op::SoftmaxCrossEntropy { logits, labels } => Op::SoftmaxCrossEntropy {
                            logits: *logits,
                            labels: *labels,
                        },
                        Op::L2Norm { x, squared } => Op::L2Norm {
                            x: *x,
                            squared: *squared,
                        },
                    },
                })
                .collect(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: s.var.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
            taps: self.taps.clone(),
            inputs: self.inputs.clone(),
            loss: self.loss,
            strict: self.strict,
        }
    }

    // ----- evaluation -----

    pub fn forward(&self, bindings: &Bindings<'_, T>, mode: Mode) -> Result<Trace<T>> {
        let mut batch: Option<usize> = None;
        for (name, t) in &bindings.values {
            let id = *self
                .inputs
                .get(*name)
                .ok_or_else(|| Error::UnknownName(name.to_string()))?;
            let expected = self.nodes[id].shape.full(t.batch());
            if t.shape() != expected.as_slice() || t.shape().is_empty() {
                return Err(Error::NodeShape {
                    node: name.to_string(),
                    detail: format!("bound {:?}, declared {:?}", t.shape(), expected),
                });
            }
            match batch {
                Some(b) if b != t.batch() => {
                    return Err(Error::NodeShape {
                        node: name.to_string(),
                        detail: format!("batch {} vs {}", t.batch(), b),
                    })
                }
                _ => batch = Some(t.batch()),
            }
        }
        let batch = batch.unwrap_or(1);
        let mut offsets: HashMap<NodeId, Vec<&Tensor<T>>> = HashMap::new();
        for (name, t) in &bindings.offsets {
            let id = self.tap_node(name)?;
            let expected = self.nodes[id].shape.full(batch);
            if t.shape() != expected.as_slice() {
                return Err(Error::NodeShape {
                    node: name.to_string(),
                    detail: format!("offset {:?}, node {:?}", t.shape(), expected),
                });
            }
            offsets.entry(id).or_default().push(*t);
        }

        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut bn = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let mut out = match &node.op {
                Op::Input => {
                    let t = bindings
                        .values
                        .iter()
                        .find(|(n, _)| *n == node.name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| Error::UnknownName(format!("unbound input `{}`", node.name)))?;
                    t.clone()
                }
                Op::Param(i) => self.params[*i].value.clone(),
                Op::Constant(t) => t.clone(),
                Op::Add(a, b) => kernels::add(&values[*a], &values[*b]),
                Op::Scale(a, f) => values[*a].scale(T::from_f64_lossy(*f)),
                Op::MatMul(a, w) => kernels::matmul(&values[*a], &values[*w]),
                Op::Conv2d { x, w, stride, padding } => kernels::conv2d(&values[*x], &values[*w], *stride, *padding),
                Op::Relu(a) => values[*a].map(|v| if v > T::zero() { v } else { T::zero() }),
                Op::BatchNorm { x, gamma, beta, stats } => {
                    let (out, cache) = kernels::batchnorm_forward(
                        &values[*x],
                        &values[*gamma],
                        &values[*beta],
                        &self.stats[*stats],
                        mode,
                    );
                    bn.insert(id, cache);
                    out
                }
                Op::AvgPool { x, kernel } => kernels::avg_pool(&values[*x], *kernel),
                Op::Flatten(a) => {
                    let t = &values[*a];
                    let n = t.batch();
                    t.clone().reshape(&[n, t.sample_len()])?
                }
                Op::SoftmaxCrossEntropy { logits, labels } => kernels::softmax_ce(&values[*logits], &values[*labels])
                    .map_err(|d| Error::NodeShape {
                    node: node.name.clone(),
                    detail: d,
                })?,
                Op::L2Norm { x, squared } => {
                    let s = values[*x].data().iter().fold(T::zero(), |a, &v| a + v * v);
                    Tensor::scalar(if *squared { s } else { s.sqrt() })
                }
            };
            for off in offsets.get(&id).into_iter().flatten() {
                out.add_assign(off)?;
            }
            if self.strict && !out.all_finite() {
                return Err(Error::NonFinite(self.label(id)));
            }
            values.push(out);
        }
        Ok(Trace {
            values,
            bn,
            batch,
            mode,
        })
    }

    fn label(&self, id: NodeId) -> String {
        self.taps
            .iter()
            .find(|(_, &n)| n == id)
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| self.nodes[id].name.clone())
    }

    fn resolve_wrt(&self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.taps.get(name) {
            return Ok(id);
        }
        self.param_node(name)
            .ok_or_else(|| Error::NotDifferentiable(name.to_string()))
    }

    /// Gradients of the scalar `loss` (a tap name, or `None` for the graph's
    /// designated loss) with respect to the named taps and parameters.
    pub fn backward(&self, trace: &Trace<T>, loss: Option<&str>, wrt: &[&str]) -> Result<GradientBundle<T>> {
        let loss_id = match loss {
            Some(name) => self.tap_node(name)?,
            None => self
                .loss
                .ok_or_else(|| Error::InvalidArgument("graph has no loss node".into()))?,
        };
        let v = &trace.values[loss_id];
        if v.len() != 1 || self.nodes[loss_id].shape.batched {
            return Err(Error::InvalidArgument(format!(
                "loss `{}` is not scalar",
                self.label(loss_id)
            )));
        }
        let seed = Tensor::full(v.shape(), T::one());
        self.vjp_ids(trace, &[(loss_id, seed)], wrt)
    }

    /// Vector-Jacobian product: propagates the given output cotangents (keyed
    /// by tap name) back to the requested taps and parameters.
    pub fn vjp(&self, trace: &Trace<T>, seeds: &[(&str, &Tensor<T>)], wrt: &[&str]) -> Result<GradientBundle<T>> {
        let mut ids = Vec::with_capacity(seeds.len());
        for (name, t) in seeds {
            let id = self.tap_node(name)?;
            trace.values[id].same_shape(t)?;
            ids.push((id, (*t).clone()));
        }
        self.vjp_ids(trace, &ids, wrt)
    }

    fn vjp_ids(&self, trace: &Trace<T>, seeds: &[(NodeId, Tensor<T>)], wrt: &[&str]) -> Result<GradientBundle<T>> {
        if trace.values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument("trace does not belong to this graph".into()));
        }
        let targets: Vec<(String, NodeId)> = wrt
            .iter()
            .map(|n| self.resolve_wrt(n).map(|id| (n.to_string(), id)))
            .collect::<Result<_>>()?;
        let target_set: HashSet<NodeId> = targets.iter().map(|(_, id)| *id).collect();

        // A node needs a gradient if some requested target feeds into it.
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = target_set.contains(&id) || node.op.inputs().iter().any(|&i| needs[i]);
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            accumulate(&mut grads[*id], seed.clone());
        }
        let last = seeds.iter().map(|(id, _)| *id).max().unwrap_or(0);
        for id in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            if !needs[id] {
                continue;
            }
            let g = match &grads[id] {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.node_backward(id, g, trace, &needs);
            if !target_set.contains(&id) {
                grads[id] = None;
            }
            for (input, contrib) in contributions {
                accumulate(&mut grads[input], contrib);
            }
        }

        let mut bundle = BTreeMap::new();
        for (name, id) in targets {
            let g = grads[id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(trace.values[id].shape()));
            bundle.insert(name, g);
        }
        Ok(GradientBundle { grads: bundle })
    }

    fn node_backward(&self, id: NodeId, g: &Tensor<T>, trace: &Trace<T>, needs: &[bool]) -> Vec<(NodeId, Tensor<T>)> {
        let v = &trace.values;
        let mut out = Vec::new();
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                if needs[*a] {
                    out.push((*a, g.clone()));
                }
                if needs[*b] {
                    out.push((*b, kernels::reduce_to(g, v[*b].shape())));
                }
            }
            Op::Scale(a, f) => {
                if needs[*a] {
                    out.push((*a, g.scale(T::from_f64_lossy(*f))));
                }
            }
            Op::MatMul(a, w) => {
                let (ga, gw) = kernels::matmul_backward(&v[*a], &v[*w], g, needs[*a], needs[*w]);
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (gx, gw) = kernels::conv2d_backward(&v[*x], &v[*w], g, *stride, *padding, needs[*x], needs[*w]);
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
            }
            Op::Relu(a) => {
                if needs[*a] {
                    let gi = v[*a]
                        .zip_map(g, |x, gy| if x > T::zero() { gy } else { T::zero() })
                        .expect("relu shapes");
                    out.push((*a, gi));
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                let cache = &trace.bn[&id];
                let (gx, gg, gb) = kernels::batchnorm_backward(&v[*x], &v[*gamma], g, cache);
                if needs[*x] {
                    out.push((*x, gx));
                }
                if needs[*gamma] {
                    out.push((*gamma, gg));
                }
                if needs[*beta] {
                    out.push((*beta, gb));
                }
            }
            Op::AvgPool { x, kernel } => {
                if needs[*x] {
                    out.push((*x, kernels::avg_pool_backward(v[*x].shape(), g, *kernel)));
                }
            }
            Op::Flatten(a) => {
                if needs[*a] {
                    out.push((*a, g.clone().reshape(v[*a].shape()).expect("flatten shapes")));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if needs[*logits] {
                    out.push((*logits, kernels::softmax_ce_backward(&v[*logits], &v[*labels], g)));
                }
            }
            Op::L2Norm { x, squared } => {
                if needs[*x] {
                    let gy = g.data()[0];
                    let factor = if *squared {
                        T::from_f64_lossy(2.0) * gy
                    } else {
                        let n = v[id].data()[0];
                        if n > T::zero() {
                            gy / n
                        } else {
                            T::zero()
                        }
                    };
                    out.push((*x, v[*x].scale(factor)));
                }
            }
        }
        out
    }

    /// Folds the batch statistics of a training-mode trace into the running
    /// averages.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        if trace.mode != Mode::Train {
            return;
        }
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let one = T::one();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::BatchNorm { stats, .. } = node.op {
                let cache = &trace.bn[&id];
                let rs = &mut self.stats[stats];
                for c in 0..rs.mean.len() {
                    rs.mean[c] = m * rs.mean[c] + (one - m) * cache.mean[c];
                    rs.var[c] = m * rs.var[c] + (one - m) * cache.unbiased_var[c];
                }
            }
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes"),
        None => *slot = Some(g),
    }
}

/// Input values and tap offsets for one evaluation.
#[derive(Default)]
pub struct Bindings<'a, T = f32> {
    values: Vec<(&'a str, &'a Tensor<T>)>,
    offsets: Vec<(&'a str, &'a Tensor<T>)>,
}

impl<'a, T> Bindings<'a, T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            offsets: Vec::new(),
        }
    }

    pub fn input(mut self, name: &'a str, value: &'a Tensor<T>) -> Self {
        self.values.push((name, value));
        self
    }

    /// Adds `value` to the tap's output before downstream nodes consume it.
    /// Copy of these bindings with one more offset appended.
    pub fn clone_with_offset<'b>(&self, tap: &'b str, value: &'b Tensor<T>) -> Bindings<'b, T>
    where
        'a: 'b,
    {
        let mut offsets = self.offsets.clone();
        offsets.push((tap, value));
        Bindings {
            values: self.values.clone(),
            offsets,
        }
    }

    /// Several offsets on the same tap are summed.
    pub fn offset(mut self, tap: &'a str, value: &'a Tensor<T>) -> Self {
        self.offsets.push((tap, value));
        self
    }
}

/// Values of every node from one forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    values: Vec<Tensor<T>>,
    bn: HashMap<NodeId, kernels::BnCache<T>>,
    batch: usize,
    mode: Mode,
}

impl<T: Element> Trace<T> {
    pub fn node_value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value(&self, graph: &Graph<T>, tap: &str) -> Result<&Tensor<T>> {
        Ok(&self.values[graph.tap_node(tap)?])
    }

    /// Scalar value of the graph's designated loss node.
    pub fn loss(&self, graph: &Graph<T>) -> Result<T> {
        let id = graph
            .loss
            .ok_or_else(|| Error::InvalidArgument("graph has no loss node".into()))?;
        Ok(self.values[id].data()[0])
    }

    /// All tapped values plus the loss under the key `"loss"`.
    pub fn outputs(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = graph
            .taps
            .iter()
            .map(|(k, &id)| (k.clone(), self.values[id].clone()))
            .collect();
        if let Some(id) = graph.loss {
            out.insert("loss".into(), self.values[id].clone());
        }
        out
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Smallest |pre-activation| over every ReLU input; used to keep finite
    /// difference probes away from kinks.
    pub fn min_abs_relu_input(&self, graph: &Graph<T>) -> Option<f64> {
        graph
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.values[a].data().iter().map(|v| v.abs().as_f64()))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |m| m.min(v))))
    }
}

/// Gradients keyed by tap or parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> GradientBundle<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.grads.get(name).ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        self.grads
            .remove(name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
