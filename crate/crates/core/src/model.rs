//! Small pre-activation residual classifiers written as a chain of stages,
//! with named injection points after the input and after every stage.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bindings, GradientBundle, Graph, Mode, Trace};
use crate::tensor::{log_sum_exp, softmax_row, Tensor};

pub const INPUT_TAP: &str = "input";
pub const LABELS: &str = "labels";
pub const LOGITS_TAP: &str = "logits";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    BatchNorm,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    /// Channel count of each stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub norm: Norm,
}

impl ModelSpec {
    /// The default desk-scale network: three stages of one block each.
    pub fn desk(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            input_shape,
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            num_classes,
            norm: Norm::BatchNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.widths.contains(&0) || self.input_shape.contains(&0) {
            return Err(Error::Config("channel counts and input dims must be positive".into()));
        }
        if self.blocks_per_stage == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "blocks_per_stage must be >= 1 and num_classes >= 2".into(),
            ));
        }
        let down = 1usize << (self.widths.len() - 1);
        let [_, h, w] = self.input_shape;
        if h % down != 0 || w % down != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the total stride {down}"
            )));
        }
        Ok(())
    }
}

/// A perturbation-injection point: 1-based layer index, tap name and the
/// per-sample dimension of the tapped feature map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub layer: usize,
    pub tap: String,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub graph: Graph<f32>,
    pub spec: Option<ModelSpec>,
    injection_points: Vec<InjectionPoint>,
    num_classes: usize,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<f32> {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("shape")
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f32>::new();
    let [c_in, h_in, _] = spec.input_shape;
    let x = g.input(INPUT_TAP, &spec.input_shape)?;
    let labels = g.labels(LABELS)?;
    let bn = spec.norm == Norm::BatchNorm;

    let conv = |g: &mut Graph<f32>, name: &str, x, cin: usize, cout: usize, k: usize, stride, rng: &mut ChaCha8Rng| {
        let w = g.param(name, kaiming(rng, &[cout, cin, k, k], cin * k * k, 2.0))?;
        g.conv2d(x, w, stride, k / 2)
    };
    let preact = |g: &mut Graph<f32>, x, prefix: &str| -> Result<usize> {
        let x = if bn { g.batchnorm(x, prefix)? } else { x };
        g.relu(x)
    };

    let mut h = conv(&mut g, "stem.w", x, c_in, spec.widths[0], 3, 1, &mut rng)?;
    let mut ch = spec.widths[0];
    let mut side = h_in;
    let mut points = vec![INPUT_TAP.to_string()];
    for (s, &width) in spec.widths.iter().enumerate() {
        for b in 0..spec.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", s + 1, b + 1);
            let a = preact(&mut g, h, &format!("{p}.bn1"))?;
            let shortcut = if stride != 1 || ch != width {
                conv(&mut g, &format!("{p}.short.w"), a, ch, width, 1, stride, &mut rng)?
            } else {
                h
            };
            let c1 = conv(&mut g, &format!("{p}.conv1.w"), a, ch, width, 3, stride, &mut rng)?;
            let c1 = preact(&mut g, c1, &format!("{p}.bn2"))?;
            let c2 = conv(&mut g, &format!("{p}.conv2.w"), c1, width, width, 3, 1, &mut rng)?;
            h = g.residual_add(c2, shortcut)?;
            ch = width;
            side /= stride;
        }
        let tap = format!("stage{}", s + 1);
        g.tap(&tap, h)?;
        points.push(tap);
    }
    let a = preact(&mut g, h, "head.bn")?;
    let pooled = g.avg_pool(a, side)?;
    let flat = g.flatten(pooled)?;
    let w = g.param("fc.w", kaiming(&mut rng, &[ch, spec.num_classes], ch, 1.0))?;
    let b = g.param("fc.b", Tensor::zeros(&[spec.num_classes]))?;
    let logits = g.matmul(flat, w)?;
    let logits = g.add(logits, b)?;
    g.tap(LOGITS_TAP, logits)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    g.set_loss(loss)?;

    let mut model = ModelGraph::from_graph(g, &points.iter().map(String::as_str).collect::<Vec<_>>())?;
    model.spec = Some(spec.clone());
    Ok(model)
}

/// Labels as the float tensor the graph consumes.
pub fn label_tensor(labels: &[usize]) -> Tensor<f32> {
    Tensor::new(vec![labels.len()], labels.iter().map(|&y| y as f32).collect()).expect("rank-1 labels")
}

impl ModelGraph {
    /// Wraps an arbitrary classifier graph. The graph must declare the
    /// `input` and `labels` inputs, a `logits` tap and a loss node;
    /// `injection_taps` lists the injection points in depth order, starting
    /// with `input`.
    pub fn from_graph(graph: Graph<f32>, injection_taps: &[&str]) -> Result<Self> {
        if injection_taps.first() != Some(&INPUT_TAP) {
            return Err(Error::Config("first injection point must be the input".into()));
        }
        let logits = graph.tap_node(LOGITS_TAP)?;
        graph
            .loss_node()
            .ok_or_else(|| Error::Config("classifier graph has no loss node".into()))?;
        let num_classes = graph.node_shape(logits).numel();
        let mut points = Vec::with_capacity(injection_taps.len());
        for (i, tap) in injection_taps.iter().enumerate() {
            let node = graph.tap_node(tap)?;
            points.push(InjectionPoint {
                layer: i + 1,
                tap: tap.to_string(),
                dim: graph.node_shape(node).numel(),
            });
        }
        Ok(Self {
            graph,
            spec: None,
            injection_points: points,
            num_classes,
        })
    }

    pub fn injection_points(&self) -> &[InjectionPoint] {
        &self.injection_points
    }

    pub fn injection_point(&self, layer: usize) -> Result<&InjectionPoint> {
        self.injection_points
            .iter()
            .find(|p| p.layer == layer)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer index {layer}")))
    }

    pub fn input_dim(&self) -> usize {
        self.injection_points[0].dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_batch(&self, x: &Tensor<f32>) -> Result<()> {
        let node = self.graph.tap_node(INPUT_TAP)?;
        let dims = &self.graph.node_shape(node).dims;
        if x.shape().len() != dims.len() + 1 || &x.shape()[1..] != dims.as_slice() {
            return Err(Error::NodeShape {
                node: INPUT_TAP.into(),
                detail: format!("batch {:?} vs per-sample {:?}", x.shape(), dims),
            });
        }
        Ok(())
    }

    /// Forward pass with labels and tap offsets.
    pub fn run(
        &self,
        x: &Tensor<f32>,
        labels: &[usize],
        offsets: &[(&str, &Tensor<f32>)],
        mode: Mode,
    ) -> Result<Trace<f32>> {
        self.check_batch(x)?;
        if labels.len() != x.batch() {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                x.batch()
            )));
        }
        let y = label_tensor(labels);
        let mut b = Bindings::new().input(INPUT_TAP, x).input(LABELS, &y);
        for (tap, t) in offsets {
            b = b.offset(tap, t);
        }
        self.graph.forward(&b, mode)
    }

    pub fn logits(&self, x: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let dummy = vec![0usize; x.batch()];
        let tr = self.run(x, &dummy, &[], mode)?;
        Ok(tr.value(&self.graph, LOGITS_TAP)?.clone())
    }

    /// Eval-mode logits and their row-wise softmax.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let logits = self.logits(batch, Mode::Eval)?;
        let probs = softmax_rows(&logits);
        Ok((logits, probs))
    }

    /// Feature maps at the requested injection layers, eval mode.
    pub fn feature_maps(&self, x: &Tensor<f32>, layers: &[usize]) -> Result<BTreeMap<usize, Tensor<f32>>> {
        let taps: Vec<(usize, &str)> = layers
            .iter()
            .map(|&l| self.injection_point(l).map(|p| (l, p.tap.as_str())))
            .collect::<Result<_>>()?;
        let dummy = vec![0usize; x.batch()];
        let tr = self.run(x, &dummy, &[], Mode::Eval)?;
        taps.into_iter()
            .map(|(l, tap)| Ok((l, tr.value(&self.graph, tap)?.clone())))
            .collect()
    }

    /// Mean loss and gradients of the mean loss w.r.t. the named taps /
    /// parameters.
    pub fn loss_and_grads(
        &self,
        x: &Tensor<f32>,
        labels: &[usize],
        offsets: &[(&str, &Tensor<f32>)],
        wrt: &[&str],
        mode: Mode,
    ) -> Result<(f32, GradientBundle<f32>, Trace<f32>)> {
        let tr = self.run(x, labels, offsets, mode)?;
        let loss = tr.loss(&self.graph)?;
        let grads = self.graph.backward(&tr, None, wrt)?;
        Ok((loss, grads, tr))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.graph.params().iter().map(|p| p.name.clone()).collect()
    }
}

pub fn softmax_rows(logits: &Tensor<f32>) -> Tensor<f32> {
    let n = logits.batch();
    let mut data = Vec::with_capacity(logits.len());
    for i in 0..n {
        data.extend(softmax_row(logits.sample(i)));
    }
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Per-sample cross-entropy of each logit row.
pub fn cross_entropy_rows(logits: &Tensor<f32>, labels: &[usize]) -> Vec<f32> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.sample(i);
            log_sum_exp(row) - row[labels[i]]
        })
        .collect()
}
