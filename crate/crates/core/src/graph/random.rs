//! Randomly generated small graphs that exercise every primitive; used for
//! gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Bindings, Graph, Mode};
use crate::error::Result;
use crate::tensor::Tensor;

/// A random graph plus one batch of bindings for it.
pub struct RandomCase {
    pub graph: Graph<f64>,
    pub x: Tensor<f64>,
    pub labels: Tensor<f64>,
    /// Names that are safe to differentiate against (taps and parameters).
    pub checkable: Vec<String>,
}

impl RandomCase {
    pub fn bindings(&self) -> Bindings<'_, f64> {
        Bindings::new().input("input", &self.x).input("labels", &self.labels)
    }

    /// Smallest |ReLU pre-activation| on this case's batch.
    pub fn kink_margin(&self, mode: Mode) -> Result<f64> {
        let t = self.graph.forward(&self.bindings(), mode)?;
        Ok(t.min_abs_relu_input(&self.graph).unwrap_or(f64::INFINITY))
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Builds a conv -> batchnorm -> relu -> residual block -> avgpool ->
/// linear -> cross-entropy graph with an l2 penalty, with sizes and
/// hyperparameters drawn from `seed`.
pub fn random_case(seed: u64) -> Result<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_in = rng.gen_range(1..=3);
    let hw = rng.gen_range(5..=8);
    let width = rng.gen_range(2..=5);
    let classes = rng.gen_range(2..=4);
    let batch = rng.gen_range(3..=5);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);

    let mut g = Graph::<f64>::new();
    let x = g.input("input", &[c_in, hw, hw])?;
    let y = g.labels("labels")?;
    let w1 = g.param("conv1.w", randn(&mut rng, &[width, c_in, 3, 3], 0.5))?;
    let h = g.conv2d(x, w1, stride, pad)?;
    g.tap("conv1", h)?;
    let h = g.batchnorm(h, "bn1")?;
    let h = g.relu(h)?;
    let w2 = g.param("conv2.w", randn(&mut rng, &[width, width, 3, 3], 0.4))?;
    let r = g.conv2d(h, w2, 1, 1)?;
    let r = g.relu(r)?;
    let h = g.residual_add(r, h)?;
    g.tap("block", h)?;
    let side = g.node_shape(h).dims[1];
    let kernel = (1..=side)
        .rev()
        .find(|k| side.is_multiple_of(*k) && *k <= 3)
        .unwrap_or(1);
    let h = g.avg_pool(h, kernel)?;
    let h = g.flatten(h)?;
    let feat = g.node_shape(h).dims[0];
    let wf = g.param("fc.w", randn(&mut rng, &[feat, classes], 0.5))?;
    let bf = g.param("fc.b", randn(&mut rng, &[classes], 0.1))?;
    let logits = g.matmul(h, wf)?;
    let logits = g.add(logits, bf)?;
    let logits = g.scale(logits, rng.gen_range(0.5..2.0))?;
    g.tap("logits", logits)?;
    let ce = g.softmax_cross_entropy(logits, y)?;
    let pen_sq = g.l2_norm(wf, true)?;
    let pen_sq = g.scale(pen_sq, 1e-2)?;
    let pen = g.l2_norm(w2, false)?;
    let pen = g.scale(pen, 1e-2)?;
    let loss = g.add(ce, pen_sq)?;
    let loss = g.add(loss, pen)?;
    g.set_loss(loss)?;

    let x = randn(&mut rng, &[batch, c_in, hw, hw], 1.0);
    let labels = Tensor::new(
        vec![batch],
        (0..batch).map(|_| rng.gen_range(0..classes) as f64).collect(),
    )?;
    let mut checkable: Vec<String> = vec!["input".into(), "conv1".into(), "block".into(), "logits".into()];
    checkable.extend(g.params().iter().map(|p| p.name.clone()));
    Ok(RandomCase {
        graph: g,
        x,
        labels,
        checkable,
    })
}
