//! Feature-space (LPIPS-style) distance and the Lagrangian perceptual
//! attack used to measure robustness under it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::normalized_direction;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Mode};
use crate::metrics::{predictions, EVAL_CHUNK};
use crate::model::{label_tensor, ModelGraph, INPUT_TAP, LABELS};
use crate::tensor::Tensor;

/// Distance `sqrt(sum_l alpha_l * ‖phi_l(x) - phi_l(x')‖²)` over a frozen
/// extractor's injection layers.
#[derive(Clone, Debug)]
pub struct LpipsConfig {
    pub extractor: ModelGraph,
    pub layers: Vec<usize>,
    pub weights: Vec<f64>,
    /// Subtract each channel's spatial mean from every feature map first.
    pub center: bool,
}

impl LpipsConfig {
    pub fn new(extractor: ModelGraph, layers: Vec<usize>, weights: Vec<f64>, center: bool) -> Result<Self> {
        if layers.is_empty() || layers.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "need one weight per layer, got {} layers and {} weights",
                layers.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument("weights must be >= 0 and not all zero".into()));
        }
        for &l in &layers {
            extractor.injection_point(l)?;
        }
        Ok(Self {
            extractor,
            layers,
            weights,
            center,
        })
    }

    /// All stage outputs (every injection point after the input), centered,
    /// with `alpha_l = 1 / (d_l * |L|)`.
    pub fn reference(extractor: ModelGraph) -> Result<Self> {
        let pts: Vec<(usize, usize)> = extractor
            .injection_points()
            .iter()
            .filter(|p| p.layer > 1)
            .map(|p| (p.layer, p.dim))
            .collect();
        if pts.is_empty() {
            return Err(Error::Config("extractor has no feature layers beyond the input".into()));
        }
        let n = pts.len() as f64;
        let layers = pts.iter().map(|p| p.0).collect();
        let weights = pts.iter().map(|p| 1.0 / (p.1 as f64 * n)).collect();
        Self::new(extractor, layers, weights, true)
    }

    /// The raw input as the only layer, unit weight, no centering: plain ℓ2.
    pub fn identity(extractor: ModelGraph) -> Result<Self> {
        Self::new(extractor, vec![1], vec![1.0], false)
    }

    fn taps(&self) -> Result<Vec<String>> {
        self.layers
            .iter()
            .map(|&l| Ok(self.extractor.injection_point(l)?.tap.clone()))
            .collect()
    }

    fn features(&self, x: &Tensor<f32>) -> Result<(BTreeMap<String, Tensor<f32>>, crate::graph::Trace<f32>)> {
        let y = label_tensor(&vec![0; x.batch()]);
        let b = Bindings::new().input(INPUT_TAP, x).input(LABELS, &y);
        let tr = self.extractor.graph.forward(&b, Mode::Eval)?;
        let mut out = BTreeMap::new();
        for tap in self.taps()? {
            let mut f = tr.value(&self.extractor.graph, &tap)?.clone();
            if self.center {
                center_channels(&mut f);
            }
            out.insert(tap, f);
        }
        Ok((out, tr))
    }
}

/// Subtracts, per sample and channel, the mean over spatial positions.
fn center_channels(f: &mut Tensor<f32>) {
    let shape = f.shape().to_vec();
    if shape.len() < 3 {
        return;
    }
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let data = f.data_mut();
    for i in 0..b {
        for ch in 0..c {
            let s = &mut data[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            s.iter_mut().for_each(|v| *v -= m as f32);
        }
    }
}

fn check_pair(x: &Tensor<f32>, xp: &Tensor<f32>) -> Result<()> {
    x.same_shape(xp).map_err(|_| {
        Error::Shape(format!(
            "lpips inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            xp.shape()
        ))
    })
}

/// Per-sample distances between two batches.
pub fn lpips(cfg: &LpipsConfig, x: &Tensor<f32>, xp: &Tensor<f32>) -> Result<Vec<f64>> {
    check_pair(x, xp)?;
    let (fa, _) = cfg.features(x)?;
    let (fb, _) = cfg.features(xp)?;
    Ok(distances(cfg, &fa, &fb, x.batch())?.0)
}

/// Per-sample distances plus the per-layer centered differences.
fn distances(
    cfg: &LpipsConfig,
    fa: &BTreeMap<String, Tensor<f32>>,
    fb: &BTreeMap<String, Tensor<f32>>,
    batch: usize,
) -> Result<(Vec<f64>, BTreeMap<String, Tensor<f32>>)> {
    let mut sq = vec![0.0f64; batch];
    let mut diffs = BTreeMap::new();
    for (tap, &w) in cfg.taps()?.into_iter().zip(&cfg.weights) {
        let d = fb[&tap].sub(&fa[&tap])?;
        for (i, s) in sq.iter_mut().enumerate() {
            *s += w * d.sample(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        diffs.insert(tap, d);
    }
    Ok((sq.into_iter().map(f64::sqrt).collect(), diffs))
}

/// Distances from fixed reference features to `xp` and their gradient with
/// respect to `xp` (zero where the distance is zero).
fn lpips_and_grad(
    cfg: &LpipsConfig,
    ref_feats: &BTreeMap<String, Tensor<f32>>,
    xp: &Tensor<f32>,
) -> Result<(Vec<f64>, Tensor<f32>)> {
    let (fb, trace) = cfg.features(xp)?;
    let (dist, diffs) = distances(cfg, ref_feats, &fb, xp.batch())?;
    let mut seeds = Vec::new();
    for (tap, &w) in cfg.taps()?.into_iter().zip(&cfg.weights) {
        let mut s = diffs[&tap].clone();
        for (i, &d) in dist.iter().enumerate() {
            let f = if d > 0.0 { (w / d) as f32 } else { 0.0 };
            s.sample_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        seeds.push((tap, s));
    }
    let seed_refs: Vec<(&str, &Tensor<f32>)> = seeds.iter().map(|(t, s)| (t.as_str(), s)).collect();
    let mut g = cfg.extractor.graph.vjp(&trace, &seed_refs, &[INPUT_TAP])?;
    Ok((dist, g.take(INPUT_TAP)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpaConfig {
    /// LPIPS radius.
    pub eps: f64,
    /// Penalty multipliers, ascending.
    pub lambdas: Vec<f64>,
    pub steps: usize,
    /// ℓ2 length of each normalized ascent step in input space.
    pub step_size: f32,
}

impl LpaConfig {
    pub fn new(eps: f64, step_size: f32) -> Self {
        Self {
            eps,
            lambdas: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            steps: 20,
            step_size,
        }
    }

    /// 20 steps whose combined ℓ2 length is 0.075 per pixel (root mean
    /// square) for inputs of dimension `d`.
    pub fn for_dim(eps: f64, d: usize) -> Self {
        let mut cfg = Self::new(eps, 0.0);
        cfg.step_size = 0.075 * (d as f32).sqrt() / cfg.steps as f32;
        cfg
    }

    fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "lambda list must be non-empty and ascending".into(),
            ));
        }
        if !(self.eps >= 0.0) || !(self.step_size >= 0.0) {
            return Err(Error::InvalidArgument("eps and step size must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-sample cross-entropy and its gradient for an eval-mode classifier.
fn model_loss_grad(model: &ModelGraph, x: &Tensor<f32>, y: &[usize]) -> Result<(Vec<f32>, Tensor<f32>)> {
    let (_, mut g, tr) = model.loss_and_grads(x, y, &[], &[INPUT_TAP], Mode::Eval)?;
    let logits = tr.value(&model.graph, crate::model::LOGITS_TAP)?;
    let losses = crate::model::cross_entropy_rows(logits, y);
    // The graph loss is the batch mean; undo the 1/b.
    let g = g.take(INPUT_TAP)?.scale(x.batch() as f32);
    Ok((losses, g))
}

/// Maximizes `loss(x + delta) - lambda * max(lpips(x, x + delta) - eps, 0)`
/// for each lambda with `steps` normalized ascent steps from zero (box
/// clipped). Candidates outside the ball are pulled back along their ray by
/// bisection; each sample keeps its highest-loss candidate.
pub fn lpa_attack(
    model: &ModelGraph,
    cfg: &LpipsConfig,
    x: &Tensor<f32>,
    y: &[usize],
    lpa: &LpaConfig,
) -> Result<Tensor<f32>> {
    lpa.validate()?;
    let b = x.batch();
    if lpa.steps == 0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let (ref_feats, _) = cfg.features(x)?;
    // (loss, lpips, delta) per lambda
    let mut cands: Vec<(Vec<f32>, Vec<f64>, Tensor<f32>)> = Vec::new();
    for &lambda in &lpa.lambdas {
        let mut delta = Tensor::<f32>::zeros(x.shape());
        for _ in 0..lpa.steps {
            let xa = x.add(&delta)?;
            let (_, mut g) = model_loss_grad(model, &xa, y)?;
            if lpa.eps.is_finite() {
                let (dist, gd) = lpips_and_grad(cfg, &ref_feats, &xa)?;
                for i in 0..b {
                    if dist[i] > lpa.eps {
                        let gi = g.sample_mut(i);
                        for (a, &p) in gi.iter_mut().zip(gd.sample(i)) {
                            *a -= lambda as f32 * p;
                        }
                    }
                }
            }
            delta.add_assign(&normalized_direction(&g, lpa.step_size))?;
            crate::attacks::box_project(&mut delta, x);
        }
        let xa = x.add(&delta)?;
        let (losses, _) = model_loss_grad(model, &xa, y)?;
        let dist = lpips(cfg, x, &xa)?;
        cands.push((losses, dist, delta));
    }

    // Pull every infeasible candidate back along its ray onto the ball.
    let mut outside: Vec<(usize, usize)> = Vec::new();
    for (c, cand) in cands.iter().enumerate() {
        outside.extend((0..b).filter(|&i| cand.1[i] > lpa.eps).map(|i| (c, i)));
    }
    if !outside.is_empty() {
        let idx: Vec<usize> = outside.iter().map(|o| o.1).collect();
        let xs = x.select(&idx);
        let mut dir = Tensor::<f32>::zeros(xs.shape());
        for (j, &(c, i)) in outside.iter().enumerate() {
            dir.sample_mut(j).copy_from_slice(cands[c].2.sample(i));
        }
        let scales = radial_bisection(cfg, &xs, &dir, lpa.eps, 10)?;
        for (j, s) in scales.iter().enumerate() {
            dir.sample_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let (losses, _) = model_loss_grad(model, &xs.add(&dir)?, &labels)?;
        for (j, &(c, i)) in outside.iter().enumerate() {
            cands[c].0[i] = losses[j];
            cands[c].1[i] = lpa.eps;
            cands[c].2.sample_mut(i).copy_from_slice(dir.sample(j));
        }
    }

    let mut out = Tensor::<f32>::zeros(x.shape());
    for i in 0..b {
        let best = (0..cands.len())
            .max_by(|&a, &c| cands[a].0[i].total_cmp(&cands[c].0[i]))
            .expect("non-empty lambda list");
        out.sample_mut(i).copy_from_slice(cands[best].2.sample(i));
    }
    Ok(out)
}

/// Largest `s` in `[0, 1]` (to `iters` halvings) with
/// `lpips(x, x + s * delta) <= eps`, per sample.
pub fn radial_bisection(
    cfg: &LpipsConfig,
    x: &Tensor<f32>,
    delta: &Tensor<f32>,
    eps: f64,
    iters: usize,
) -> Result<Vec<f32>> {
    let b = x.batch();
    let mut lo = vec![0.0f32; b];
    let mut hi = vec![1.0f32; b];
    for _ in 0..iters {
        let mid: Vec<f32> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let mut xs = x.clone();
        for i in 0..b {
            for (p, &d) in xs.sample_mut(i).iter_mut().zip(delta.sample(i)) {
                *p += mid[i] * d;
            }
        }
        let dist = lpips(cfg, x, &xs)?;
        for i in 0..b {
            if dist[i] <= eps {
                lo[i] = mid[i];
            } else {
                hi[i] = mid[i];
            }
        }
    }
    Ok(lo)
}

/// Accuracy under `lpa_attack` at each radius of `eps_grid`.
pub fn lpips_robust_accuracy(
    model: &ModelGraph,
    cfg: &LpipsConfig,
    data: &Dataset,
    eps_grid: &[f64],
    lpa: &LpaConfig,
) -> Result<Vec<(f64, f64)>> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut curve = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let attack = LpaConfig { eps, ..lpa.clone() };
        let mut correct = 0usize;
        for (x, y) in data.chunks(EVAL_CHUNK) {
            let d = lpa_attack(model, cfg, &x, &y, &attack)?;
            let pred = predictions(model, &x.add(&d)?)?;
            correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        curve.push((eps, correct as f64 / data.len() as f64));
    }
    Ok(curve)
}

pub fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("eps,accuracy\n");
    for (e, a) in curve {
        s.push_str(&format!("{e},{a:.6}\n"));
    }
    s
}
