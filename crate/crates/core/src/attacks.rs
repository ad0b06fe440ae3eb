//! ℓ2 / ℓ∞ perturbations (FGM, FGSM, PGD), the feasible-set projection and
//! Gaussian noise augmentation.
//!
//! Every perturbation is per sample: a batch `[B, ...]` is treated as `B`
//! independent points, each with its own ball of radius `eps`.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::model::{ModelGraph, INPUT_TAP};
use crate::tensor::{l2, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub p: Norm,
    pub eps: f32,
}

impl ThreatModel {
    pub fn new(p: Norm, eps: f32) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eps must be finite and >= 0, got {eps}"
            )));
        }
        Ok(Self { p, eps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Zero,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub threat: ThreatModel,
    pub steps: usize,
    pub step_size: f32,
    pub init: Init,
}

impl AttackConfig {
    /// `steps` iterations with the default step size `2 * eps / steps`.
    pub fn with_default_step(threat: ThreatModel, steps: usize, init: Init) -> Self {
        Self {
            threat,
            steps,
            step_size: 2.0 * threat.eps / steps.max(1) as f32,
            init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ThreatModel::new(self.threat.p, self.threat.eps)?;
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack steps must be >= 1".into()));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::InvalidArgument("attack step size must be >= 0".into()));
        }
        Ok(())
    }
}

/// Anything with a differentiable loss in its input: the mean loss over the
/// batch and its gradient with respect to `x`.
pub trait Objective {
    fn loss_and_grad(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Tensor<f32>)>;

    /// Per-sample losses (no gradient).
    fn losses(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f32>>;
}

/// A classifier's cross-entropy, evaluated in a fixed BatchNorm mode.
pub struct ModelObjective<'a> {
    pub model: &'a ModelGraph,
    pub mode: Mode,
}

impl<'a> ModelObjective<'a> {
    pub fn eval(model: &'a ModelGraph) -> Self {
        Self {
            model,
            mode: Mode::Eval,
        }
    }
}

impl Objective for ModelObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Tensor<f32>)> {
        let (loss, mut g, _) = self.model.loss_and_grads(x, labels, &[], &[INPUT_TAP], self.mode)?;
        Ok((loss, g.take(INPUT_TAP)?))
    }

    fn losses(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f32>> {
        let logits = self.model.logits(x, self.mode)?;
        Ok(crate::model::cross_entropy_rows(&logits, labels))
    }
}

/// Wraps a closure returning per-sample losses and the gradient of their
/// mean.
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&Tensor<f32>, &[usize]) -> Result<(Vec<f32>, Tensor<f32>)>,
{
    fn loss_and_grad(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<(f32, Tensor<f32>)> {
        let (l, g) = (self.0)(x, labels)?;
        Ok((l.iter().sum::<f32>() / l.len().max(1) as f32, g))
    }

    fn losses(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f32>> {
        Ok((self.0)(x, labels)?.0)
    }
}

/// Replaces `delta` by `clamp(x + delta, 0, 1) - x`.
pub fn box_project(delta: &mut Tensor<f32>, x: &Tensor<f32>) {
    for (d, &xi) in delta.data_mut().iter_mut().zip(x.data()) {
        *d = (xi + *d).clamp(0.0, 1.0) - xi;
    }
}

/// Ball projection (per sample) followed by the box projection.
pub fn project(delta: &Tensor<f32>, x: &Tensor<f32>, threat: &ThreatModel) -> Result<Tensor<f32>> {
    delta.same_shape(x)?;
    let mut out = delta.clone();
    let eps = threat.eps;
    match threat.p {
        Norm::Linf => {
            for d in out.data_mut() {
                *d = d.clamp(-eps, eps);
            }
        }
        Norm::L2 => {
            for i in 0..out.batch().max(1) {
                let s = if out.shape().len() > 1 {
                    out.sample_mut(i)
                } else {
                    out.data_mut()
                };
                let n = l2(s);
                if n > eps {
                    let f = eps / n;
                    s.iter_mut().for_each(|v| *v *= f);
                }
            }
        }
    }
    box_project(&mut out, x);
    Ok(out)
}

/// `scale * g_i / ‖g_i‖₂` per sample; zero where `g_i = 0`.
pub fn normalized_direction(g: &Tensor<f32>, scale: f32) -> Tensor<f32> {
    let mut out = g.clone();
    if out.shape().is_empty() {
        return out;
    }
    for i in 0..out.batch() {
        let s = out.sample_mut(i);
        let n = l2(s);
        if n > 0.0 {
            s.iter_mut().for_each(|v| *v = scale * (*v / n));
        } else {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// FGM step before the box projection: `eps * g / ‖g‖₂`.
pub fn fgm_direction<O: Objective + ?Sized>(obj: &O, x: &Tensor<f32>, y: &[usize], eps: f32) -> Result<Tensor<f32>> {
    let (_, g) = obj.loss_and_grad(x, y)?;
    Ok(normalized_direction(&g, eps))
}

/// `clamp(x + delta, 0, 1)`.
pub fn apply(x: &Tensor<f32>, delta: &Tensor<f32>) -> Result<Tensor<f32>> {
    x.zip_map(delta, |a, d| (a + d).clamp(0.0, 1.0))
}

pub fn fgm<O: Objective + ?Sized>(obj: &O, x: &Tensor<f32>, y: &[usize], eps: f32) -> Result<Tensor<f32>> {
    let mut d = fgm_direction(obj, x, y, eps)?;
    box_project(&mut d, x);
    Ok(d)
}

pub fn fgsm<O: Objective + ?Sized>(obj: &O, x: &Tensor<f32>, y: &[usize], eps: f32) -> Result<Tensor<f32>> {
    let (_, g) = obj.loss_and_grad(x, y)?;
    let mut d = g.map(|v| eps * sign(v));
    box_project(&mut d, x);
    Ok(d)
}

/// A uniform draw from the per-sample `p`-ball of radius `eps`.
pub fn random_in_ball<R: Rng>(shape: &[usize], threat: &ThreatModel, rng: &mut R) -> Tensor<f32> {
    let mut t = Tensor::<f32>::zeros(shape);
    let eps = threat.eps;
    match threat.p {
        Norm::Linf => {
            for v in t.data_mut() {
                *v = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
            }
        }
        Norm::L2 => {
            let d = t.sample_len();
            for i in 0..t.batch() {
                let s = t.sample_mut(i);
                for v in s.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                let n = l2(s);
                let u: f64 = rng.gen();
                let r = eps * u.powf(1.0 / d as f64) as f32;
                if n > 0.0 {
                    s.iter_mut().for_each(|v| *v = *v / n * r);
                }
            }
        }
    }
    t
}

/// Projected gradient ascent from zero or a random point in the ball; the
/// step is `step_size * sign(g)` for ℓ∞ and `step_size * g / ‖g‖₂` for ℓ2.
pub fn pgd<O: Objective + ?Sized, R: Rng>(
    obj: &O,
    x: &Tensor<f32>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let mut delta = match cfg.init {
        Init::Zero => Tensor::zeros(x.shape()),
        Init::Random => project(&random_in_ball(x.shape(), &cfg.threat, rng), x, &cfg.threat)?,
    };
    for _ in 0..cfg.steps {
        let xa = x.add(&delta)?;
        let (_, g) = obj.loss_and_grad(&xa, y)?;
        let step = match cfg.threat.p {
            Norm::Linf => g.map(|v| cfg.step_size * sign(v)),
            Norm::L2 => normalized_direction(&g, cfg.step_size),
        };
        delta.add_assign(&step)?;
        delta = project(&delta, x, &cfg.threat)?;
    }
    Ok(delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    /// Every sample.
    All,
    /// A random `floor(b / 2)` subset of each batch.
    Half,
    /// Every sample, with its own `sigma_i ~ U[0, sigma]`.
    UniformSigma,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianAugConfig {
    pub sigma: f32,
    pub mode: AugMode,
    /// Draw uniformly from the sphere of radius `sigma * sqrt(d)` instead.
    #[serde(default)]
    pub sphere: bool,
}

impl GaussianAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// One noise vector of length `d`: `N(0, sigma² I)` or uniform on the
/// sphere of radius `sigma * sqrt(d)`.
pub fn sample_noise<R: Rng>(d: usize, sigma: f32, sphere: bool, rng: &mut R) -> Vec<f32> {
    let mut v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    if sphere {
        let n = l2(&v);
        let r = sigma * (d as f32).sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|e| *e = *e / n * r);
        }
    } else {
        v.iter_mut().for_each(|e| *e *= sigma);
    }
    v
}

/// Indices of the samples that a batch of size `b` augments under `mode`.
pub fn augmented_indices<R: Rng>(b: usize, mode: AugMode, rng: &mut R) -> Vec<usize> {
    match mode {
        AugMode::All | AugMode::UniformSigma => (0..b).collect(),
        AugMode::Half => {
            let mut idx = index::sample(rng, b, b / 2).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Noisy copy of `batch`, clipped to `[0, 1]`.
pub fn gaussian_augment<R: Rng>(batch: &Tensor<f32>, cfg: &GaussianAugConfig, rng: &mut R) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let mut out = batch.clone();
    if cfg.sigma == 0.0 {
        return Ok(out);
    }
    let d = out.sample_len();
    for i in augmented_indices(out.batch(), cfg.mode, rng) {
        let sigma = match cfg.mode {
            AugMode::UniformSigma => rng.gen_range(0.0..=cfg.sigma),
            _ => cfg.sigma,
        };
        let noise = sample_noise(d, sigma, cfg.sphere, rng);
        for (p, n) in out.sample_mut(i).iter_mut().zip(noise) {
            *p = (*p + n).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
