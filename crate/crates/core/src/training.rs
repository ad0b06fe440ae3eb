//! SGD-momentum training with an optional per-batch perturbation method.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    apply, fgm, fgsm, gaussian_augment, pgd, AttackConfig, AugMode, GaussianAugConfig, Init, ModelObjective, Norm,
    ThreatModel,
};
use crate::checkpoint::CheckpointMeta;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{GradientBundle, Mode, Trace};
use crate::metrics::accuracy;
use crate::model::{build_model, ModelGraph, ModelSpec, Norm as Normalization};
use crate::rlat::{make_plan, rlat_step, LayerPerturbationPlan};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Standard,
    Gaussian,
    Fgm,
    Fgsm,
    Pgd,
    Rlat,
}

impl MethodKind {
    pub fn tag(&self) -> &'static str {
        match self {
            MethodKind::Standard => "standard",
            MethodKind::Gaussian => "gaussian",
            MethodKind::Fgm => "fgm",
            MethodKind::Fgsm => "fgsm",
            MethodKind::Pgd => "pgd",
            MethodKind::Rlat => "rlat",
        }
    }
}

fn default_lr() -> f32 {
    0.1
}
fn default_momentum() -> f32 {
    0.9
}
fn default_wd() -> f32 {
    5e-4
}
fn default_factor() -> f32 {
    10.0
}
fn default_fraction() -> f32 {
    1.0
}
fn default_steps() -> usize {
    10
}
fn default_widths() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_blocks() -> usize {
    1
}
fn default_aug() -> AugMode {
    AugMode::All
}
fn default_p() -> Norm {
    Norm::L2
}
fn default_init() -> Init {
    Init::Zero
}
fn default_norm() -> Normalization {
    Normalization::BatchNorm
}

/// Flat training configuration. Method-specific fields are ignored by
/// methods that do not use them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_factor")]
    pub decay_factor: f32,
    pub method: MethodKind,
    /// Radius for fgm / fgsm / pgd / rlat.
    #[serde(default)]
    pub eps: f32,
    /// Threat-model norm for pgd.
    #[serde(default = "default_p")]
    pub p: Norm,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// PGD step size; `2 * eps / steps` when absent.
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default = "default_init")]
    pub init: Init,
    #[serde(default)]
    pub sigma: f32,
    #[serde(default = "default_aug")]
    pub aug_mode: AugMode,
    #[serde(default)]
    pub sphere: bool,
    /// RLAT layer indices; all injection points when empty.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default = "default_fraction")]
    pub adv_fraction: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_norm")]
    pub normalization: Normalization,
}

impl TrainConfig {
    /// Desk defaults: 30 epochs, batch 128, lr 0.1 decayed 10x at 15 and 25.
    pub fn desk(method: MethodKind) -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            decay_epochs: vec![15, 25],
            decay_factor: default_factor(),
            method,
            eps: 0.0,
            p: default_p(),
            steps: default_steps(),
            step_size: None,
            init: default_init(),
            sigma: 0.0,
            aug_mode: default_aug(),
            sphere: false,
            layers: Vec::new(),
            adv_fraction: 1.0,
            seed: 0,
            widths: default_widths(),
            blocks_per_stage: default_blocks(),
            normalization: default_norm(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.decay_factor > 0.0) {
            return bad("weight_decay must be >= 0 and decay_factor > 0".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1])
            || self.decay_epochs.iter().any(|&e| e < 1 || e > self.epochs)
        {
            return bad(format!(
                "decay_epochs {:?} must be strictly increasing within [1, {}]",
                self.decay_epochs, self.epochs
            ));
        }
        if ![0.25, 0.5, 0.75, 1.0].contains(&self.adv_fraction) {
            return bad(format!(
                "adv_fraction must be one of 0.25, 0.5, 0.75, 1, got {}",
                self.adv_fraction
            ));
        }
        if !(self.eps >= 0.0) || !(self.sigma >= 0.0) {
            return bad("eps and sigma must be >= 0".into());
        }
        if self.method == MethodKind::Pgd && self.steps == 0 {
            return bad("pgd needs steps >= 1".into());
        }
        Ok(())
    }

    pub fn model_spec(&self, input_shape: [usize; 3], classes: usize) -> ModelSpec {
        ModelSpec {
            input_shape,
            widths: self.widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            num_classes: classes,
            norm: self.normalization,
        }
    }

    pub fn attack(&self) -> Result<AttackConfig> {
        let threat = ThreatModel::new(self.p, self.eps)?;
        let cfg = match self.step_size {
            Some(a) => AttackConfig {
                threat,
                steps: self.steps,
                step_size: a,
                init: self.init,
            },
            None => AttackConfig::with_default_step(threat, self.steps, self.init),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gaussian(&self) -> GaussianAugConfig {
        GaussianAugConfig {
            sigma: self.sigma,
            mode: self.aug_mode,
            sphere: self.sphere,
        }
    }
}

/// `lr * factor^(-k)` with `k` the number of decay epochs `<= epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f32 {
    let k = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    (cfg.lr as f64 / (cfg.decay_factor as f64).powi(k as i32)) as f32
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Velocity(pub BTreeMap<String, Tensor<f32>>);

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub fn sgd_update(
    model: &mut ModelGraph,
    grads: &GradientBundle<f32>,
    velocity: &mut Velocity,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    for p in model.graph.params_mut() {
        let g = grads.get(&p.name)?;
        p.value.same_shape(g)?;
        let v = velocity
            .0
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        for ((vi, pi), &gi) in v.data_mut().iter_mut().zip(p.value.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + (gi + weight_decay * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// The perturbation machinery resolved once per run.
pub enum Method {
    Standard,
    Gaussian(GaussianAugConfig),
    Fgm(f32),
    Fgsm(f32),
    Pgd(AttackConfig),
    Rlat(LayerPerturbationPlan),
}

impl Method {
    pub fn resolve(cfg: &TrainConfig, model: &ModelGraph) -> Result<Self> {
        Ok(match cfg.method {
            MethodKind::Standard => Method::Standard,
            MethodKind::Gaussian => {
                let g = cfg.gaussian();
                g.validate()?;
                Method::Gaussian(g)
            }
            MethodKind::Fgm => Method::Fgm(cfg.eps),
            MethodKind::Fgsm => Method::Fgsm(cfg.eps),
            MethodKind::Pgd => Method::Pgd(cfg.attack()?),
            MethodKind::Rlat => {
                let layers: Vec<usize> = if cfg.layers.is_empty() {
                    model.injection_points().iter().map(|p| p.layer).collect()
                } else {
                    cfg.layers.clone()
                };
                Method::Rlat(make_plan(model, cfg.eps, &layers).map_err(|e| Error::Config(e.to_string()))?)
            }
        })
    }
}

/// Loss, parameter gradients and the training-mode trace of one batch under
/// `method`; `floor(adv_fraction * b)` randomly chosen samples are perturbed.
pub fn batch_gradients(
    model: &ModelGraph,
    method: &Method,
    adv_fraction: f32,
    x: &Tensor<f32>,
    y: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f32, GradientBundle<f32>, Trace<f32>)> {
    let b = x.batch();
    let k = ((adv_fraction as f64) * b as f64).floor() as usize;
    let mut mask = vec![false; b];
    if k == b {
        mask.iter_mut().for_each(|m| *m = true);
    } else {
        for i in index::sample(rng, b, k) {
            mask[i] = true;
        }
    }
    let names = model.param_names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let obj = ModelObjective {
        model,
        mode: Mode::Train,
    };
    let keep_clean = |d: &mut Tensor<f32>| {
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                d.sample_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    };
    let input = match method {
        Method::Standard => None,
        Method::Gaussian(g) => {
            let idx: Vec<usize> = (0..b).filter(|&i| mask[i]).collect();
            let noisy = gaussian_augment(&x.select(&idx), g, rng)?;
            let mut out = x.clone();
            for (j, &i) in idx.iter().enumerate() {
                out.sample_mut(i).copy_from_slice(noisy.sample(j));
            }
            Some(out)
        }
        Method::Fgm(eps) => {
            let mut d = fgm(&obj, x, y, *eps)?;
            keep_clean(&mut d);
            Some(apply(x, &d)?)
        }
        Method::Fgsm(eps) => {
            let mut d = fgsm(&obj, x, y, *eps)?;
            keep_clean(&mut d);
            Some(apply(x, &d)?)
        }
        Method::Pgd(cfg) => {
            let mut d = pgd(&obj, x, y, cfg, rng)?;
            keep_clean(&mut d);
            Some(apply(x, &d)?)
        }
        Method::Rlat(plan) => {
            let step = rlat_step(model, x, y, plan, Some(&mask), Mode::Train)?;
            return Ok((step.loss, step.grads, step.trace));
        }
    };
    model.loss_and_grads(input.as_ref().unwrap_or(x), y, &[], &wrt, Mode::Train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub clean_eval_acc: Option<f64>,
    pub corruption_eval_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of each optimisation step, in order.
    pub step_losses: Vec<f32>,
}

/// Optional per-epoch evaluation sets.
#[derive(Default)]
pub struct EvalSets<'a> {
    pub clean: Option<&'a Dataset>,
    pub corrupted: Option<&'a Dataset>,
}

/// Trains a fresh model from `cfg.seed`; reports the final model.
pub fn train(cfg: &TrainConfig, data: &Dataset, eval: EvalSets<'_>) -> Result<(ModelGraph, CheckpointMeta, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let spec = cfg.model_spec(data.image_shape(), data.classes);
    let mut model = build_model(&spec, cfg.seed)?;
    let method = Method::resolve(cfg, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_7a1e);
    let mut velocity = Velocity::default();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let (loss, grads, trace) = batch_gradients(&model, &method, cfg.adv_fraction, &x, &y, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            model.graph.update_running_stats(&trace);
            sgd_update(&mut model, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            total += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
            log.step_losses.push(loss);
        }
        let clean_eval_acc = eval.clean.map(|d| accuracy(&model, d)).transpose()?;
        let corruption_eval_acc = eval.corrupted.map(|d| accuracy(&model, d)).transpose()?;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: total / seen as f64,
            clean_eval_acc,
            corruption_eval_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let meta = CheckpointMeta {
        method: cfg.method.tag().to_string(),
        seed: cfg.seed,
        epoch: cfg.epochs,
    };
    Ok((model, meta, log))
}
