//! Relaxed LPIPS adversarial training: one normalized-gradient perturbation
//! per selected layer, all read from a single backward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{apply, normalized_direction};
use crate::error::{Error, Result};
use crate::graph::{GradientBundle, Mode, Trace};
use crate::model::{ModelGraph, INPUT_TAP};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub tap: String,
    pub dim: usize,
    pub eps: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPerturbationPlan {
    pub base_eps: f32,
    pub d_in: usize,
    pub entries: Vec<PlanEntry>,
}

/// `eps_l = (1 / l) * (d_l / d_in) * eps` for each selected layer.
pub fn make_plan(model: &ModelGraph, eps: f32, layers: &[usize]) -> Result<LayerPerturbationPlan> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("RLAT layer set is empty".into()));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eps must be finite and >= 0, got {eps}"
        )));
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let d_in = model.input_dim();
    let entries = sorted
        .into_iter()
        .map(|l| {
            let p = model.injection_point(l)?;
            let scale = (p.dim as f64 / d_in as f64) / l as f64;
            Ok(PlanEntry {
                layer: l,
                tap: p.tap.clone(),
                dim: p.dim,
                eps: (scale * eps as f64) as f32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerPerturbationPlan {
        base_eps: eps,
        d_in,
        entries,
    })
}

impl LayerPerturbationPlan {
    fn check(&self, model: &ModelGraph) -> Result<()> {
        if self.d_in != model.input_dim() {
            return Err(Error::Config(format!(
                "plan built for input dim {}, model has {}",
                self.d_in,
                model.input_dim()
            )));
        }
        for e in &self.entries {
            let p = model.injection_point(e.layer)?;
            if p.tap != e.tap || p.dim != e.dim {
                return Err(Error::Config(format!(
                    "plan layer {} ({}, d={}) does not match model ({}, d={})",
                    e.layer, e.tap, e.dim, p.tap, p.dim
                )));
            }
        }
        Ok(())
    }
}

pub struct RlatStep {
    /// Mean loss of the perturbed forward pass.
    pub loss: f32,
    /// Gradients of `loss` with respect to every parameter.
    pub grads: GradientBundle<f32>,
    /// The perturbed forward pass (for running-statistics updates).
    pub trace: Trace<f32>,
    /// `clamp(x + delta_input, 0, 1)`, or `x` when the input is not selected.
    pub input: Tensor<f32>,
    /// Per-layer perturbations, keyed by tap name.
    pub deltas: BTreeMap<String, Tensor<f32>>,
}

/// One RLAT iteration: forward + backward at zero perturbation to read the
/// gradient at every selected layer, a per-sample normalized step of size
/// `eps_l` at each, then a perturbed forward + backward for the parameter
/// gradients. `perturb[i] = false` keeps sample `i` clean.
pub fn rlat_step(
    model: &ModelGraph,
    x: &Tensor<f32>,
    labels: &[usize],
    plan: &LayerPerturbationPlan,
    perturb: Option<&[bool]>,
    mode: Mode,
) -> Result<RlatStep> {
    plan.check(model)?;
    if let Some(m) = perturb {
        if m.len() != x.batch() {
            return Err(Error::Shape(format!(
                "mask of {} for a batch of {}",
                m.len(),
                x.batch()
            )));
        }
    }
    let taps: Vec<&str> = plan.entries.iter().map(|e| e.tap.as_str()).collect();
    let (_, mut g, _) = model.loss_and_grads(x, labels, &[], &taps, mode)?;

    let mut deltas = BTreeMap::new();
    for e in &plan.entries {
        let mut d = normalized_direction(&g.take(&e.tap)?, e.eps);
        if let Some(m) = perturb {
            for (i, _) in m.iter().enumerate().filter(|(_, &keep)| !keep) {
                d.sample_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        deltas.insert(e.tap.clone(), d);
    }

    let input = match deltas.get(INPUT_TAP) {
        Some(d) => apply(x, d)?,
        None => x.clone(),
    };
    let offsets: Vec<(&str, &Tensor<f32>)> = deltas
        .iter()
        .filter(|(k, _)| k.as_str() != INPUT_TAP)
        .map(|(k, v)| (k.as_str(), v))
        .collect();
    let names = model.param_names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let (loss, grads, trace) = model.loss_and_grads(&input, labels, &offsets, &wrt, mode)?;
    Ok(RlatStep {
        loss,
        grads,
        trace,
        input,
        deltas,
    })
}
