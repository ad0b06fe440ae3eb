//! Evaluation: accuracy, corruption error tables, mCE, calibration,
//! noise-magnitude probes, distance statistics and correlations.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply, fgsm, pgd, sample_noise, AttackConfig, Init, ModelObjective, Norm, ThreatModel};
use crate::corruptions::{corrupt_dataset, CorruptedItem, Kind, SEVERITIES};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_rows, ModelGraph};
use crate::tensor::{softmax_row, Tensor};

pub const EVAL_CHUNK: usize = 250;
pub const ECE_BINS: usize = 15;

/// Eval-mode predicted classes.
pub fn predictions(model: &ModelGraph, images: &Tensor<f32>) -> Result<Vec<usize>> {
    let n = images.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        out.extend(
            model
                .logits(&images.select(&idx), crate::graph::Mode::Eval)?
                .argmax_rows(),
        );
    }
    Ok(out)
}

/// Eval-mode logits, computed in chunks.
pub fn all_logits(model: &ModelGraph, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.batch();
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        parts.push(model.logits(&images.select(&idx), crate::graph::Mode::Eval)?);
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub fn accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    Ok(fraction_correct(&predictions(model, &data.images)?, &data.labels))
}

/// Mean eval-mode cross-entropy.
pub fn mean_loss(model: &ModelGraph, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let logits = all_logits(model, images)?;
    let l = cross_entropy_rows(&logits, labels);
    Ok(l.iter().map(|&v| v as f64).sum::<f64>() / l.len() as f64)
}

/// Top-1 error rates per corruption kind and severity, plus clean error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionErrorTable {
    pub clean_error: f64,
    /// `errors[kind][s - 1]`.
    pub errors: BTreeMap<Kind, [f64; 5]>,
}

impl CorruptionErrorTable {
    pub fn new(clean_error: f64, errors: BTreeMap<Kind, [f64; 5]>) -> Result<Self> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(clean_error) || errors.values().flatten().any(|&v| !ok(v)) {
            return Err(Error::InvalidArgument("error rates must lie in [0, 1]".into()));
        }
        Ok(Self { clean_error, errors })
    }

    pub fn kinds(&self) -> Vec<Kind> {
        self.errors.keys().copied().collect()
    }

    /// Restriction to `kinds`.
    pub fn subset(&self, kinds: &[Kind]) -> Result<Self> {
        let errors = kinds
            .iter()
            .map(|k| {
                self.errors
                    .get(k)
                    .map(|e| (*k, *e))
                    .ok_or_else(|| Error::MissingCell(k.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            clean_error: self.clean_error,
            errors,
        })
    }
}

/// Builds the table from an arbitrary stream of corrupted items; every
/// (kind, severity) cell of `kinds` x 1..=5 must be present.
pub fn corruption_table<I>(
    model: &ModelGraph,
    clean: &Dataset,
    kinds: &[Kind],
    items: I,
) -> Result<CorruptionErrorTable>
where
    I: IntoIterator<Item = Result<CorruptedItem>>,
{
    let mut wrong: BTreeMap<(Kind, u8), (usize, usize)> = BTreeMap::new();
    let mut pending: Vec<CorruptedItem> = Vec::new();
    let flush = |pending: &mut Vec<CorruptedItem>, wrong: &mut BTreeMap<(Kind, u8), (usize, usize)>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let imgs: Vec<&Tensor<f32>> = pending.iter().map(|it| &it.image).collect();
        let batch = Tensor::stack(&imgs)?;
        let pred = predictions(model, &batch)?;
        for (it, p) in pending.iter().zip(pred) {
            let cell = wrong.entry((it.kind, it.severity)).or_insert((0, 0));
            cell.0 += (p != it.label) as usize;
            cell.1 += 1;
        }
        pending.clear();
        Ok(())
    };
    for item in items {
        pending.push(item?);
        if pending.len() == EVAL_CHUNK {
            flush(&mut pending, &mut wrong)?;
        }
    }
    flush(&mut pending, &mut wrong)?;
    let mut errors = BTreeMap::new();
    for &k in kinds {
        let mut row = [0.0; 5];
        for s in 1..=5u8 {
            let (w, n) = wrong
                .get(&(k, s))
                .ok_or_else(|| Error::MissingCell(format!("{k} severity {s}")))?;
            row[s as usize - 1] = *w as f64 / *n as f64;
        }
        errors.insert(k, row);
    }
    CorruptionErrorTable::new(1.0 - accuracy(model, clean)?, errors)
}

/// Corruption table over `kinds` x all severities, generated on the fly.
pub fn evaluate_corruptions(
    model: &ModelGraph,
    data: &Dataset,
    kinds: &[Kind],
    seed: u64,
) -> Result<CorruptionErrorTable> {
    corruption_table(model, data, kinds, corrupt_dataset(data, kinds, &SEVERITIES, seed))
}

/// `1 - mean` of all cells.
pub fn avg_corruption_accuracy(table: &CorruptionErrorTable) -> f64 {
    let cells: Vec<f64> = table.errors.values().flatten().copied().collect();
    1.0 - cells.iter().sum::<f64>() / cells.len() as f64
}

fn same_kinds(a: &CorruptionErrorTable, b: &CorruptionErrorTable) -> Result<()> {
    if a.kinds() != b.kinds() {
        return Err(Error::InvalidArgument(format!(
            "tables cover different corruptions: {:?} vs {:?}",
            a.kinds(),
            b.kinds()
        )));
    }
    if a.errors.is_empty() {
        return Err(Error::InvalidArgument("empty corruption table".into()));
    }
    Ok(())
}

/// Mean over kinds of `sum_s E[s][c] / sum_s E_base[s][c]`.
pub fn mce(table: &CorruptionErrorTable, baseline: &CorruptionErrorTable) -> Result<f64> {
    same_kinds(table, baseline)?;
    let mut total = 0.0;
    for (k, row) in &table.errors {
        let den: f64 = baseline.errors[k].iter().sum();
        if den == 0.0 {
            return Err(Error::Undefined(format!("baseline error sum is zero for {k}")));
        }
        total += row.iter().sum::<f64>() / den;
    }
    Ok(total / table.errors.len() as f64)
}

/// Mean over kinds of `(sum_s E[s][c] - 5 E_clean) / (sum_s E_base[s][c] - 5 E_base_clean)`.
pub fn relative_mce(table: &CorruptionErrorTable, baseline: &CorruptionErrorTable) -> Result<f64> {
    same_kinds(table, baseline)?;
    let mut total = 0.0;
    for (k, row) in &table.errors {
        let den = baseline.errors[k].iter().sum::<f64>() - 5.0 * baseline.clean_error;
        if den == 0.0 {
            return Err(Error::Undefined(format!("baseline degradation is zero for {k}")));
        }
        total += (row.iter().sum::<f64>() - 5.0 * table.clean_error) / den;
    }
    Ok(total / table.errors.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bin_count: usize,
    pub temperature: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Bin of a confidence value: bins are `[k/B, (k+1)/B)`, the last one also
/// holds 1.0.
pub fn ece_bin(conf: f64, bins: usize) -> usize {
    (1..bins).filter(|&k| conf >= k as f64 / bins as f64).count()
}

pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<CalibrationReport> {
    if confidences.is_empty() || bins == 0 {
        return Err(Error::InvalidArgument(
            "ECE needs at least one prediction and one bin".into(),
        ));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Shape(format!(
            "{} confidences vs {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ece_bin(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let bins_out = (0..bins)
        .map(|b| {
            let (confidence, accuracy) = if count[b] > 0 {
                (conf_sum[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            let weight = count[b] as f64 / n;
            total += weight * (accuracy - confidence).abs();
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                confidence,
                accuracy,
                weight,
            }
        })
        .collect();
    Ok(CalibrationReport {
        ece: total,
        bin_count: bins,
        temperature: 1.0,
        bins: bins_out,
    })
}

/// Top-class confidence and correctness of `softmax(logits / t)`.
pub fn confidences(logits: &Tensor<f32>, labels: &[usize], t: f64) -> (Vec<f64>, Vec<bool>) {
    let k = logits.sample_len();
    let mut conf = Vec::with_capacity(labels.len());
    let mut ok = Vec::with_capacity(labels.len());
    let mut row = vec![0.0f64; k];
    for (i, &y) in labels.iter().enumerate() {
        for (r, &v) in row.iter_mut().zip(logits.sample(i)) {
            *r = v as f64 / t;
        }
        let p = softmax_row(&row);
        let top = crate::tensor::argmax(&p);
        conf.push(p[top].clamp(0.0, 1.0));
        ok.push(top == y);
    }
    (conf, ok)
}

pub fn ece_of_logits(logits: &Tensor<f32>, labels: &[usize], t: f64, bins: usize) -> Result<CalibrationReport> {
    if logits.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.batch(),
            labels.len()
        )));
    }
    let (c, ok) = confidences(logits, labels, t);
    let mut r = ece(&c, &ok, bins)?;
    r.temperature = t;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub t_star: f64,
    pub before: CalibrationReport,
    pub after: CalibrationReport,
}

/// Candidate temperatures: `t` and `1/t` for `t = 0.001, 0.002, ..., 1.0`.
pub fn temperature_grid() -> Vec<f64> {
    let mut g = vec![1.0];
    for i in 1..1000 {
        let t = i as f64 / 1000.0;
        g.push(t);
        g.push(1.0 / t);
    }
    g
}

/// Grid search for the ECE-minimising temperature; `t = 1` wins ties.
pub fn temperature_rescale(logits: &Tensor<f32>, labels: &[usize]) -> Result<TemperatureFit> {
    temperature_rescale_on(logits, labels, &temperature_grid())
}

pub fn temperature_rescale_on(logits: &Tensor<f32>, labels: &[usize], grid: &[f64]) -> Result<TemperatureFit> {
    let before = ece_of_logits(logits, labels, 1.0, ECE_BINS)?;
    let mut best = before.clone();
    for &t in grid {
        let r = ece_of_logits(logits, labels, t, ECE_BINS)?;
        if r.ece < best.ece {
            best = r;
        }
    }
    Ok(TemperatureFit {
        t_star: best.temperature,
        before,
        after: best,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseShape {
    Gaussian,
    Sphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaCurve {
    pub mode: NoiseShape,
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
}

impl SigmaCurve {
    /// Grid value with the smallest loss.
    pub fn argmin(&self) -> f64 {
        let i = (0..self.losses.len())
            .min_by(|&a, &b| self.losses[a].total_cmp(&self.losses[b]))
            .unwrap_or(0);
        self.grid[i]
    }

    pub fn min_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("cannot parse grid `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (a, b, st) = (v[0], v[1], v[2]);
        if !(st > 0.0) || b < a {
            return Err(bad());
        }
        let n = ((b - a) / st + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| a + i as f64 * st).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

/// Mean eval-mode cross-entropy under additive noise of each magnitude,
/// averaged over `draws` noise samples per image. Noisy inputs are clipped
/// to `[0, 1]`; the `sigma = 0` point is the clean loss.
pub fn sigma_probe(
    model: &ModelGraph,
    data: &Dataset,
    grid: &[f64],
    mode: NoiseShape,
    draws: usize,
    seed: u64,
) -> Result<SigmaCurve> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("sigma grid must be non-empty and sorted".into()));
    }
    let mut losses = Vec::with_capacity(grid.len());
    let d = data.images.sample_len();
    for (gi, &sigma) in grid.iter().enumerate() {
        if sigma == 0.0 {
            losses.push(mean_loss(model, &data.images, &data.labels)?);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (gi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut total = 0.0;
        for _ in 0..draws.max(1) {
            let mut noisy = data.images.clone();
            for i in 0..noisy.batch() {
                let n = sample_noise(d, sigma as f32, mode == NoiseShape::Sphere, &mut rng);
                for (p, e) in noisy.sample_mut(i).iter_mut().zip(n) {
                    *p = (*p + e).clamp(0.0, 1.0);
                }
            }
            total += mean_loss(model, &noisy, &data.labels)?;
        }
        losses.push(total / draws.max(1) as f64);
    }
    Ok(SigmaCurve {
        mode,
        grid: grid.to_vec(),
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceTable {
    pub metric: String,
    /// `mean[kind][s - 1]`.
    pub mean: BTreeMap<Kind, [f64; 5]>,
    /// Kinds whose mean distance is not strictly increasing in severity.
    pub non_monotone: Vec<Kind>,
}

/// Mean distance between clean and corrupted images per (kind, severity);
/// `dist` maps two equally-shaped batches to per-sample distances.
pub fn distance_stats<F>(data: &Dataset, kinds: &[Kind], seed: u64, metric: &str, dist: F) -> Result<DistanceTable>
where
    F: Fn(&Tensor<f32>, &Tensor<f32>) -> Result<Vec<f64>>,
{
    let mut mean = BTreeMap::new();
    for &k in kinds {
        let mut row = [0.0; 5];
        for s in SEVERITIES {
            let c = crate::corruptions::corrupted_copy(data, k, s, seed)?;
            let mut total = 0.0;
            for start in (0..data.len()).step_by(EVAL_CHUNK) {
                let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
                total += dist(&data.images.select(&idx), &c.images.select(&idx))?
                    .iter()
                    .sum::<f64>();
            }
            row[s as usize - 1] = total / data.len() as f64;
        }
        mean.insert(k, row);
    }
    let non_monotone = mean
        .iter()
        .filter(|(_, r)| r.windows(2).any(|w| w[0] >= w[1]))
        .map(|(k, _)| *k)
        .collect();
    Ok(DistanceTable {
        metric: metric.to_string(),
        mean,
        non_monotone,
    })
}

/// Per-sample ℓ2 distances between two batches.
pub fn l2_distances(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    a.same_shape(b)?;
    Ok((0..a.batch())
        .map(|i| {
            a.sample(i)
                .iter()
                .zip(b.sample(i))
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub per_kind: BTreeMap<Kind, Option<f64>>,
    pub per_category: BTreeMap<String, Option<f64>>,
    pub overall: Option<f64>,
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Correlation between the 5-severity distance and error vectors of each
/// kind, averaged per corruption category and overall (undefined
/// correlations are left out of the averages).
pub fn distance_error_correlation(dist: &DistanceTable, errors: &CorruptionErrorTable) -> Result<CorrelationReport> {
    let kinds: Vec<Kind> = dist.mean.keys().copied().collect();
    if kinds != errors.kinds() {
        return Err(Error::InvalidArgument(
            "distance and error tables cover different kinds".into(),
        ));
    }
    let per_kind: BTreeMap<Kind, Option<f64>> = kinds
        .iter()
        .map(|k| (*k, pearson(&dist.mean[k], &errors.errors[k])))
        .collect();
    let mut cats: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for (k, v) in &per_kind {
        cats.entry(k.category().to_string()).or_default().push(*v);
    }
    let per_category = cats.iter().map(|(c, v)| (c.clone(), mean_defined(v))).collect();
    let overall = mean_defined(&per_kind.values().copied().collect::<Vec<_>>());
    Ok(CorrelationReport {
        per_kind,
        per_category,
        overall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub eps: f64,
    pub fgsm_acc: f64,
    pub pgd10_acc: f64,
    pub gap: f64,
    pub flagged: bool,
}

pub const OVERFIT_GAP: f64 = 0.2;

/// ℓ∞ FGSM vs PGD-10 (random start, step `eps / 4`) accuracy.
pub fn catastrophic_overfitting_check(
    model: &ModelGraph,
    data: &Dataset,
    eps: f32,
    seed: u64,
) -> Result<OverfitReport> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    let obj = ModelObjective::eval(model);
    let cfg = AttackConfig {
        threat: ThreatModel::new(Norm::Linf, eps)?,
        steps: 10,
        step_size: eps / 4.0,
        init: Init::Random,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut f_ok, mut p_ok) = (0usize, 0usize);
    for (x, y) in data.chunks(EVAL_CHUNK) {
        let df = fgsm(&obj, &x, &y, eps)?;
        let dp = pgd(&obj, &x, &y, &cfg, &mut rng)?;
        let pf = predictions(model, &apply(&x, &df)?)?;
        let pp = predictions(model, &apply(&x, &dp)?)?;
        f_ok += pf.iter().zip(&y).filter(|(a, b)| a == b).count();
        p_ok += pp.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    let n = data.len() as f64;
    let (fgsm_acc, pgd10_acc) = (f_ok as f64 / n, p_ok as f64 / n);
    let gap = fgsm_acc - pgd10_acc;
    Ok(OverfitReport {
        eps: eps as f64,
        fgsm_acc,
        pgd10_acc,
        gap,
        flagged: gap > OVERFIT_GAP,
    })
}
