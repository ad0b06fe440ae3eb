//! Procedural image corruptions at five severities.
//!
//! Spatial parameters (blur radii, motion length, displacement amplitude) are
//! given for a 32-pixel reference side and scaled linearly with the actual
//! image side.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_records, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];
pub const REFERENCE_SIDE: f32 = 32.0;
/// Version of the severity table below; bump on any change.
pub const RAMP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Pixelate,
    Elastic,
}

pub const ALL_KINDS: [Kind; 9] = [
    Kind::GaussianNoise,
    Kind::ShotNoise,
    Kind::ImpulseNoise,
    Kind::DefocusBlur,
    Kind::MotionBlur,
    Kind::Brightness,
    Kind::Contrast,
    Kind::Pixelate,
    Kind::Elastic,
];

/// Held out for hyperparameter selection.
pub const VALIDATION_KINDS: [Kind; 2] = [Kind::MotionBlur, Kind::Elastic];

impl Kind {
    pub fn name(&self) -> &'static str {
        match self {
            Kind::GaussianNoise => "gaussian_noise",
            Kind::ShotNoise => "shot_noise",
            Kind::ImpulseNoise => "impulse_noise",
            Kind::DefocusBlur => "defocus_blur",
            Kind::MotionBlur => "motion_blur",
            Kind::Brightness => "brightness",
            Kind::Contrast => "contrast",
            Kind::Pixelate => "pixelate",
            Kind::Elastic => "elastic",
        }
    }

    /// Corruption family: noise, blur, weather or digital.
    pub fn category(&self) -> &'static str {
        match self {
            Kind::GaussianNoise | Kind::ShotNoise | Kind::ImpulseNoise => "noise",
            Kind::DefocusBlur | Kind::MotionBlur => "blur",
            Kind::Brightness => "weather",
            Kind::Contrast | Kind::Pixelate | Kind::Elastic => "digital",
        }
    }

    fn index(&self) -> u64 {
        ALL_KINDS.iter().position(|k| k == self).expect("listed") as u64
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownName(format!("corruption kind {s}")))
    }
}

/// Parses `all` or a comma-separated list of kind names.
pub fn parse_kinds(s: &str) -> Result<Vec<Kind>> {
    if s == "all" {
        return Ok(ALL_KINDS.to_vec());
    }
    s.split(',').map(|k| k.trim().parse()).collect()
}

/// Parameters of one corruption at one severity. `strength` is the
/// dominant parameter and increases with severity for every kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Params {
    /// Additive `N(0, sigma²)`.
    Gaussian { sigma: f32 },
    /// `Poisson(x * photons) / photons`.
    Shot { photons: f32 },
    /// Salt-and-pepper with per-value probability `rate`.
    Impulse { rate: f32 },
    /// Anti-aliased disk kernel of the given radius (reference pixels).
    Defocus { radius: f32 },
    /// Line kernel of the given length (reference pixels), random angle.
    Motion { length: f32 },
    /// Additive offset.
    Brightness { offset: f32 },
    /// `mean + factor * (x - mean)`.
    Contrast { factor: f32 },
    /// Box downscale to `scale * side`, nearest upscale.
    Pixelate { scale: f32 },
    /// Smoothed random displacement field: RMS amplitude and smoothing
    /// width, both in reference pixels.
    Elastic { amplitude: f32, smoothing: f32 },
}

impl Params {
    pub fn strength(&self) -> f32 {
        match *self {
            Params::Gaussian { sigma } => sigma,
            Params::Shot { photons } => 1.0 / photons,
            Params::Impulse { rate } => rate,
            Params::Defocus { radius } => radius,
            Params::Motion { length } => length,
            Params::Brightness { offset } => offset,
            Params::Contrast { factor } => 1.0 - factor,
            Params::Pixelate { scale } => 1.0 - scale,
            Params::Elastic { amplitude, .. } => amplitude,
        }
    }
}

pub fn severity_params(kind: Kind, severity: u8) -> Result<Params> {
    if !(1..=5).contains(&severity) {
        return Err(Error::InvalidArgument(format!(
            "severity must be 1..=5, got {severity}"
        )));
    }
    let i = severity as usize - 1;
    Ok(match kind {
        Kind::GaussianNoise => Params::Gaussian {
            sigma: [0.04, 0.08, 0.12, 0.18, 0.26][i],
        },
        Kind::ShotNoise => Params::Shot {
            photons: [60.0, 25.0, 12.0, 5.0, 3.0][i],
        },
        Kind::ImpulseNoise => Params::Impulse {
            rate: [0.01, 0.02, 0.03, 0.05, 0.07][i],
        },
        Kind::DefocusBlur => Params::Defocus {
            radius: [1.0, 1.5, 2.0, 3.0, 4.0][i],
        },
        Kind::MotionBlur => Params::Motion {
            length: [3.0, 5.0, 7.0, 9.0, 12.0][i],
        },
        Kind::Brightness => Params::Brightness {
            offset: [0.1, 0.2, 0.3, 0.4, 0.5][i],
        },
        Kind::Contrast => Params::Contrast {
            factor: [0.75, 0.5, 0.4, 0.3, 0.15][i],
        },
        Kind::Pixelate => Params::Pixelate {
            scale: [0.95, 0.9, 0.85, 0.75, 0.6][i],
        },
        Kind::Elastic => Params::Elastic {
            amplitude: [0.5, 1.0, 1.5, 2.0, 2.5][i],
            smoothing: 3.0,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: Kind,
    pub severity: u8,
    pub seed: u64,
}

/// Applies `spec` to one `[C, H, W]` image in `[0, 1]`.
pub fn corrupt(image: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    let params = severity_params(spec.kind, spec.severity)?;
    apply_params(image, &params, spec.seed)
}

fn chw(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "expected a [C, H, W] image, got {:?}",
            image.shape()
        ))),
    }
}

/// Applies explicit parameters (also reachable with degenerate values
/// outside the severity table).
pub fn apply_params(image: &Tensor<f32>, params: &Params, seed: u64) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = h.min(w) as f32 / REFERENCE_SIDE;
    let x = image.data();
    let out: Vec<f32> = match *params {
        Params::Gaussian { sigma } => x
            .iter()
            .map(|&v| v + sigma * <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect(),
        Params::Shot { photons } => x
            .iter()
            .map(|&v| {
                let lambda = (v.clamp(0.0, 1.0) * photons) as f64;
                if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(&mut rng) as f32 / photons
                } else {
                    0.0
                }
            })
            .collect(),
        Params::Impulse { rate } => x
            .iter()
            .map(|&v| {
                if rng.gen::<f32>() < rate {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        Params::Defocus { radius } => {
            // Anti-aliased disk: weight falls linearly over the last pixel.
            let r = radius * px;
            let reach = (r + 0.5).floor() as isize;
            let mut taps = Vec::new();
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let wgt = (r + 0.5 - ((dx * dx + dy * dy) as f32).sqrt()).clamp(0.0, 1.0);
                    if wgt > 0.0 {
                        taps.push((dx as f32, dy as f32, wgt));
                    }
                }
            }
            average_of_shifts(x, c, h, w, &taps)
        }
        Params::Motion { length } => {
            let len = length * px;
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            let n = (len.ceil() as usize + 1).max(2);
            let taps: Vec<(f32, f32, f32)> = (0..n)
                .map(|k| {
                    let t = -len / 2.0 + len * k as f32 / (n - 1) as f32;
                    (t * angle.cos(), t * angle.sin(), 1.0)
                })
                .collect();
            average_of_shifts(x, c, h, w, &taps)
        }
        Params::Brightness { offset } => x.iter().map(|&v| v + offset).collect(),
        Params::Contrast { factor } => {
            let mean = x.iter().sum::<f32>() / x.len() as f32;
            x.iter().map(|&v| mean + factor * (v - mean)).collect()
        }
        Params::Pixelate { scale } => pixelate(x, c, h, w, scale),
        Params::Elastic { amplitude, smoothing } => {
            let field = |rng: &mut ChaCha8Rng| {
                let noise: Vec<f32> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
                let mut f = gaussian_filter(&noise, h, w, smoothing * px);
                let rms = (f.iter().map(|v| v * v).sum::<f32>() / f.len() as f32).sqrt();
                if rms > 0.0 {
                    f.iter_mut().for_each(|v| *v *= amplitude * px / rms);
                }
                f
            };
            let fx = field(&mut rng);
            let fy = field(&mut rng);
            let mut out = vec![0.0; x.len()];
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let k = i * w + j;
                        out[ch * h * w + k] = bilinear(plane, h, w, i as f32 + fy[k], j as f32 + fx[k]);
                    }
                }
            }
            out
        }
    };
    Tensor::new(vec![c, h, w], out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Sample at fractional `(row, col)` with edge replication.
fn bilinear(plane: &[f32], h: usize, w: usize, row: f32, col: f32) -> f32 {
    let r = row.clamp(0.0, (h - 1) as f32);
    let c = col.clamp(0.0, (w - 1) as f32);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f32;
    let fc = c - c0 as f32;
    let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
    let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
    top * (1.0 - fr) + bot * fr
}

/// Weighted mean of the image sampled at each `(dx, dy, weight)` offset.
fn average_of_shifts(x: &[f32], c: usize, h: usize, w: usize, taps: &[(f32, f32, f32)]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    let inv = 1.0 / taps.iter().map(|t| t.2).sum::<f32>();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let s: f32 = taps
                    .iter()
                    .map(|&(dx, dy, wgt)| wgt * bilinear(plane, h, w, i as f32 + dy, j as f32 + dx))
                    .sum();
                out[ch * h * w + i * w + j] = s * inv;
            }
        }
    }
    out
}

fn pixelate(x: &[f32], c: usize, h: usize, w: usize, scale: f32) -> Vec<f32> {
    let sh = ((h as f32 * scale).round() as usize).clamp(1, h);
    let sw = ((w as f32 * scale).round() as usize).clamp(1, w);
    if sh == h && sw == w {
        return x.to_vec();
    }
    // Source pixel (i, j) belongs to cell (i * sh / h, j * sw / w).
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let mut sum = vec![0.0f32; sh * sw];
        let mut cnt = vec![0u32; sh * sw];
        for i in 0..h {
            for j in 0..w {
                let k = (i * sh / h) * sw + j * sw / w;
                sum[k] += plane[i * w + j];
                cnt[k] += 1;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let k = (i * sh / h) * sw + j * sw / w;
                out[ch * h * w + i * w + j] = sum[k] / cnt[k] as f32;
            }
        }
    }
    out
}

/// Separable Gaussian filter with edge replication.
fn gaussian_filter(x: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let reach = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-reach..=reach)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = k.iter().sum();
    let at = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (-reach..=reach)
                .map(|d| k[(d + reach) as usize] * x[i * w + at(j as isize + d, w)])
                .sum::<f32>()
                / norm;
        }
    }
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (-reach..=reach)
                .map(|d| k[(d + reach) as usize] * tmp[at(i as isize + d, h) * w + j])
                .sum::<f32>()
                / norm;
        }
    }
    out
}

/// Deterministic per-item seed from `(seed, index, kind, severity)`.
pub fn item_seed(seed: u64, index: usize, kind: Kind, severity: u8) -> u64 {
    let mut z = seed
        ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ kind.index().wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (severity as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedItem {
    pub image: Tensor<f32>,
    pub label: usize,
    pub kind: Kind,
    pub severity: u8,
}

/// Every (kind, severity, image) combination, kind-major then severity then
/// image order.
pub fn corrupt_dataset<'a>(
    data: &'a Dataset,
    kinds: &'a [Kind],
    severities: &'a [u8],
    seed: u64,
) -> impl Iterator<Item = Result<CorruptedItem>> + 'a {
    kinds.iter().flat_map(move |&kind| {
        severities.iter().flat_map(move |&severity| {
            (0..data.len()).map(move |i| {
                let img = Tensor::new(data.image_shape().to_vec(), data.images.sample(i).to_vec())?;
                let spec = CorruptionSpec {
                    kind,
                    severity,
                    seed: item_seed(seed, i, kind, severity),
                };
                Ok(CorruptedItem {
                    image: corrupt(&img, &spec)?,
                    label: data.labels[i],
                    kind,
                    severity,
                })
            })
        })
    })
}

/// The whole dataset under one (kind, severity), as a dataset.
pub fn corrupted_copy(data: &Dataset, kind: Kind, severity: u8, seed: u64) -> Result<Dataset> {
    let kinds = [kind];
    let sev = [severity];
    let mut images = Vec::with_capacity(data.images.len());
    for item in corrupt_dataset(data, &kinds, &sev, seed) {
        images.extend(item?.image.into_data());
    }
    let images = Tensor::new(data.images.shape().to_vec(), images)?;
    Dataset::new(
        &format!("{}-{}-s{}", data.name, kind, severity),
        images,
        data.labels.clone(),
        data.classes,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub file: String,
    pub kind: Kind,
    pub severity: u8,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ramp_version: u32,
    pub source: String,
    pub image_shape: [usize; 3],
    pub classes: usize,
    pub shards: Vec<Shard>,
}

/// Writes one record file per (kind, severity) into `dir` plus
/// `manifest.json`.
pub fn export_corrupted(data: &Dataset, kinds: &[Kind], severities: &[u8], seed: u64, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut shards = Vec::new();
    for &kind in kinds {
        for &severity in severities {
            let ds = corrupted_copy(data, kind, severity, seed)?;
            let file = format!("{kind}_s{severity}.bin");
            write_records(&ds, &dir.join(&file))?;
            shards.push(Shard {
                file,
                kind,
                severity,
                seed,
                count: ds.len(),
            });
        }
    }
    let manifest = Manifest {
        ramp_version: RAMP_VERSION,
        source: data.name.clone(),
        image_shape: data.image_shape(),
        classes: data.classes,
        shards,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    #[test]
    fn ramps_are_strictly_increasing() {
        for k in ALL_KINDS {
            let s: Vec<f32> = SEVERITIES
                .iter()
                .map(|&s| severity_params(k, s).unwrap().strength())
                .collect();
            assert!(s.windows(2).all(|w| w[0] < w[1]), "{k}: {s:?}");
        }
        assert!(severity_params(Kind::Brightness, 0).is_err());
        assert!(severity_params(Kind::Brightness, 6).is_err());
        assert!("fog".parse::<Kind>().is_err());
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let ds = gen_synthetic(&SyntheticSpec::desk(2, 0)).unwrap();
        let img = Tensor::new(vec![3, 16, 16], ds.images.sample(0).to_vec()).unwrap();
        for p in [
            Params::Impulse { rate: 0.0 },
            Params::Pixelate { scale: 1.0 },
            Params::Gaussian { sigma: 0.0 },
            Params::Defocus { radius: 0.0 },
        ] {
            assert_eq!(apply_params(&img, &p, 3).unwrap(), img, "{p:?}");
        }
    }

    #[test]
    fn counting_and_determinism() {
        let ds = gen_synthetic(&SyntheticSpec::desk(3, 0)).unwrap();
        let a: Vec<_> = corrupt_dataset(&ds, &ALL_KINDS, &SEVERITIES, 7)
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(a.len(), 12 * 9 * 5);
        let b: Vec<_> = corrupt_dataset(&ds, &ALL_KINDS, &SEVERITIES, 7)
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|it| it.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(corrupt_dataset(&ds, &ALL_KINDS, &[], 7).count(), 0);
    }

    #[test]
    fn export_writes_manifest_and_shards() {
        let ds = gen_synthetic(&SyntheticSpec::desk(2, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = export_corrupted(&ds, &[Kind::Contrast, Kind::Pixelate], &[1, 5], 3, dir.path()).unwrap();
        assert_eq!(m.shards.len(), 4);
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let shard = crate::data::load_records(&dir.path().join(&m.shards[0].file), [3, 16, 16], 4).unwrap();
        assert_eq!(shard.len(), 8);
    }
}
