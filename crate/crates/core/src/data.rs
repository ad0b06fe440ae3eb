//! Labeled image datasets: the CIFAR-10 binary record layout and a
//! procedural shape/texture dataset used as the default desk-scale substrate.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: &str, images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Data(format!("images must be NCHW, got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            name: name.to_string(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        Self {
            name: self.name.clone(),
            images,
            labels,
            classes: self.classes,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Contiguous chunks of at most `size` samples, in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Reads records of one label byte followed by `C*H*W` channel-planar pixel
/// bytes.
pub fn load_records(path: &Path, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_records(&bytes, shape, classes, &path.display().to_string())
}

pub fn parse_records(bytes: &[u8], shape: [usize; 3], classes: usize, name: &str) -> Result<Dataset> {
    let pixels: usize = shape.iter().product();
    let record = pixels + 1;
    if !bytes.len().is_multiple_of(record) {
        let full = bytes.len() / record * record;
        return Err(Error::Data(format!(
            "truncated record at byte offset {full}: file has {} bytes, record size {record}",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let y = rec[0] as usize;
        if y >= classes {
            return Err(Error::Data(format!(
                "label byte {y} >= {classes} at byte offset {}",
                i * record
            )));
        }
        labels.push(y);
        data.extend(rec[1..].iter().map(|&b| from_byte(b)));
    }
    let images = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?;
    Dataset::new(name, images, labels, classes)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    load_records(path, CIFAR_SHAPE, CIFAR_CLASSES)
}

pub fn encode_records(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.classes > 256 {
        return Err(Error::Data("record format stores labels in one byte".into()));
    }
    let pixels = ds.images.sample_len();
    let mut out = Vec::with_capacity(ds.len() * (pixels + 1));
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.images.sample(i).iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

pub fn write_records(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_records(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parameters of the procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(samples_per_class: usize, seed: u64) -> Self {
        Self {
            classes: 4,
            size: 16,
            samples_per_class,
            seed,
        }
    }
}

/// Names of the available procedural classes, in label order.
pub const SHAPES: [&str; 8] = [
    "disk",
    "square_outline",
    "diagonal_stripes",
    "checkerboard",
    "cross",
    "ring",
    "horizontal_bars",
    "triangle",
];

/// Whether pixel `(px, py)` (in units of the object's half-size, centred on
/// the object) belongs to the foreground of `shape`.
fn inside(shape: usize, u: f32, v: f32, period: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let in_box = u.abs() <= 1.0 && v.abs() <= 1.0;
    match shape {
        0 => r <= 1.0,
        1 => in_box && (u.abs() >= 0.6 || v.abs() >= 0.6),
        2 => in_box && ((u + v) / period).rem_euclid(2.0) < 1.0,
        3 => in_box && (((u / period).floor() + (v / period).floor()) as i64).rem_euclid(2) == 0,
        4 => in_box && (u.abs() <= 0.3 || v.abs() <= 0.3),
        5 => (0.55..=1.0).contains(&r),
        6 => in_box && (v / period).rem_euclid(2.0) < 1.0,
        7 => in_box && v >= -1.0 && u.abs() <= (v + 1.0) / 2.0,
        _ => false,
    }
}

/// Renders a balanced, shuffled dataset of shapes and textures with random
/// position, size and colours. Pixel values are quantized to 8 bits so the
/// record format round-trips exactly.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > SHAPES.len() {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset supports 2..={} classes, got {}",
            SHAPES.len(),
            spec.classes
        )));
    }
    if spec.size < 8 {
        return Err(Error::InvalidArgument("synthetic images must be at least 8x8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.samples_per_class;
    let s = spec.size;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * 3 * s * s);
    for &y in &labels {
        let half = rng.gen_range(0.28..0.42) * s as f32;
        let margin = half.min(s as f32 / 2.0 - 1.0);
        let cx = rng.gen_range(margin..(s as f32 - margin));
        let cy = rng.gen_range(margin..(s as f32 - margin));
        let period = rng.gen_range(0.28..0.4);
        let bg: [f32; 3] = [
            rng.gen_range(0.1..0.6),
            rng.gen_range(0.1..0.6),
            rng.gen_range(0.1..0.6),
        ];
        let shift: f32 = if rng.gen_bool(0.5) { 0.35 } else { -0.35 };
        let fg: [f32; 3] = [
            (bg[0] + shift + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
            (bg[1] + shift + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
            (bg[2] + shift + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
        ];
        let mut img = vec![0.0f32; 3 * s * s];
        for py in 0..s {
            for px in 0..s {
                let u = (px as f32 + 0.5 - cx) / half;
                let v = (py as f32 + 0.5 - cy) / half;
                let on = inside(y, u, v, period);
                for c in 0..3 {
                    let base = if on { fg[c] } else { bg[c] };
                    let jitter: f32 = rng.gen_range(-0.02..0.02);
                    img[(c * s + py) * s + px] = from_byte(to_byte(base + jitter));
                }
            }
        }
        data.extend(img);
    }
    let images = Tensor::new(vec![n, 3, s, s], data)?;
    Dataset::new(
        &format!("synthetic-k{}-{}px-seed{}", spec.classes, s, spec.seed),
        images,
        labels,
        spec.classes,
    )
}
