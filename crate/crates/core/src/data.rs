//! Image datasets: the CIFAR-10 binary record format and seeded synthetic
//! shapes.
//!
//! Images are stored normalized, channel-major `[C, S, S]` per sample.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub const SHAPE_CLASSES: usize = 10;
pub const SHAPE_NAMES: [&str; SHAPE_CLASSES] = [
    "disc", "square", "triangle", "plus", "cross", "ring", "frame", "hstripes", "vstripes",
    "checker",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Cifar10Binary { path: PathBuf },
    SyntheticShapes { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: Source,
    /// Fraction of samples used for training when the source has no split.
    pub train_fraction: f64,
    pub image_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl DatasetSpec {
    pub fn synthetic(count: usize, seed: u64, image_size: usize) -> Self {
        Self {
            source: Source::SyntheticShapes { count, seed },
            train_fraction: 0.8,
            image_size,
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }

    pub fn cifar(path: impl Into<PathBuf>) -> Self {
        Self {
            source: Source::Cifar10Binary { path: path.into() },
            train_fraction: 0.8,
            image_size: CIFAR_SIDE,
            mean: CIFAR_MEAN,
            std: CIFAR_STD,
        }
    }

    /// `synthetic`, `synthetic:COUNT` or `synthetic:COUNT:SEED`; anything
    /// else is a path to CIFAR-10 binary data.
    pub fn parse(arg: &str, image_size: usize) -> Result<Self> {
        let Some(rest) = arg.strip_prefix("synthetic") else {
            return Ok(Self::cifar(arg));
        };
        let mut parts = rest.split(':').skip(1);
        let num = |s: Option<&str>, default: u64| -> Result<u64> {
            s.map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| Error::Dataset(format!("bad number {v:?} in {arg:?}")))
            })
        };
        if !rest.is_empty() && !rest.starts_with(':') {
            return Err(Error::Dataset(format!("unknown dataset {arg:?}")));
        }
        let count = num(parts.next(), 5000)? as usize;
        let seed = num(parts.next(), 42)?;
        if parts.next().is_some() {
            return Err(Error::Dataset(format!("unknown dataset {arg:?}")));
        }
        Ok(Self::synthetic(count, seed, image_size))
    }

    pub fn load(&self) -> Result<Split> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Dataset(format!(
                "train fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        let (mut train, test) = match &self.source {
            Source::SyntheticShapes { count, seed } => {
                let all = synthetic_shapes(*count, self.image_size, *seed)?;
                all.split(self.train_fraction)
            }
            Source::Cifar10Binary { path } => {
                if self.image_size != CIFAR_SIDE {
                    return Err(Error::Dataset(format!(
                        "CIFAR-10 images are {CIFAR_SIDE}×{CIFAR_SIDE}, config asks for {}",
                        self.image_size
                    )));
                }
                load_cifar(path, self.train_fraction)?
            }
        };
        let mut test = test;
        train.normalize(&self.mean, &self.std);
        test.normalize(&self.mean, &self.std);
        Ok(Split { train, test })
    }
}

/// Raw pixels in `[0, 1]` (or normalized after [`Dataset::normalize`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gather `indices` into one contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.image_len());
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.image(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let n = self.image_len();
        Self {
            images: self.images[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
            ..*self
        }
    }

    fn split(self, fraction: f64) -> (Self, Self) {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.len());
        (self.subset(0..cut), self.subset(cut..self.len()))
    }

    pub fn normalize(&mut self, mean: &[f32; 3], std: &[f32; 3]) {
        let plane = self.image_size * self.image_size;
        for (i, v) in self.images.iter_mut().enumerate() {
            let c = (i / plane) % self.channels;
            *v = (*v - mean[c % 3]) / std[c % 3];
        }
    }
}

/// Parse concatenated 3073-byte records: a label byte then 32×32 R, G, B planes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Dataset("no records".into()));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records (truncated?)",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Dataset(format!("record {i} has label {label}")));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        images,
        labels,
        image_size: CIFAR_SIDE,
        channels: 3,
        classes: 10,
    })
}

fn read_records(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    parse_cifar10(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut first = it
        .next()
        .ok_or_else(|| Error::Dataset("no data files".into()))?;
    for d in it {
        first.images.extend(d.images);
        first.labels.extend(d.labels);
    }
    Ok(first)
}

/// A single file is split by `fraction`; a directory uses the standard
/// `data_batch_*.bin` / `test_batch.bin` layout.
fn load_cifar(path: &Path, fraction: f64) -> Result<(Dataset, Dataset)> {
    if path.is_dir() {
        let mut train_files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        train_files.sort();
        let test_file = path.join("test_batch.bin");
        if train_files.is_empty() || !test_file.is_file() {
            return Err(Error::Dataset(format!(
                "{} lacks data_batch_*.bin and test_batch.bin",
                path.display()
            )));
        }
        let train = concat(
            train_files
                .iter()
                .map(|p| read_records(p))
                .collect::<Result<_>>()?,
        )?;
        Ok((train, read_records(&test_file)?))
    } else {
        Ok(read_records(path)?.split(fraction))
    }
}

struct Painter {
    side: usize,
    pixels: Vec<f32>,
}

impl Painter {
    fn blend(&mut self, y: usize, x: usize, color: [f32; 3], alpha: f32) {
        let plane = self.side * self.side;
        for (c, &v) in color.iter().enumerate() {
            let p = &mut self.pixels[c * plane + y * self.side + x];
            *p = *p * (1.0 - alpha) + v * alpha;
        }
    }
}

/// Membership of a point `(u, v)` in shape `class`, in units of the shape
/// radius centred at the origin; returns coverage in `[0, 1]`.
fn coverage(class: usize, u: f64, v: f64, period: f64) -> f64 {
    let inside_box = u.abs() <= 1.0 && v.abs() <= 1.0;
    let r = (u * u + v * v).sqrt();
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => on(r <= 1.0),
        1 => on(u.abs() <= 0.8 && v.abs() <= 0.8),
        2 => on((-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) / 1.8 * 0.9),
        3 => on(inside_box && (u.abs() <= 0.28 || v.abs() <= 0.28)),
        4 => on(r <= 1.1 && ((u - v).abs() <= 0.38 || (u + v).abs() <= 0.38)),
        5 => on((0.6..=1.0).contains(&r)),
        6 => on(u.abs() <= 0.85 && v.abs() <= 0.85 && (u.abs() >= 0.5 || v.abs() >= 0.5)),
        7 => on(inside_box && ((v + 1.0) / period).floor() as i64 % 2 == 0),
        8 => on(inside_box && ((u + 1.0) / period).floor() as i64 % 2 == 0),
        9 => on(inside_box
            && (((u + 1.0) / period).floor() as i64 + ((v + 1.0) / period).floor() as i64) % 2
                == 0),
        _ => 0.0,
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

/// Seeded parametric shapes with exact labels.
///
/// Each image has a dark random background, one bright shape of a random
/// colour, size, position and slight rotation, and pixel noise.
pub fn synthetic_shapes(count: usize, side: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Dataset(
            "synthetic dataset needs at least one sample".into(),
        ));
    }
    if side < 8 {
        return Err(Error::Dataset(format!(
            "synthetic images need side ≥ 8, got {side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.06).expect("valid std");
    let s = side as f64;
    let mut images = Vec::with_capacity(count * 3 * side * side);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..SHAPE_CLASSES);
        let bg = random_color(&mut rng, 0.0, 0.4);
        let fg = random_color(&mut rng, 0.6, 1.0);
        let mut p = Painter {
            side,
            pixels: bg
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c, side * side))
                .collect(),
        };
        let radius = s * rng.random_range(0.22..0.34);
        let jitter = (s / 2.0 - radius).min(0.15 * s);
        let cy = s / 2.0 + rng.random_range(-jitter..=jitter);
        let cx = s / 2.0 + rng.random_range(-jitter..=jitter);
        let theta = rng.random_range(-0.06..0.06) * PI;
        let period = rng.random_range(0.35..0.6);
        let (sin, cos) = theta.sin_cos();
        for y in 0..side {
            for x in 0..side {
                // 2×2 supersampling for soft edges
                let mut cov = 0.0;
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let (py, px) = (y as f64 + oy - cy, x as f64 + ox - cx);
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    cov += coverage(class, u, v, period) / 4.0;
                }
                if cov > 0.0 {
                    p.blend(y, x, fg, cov as f32);
                }
            }
        }
        images.extend(
            p.pixels
                .iter()
                .map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)),
        );
        labels.push(class);
    }
    Ok(Dataset {
        images,
        labels,
        image_size: side,
        channels: 3,
        classes: SHAPE_CLASSES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_spec_strings() {
        let s = DatasetSpec::parse("synthetic", 32).unwrap();
        assert_eq!(
            s.source,
            Source::SyntheticShapes {
                count: 5000,
                seed: 42
            }
        );
        let s = DatasetSpec::parse("synthetic:200:7", 16).unwrap();
        assert_eq!(
            s.source,
            Source::SyntheticShapes {
                count: 200,
                seed: 7
            }
        );
        assert_eq!(s.image_size, 16);
        assert!(DatasetSpec::parse("synthetic:x", 32).is_err());
        assert!(DatasetSpec::parse("synthetics", 32).is_err());
        assert!(matches!(
            DatasetSpec::parse("data/cifar", 32).unwrap().source,
            Source::Cifar10Binary { .. }
        ));
    }

    #[test]
    fn every_class_draws_something() {
        for class in 0..SHAPE_CLASSES {
            let mut hits = 0;
            for i in 0..41 {
                for j in 0..41 {
                    let (u, v) = (i as f64 / 20.0 - 1.0, j as f64 / 20.0 - 1.0);
                    hits += (coverage(class, u, v, 0.5) > 0.0) as usize;
                }
            }
            assert!(hits > 100 && hits < 41 * 41, "class {class}: {hits}");
        }
    }

    #[test]
    fn synthetic_is_balanced_enough() {
        let d = synthetic_shapes(500, 32, 1).unwrap();
        let mut counts = [0; SHAPE_CLASSES];
        for &l in &d.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c > 25), "{counts:?}");
        assert!(d.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
