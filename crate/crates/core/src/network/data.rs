//! Synthetic classification datasets.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{load_tensor, save_tensor, ContainerError, Tensor, TensorError};

pub const FEATURES_FILE: &str = "features.ibrt";
pub const LABELS_FILE: &str = "labels.ibrt";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("unknown generator {0:?} (expected blobs, moons or digits)")]
    UnknownGenerator(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Built-in generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Gaussian clusters in the plane, `k` classes.
    Blobs { k: usize },
    /// Two interleaved half circles.
    Moons,
    /// `1 x 8 x 8` images of the digits 0 to 9.
    Digits,
}

impl FromStr for Generator {
    type Err = DatasetError;

    /// `blobs`, `blobs:K`, `moons` or `digits`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || DatasetError::UnknownGenerator(s.to_string());
        match s.split_once(':') {
            Some(("blobs", k)) => match k.parse() {
                Ok(k) if k >= 1 => Ok(Generator::Blobs { k }),
                _ => Err(unknown()),
            },
            None if s == "blobs" => Ok(Generator::Blobs { k: 2 }),
            None if s == "moons" => Ok(Generator::Moons),
            None if s == "digits" => Ok(Generator::Digits),
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Blobs { k } => write!(f, "blobs:{k}"),
            Generator::Moons => f.write_str("moons"),
            Generator::Digits => f.write_str("digits"),
        }
    }
}

/// Features `[n, ...]` stored as `real32`, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DatasetError> {
        let rows = features.shape().first().copied().unwrap_or(0);
        if features.rank() < 2 || rows != labels.len() {
            return Err(DatasetError::Invalid(format!(
                "features {:?} do not hold one row per label ({})",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DatasetError::Invalid(format!("label {bad} >= {classes} classes")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn generate(generator: Generator, n: usize, seed: u64) -> Self {
        match generator {
            Generator::Blobs { k } => Self::blobs(n, k, seed),
            Generator::Moons => Self::moons(n, seed),
            Generator::Digits => Self::digits(n, seed),
        }
    }

    /// `k` isotropic clusters with centres on a circle of radius 3.
    pub fn blobs(n: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.6).expect("valid sigma");
        let labels = balanced_labels(n, k, &mut rng);
        let mut x = Vec::with_capacity(2 * n);
        for &l in &labels {
            let a = 2.0 * PI * l as f64 / k as f64;
            x.push((3.0 * a.cos() + noise.sample(&mut rng)) as f32);
            x.push((3.0 * a.sin() + noise.sample(&mut rng)) as f32);
        }
        Self::from_parts(vec![n, 2], x, labels, k)
    }

    /// Two interleaved half circles with Gaussian noise.
    pub fn moons(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).expect("valid sigma");
        let labels = balanced_labels(n, 2, &mut rng);
        let mut x = Vec::with_capacity(2 * n);
        for &l in &labels {
            let a = rng.random_range(0.0..PI);
            let (px, py) = if l == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
            x.push((2.0 * (px - 0.5) + noise.sample(&mut rng)) as f32);
            x.push((2.0 * (py - 0.25) + noise.sample(&mut rng)) as f32);
        }
        Self::from_parts(vec![n, 2], x, labels, 2)
    }

    /// Shifted, noisy 5x7 glyphs on an 8x8 canvas. Labels are balanced
    /// to within one sample per class.
    pub fn digits(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.2).expect("valid sigma");
        let labels = balanced_labels(n, 10, &mut rng);
        let mut x = Vec::with_capacity(64 * n);
        for &l in &labels {
            let dx = rng.random_range(0..=3usize);
            let dy = rng.random_range(0..=1usize);
            let ink: f64 = rng.random_range(0.7..1.3);
            let mut img = [0.0f64; 64];
            for (r, bits) in GLYPHS[l].iter().enumerate() {
                for c in 0..5 {
                    if bits >> (4 - c) & 1 == 1 {
                        img[(r + dy) * 8 + c + dx] = ink;
                    }
                }
            }
            x.extend(img.iter().map(|&p| (p + noise.sample(&mut rng)) as f32));
        }
        Self::from_parts(vec![n, 1, 8, 8], x, labels, 10)
    }

    fn from_parts(shape: Vec<usize>, x: Vec<f32>, labels: Vec<usize>, classes: usize) -> Self {
        Self {
            features: Tensor::from_f32(shape, x).expect("generator sizes"),
            labels,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Rows `idx` as a real tensor plus their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>), TensorError> {
        let x = self.features.gather_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Same samples with each flattened to a vector.
    pub fn flattened(&self) -> Self {
        let n = self.len();
        let d = self.sample_shape().iter().product();
        Self {
            features: self.features.reshape(&[n, d]).expect("same size"),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// First `len - test` samples and the last `test`.
    pub fn split(&self, test: usize) -> Result<(Self, Self), DatasetError> {
        let n = self.len();
        if test > n {
            return Err(DatasetError::Invalid(format!("cannot hold out {test} of {n} samples")));
        }
        let cut = n - test;
        let part = |a: usize, b: usize| -> Result<Self, DatasetError> {
            Ok(Self {
                features: self.features.slice_rows(a, b)?,
                labels: self.labels[a..b].to_vec(),
                classes: self.classes,
            })
        };
        Ok((part(0, cut)?, part(cut, n)?))
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Writes `features.ibrt` and `labels.ibrt` (int32) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_tensor(dir.join(FEATURES_FILE), &self.features)?;
        let labels = self.labels.iter().map(|&l| l as i32).collect();
        save_tensor(dir.join(LABELS_FILE), &Tensor::from_i32(vec![self.len()], labels)?)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save`]. `classes` defaults to
    /// one more than the largest label.
    pub fn load(dir: impl AsRef<Path>, classes: Option<usize>) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let features = load_tensor(dir.join(FEATURES_FILE))?;
        let raw = load_tensor(dir.join(LABELS_FILE))?;
        let raw = raw.as_i32()?;
        if let Some(&bad) = raw.iter().find(|&&l| l < 0) {
            return Err(DatasetError::Invalid(format!("negative label {bad}")));
        }
        let labels: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(features, labels, classes)
    }
}

/// `i % k` for each sample, shuffled.
fn balanced_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k.max(1)).collect();
    labels.shuffle(rng);
    labels
}
