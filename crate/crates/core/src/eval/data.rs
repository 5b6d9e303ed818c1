//! Labelled datasets, the synthetic imbalanced benchmark generator and the
//! `BTMD` dataset file format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, Decoder, Encoder};
use crate::linalg::{orthonormalize, Matrix};
use crate::model::Batch;
use crate::rng::{child_rng, Rng};

const DATASET_MAGIC: &[u8; 4] = b"BTMD";

/// A labelled set of standardized feature rows with hard binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Batch,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        Ok(Dataset {
            samples: Batch::new(x, y)?,
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.samples.x
    }

    pub fn y(&self) -> &[f64] {
        &self.samples.y
    }

    pub fn as_batch(&self) -> &Batch {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.x.cols()
    }

    pub fn n_pos(&self) -> usize {
        self.y().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.n_pos() as f64 / self.len().max(1) as f64
    }

    /// Row indices with the given label, in order.
    pub fn class_indices(&self, label: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y()[i] == label).collect()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(rows),
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        self.samples.select(rows)
    }

    pub fn into_parts(self) -> (Matrix, Vec<f64>) {
        (self.samples.x, self.samples.y)
    }

    /// `BTMD` v1: magic, u32 version, u64 n, u64 d, n*d f64 features
    /// (row-major), n u8 labels. All little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(DATASET_MAGIC);
        enc.u64(self.len() as u64);
        enc.u64(self.dim() as u64);
        enc.f64s(self.x().data());
        let labels: Vec<u8> = self.y().iter().map(|&v| v as u8).collect();
        enc.bytes(&labels);
        enc.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf);
        dec.header(DATASET_MAGIC)?;
        let n = dec.len(9)?;
        let d = dec.len(0)?;
        let features = dec.f64s(n.checked_mul(d).ok_or_else(|| Error::Format {
            offset: dec.offset(),
            msg: "n * d overflows".into(),
        })?)?;
        let label_offset = dec.offset();
        let labels = dec.bytes(n)?;
        if let Some(i) = labels.iter().position(|&b| b > 1) {
            return Err(Error::Format {
                offset: label_offset + i as u64,
                msg: format!("label byte {} is not 0 or 1", labels[i]),
            });
        }
        let y = labels.iter().map(|&b| b as f64).collect();
        dec.finish()?;
        let x = Matrix::new(n, d, features).map_err(|e| Error::Format {
            offset: 24,
            msg: e.to_string(),
        })?;
        Dataset::new(x, y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut enc = Encoder::default();
        enc.bytes(&self.to_bytes());
        enc.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Parameters of the synthetic imbalanced benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n: usize,
    pub d: usize,
    /// Fraction of positive samples, in `(0, 0.5]`.
    pub prevalence: f64,
    /// 0 separates the class components by six standard deviations; 1 makes
    /// the class-conditional distributions identical.
    pub overlap: f64,
    /// Arrange the four mixture components as an XOR pattern.
    pub nonlinearity: bool,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            n: 4000,
            d: 20,
            prevalence: 0.05,
            overlap: 0.5,
            nonlinearity: true,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn n_pos(&self) -> usize {
        (self.prevalence * self.n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::InvalidSpec(format!("n = {} < 100", self.n)));
        }
        if self.d < 2 {
            return Err(Error::InvalidSpec(format!("d = {} < 2", self.d)));
        }
        if !(self.prevalence > 0.0 && self.prevalence <= 0.5) {
            return Err(Error::InvalidSpec(format!(
                "prevalence {} outside (0, 0.5]",
                self.prevalence
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InvalidSpec(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        if self.prevalence * (self.n as f64) < 10.0 {
            return Err(Error::InvalidSpec(format!(
                "prevalence * n = {} < 10 positives",
                self.prevalence * self.n as f64
            )));
        }
        Ok(())
    }
}

/// Stratified 65/15/20 split of a generated benchmark.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Global positive fraction before splitting.
    pub prevalence: f64,
}

pub const SPLIT_FRACTIONS: [f64; 3] = [0.65, 0.15, 0.20];

/// Class-conditional Gaussian mixture (two unit-covariance components per
/// class), rotated by a random orthogonal matrix, split per class 65/15/20 and
/// standardized on train statistics.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d);
    let n_pos = spec.n_pos();
    let sep = 3.0 * (1.0 - spec.overlap);

    // component means in the first two latent coordinates: [class][component]
    let means: [[[f64; 2]; 2]; 2] = if spec.nonlinearity {
        [[[sep, -sep], [-sep, sep]], [[sep, sep], [-sep, -sep]]]
    } else {
        [[[-sep, 1.5], [-sep, -1.5]], [[sep, 1.5], [sep, -1.5]]]
    };

    let mut rng = child_rng(spec.seed, 0);
    let rotation = random_rotation(d, &mut rng);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i < n_pos);
        let comp = i % 2;
        let mut z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        z[0] += means[class][comp][0];
        z[1] += means[class][comp][1];
        let x = rotation.mul_vec(&z)?;
        rows.push(x);
        labels.push(class as f64);
    }

    let mut split_rng = child_rng(spec.seed, 1);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in [1.0, 0.0] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut split_rng);
        let n_c = idx.len() as f64;
        let n_train = (SPLIT_FRACTIONS[0] * n_c).round() as usize;
        let n_val = (SPLIT_FRACTIONS[1] * n_c).round() as usize;
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in parts.iter_mut() {
        p.shuffle(&mut split_rng);
    }

    let (mean, std) = column_moments(parts[0].iter().map(|&i| rows[i].as_slice()), d);
    let build = |idx: &[usize]| -> Result<Dataset> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(rows[i].iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]));
        }
        Dataset::new(
            Matrix::new(idx.len(), d, data)?,
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };

    Ok(SplitDataset {
        train: build(&parts[0])?,
        val: build(&parts[1])?,
        test: build(&parts[2])?,
        prevalence: n_pos as f64 / n as f64,
    })
}

fn random_rotation(d: usize, rng: &mut Rng) -> Matrix {
    loop {
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
            .collect();
        let q = orthonormalize(&cols, 1e-8);
        if q.len() == d {
            return Matrix::from_columns(d, &q).expect("finite gaussian columns");
        }
    }
}

/// Per-column mean and standard deviation (population); zero deviations are
/// replaced by one.
pub fn column_moments<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        count += 1;
    }
    let c = count.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= c);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / c).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}
