//! Teacher training on real data and trajectory persistence.
//!
//! A [`Trajectory`] stores one checkpoint per epoch boundary, starting with
//! the initialisation `theta_0`, so `T` epochs give `T + 1` checkpoints.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Dataset;
use crate::io::{read_file, Decoder, Encoder};
use crate::linalg::{all_finite, axpy};
use crate::model::{Mlp, MlpConfig, Params};
use crate::rng::{child_rng, derive_seed};

const TRAJECTORY_MAGIC: &[u8; 4] = b"BTMT";
/// magic + version + T + p
pub const TRAJECTORY_HEADER_BYTES: u64 = 24;

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5417;
const DROPOUT_STREAM: u64 = 0xD209;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            lr: 0.02,
            momentum: 0.9,
            epochs: 100,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(Error::invalid(
                "teacher config needs lr > 0, momentum in [0, 1), batch_size >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<Params>,
    /// Present for trajectories produced in-process; the binary format keeps
    /// only the checkpoints.
    pub seed: Option<u64>,
    pub final_train_loss: Option<f64>,
}

impl Trajectory {
    pub fn new(checkpoints: Vec<Params>) -> Result<Self> {
        let Some(first) = checkpoints.first() else {
            return Err(Error::invalid("trajectory needs at least one checkpoint"));
        };
        let p = first.len();
        for c in &checkpoints {
            crate::error::check_dim(p, c.len())?;
        }
        Ok(Trajectory {
            checkpoints,
            seed: None,
            final_train_loss: None,
        })
    }

    /// Number of epochs `T`.
    pub fn epochs(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.checkpoints[0].len()
    }

    pub fn first(&self) -> &Params {
        &self.checkpoints[0]
    }

    pub fn last(&self) -> &Params {
        self.checkpoints.last().expect("non-empty")
    }

    /// Piecewise-linear interpolation with checkpoint `tau` placed at
    /// `t = tau / T`.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        interpolate_path(&self.checkpoints, t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(TRAJECTORY_MAGIC);
        enc.u64(self.epochs() as u64);
        enc.u64(self.dim() as u64);
        for (epoch, c) in self.checkpoints.iter().enumerate() {
            enc.u64(epoch as u64);
            enc.f64s(c);
        }
        enc.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf);
        dec.header(TRAJECTORY_MAGIC)?;
        let t = dec.len(8)?;
        let p = dec.len(8)?;
        let mut checkpoints = Vec::with_capacity(t + 1);
        for expected in 0..=t as u64 {
            let at = dec.offset();
            let epoch = dec.u64()?;
            if epoch != expected {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("checkpoint epoch {epoch}, expected {expected}"),
                });
            }
            checkpoints.push(Params(dec.f64s(p)?));
        }
        dec.finish()?;
        Trajectory::new(checkpoints)
    }

    /// `BTMT` v1: magic, u32 version, u64 T, u64 p, then `T + 1` records of
    /// u64 epoch index followed by `p` f64. All little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut enc = Encoder::default();
        enc.bytes(&self.to_bytes());
        enc.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn save_trajectory(t: &Trajectory, path: &Path) -> Result<()> {
    t.save(path)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::load(path)
}

pub(crate) fn interpolate_path(points: &[Params], t: f64) -> Vec<f64> {
    let segs = points.len() - 1;
    if segs == 0 {
        return points[0].to_vec();
    }
    let pos = t.clamp(0.0, 1.0) * segs as f64;
    let i = (pos.floor() as usize).min(segs - 1);
    let frac = pos - i as f64;
    if frac == 0.0 {
        return points[i].to_vec();
    }
    if frac == 1.0 {
        return points[i + 1].to_vec();
    }
    points[i]
        .iter()
        .zip(points[i + 1].iter())
        .map(|(a, b)| (1.0 - frac) * a + frac * b)
        .collect()
}

/// Plain mini-batch SGD with optional heavy-ball momentum
/// (`v <- mu v + g`, `theta <- theta - lr v`).
///
/// Each epoch visits the data in a Fisher-Yates order seeded by
/// `derive_seed(seed, epoch)`. `on_epoch(epoch, theta)` runs after every
/// completed epoch (1-based).
pub(crate) fn run_sgd(
    mlp: &Mlp,
    data: &Dataset,
    lr: f64,
    momentum: f64,
    epochs: usize,
    batch_size: usize,
    init: Params,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &Params),
) -> Result<Params> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut theta = init;
    let mut velocity = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = batch_size.min(data.len());
    let shuffle_seed = derive_seed(seed, SHUFFLE_STREAM);
    let dropout_seed = derive_seed(seed, DROPOUT_STREAM);
    for epoch in 1..=epochs {
        order.sort_unstable();
        order.shuffle(&mut child_rng(shuffle_seed, epoch as u64));
        let mut drop_rng = child_rng(dropout_seed, epoch as u64);
        for chunk in order.chunks(bs) {
            let batch = data.batch(chunk);
            let (loss, grad) = mlp.grad_params_dropout(&theta, &batch, &mut drop_rng)?;
            if !loss.is_finite() || !all_finite(&grad) {
                return Err(Error::TrainingDiverged { epoch });
            }
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = momentum * *v + g;
            }
            axpy(-lr, &velocity, &mut theta);
        }
        if !all_finite(&theta) {
            return Err(Error::TrainingDiverged { epoch });
        }
        on_epoch(epoch, &theta);
    }
    Ok(theta)
}

/// Trains one teacher from the initialisation derived from `cfg.seed`.
pub fn train_teacher(data: &Dataset, cfg: &TeacherConfig, model_cfg: &MlpConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mlp = Mlp::new(*model_cfg)?;
    if data.is_empty() {
        return Err(Error::invalid("teacher data is empty"));
    }
    crate::error::check_dim(model_cfg.input_dim, data.dim())?;
    let theta0 = model_cfg.init_params(derive_seed(cfg.seed, INIT_STREAM));
    let mut checkpoints = vec![theta0.clone()];
    let last = run_sgd(
        &mlp,
        data,
        cfg.lr,
        cfg.momentum,
        cfg.epochs,
        cfg.batch_size,
        theta0,
        cfg.seed,
        |_, theta| checkpoints.push(theta.clone()),
    )?;
    let final_loss = mlp.loss(&last, data.as_batch())?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: cfg.epochs });
    }
    Ok(Trajectory {
        checkpoints,
        seed: Some(cfg.seed),
        final_train_loss: Some(final_loss),
    })
}

/// Trains `count` independent teachers in parallel; teacher `m` uses seed
/// `derive_seed(cfg.seed, m)`. Results are in index order regardless of
/// scheduling.
pub fn train_teachers(
    data: &Dataset,
    cfg: &TeacherConfig,
    model_cfg: &MlpConfig,
    count: usize,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .into_par_iter()
        .map(|m| {
            let run = TeacherConfig {
                seed: teacher_seed(cfg.seed, m),
                ..*cfg
            };
            train_teacher(data, &run, model_cfg)
        })
        .collect()
}

pub fn teacher_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, index as u64)
}

/// Parameter-vector counts for storing `M` trajectories either as full SGD
/// checkpoint sequences or as Bezier surrogates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub trajectories: usize,
    pub epochs: usize,
    pub params: usize,
    pub sgd_vectors: usize,
    pub bezier_vectors: usize,
    pub ratio: f64,
    pub sgd_bytes: u64,
    pub bezier_bytes: u64,
}

pub fn storage_report(trajectories: usize, epochs: usize, params: usize) -> StorageReport {
    let sgd_vectors = (epochs + 1) * trajectories;
    let bezier_vectors = 3 * trajectories;
    let p = params as u64;
    let m = trajectories as u64;
    StorageReport {
        trajectories,
        epochs,
        params,
        sgd_vectors,
        bezier_vectors,
        ratio: (epochs + 1) as f64 / 3.0,
        sgd_bytes: m * (TRAJECTORY_HEADER_BYTES + (epochs as u64 + 1) * (8 + 8 * p)),
        bezier_bytes: m * (crate::surrogate::SURROGATE_HEADER_BYTES + 3 * 8 * p),
    }
}

impl fmt::Display for StorageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "trajectories M = {}, epochs T = {}, parameters p = {}",
            self.trajectories, self.epochs, self.params
        )?;
        writeln!(f, "sgd checkpoint vectors:    {}", self.sgd_vectors)?;
        writeln!(f, "bezier surrogate vectors:  {}", self.bezier_vectors)?;
        writeln!(f, "sgd bytes:                 {}", self.sgd_bytes)?;
        writeln!(f, "bezier bytes:              {}", self.bezier_bytes)?;
        write!(f, "storage ratio:             {:.2}", self.ratio)
    }
}
