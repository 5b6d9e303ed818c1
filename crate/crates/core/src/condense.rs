//! Dataset condensation by trajectory matching.
//!
//! Each outer iteration picks a supervision segment `(theta_s, theta_e)`,
//! unrolls a student from `theta_s` for `N` plain SGD steps on the synthetic
//! data, scores the normalised residual
//! `|theta_hat_N - theta_e|^2 / |theta_s - theta_e|^2` and moves the synthetic
//! inputs along a first-order meta-gradient. The student learning rate is
//! meta-learned alongside.
//!
//! Supervision is either Bezier surrogates (segments `(t_s, t_s + dt)` of the
//! curve, or of its chord for the linear ablation) or stored SGD trajectories
//! (epoch segments `(s, s + M)`).

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::eval::{auprc, column_moments, train_from_scratch, Dataset, EvalConfig};
use crate::linalg::{all_finite, axpy, dist, norm, norm_sq, sub, Matrix};
use crate::model::{Batch, MixedGradStrategy, Mlp, MlpConfig, Params};
use crate::rng::{child_rng, derive_seed, rng_from, Rng};
use crate::surrogate::BezierSurrogate;
use crate::teacher::Trajectory;

const INIT_STREAM: u64 = 0x1417_5E7;
const SEGMENT_STREAM: u64 = 0x5E6;
const UNROLL_STREAM: u64 = 0x0B47C;
const SELECTION_STREAM: u64 = 0x5E1EC7;
/// Attempts at drawing a non-degenerate segment before giving up.
const SEGMENT_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CondenseMethod {
    /// Match segments of fitted Bezier surrogates.
    Btm,
    /// Match epoch segments of stored SGD trajectories.
    Mtt,
    /// Match segments of the surrogates' endpoint chords.
    Linear,
}

impl CondenseMethod {
    pub fn name(self) -> &'static str {
        match self {
            CondenseMethod::Btm => "btm",
            CondenseMethod::Mtt => "mtt",
            CondenseMethod::Linear => "linear",
        }
    }

    pub fn default_inner_steps(self) -> usize {
        match self {
            CondenseMethod::Mtt => 60,
            CondenseMethod::Btm | CondenseMethod::Linear => 30,
        }
    }
}

impl fmt::Display for CondenseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CondenseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "btm" => Ok(CondenseMethod::Btm),
            "mtt" => Ok(CondenseMethod::Mtt),
            "linear" => Ok(CondenseMethod::Linear),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected btm, mtt or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Class-balanced real training samples.
    Real,
    /// Draws from per-class diagonal Gaussians matching the class moments.
    RandomGaussian,
}

/// Learnable inputs with fixed, class-balanced hard labels: `ipc` rows of
/// class 0 followed by `ipc` rows of class 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub ipc: usize,
    /// `None` when loaded from disk.
    pub init_mode: Option<InitMode>,
}

impl SyntheticDataset {
    pub fn initialize(real: &Dataset, ipc: usize, mode: InitMode, seed: u64) -> Result<Self> {
        if ipc == 0 {
            return Err(Error::invalid("ipc must be at least 1"));
        }
        let d = real.dim();
        let mut rng = child_rng(seed, INIT_STREAM);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * ipc);
        for label in [0.0, 1.0] {
            let idx = real.class_indices(label);
            match mode {
                InitMode::Real => {
                    if idx.len() < ipc {
                        return Err(Error::invalid(format!(
                            "class {label} has {} samples, ipc = {ipc}",
                            idx.len()
                        )));
                    }
                    for &i in idx.choose_multiple(&mut rng, ipc) {
                        rows.push(real.x().row(i).to_vec());
                    }
                }
                InitMode::RandomGaussian => {
                    if idx.is_empty() {
                        return Err(Error::invalid(format!("class {label} is empty")));
                    }
                    let (mean, std) = column_moments(idx.iter().map(|&i| real.x().row(i)), d);
                    for _ in 0..ipc {
                        rows.push(
                            (0..d)
                                .map(|j| {
                                    Normal::new(mean[j], std[j])
                                        .expect("finite moments")
                                        .sample(&mut rng)
                                })
                                .collect(),
                        );
                    }
                }
            }
        }
        let y = (0..2 * ipc).map(|i| if i < ipc { 0.0 } else { 1.0 }).collect();
        Ok(SyntheticDataset {
            x: Matrix::from_rows(&rows)?,
            y,
            ipc,
            init_mode: Some(mode),
        })
    }

    pub fn from_dataset(data: Dataset) -> Result<Self> {
        let n_pos = data.n_pos();
        if data.is_empty() || 2 * n_pos != data.len() {
            return Err(Error::invalid("synthetic data must be class-balanced"));
        }
        let (x, y) = data.into_parts();
        Ok(SyntheticDataset {
            x,
            y,
            ipc: n_pos,
            init_mode: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset::new(self.x.clone(), self.y.clone()).expect("labels are binary")
    }

    /// Written in the `BTMD` dataset format.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dataset().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dataset(Dataset::load(path)?)
    }
}

/// The random-subset baseline: the same class-balanced real draw the `real`
/// initialisation starts from.
pub fn random_subset(real: &Dataset, ipc: usize, seed: u64) -> Result<Dataset> {
    Ok(SyntheticDataset::initialize(real, ipc, InitMode::Real, seed)?.to_dataset())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondenseConfig {
    pub method: CondenseMethod,
    pub ipc: usize,
    pub init_mode: InitMode,
    /// Student steps per outer iteration; `None` uses 30 for surrogate
    /// methods and 60 for `mtt`.
    pub inner_steps: Option<usize>,
    /// Initial student learning rate.
    pub student_lr: f64,
    /// Meta-learn the student learning rate.
    pub learn_student_lr: bool,
    pub student_lr_lr: f64,
    pub student_lr_momentum: f64,
    /// Lower bound on the meta-learned student learning rate.
    pub student_lr_floor: f64,
    /// Upper bound on the meta-learned student learning rate.
    pub student_lr_ceiling: f64,
    /// Largest factor by which one iteration may grow or shrink the student
    /// learning rate.
    pub student_lr_step_factor: f64,
    /// Step size on the synthetic inputs. The standardized tabular inputs
    /// here need a far smaller step than image pixels.
    pub meta_lr: f64,
    pub meta_momentum: f64,
    /// Synthetic mini-batch size; `None` uses `max(2 ipc, 256)`, capped at
    /// the synthetic set size.
    pub batch_size: Option<usize>,
    /// Curve segment length for surrogate methods.
    pub segment_length: f64,
    /// Draw `(t_s, t_e)` as an unconstrained sorted pair instead of fixed length.
    pub free_pairs: bool,
    /// Epochs spanned by one `mtt` segment.
    pub expert_epochs: usize,
    pub max_iters: usize,
    /// Validation cadence in outer iterations; 0 evaluates only the final state.
    pub eval_every: usize,
    /// Fresh models averaged per validation check.
    pub selection_seeds: usize,
    pub selection_eval: EvalConfig,
    pub mixed_grad: MixedGradStrategy,
    /// Set by the caller; not part of the serialized settings.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            method: CondenseMethod::Btm,
            ipc: 10,
            init_mode: InitMode::Real,
            inner_steps: None,
            student_lr: 0.01,
            learn_student_lr: true,
            student_lr_lr: 1e-4,
            student_lr_momentum: 0.5,
            student_lr_floor: 1e-6,
            student_lr_ceiling: 0.1,
            student_lr_step_factor: 2.0,
            meta_lr: 1.0,
            meta_momentum: 0.9,
            batch_size: None,
            segment_length: 0.2,
            free_pairs: false,
            expert_epochs: 5,
            max_iters: 2000,
            eval_every: 50,
            selection_seeds: 3,
            selection_eval: EvalConfig {
                epochs: 50,
                ..EvalConfig::default()
            },
            mixed_grad: MixedGradStrategy::default(),
            seed: 0,
        }
    }
}

impl CondenseConfig {
    pub fn inner_steps(&self) -> usize {
        self.inner_steps.unwrap_or_else(|| self.method.default_inner_steps())
    }

    pub fn batch_size(&self, n: usize) -> usize {
        self.batch_size.unwrap_or((2 * self.ipc).max(256)).min(n).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.ipc == 0 {
            return bad("condense.ipc must be >= 1");
        }
        if self.inner_steps() == 0 {
            return bad("condense.inner_steps must be >= 1");
        }
        if !(self.student_lr > 0.0) || !(self.meta_lr > 0.0) {
            return bad("condense learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.meta_momentum) || !(0.0..1.0).contains(&self.student_lr_momentum) {
            return bad("condense momenta must lie in [0, 1)");
        }
        if !(self.student_lr_lr >= 0.0) || !(self.student_lr_floor > 0.0) {
            return bad("condense.student_lr_lr must be >= 0 and student_lr_floor > 0");
        }
        if !(self.student_lr_floor <= self.student_lr && self.student_lr <= self.student_lr_ceiling) {
            return bad("condense.student_lr must lie in [student_lr_floor, student_lr_ceiling]");
        }
        if !(self.student_lr_step_factor >= 1.0) {
            return bad("condense.student_lr_step_factor must be >= 1");
        }
        if self.method != CondenseMethod::Mtt && !(self.segment_length > 0.0 && self.segment_length <= 1.0) {
            return bad("condense.segment_length must lie in (0, 1]");
        }
        if self.method == CondenseMethod::Mtt && self.expert_epochs == 0 {
            return bad("condense.expert_epochs must be >= 1");
        }
        if self.batch_size == Some(0) || self.selection_seeds == 0 {
            return bad("condense.batch_size and selection_seeds must be >= 1");
        }
        self.selection_eval.validate()
    }
}

/// `(t_s, t_s + dt)` with `t_s` uniform on `[0, 1 - dt]`.
pub fn sample_segment(rng: &mut Rng, dt: f64) -> (f64, f64) {
    let ts = rng.random::<f64>() * (1.0 - dt);
    (ts, (ts + dt).min(1.0))
}

/// An ordered pair of independent uniform times, redrawn until distinct.
pub fn sample_free_pair(rng: &mut Rng) -> (f64, f64) {
    loop {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        if a != b {
            return if a < b { (a, b) } else { (b, a) };
        }
    }
}

/// `|theta_hat - theta_e|^2 / |theta_s - theta_e|^2`.
pub fn btm_loss(theta_hat: &[f64], theta_s: &[f64], theta_e: &[f64]) -> Result<f64> {
    check_dim(theta_s.len(), theta_hat.len())?;
    check_dim(theta_s.len(), theta_e.len())?;
    let denom = norm_sq(&sub(theta_s, theta_e));
    if denom == 0.0 {
        return Err(Error::DegenerateSegment { gap: 0.0 });
    }
    Ok(norm_sq(&sub(theta_hat, theta_e)) / denom)
}

/// Everything the meta-gradient needs from one student unroll.
#[derive(Debug, Clone)]
pub struct UnrollTrace {
    /// `theta_0 = theta_start, ..., theta_N`.
    pub thetas: Vec<Params>,
    /// `g_n` evaluated at `thetas[n]` on `batches[n]`.
    pub gradients: Vec<Vec<f64>>,
    /// Synthetic row indices of each mini-batch.
    pub batches: Vec<Vec<usize>>,
    pub lr: f64,
}

impl UnrollTrace {
    pub fn start(&self) -> &Params {
        &self.thetas[0]
    }

    pub fn final_params(&self) -> &Params {
        self.thetas.last().expect("non-empty")
    }

    /// `delta = theta_N - theta_0`.
    pub fn displacement(&self) -> Vec<f64> {
        sub(self.final_params(), self.start())
    }

    pub fn gradient_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.start().len()];
        for g in &self.gradients {
            axpy(1.0, g, &mut s);
        }
        s
    }
}

/// `steps` plain SGD updates `theta <- theta - lr g_n` on synthetic
/// mini-batches. Batches are drawn without replacement within a pass over
/// the data and reshuffled between passes, from `seed`.
pub fn student_unroll(
    mlp: &Mlp,
    theta_start: &Params,
    x: &Matrix,
    y: &[f64],
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<UnrollTrace> {
    check_dim(mlp.param_count(), theta_start.len())?;
    check_dim(x.rows(), y.len())?;
    let n = x.rows();
    if n == 0 || batch_size == 0 {
        return Err(Error::invalid("student unroll needs data and batch_size >= 1"));
    }
    let b = batch_size.min(n);
    let full = Batch::new(x.clone(), y.to_vec())?;
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut thetas = Vec::with_capacity(steps + 1);
    let mut gradients = Vec::with_capacity(steps);
    let mut batches = Vec::with_capacity(steps);
    let mut theta = theta_start.clone();
    thetas.push(theta.clone());
    for step in 0..steps {
        if cursor + b > n {
            order.sort_unstable();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = order[cursor..cursor + b].to_vec();
        cursor += b;
        let g = mlp.grad_params(&theta, &full.select(&rows))?;
        if !all_finite(&g) {
            return Err(Error::numerical(format!("non-finite student gradient at step {step}")));
        }
        axpy(-lr, &g, &mut theta);
        if !all_finite(&theta) {
            return Err(Error::numerical(format!("non-finite student parameters at step {step}")));
        }
        thetas.push(theta.clone());
        gradients.push(g);
        batches.push(rows);
    }
    Ok(UnrollTrace {
        thetas,
        gradients,
        batches,
        lr,
    })
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// Approximate `dL / dX`, `n x d`; rows never drawn are zero.
    pub x_grad: Matrix,
    /// `g_L = 2 (theta_hat - theta_e) / |theta_s - theta_e|^2`
    pub g_l: Vec<f64>,
    pub loss: f64,
    /// `<-sum_n g_n, g_L>`, the first-order derivative in the student learning rate.
    pub lr_grad: f64,
}

/// First-order meta-gradient of the normalised matching loss.
///
/// The student gradients are treated as constants except for their direct
/// dependence on the batch inputs:
/// `dL/dX ~ -lr sum_n grad_X <g_n(theta_n; B_n), g_L>`, scattered from each
/// batch back to its synthetic rows.
pub fn meta_gradient(
    mlp: &Mlp,
    trace: &UnrollTrace,
    theta_s: &[f64],
    theta_e: &[f64],
    x: &Matrix,
    y: &[f64],
    strategy: MixedGradStrategy,
) -> Result<MetaGradient> {
    let hat = trace.final_params();
    let loss = btm_loss(hat, theta_s, theta_e)?;
    let denom = norm_sq(&sub(theta_s, theta_e));
    let g_l: Vec<f64> = hat.iter().zip(theta_e).map(|(a, b)| 2.0 * (a - b) / denom).collect();

    let full = Batch::new(x.clone(), y.to_vec())?;
    let parts: Vec<Matrix> = trace
        .batches
        .par_iter()
        .enumerate()
        .map(|(n, rows)| mlp.mixed_grad(&trace.thetas[n], &full.select(rows), &g_l, strategy))
        .collect::<Result<_>>()?;

    let mut x_grad = Matrix::zeros(x.rows(), x.cols());
    for (rows, part) in trace.batches.iter().zip(&parts) {
        for (k, &r) in rows.iter().enumerate() {
            axpy(-trace.lr, part.row(k), x_grad.row_mut(r));
        }
    }
    let lr_grad = -crate::linalg::dot(&trace.gradient_sum(), &g_l);
    Ok(MetaGradient {
        x_grad,
        g_l,
        loss,
        lr_grad,
    })
}

/// Supervision handed to [`condense`]; must agree with the configured method.
#[derive(Debug, Clone, Copy)]
pub enum CondenseSupervision<'a> {
    Surrogates(&'a [BezierSurrogate]),
    Trajectories(&'a [Trajectory]),
}

/// The segment matched in one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentChoice {
    pub trajectory: usize,
    /// Curve time or epoch index.
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    choice: SegmentChoice,
    theta_s: Params,
    theta_e: Params,
}

fn degenerate(theta_s: &[f64], theta_e: &[f64]) -> bool {
    dist(theta_s, theta_e) < 1e-12 * (1.0 + norm(theta_s))
}

fn draw_segment(
    supervision: CondenseSupervision<'_>,
    cfg: &CondenseConfig,
    rng: &mut Rng,
) -> Result<Segment> {
    let mut last_gap = 0.0;
    for _ in 0..SEGMENT_RETRIES {
        let seg = match supervision {
            CondenseSupervision::Surrogates(surrs) => {
                let m = rng.random_range(0..surrs.len());
                let (ts, te) = if cfg.free_pairs {
                    sample_free_pair(rng)
                } else {
                    sample_segment(rng, cfg.segment_length)
                };
                let s = &surrs[m];
                let curve = if cfg.method == CondenseMethod::Linear {
                    s.linearized()
                } else {
                    s.clone()
                };
                Segment {
                    choice: SegmentChoice {
                        trajectory: m,
                        start: ts,
                        end: te,
                    },
                    theta_s: Params(curve.eval_unchecked(ts)),
                    theta_e: Params(curve.eval_unchecked(te)),
                }
            }
            CondenseSupervision::Trajectories(trajs) => {
                let m = rng.random_range(0..trajs.len());
                let t = &trajs[m];
                let s = rng.random_range(0..=t.epochs() - cfg.expert_epochs);
                let e = s + cfg.expert_epochs;
                Segment {
                    choice: SegmentChoice {
                        trajectory: m,
                        start: s as f64,
                        end: e as f64,
                    },
                    theta_s: t.checkpoints[s].clone(),
                    theta_e: t.checkpoints[e].clone(),
                }
            }
        };
        if !degenerate(&seg.theta_s, &seg.theta_e) {
            return Ok(seg);
        }
        last_gap = dist(&seg.theta_s, &seg.theta_e);
    }
    Err(Error::DegenerateSegment { gap: last_gap })
}

/// One row of the condensation trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondenseRecord {
    /// 1-based outer iteration.
    pub iter: usize,
    pub segment: SegmentChoice,
    pub loss: f64,
    /// Frobenius norm of the synthetic-input meta-gradient.
    pub grad_norm: f64,
    /// Student learning rate used in this iteration.
    pub student_lr: f64,
    /// Mean validation AUPRC of fresh models trained on the inputs after this
    /// iteration's update, when a validation check ran.
    pub eval_auprc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CondenseTrace {
    pub records: Vec<CondenseRecord>,
    /// Iteration of the returned synthetic set (0 = initialisation).
    pub best_iter: usize,
    pub best_val_auprc: Option<f64>,
}

impl CondenseTrace {
    /// Columns `iter,loss,grad_norm,eval_auprc`, then segment and learning
    /// rate details. Missing evaluations are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,grad_norm,eval_auprc,trajectory,start,end,student_lr\n");
        for r in &self.records {
            let eval = r.eval_auprc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                r.loss,
                r.grad_norm,
                eval,
                r.segment.trajectory,
                r.segment.start,
                r.segment.end,
                r.student_lr
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CondenseOutput {
    /// The synthetic set with the best validation AUPRC (the final state
    /// when no validation check ran).
    pub synthetic: SyntheticDataset,
    pub final_synthetic: SyntheticDataset,
    pub trace: CondenseTrace,
    pub student_lr: f64,
}

/// A failed run keeps the trace recorded up to the failure.
#[derive(Debug)]
pub struct CondenseError {
    pub error: Error,
    pub trace: CondenseTrace,
}

impl fmt::Display for CondenseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.trace.records.len())
    }
}

impl std::error::Error for CondenseError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<CondenseError> for Error {
    fn from(e: CondenseError) -> Self {
        e.error
    }
}

/// Mean validation AUPRC of `seeds` fresh models trained on `x`.
fn selection_score(
    x: &Matrix,
    y: &[f64],
    val: &Dataset,
    mlp: &Mlp,
    cfg: &CondenseConfig,
) -> Result<f64> {
    let data = Dataset::new(x.clone(), y.to_vec())?;
    let base = derive_seed(cfg.seed, SELECTION_STREAM);
    let scores: Vec<f64> = (0..cfg.selection_seeds)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let theta = match train_from_scratch(&data, &mlp.config, &cfg.selection_eval, derive_seed(base, k as u64)) {
                Ok(t) => t,
                Err(Error::TrainingDiverged { .. }) => return Ok(0.0),
                Err(e) => return Err(e),
            };
            let s = mlp.logits(&theta, val.x())?;
            if !all_finite(&s) {
                return Ok(0.0);
            }
            auprc(&s, val.y())
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Runs `cfg.max_iters` outer iterations of trajectory matching and returns
/// the synthetic set with the best validation AUPRC.
///
/// Synthetic inputs follow heavy-ball descent (`v <- mu v + grad`,
/// `X <- X - meta_lr v`); the student learning rate follows the same rule
/// on `<-sum g_n, g_L>`, clamped to `[student_lr_floor, student_lr_ceiling]`
/// and to at most a `student_lr_step_factor` change per iteration.
pub fn condense(
    train: &Dataset,
    val: &Dataset,
    supervision: CondenseSupervision<'_>,
    model_cfg: &MlpConfig,
    cfg: &CondenseConfig,
) -> std::result::Result<CondenseOutput, CondenseError> {
    let mut trace = CondenseTrace::default();
    let fail = |error: Error, trace: &CondenseTrace| CondenseError {
        error,
        trace: trace.clone(),
    };
    let init = check_setup(train, supervision, model_cfg, cfg)
        .and_then(|_| SyntheticDataset::initialize(train, cfg.ipc, cfg.init_mode, cfg.seed))
        .map_err(|e| fail(e, &trace))?;
    let mlp = Mlp::new(*model_cfg).map_err(|e| fail(e, &trace))?;

    let mut synth = init.clone();
    let mut best = init.clone();
    let mut best_score: Option<f64> = None;
    let mut velocity = Matrix::zeros(synth.len(), synth.dim());
    let mut lr = cfg.student_lr;
    let mut lr_velocity = 0.0;
    let steps = cfg.inner_steps();
    let b = cfg.batch_size(synth.len());
    let mut seg_rng = child_rng(cfg.seed, SEGMENT_STREAM);

    for iter in 1..=cfg.max_iters {
        let step = (|| -> Result<CondenseRecord> {
            let seg = draw_segment(supervision, cfg, &mut seg_rng)?;
            let unroll_seed = derive_seed(derive_seed(cfg.seed, UNROLL_STREAM), iter as u64);
            let tr = student_unroll(&mlp, &seg.theta_s, &synth.x, &synth.y, steps, lr, b, unroll_seed)?;
            let mg = meta_gradient(&mlp, &tr, &seg.theta_s, &seg.theta_e, &synth.x, &synth.y, cfg.mixed_grad)?;
            if !mg.loss.is_finite() || !mg.x_grad.is_finite() || !mg.lr_grad.is_finite() {
                return Err(Error::numerical(format!("non-finite meta-gradient at iteration {iter}")));
            }
            for (v, g) in velocity.data_mut().iter_mut().zip(mg.x_grad.data()) {
                *v = cfg.meta_momentum * *v + g;
            }
            axpy(-cfg.meta_lr, velocity.data(), synth.x.data_mut());
            if !synth.x.is_finite() {
                return Err(Error::numerical(format!("non-finite synthetic inputs at iteration {iter}")));
            }
            let used_lr = lr;
            if cfg.learn_student_lr {
                lr_velocity = cfg.student_lr_momentum * lr_velocity + mg.lr_grad;
                let f = cfg.student_lr_step_factor;
                lr = (lr - cfg.student_lr_lr * lr_velocity)
                    .clamp(lr / f, lr * f)
                    .clamp(cfg.student_lr_floor, cfg.student_lr_ceiling);
            }
            let evaluate = (cfg.eval_every > 0 && iter % cfg.eval_every == 0) || iter == cfg.max_iters;
            let eval_auprc = if evaluate {
                Some(selection_score(&synth.x, &synth.y, val, &mlp, cfg)?)
            } else {
                None
            };
            Ok(CondenseRecord {
                iter,
                segment: seg.choice,
                loss: mg.loss,
                grad_norm: mg.x_grad.frobenius_norm(),
                student_lr: used_lr,
                eval_auprc,
            })
        })();
        let record = step.map_err(|e| fail(e, &trace))?;
        if let Some(score) = record.eval_auprc {
            if best_score.is_none_or(|b| score > b) {
                best_score = Some(score);
                best = synth.clone();
                trace.best_iter = iter;
            }
        }
        trace.records.push(record);
    }
    trace.best_val_auprc = best_score;
    Ok(CondenseOutput {
        synthetic: best,
        final_synthetic: synth,
        trace,
        student_lr: lr,
    })
}

fn check_setup(
    train: &Dataset,
    supervision: CondenseSupervision<'_>,
    model_cfg: &MlpConfig,
    cfg: &CondenseConfig,
) -> Result<()> {
    cfg.validate()?;
    check_dim(model_cfg.input_dim, train.dim())?;
    let p = model_cfg.param_count();
    match (cfg.method, supervision) {
        (CondenseMethod::Btm | CondenseMethod::Linear, CondenseSupervision::Surrogates(s)) => {
            if s.is_empty() {
                return Err(Error::invalid("no surrogates supplied"));
            }
            for surr in s {
                check_dim(p, surr.dim())?;
            }
        }
        (CondenseMethod::Mtt, CondenseSupervision::Trajectories(t)) => {
            if t.is_empty() {
                return Err(Error::invalid("no trajectories supplied"));
            }
            for traj in t {
                check_dim(p, traj.dim())?;
                if traj.epochs() < cfg.expert_epochs {
                    return Err(Error::invalid(format!(
                        "trajectory with {} epochs is shorter than expert_epochs = {}",
                        traj.epochs(),
                        cfg.expert_epochs
                    )));
                }
            }
        }
        (m, _) => {
            return Err(Error::Config(format!(
                "method {m} does not match the supplied supervision"
            )))
        }
    }
    Ok(())
}
