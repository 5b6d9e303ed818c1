//! Quadratic Bezier surrogates `Phi(t) = (1-t)^2 theta_0 + 2t(1-t) phi + t^2 theta_T`
//! in parameter space.
//!
//! Besides evaluation this module fits the control point `phi` by descending
//! the mean loss along the path, and measures the curve against its endpoint
//! chord `c(t) = (1-t) theta_0 + t theta_T` and against the piecewise-linear
//! teacher path it replaces.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::eval::Dataset;
use crate::io::{read_file, Decoder, Encoder};
use crate::linalg::{all_finite, axpy, dist, norm, norm_sq, sub, Matrix};
use crate::model::{Mlp, Params};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::teacher::{interpolate_path, Trajectory};

const SURROGATE_MAGIC: &[u8; 4] = b"BTMB";
/// magic + version + p
pub const SURROGATE_HEADER_BYTES: u64 = 16;
/// Points of the uniform grid used for every supremum over `t`.
pub const SUP_GRID_POINTS: usize = 1001;
/// Points of the uniform grid used for reported mean path losses.
pub const PATH_LOSS_GRID_POINTS: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct BezierSurrogate {
    pub theta0: Params,
    pub control: Params,
    pub theta_t: Params,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            what: "curve parameter t",
            detail: format!("{t} not in [0, 1]"),
        });
    }
    Ok(())
}

fn uniform_grid(points: usize) -> impl Iterator<Item = f64> {
    let last = (points - 1) as f64;
    (0..points).map(move |k| k as f64 / last)
}

impl BezierSurrogate {
    pub fn new(theta0: Params, control: Params, theta_t: Params) -> Result<Self> {
        check_dim(theta0.len(), control.len())?;
        check_dim(theta0.len(), theta_t.len())?;
        if !(all_finite(&theta0) && all_finite(&control) && all_finite(&theta_t)) {
            return Err(Error::invalid("surrogate has non-finite entries"));
        }
        Ok(BezierSurrogate {
            theta0,
            control,
            theta_t,
        })
    }

    /// The straight line: control point at the endpoint midpoint.
    pub fn linear(theta0: Params, theta_t: Params) -> Result<Self> {
        let mid = midpoint(&theta0, &theta_t);
        Self::new(theta0, mid, theta_t)
    }

    /// Same endpoints with the control point moved to the midpoint.
    pub fn linearized(&self) -> Self {
        BezierSurrogate {
            theta0: self.theta0.clone(),
            control: midpoint(&self.theta0, &self.theta_t),
            theta_t: self.theta_t.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    pub fn eval(&self, t: f64) -> Result<Params> {
        check_t(t)?;
        Ok(Params(self.eval_unchecked(t)))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> Vec<f64> {
        let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
        self.theta0
            .iter()
            .zip(self.control.iter())
            .zip(self.theta_t.iter())
            .map(|((x0, p), xt)| a * x0 + b * p + c * xt)
            .collect()
    }

    /// `Phi(t_e) - Phi(t_s)` in closed form:
    /// `(t_e - t_s)(theta_T - theta_0) + (t_e - t_s)(1 - t_s - t_e)(2 phi - theta_0 - theta_T)`.
    pub fn segment_displacement(&self, t_s: f64, t_e: f64) -> Result<Vec<f64>> {
        check_t(t_s)?;
        check_t(t_e)?;
        if t_s >= t_e {
            return Err(Error::Domain {
                what: "segment",
                detail: format!("t_s = {t_s} must be below t_e = {t_e}"),
            });
        }
        let len = t_e - t_s;
        let bend = len * (1.0 - t_s - t_e);
        Ok(self
            .theta0
            .iter()
            .zip(self.control.iter())
            .zip(self.theta_t.iter())
            .map(|((x0, p), xt)| len * (xt - x0) + bend * (2.0 * p - x0 - xt))
            .collect())
    }

    /// `theta_0 - 2 phi + theta_T`; the curve's second derivative is twice this.
    pub fn bend(&self) -> Vec<f64> {
        self.theta0
            .iter()
            .zip(self.control.iter())
            .zip(self.theta_t.iter())
            .map(|((x0, p), xt)| x0 - 2.0 * p + xt)
            .collect()
    }

    /// `kappa = 2 |theta_0 - 2 phi + theta_T|`, the constant norm of `Phi''`.
    pub fn kappa(&self) -> f64 {
        2.0 * norm(&self.bend())
    }

    /// Chord point `(1-t) theta_0 + t theta_T`.
    pub fn chord(&self, t: f64) -> Vec<f64> {
        self.theta0
            .iter()
            .zip(self.theta_t.iter())
            .map(|(x0, xt)| (1.0 - t) * x0 + t * xt)
            .collect()
    }

    /// `BTMB` v1: magic, u32 version, u64 p, then `theta_0`, `phi`, `theta_T`
    /// as `p` little-endian f64 each.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(SURROGATE_MAGIC);
        enc.u64(self.dim() as u64);
        enc.f64s(&self.theta0);
        enc.f64s(&self.control);
        enc.f64s(&self.theta_t);
        enc.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf);
        dec.header(SURROGATE_MAGIC)?;
        let p = dec.len(24)?;
        let theta0 = Params(dec.f64s(p)?);
        let control = Params(dec.f64s(p)?);
        let theta_t = Params(dec.f64s(p)?);
        dec.finish()?;
        Self::new(theta0, control, theta_t)
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

fn midpoint(a: &[f64], b: &[f64]) -> Params {
    Params(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
}

/// A loss landscape over parameters along which a control point is fitted.
pub trait PathObjective: Sync {
    fn dim(&self) -> usize;

    /// Loss and gradient at `theta` on one stochastic draw (a mini-batch).
    fn sample_loss_grad(&self, theta: &[f64], rng: &mut Rng) -> Result<(f64, Vec<f64>)>;

    /// Deterministic loss at `theta` (the full dataset).
    fn full_loss(&self, theta: &[f64]) -> Result<f64>;
}

/// Mean cross-entropy of an MLP over a dataset, sampled in mini-batches of
/// `min(batch_size, |data|)` drawn without replacement.
pub struct DatasetObjective<'a> {
    pub mlp: Mlp,
    pub data: &'a Dataset,
    pub batch_size: usize,
}

impl<'a> DatasetObjective<'a> {
    pub fn new(mlp: Mlp, data: &'a Dataset) -> Self {
        DatasetObjective {
            mlp,
            data,
            batch_size: 256,
        }
    }
}

impl PathObjective for DatasetObjective<'_> {
    fn dim(&self) -> usize {
        self.mlp.param_count()
    }

    fn sample_loss_grad(&self, theta: &[f64], rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        let n = self.data.len();
        let b = self.batch_size.min(n);
        let rows = rand::seq::index::sample(rng, n, b).into_vec();
        self.mlp.loss_and_grad(theta, &self.data.batch(&rows))
    }

    fn full_loss(&self, theta: &[f64]) -> Result<f64> {
        self.mlp.loss(theta, self.data.as_batch())
    }
}

/// `l(theta) = |theta - center|^2`, whose path integral has a closed-form
/// optimal control point.
pub struct QuadraticLandscape {
    pub center: Vec<f64>,
}

impl PathObjective for QuadraticLandscape {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn sample_loss_grad(&self, theta: &[f64], _rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        let r = sub(theta, &self.center);
        Ok((norm_sq(&r), r.iter().map(|v| 2.0 * v).collect()))
    }

    fn full_loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(norm_sq(&sub(theta, &self.center)))
    }
}

/// How the path integral over `t` is discretised while fitting `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathQuadrature {
    /// Fresh uniform samples of `t` every iteration, equally weighted.
    MonteCarlo { samples: usize },
    /// Fixed Gauss-Legendre nodes on `[0, 1]`.
    GaussLegendre { nodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPointOptions {
    pub lr: f64,
    /// Stop once the gradient norm drops below this.
    pub tol: f64,
    pub max_iters: usize,
    pub quadrature: PathQuadrature,
    pub seed: u64,
}

impl Default for ControlPointOptions {
    fn default() -> Self {
        ControlPointOptions {
            lr: 1e-2,
            tol: 1e-5,
            max_iters: 300,
            quadrature: PathQuadrature::MonteCarlo { samples: 5 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlPointFit {
    pub surrogate: BezierSurrogate,
    /// Mean loss over the fixed 21-point grid with `phi` at the midpoint.
    pub start_path_loss: f64,
    /// Same quantity for the returned surrogate.
    pub end_path_loss: f64,
    pub iterations: usize,
    pub final_grad_norm: f64,
    /// False when the descended control point scored worse on the fixed grid
    /// than the midpoint and the midpoint was returned instead.
    pub accepted: bool,
}

/// Mean of `objective.full_loss(Phi(t))` over `points` uniform `t` in `[0, 1]`.
pub fn mean_path_loss(
    surrogate: &BezierSurrogate,
    objective: &dyn PathObjective,
    points: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for t in uniform_grid(points) {
        total += objective.full_loss(&surrogate.eval_unchecked(t))?;
    }
    Ok(total / points as f64)
}

/// Fits the control point by gradient descent on the mean path loss.
///
/// `phi` starts at the endpoint midpoint. Each iteration evaluates the loss
/// gradient at curve points `Phi(t_i)` and chains it through
/// `d Phi(t) / d phi = 2 t (1 - t)`. The loop stops when the gradient norm
/// falls below `opts.tol` or after `opts.max_iters` steps. The result is
/// accepted only if its fixed-grid mean path loss does not exceed the
/// midpoint's.
pub fn optimize_control_point(
    theta0: &Params,
    theta_t: &Params,
    objective: &dyn PathObjective,
    opts: &ControlPointOptions,
) -> Result<ControlPointFit> {
    check_dim(theta0.len(), theta_t.len())?;
    check_dim(objective.dim(), theta0.len())?;
    let start = BezierSurrogate::linear(theta0.clone(), theta_t.clone())?;
    let start_loss = mean_path_loss(&start, objective, PATH_LOSS_GRID_POINTS)?;

    let gl = match opts.quadrature {
        PathQuadrature::GaussLegendre { nodes } => Some(gauss_legendre_unit(nodes)),
        PathQuadrature::MonteCarlo { samples } if samples == 0 => {
            return Err(Error::invalid("monte carlo quadrature needs samples >= 1"))
        }
        PathQuadrature::MonteCarlo { .. } => None,
    };

    let mut rng = rng_from(opts.seed);
    let mut curve = start.clone();
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < opts.max_iters {
        let nodes: Vec<(f64, f64)> = match (&gl, opts.quadrature) {
            (Some(nodes), _) => nodes.clone(),
            (None, PathQuadrature::MonteCarlo { samples }) => (0..samples)
                .map(|_| (rng.random::<f64>(), 1.0 / samples as f64))
                .collect(),
            _ => unreachable!(),
        };
        let mut grad = vec![0.0; curve.dim()];
        for (t, w) in nodes {
            let theta = curve.eval_unchecked(t);
            let (loss, g) = objective.sample_loss_grad(&theta, &mut rng)?;
            if !loss.is_finite() || !all_finite(&g) {
                return Err(Error::numerical(format!(
                    "non-finite path loss at t = {t} (iteration {iterations})"
                )));
            }
            axpy(w * 2.0 * t * (1.0 - t), &g, &mut grad);
        }
        grad_norm = norm(&grad);
        if grad_norm < opts.tol {
            break;
        }
        axpy(-opts.lr, &grad, &mut curve.control);
        iterations += 1;
    }

    let end_loss = mean_path_loss(&curve, objective, PATH_LOSS_GRID_POINTS)?;
    if !end_loss.is_finite() {
        return Err(Error::numerical("non-finite path loss after control point fit"));
    }
    let accepted = end_loss <= start_loss;
    Ok(ControlPointFit {
        surrogate: if accepted { curve } else { start },
        start_path_loss: start_loss,
        end_path_loss: if accepted { end_loss } else { start_loss },
        iterations,
        final_grad_norm: grad_norm,
        accepted,
    })
}

/// Fits one surrogate per teacher on `data`; teacher `m` samples from
/// `derive_seed(opts.seed, m)`.
pub fn fit_surrogates(
    teachers: &[Trajectory],
    data: &Dataset,
    mlp: &Mlp,
    batch_size: usize,
    opts: &ControlPointOptions,
) -> Result<Vec<ControlPointFit>> {
    let objective = DatasetObjective {
        batch_size,
        ..DatasetObjective::new(mlp.clone(), data)
    };
    teachers
        .par_iter()
        .enumerate()
        .map(|(m, t)| {
            let run = ControlPointOptions {
                seed: derive_seed(opts.seed, m as u64),
                ..*opts
            };
            optimize_control_point(t.first(), t.last(), &objective, &run)
        })
        .collect()
}

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let n = n.max(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Newton iteration on P_n from the Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChordReport {
    pub kappa: f64,
    /// Grid maximum of `|Phi(t) - c(t)|`.
    pub max_chord_deviation: f64,
    pub argmax_t: f64,
    /// `D = sup_t |gamma(t) - c(t)|` for the piecewise-linear teacher `gamma`.
    pub teacher_deviation: f64,
}

/// Grid times plus the teacher breakpoints `tau / T`, on which every
/// piecewise-linear supremum is attained.
fn sup_times(segments: usize, grid_points: usize) -> Vec<f64> {
    let mut ts: Vec<f64> = uniform_grid(grid_points).collect();
    if segments > 0 {
        ts.extend((0..=segments).map(|k| k as f64 / segments as f64));
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

pub fn chord_report(s: &BezierSurrogate, teacher: &Trajectory, grid_points: usize) -> Result<ChordReport> {
    if grid_points < 3 {
        return Err(Error::invalid("chord report needs at least 3 grid points"));
    }
    check_dim(s.dim(), teacher.dim())?;
    let (mut best, mut argmax) = (f64::NEG_INFINITY, 0.0);
    for t in uniform_grid(grid_points) {
        let dev = dist(&s.eval_unchecked(t), &s.chord(t));
        if dev > best {
            best = dev;
            argmax = t;
        }
    }
    let d = sup_times(teacher.epochs(), grid_points)
        .into_iter()
        .map(|t| dist(&teacher.interpolate(t), &s.chord(t)))
        .fold(0.0, f64::max);
    Ok(ChordReport {
        kappa: s.kappa(),
        max_chord_deviation: best,
        argmax_t: argmax,
        teacher_deviation: d,
    })
}

/// Slack added to the triangle-inequality bounds.
pub const FIDELITY_SLACK: f64 = 1e-9;

/// Grid subsampling of the prediction-gap diagnostic.
pub const PREDICTION_GRID_STRIDE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub kappa: f64,
    pub teacher_deviation: f64,
    /// `sup_t |Phi(t) - gamma(t)|`
    pub surrogate_teacher_gap: f64,
    /// `kappa / 8 + D`
    pub surrogate_bound: f64,
    pub surrogate_bound_holds: bool,
    /// `eps_syn = max_j |gamma_stu(t_j) - Phi(t_j)|` over the student samples.
    pub student_surrogate_gap: f64,
    /// `max_j |gamma_stu(t_j) - gamma(t_j)|`
    pub student_teacher_gap: f64,
    /// `eps_syn + kappa / 8 + D`
    pub student_bound: f64,
    pub student_bound_holds: bool,
    /// Diagnostic only: `sup_{x,t} |f_Phi(t)(x) - f_gamma(t)(x)|` over the probe
    /// batch, and its ratio to `surrogate_teacher_gap`.
    pub prediction_gap: Option<f64>,
    pub prediction_ratio: Option<f64>,
}

impl FidelityReport {
    pub fn holds(&self) -> bool {
        self.surrogate_bound_holds && self.student_bound_holds
    }
}

/// Checks the surrogate/teacher and student/teacher triangle bounds.
///
/// The student path is sampled at uniform times `t_j = j / (L - 1)`; the
/// student bound is evaluated at those times, the surrogate bound on the
/// dense grid plus teacher breakpoints. With `probe`, the prediction gap of
/// the model between the surrogate and teacher paths is reported as well,
/// sampled at every [`PREDICTION_GRID_STRIDE`]-th grid time.
pub fn verify_fidelity_geometry(
    s: &BezierSurrogate,
    teacher: &Trajectory,
    student_path: &[Params],
    probe: Option<(&Mlp, &Matrix)>,
) -> Result<FidelityReport> {
    if student_path.is_empty() {
        return Err(Error::invalid("student path is empty"));
    }
    check_dim(s.dim(), teacher.dim())?;
    for p in student_path {
        check_dim(s.dim(), p.len())?;
    }
    let kappa = s.kappa();
    let times = sup_times(teacher.epochs(), SUP_GRID_POINTS);

    let mut d: f64 = 0.0;
    let mut gap: f64 = 0.0;
    let mut pred_gap: f64 = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let phi = s.eval_unchecked(t);
        let gamma = teacher.interpolate(t);
        d = d.max(dist(&gamma, &s.chord(t)));
        gap = gap.max(dist(&phi, &gamma));
        if let Some((mlp, x)) = probe.filter(|_| i % PREDICTION_GRID_STRIDE == 0) {
            let a = mlp.predict(&phi, x)?;
            let b = mlp.predict(&gamma, x)?;
            let worst = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            pred_gap = pred_gap.max(worst);
        }
    }
    let surrogate_bound = kappa / 8.0 + d;

    let l = student_path.len();
    let mut eps_syn: f64 = 0.0;
    let mut stu_gap: f64 = 0.0;
    for (j, p) in student_path.iter().enumerate() {
        let t = if l == 1 { 0.0 } else { j as f64 / (l - 1) as f64 };
        eps_syn = eps_syn.max(dist(p, &s.eval_unchecked(t)));
        stu_gap = stu_gap.max(dist(p, &interpolate_path(&teacher.checkpoints, t)));
    }
    let student_bound = eps_syn + surrogate_bound;

    Ok(FidelityReport {
        kappa,
        teacher_deviation: d,
        surrogate_teacher_gap: gap,
        surrogate_bound,
        surrogate_bound_holds: gap <= surrogate_bound + FIDELITY_SLACK,
        student_surrogate_gap: eps_syn,
        student_teacher_gap: stu_gap,
        student_bound,
        student_bound_holds: stu_gap <= student_bound + FIDELITY_SLACK,
        prediction_gap: probe.map(|_| pred_gap),
        prediction_ratio: probe.map(|_| if gap > 0.0 { pred_gap / gap } else { 0.0 }),
    })
}

/// `|theta_{tau+1} - 2 theta_tau + theta_{tau-1}|` for `tau = 1..T-1`.
pub fn curvature_profile(teacher: &Trajectory) -> Result<Vec<f64>> {
    if teacher.epochs() < 2 {
        return Err(Error::invalid("curvature profile needs T >= 2"));
    }
    Ok(teacher
        .checkpoints
        .windows(3)
        .map(|w| {
            w[0].iter()
                .zip(w[1].iter())
                .zip(w[2].iter())
                .map(|((a, b), c)| {
                    let h = c - 2.0 * b + a;
                    h * h
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut Rng, p: usize) -> Params {
        Params((0..p).map(|_| StandardNormal.sample(&mut *rng)).collect())
    }

    fn random_surrogate(seed: u64, p: usize) -> BezierSurrogate {
        let mut rng = rng_from(seed);
        let a = gaussian(&mut rng, p);
        let b = gaussian(&mut rng, p);
        let c = gaussian(&mut rng, p);
        BezierSurrogate::new(a, b, c).unwrap()
    }

    fn one_d(a: f64, phi: f64, b: f64) -> BezierSurrogate {
        BezierSurrogate::new(Params(vec![a]), Params(vec![phi]), Params(vec![b])).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let s = random_surrogate(1, 7);
        assert_eq!(s.eval(0.0).unwrap(), s.theta0);
        assert_eq!(s.eval(1.0).unwrap(), s.theta_t);
        assert!(matches!(s.eval(1.5), Err(Error::Domain { .. })));
        assert!(matches!(s.eval(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn one_d_evaluation() {
        assert_eq!(one_d(0.0, 1.0, 1.0).eval(0.5).unwrap().0, vec![0.75]);
    }

    #[test]
    fn midpoint_control_recovers_line() {
        let s = random_surrogate(2, 9).linearized();
        for t in uniform_grid(101) {
            assert!(dist(&s.eval_unchecked(t), &s.chord(t)) <= 1e-12);
        }
        assert!(s.kappa() <= 1e-12);
        let disp = s.segment_displacement(0.2, 0.7).unwrap();
        let want: Vec<f64> = sub(&s.theta_t, &s.theta0).iter().map(|v| 0.5 * v).collect();
        assert!(dist(&disp, &want) <= 1e-12);
    }

    #[test]
    fn full_segment_is_endpoint_difference() {
        let s = random_surrogate(3, 6);
        assert_eq!(
            s.segment_displacement(0.0, 1.0).unwrap(),
            sub(&s.theta_t, &s.theta0)
        );
    }

    #[test]
    fn closed_form_displacement_matches_difference() {
        let s = random_surrogate(4, 12);
        let mut rng = rng_from(5);
        for _ in 0..20 {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            let (ts, te) = if a < b { (a, b) } else { (b, a) };
            if ts == te {
                continue;
            }
            let closed = s.segment_displacement(ts, te).unwrap();
            let direct = sub(&s.eval_unchecked(te), &s.eval_unchecked(ts));
            assert!(dist(&closed, &direct) <= 1e-12);
        }
        assert!(matches!(
            s.segment_displacement(0.5, 0.5),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn surrogate_file_roundtrip() {
        let s = random_surrogate(6, 5);
        let bytes = s.to_bytes();
        assert_eq!(bytes.len() as u64, SURROGATE_HEADER_BYTES + 3 * 8 * 5);
        assert_eq!(BezierSurrogate::from_bytes(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(matches!(
            BezierSurrogate::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let nodes = gauss_legendre_unit(5);
        assert_eq!(nodes.len(), 5);
        for k in 0..10 {
            let got: f64 = nodes.iter().map(|(t, w)| w * t.powi(k)).sum();
            assert!((got - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "k = {k}");
        }
    }

    #[test]
    fn path_integral_coefficients_by_quadrature() {
        // Brute-force midpoint rule, independent of the Gauss-Legendre code.
        let n = 200_000;
        let (mut c0, mut c1, mut c2) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let t = (k as f64 + 0.5) / n as f64;
            let b1 = 2.0 * t * (1.0 - t);
            c0 += (1.0 - t) * (1.0 - t) * b1 / n as f64;
            c1 += b1 * b1 / n as f64;
            c2 += t * t * b1 / n as f64;
        }
        assert!((c0 - 0.1).abs() < 1e-9);
        assert!((c1 - 2.0 / 15.0).abs() < 1e-9);
        assert!((c2 - 0.1).abs() < 1e-9);
    }

    #[test]
    fn quadratic_landscape_converges_to_closed_form() {
        let mut rng = rng_from(7);
        let p = 6;
        let center = gaussian(&mut rng, p).0;
        let a = gaussian(&mut rng, p);
        let b = gaussian(&mut rng, p);
        let opts = ControlPointOptions {
            lr: 1.0,
            tol: 1e-10,
            max_iters: 500,
            quadrature: PathQuadrature::GaussLegendre { nodes: 5 },
            seed: 0,
        };
        let land = QuadraticLandscape { center: center.clone() };
        let fit = optimize_control_point(&a, &b, &land, &opts).unwrap();
        let want: Vec<f64> = (0..p)
            .map(|i| 2.5 * center[i] - 0.75 * (a[i] + b[i]))
            .collect();
        assert!(dist(&fit.surrogate.control, &want) < 1e-3);
        assert!(fit.end_path_loss < fit.start_path_loss);
    }

    #[test]
    fn coincident_endpoints_at_optimum_stay_put() {
        let center = vec![0.3, -1.0, 2.0];
        let land = QuadraticLandscape { center: center.clone() };
        let at = Params(center.clone());
        let fit = optimize_control_point(&at, &at, &land, &ControlPointOptions::default()).unwrap();
        assert_eq!(fit.iterations, 0);
        assert_eq!(fit.surrogate.control.0, center);
    }

    #[test]
    fn chord_report_one_d() {
        let s = one_d(0.0, 1.0, 1.0);
        let teacher = Trajectory::new(vec![Params(vec![0.0]), Params(vec![1.0])]).unwrap();
        let r = chord_report(&s, &teacher, SUP_GRID_POINTS).unwrap();
        assert_eq!(r.kappa, 2.0);
        assert!((r.max_chord_deviation - 0.25).abs() < 1e-15);
        assert_eq!(r.argmax_t, 0.5);
        assert!(r.teacher_deviation <= 1e-12);
    }

    #[test]
    fn chord_report_linear_and_errors() {
        let s = random_surrogate(8, 4).linearized();
        let teacher = Trajectory::new(vec![s.theta0.clone(), s.theta_t.clone()]).unwrap();
        let r = chord_report(&s, &teacher, 101).unwrap();
        assert!(r.kappa <= 1e-12);
        assert!(r.max_chord_deviation <= 1e-12);
        assert!(chord_report(&s, &teacher, 2).is_err());
        let wrong = Trajectory::new(vec![Params(vec![0.0; 3])]).unwrap();
        assert!(matches!(chord_report(&s, &wrong, 11), Err(Error::DimError { .. })));
    }

    #[test]
    fn chord_deviation_law_pointwise() {
        let s = random_surrogate(9, 30);
        let half_kappa = s.kappa() / 2.0;
        for t in uniform_grid(SUP_GRID_POINTS) {
            let dev = dist(&s.eval_unchecked(t), &s.chord(t));
            let want = t * (1.0 - t) * half_kappa;
            assert!((dev - want).abs() <= 1e-10 * want.max(1e-300) || (dev - want).abs() < 1e-14);
        }
    }

    #[test]
    fn fidelity_student_on_surrogate() {
        let s = random_surrogate(10, 8);
        let mut rng = rng_from(11);
        let mut cps = vec![s.theta0.clone()];
        for _ in 0..3 {
            cps.push(gaussian(&mut rng, 8));
        }
        cps.push(s.theta_t.clone());
        let teacher = Trajectory::new(cps).unwrap();
        let student: Vec<Params> = uniform_grid(11).map(|t| s.eval(t).unwrap()).collect();
        let r = verify_fidelity_geometry(&s, &teacher, &student, None).unwrap();
        assert!(r.student_surrogate_gap <= 1e-12);
        assert!(r.holds());
        assert!(verify_fidelity_geometry(&s, &teacher, &[], None).is_err());
    }

    #[test]
    fn fidelity_straight_teacher_all_zero() {
        let s = random_surrogate(12, 5).linearized();
        let teacher = Trajectory::new(
            uniform_grid(6).map(|t| Params(s.chord(t))).collect(),
        )
        .unwrap();
        let student: Vec<Params> = uniform_grid(4).map(|t| Params(s.chord(t))).collect();
        let r = verify_fidelity_geometry(&s, &teacher, &student, None).unwrap();
        assert!(r.surrogate_teacher_gap <= 1e-12);
        assert!(r.teacher_deviation <= 1e-12);
        assert!(r.student_teacher_gap <= 1e-12);
    }

    #[test]
    fn curvature_examples() {
        let t = Trajectory::new(vec![Params(vec![0.0]), Params(vec![1.0]), Params(vec![0.0])]).unwrap();
        assert_eq!(curvature_profile(&t).unwrap(), vec![2.0]);
        let line = Trajectory::new((0..5).map(|k| Params(vec![k as f64, -2.0 * k as f64])).collect()).unwrap();
        assert!(curvature_profile(&line).unwrap().iter().all(|&h| h == 0.0));
        let short = Trajectory::new(vec![Params(vec![0.0]); 2]).unwrap();
        assert!(curvature_profile(&short).is_err());
    }
}
