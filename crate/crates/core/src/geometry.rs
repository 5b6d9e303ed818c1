//! Displacement matrices and the certificates built on them: reachable
//! gradient spans, the projection lower bound on the matching residual, the
//! Eckart-Young rank bottleneck and spectral energy profiles.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    all_finite, dist, norm_sq, numerical_rank, orthonormal_basis, orthonormalize, project_onto,
    sub, svd, Matrix,
};
use crate::rng::{child_rng, Rng};
use crate::surrogate::BezierSurrogate;
use crate::teacher::Trajectory;

/// Where the columns of a displacement matrix come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionSource {
    /// Checkpoint differences `theta_e - theta_s` of stored SGD trajectories.
    Sgd,
    /// Segments of fitted quadratic Bezier surrogates.
    Bezier,
    /// Segments of the straight line between the endpoints.
    Linear,
}

impl SupervisionSource {
    pub fn name(self) -> &'static str {
        match self {
            SupervisionSource::Sgd => "sgd",
            SupervisionSource::Bezier => "bezier",
            SupervisionSource::Linear => "linear",
        }
    }
}

/// One segment: trajectory (or surrogate) index and its start and end.
/// For SGD sources `start`/`end` are epoch indices; otherwise curve times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub trajectory: usize,
    pub start: f64,
    pub end: f64,
}

/// The supervision a displacement matrix is built from.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    Sgd(&'a [Trajectory]),
    Bezier(&'a [BezierSurrogate]),
    /// Surrogates whose control points are replaced by endpoint midpoints.
    Linear(&'a [BezierSurrogate]),
}

impl Supervision<'_> {
    pub fn source(&self) -> SupervisionSource {
        match self {
            Supervision::Sgd(_) => SupervisionSource::Sgd,
            Supervision::Bezier(_) => SupervisionSource::Bezier,
            Supervision::Linear(_) => SupervisionSource::Linear,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Supervision::Sgd(t) => t.len(),
            Supervision::Bezier(s) | Supervision::Linear(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `p x K` matrix whose column `k` is the displacement of segment `k`.
#[derive(Debug, Clone)]
pub struct DisplacementMatrix {
    pub a: Matrix,
    pub source: SupervisionSource,
    pub segments: Vec<SegmentMeta>,
}

impl DisplacementMatrix {
    pub fn new(a: Matrix, source: SupervisionSource, segments: Vec<SegmentMeta>) -> Result<Self> {
        if a.cols() == 0 {
            return Err(Error::invalid("displacement matrix needs at least one column"));
        }
        check_dim(a.cols(), segments.len())?;
        if !a.is_finite() {
            return Err(Error::invalid("displacement matrix has non-finite entries"));
        }
        Ok(DisplacementMatrix { a, source, segments })
    }

    pub fn k(&self) -> usize {
        self.a.cols()
    }

    pub fn p(&self) -> usize {
        self.a.rows()
    }

    pub fn numerical_rank(&self) -> Result<usize> {
        Ok(svd(&self.a)?.numerical_rank())
    }

    /// Column-wise concatenation of matrices from the same source.
    pub fn concat(parts: &[DisplacementMatrix]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("nothing to concatenate"));
        };
        let mut columns = Vec::new();
        let mut segments = Vec::new();
        for part in parts {
            check_dim(first.p(), part.p())?;
            columns.extend(part.a.columns());
            segments.extend_from_slice(&part.segments);
        }
        Self::new(Matrix::from_columns(first.p(), &columns)?, first.source, segments)
    }
}

fn invalid_segment(seg: &SegmentMeta) -> Error {
    Error::InvalidSegment {
        start: seg.start,
        end: seg.end,
    }
}

/// Builds the displacement matrix of `segments` over `supervision`.
pub fn build_displacements(
    supervision: Supervision<'_>,
    segments: &[SegmentMeta],
) -> Result<DisplacementMatrix> {
    if segments.is_empty() {
        return Err(Error::invalid("at least one segment is required"));
    }
    let mut columns = Vec::with_capacity(segments.len());
    for seg in segments {
        if seg.trajectory >= supervision.len() {
            return Err(Error::invalid(format!(
                "segment refers to trajectory {} of {}",
                seg.trajectory,
                supervision.len()
            )));
        }
        if !(seg.start < seg.end) {
            return Err(invalid_segment(seg));
        }
        let col = match supervision {
            Supervision::Sgd(trajs) => {
                let t = &trajs[seg.trajectory];
                let (s, e) = (seg.start, seg.end);
                if s < 0.0 || s.fract() != 0.0 || e.fract() != 0.0 || e > t.epochs() as f64 {
                    return Err(invalid_segment(seg));
                }
                sub(&t.checkpoints[e as usize], &t.checkpoints[s as usize])
            }
            Supervision::Bezier(surrs) | Supervision::Linear(surrs) => {
                if seg.start < 0.0 || seg.end > 1.0 {
                    return Err(invalid_segment(seg));
                }
                let s = &surrs[seg.trajectory];
                if matches!(supervision, Supervision::Linear(_)) {
                    s.linearized().segment_displacement(seg.start, seg.end)?
                } else {
                    s.segment_displacement(seg.start, seg.end)?
                }
            }
        };
        columns.push(col);
    }
    let p = columns[0].len();
    for c in &columns {
        check_dim(p, c.len())?;
    }
    DisplacementMatrix::new(
        Matrix::from_columns(p, &columns)?,
        supervision.source(),
        segments.to_vec(),
    )
}

/// `per_trajectory` contiguous epoch segments `(s, s + len)` per trajectory,
/// with `s` uniform on `0..=T - len`.
pub fn sample_epoch_segments(
    rng: &mut Rng,
    trajectories: &[Trajectory],
    per_trajectory: usize,
    len: usize,
) -> Result<Vec<SegmentMeta>> {
    let mut out = Vec::with_capacity(trajectories.len() * per_trajectory);
    for (m, t) in trajectories.iter().enumerate() {
        if len == 0 || t.epochs() < len {
            return Err(Error::invalid(format!(
                "trajectory {m} has {} epochs, segments need {len}",
                t.epochs()
            )));
        }
        for _ in 0..per_trajectory {
            let s = rng.random_range(0..=t.epochs() - len);
            out.push(SegmentMeta {
                trajectory: m,
                start: s as f64,
                end: (s + len) as f64,
            });
        }
    }
    Ok(out)
}

/// `per_trajectory` curve segments `(t_s, t_s + len)` per surrogate, with
/// `t_s` uniform on `[0, 1 - len]`.
pub fn sample_time_segments(
    rng: &mut Rng,
    count: usize,
    per_trajectory: usize,
    len: f64,
) -> Result<Vec<SegmentMeta>> {
    if !(len > 0.0 && len <= 1.0) {
        return Err(Error::invalid(format!("segment length {len} not in (0, 1]")));
    }
    let mut out = Vec::with_capacity(count * per_trajectory);
    for m in 0..count {
        for _ in 0..per_trajectory {
            let start = rng.random::<f64>() * (1.0 - len);
            out.push(SegmentMeta {
                trajectory: m,
                start,
                end: (start + len).min(1.0),
            });
        }
    }
    Ok(out)
}

/// Orthonormal basis of `span{g_0, ..., g_{N-1}}`. All-zero gradients give
/// a basis with no columns.
pub fn reachable_span(gradients: &[Vec<f64>], tol: f64) -> Result<Matrix> {
    let Some(first) = gradients.first() else {
        return Err(Error::invalid("reachable span needs at least one gradient"));
    };
    for g in gradients {
        check_dim(first.len(), g.len())?;
    }
    orthonormal_basis(&Matrix::from_columns(first.len(), gradients)?, tol)
}

/// Slack on `realized >= bound`, scaled by `1 + bound`.
pub const PROJECTION_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCertificate {
    /// `|(I - P_G) Delta|^2`, the smallest residual any point of the span attains.
    pub bound: f64,
    /// `P_G Delta`
    pub best_in_span: Vec<f64>,
    pub realized_residual: f64,
    pub holds: bool,
}

/// Checks that a realized matching residual `|delta - Delta|^2` is no smaller
/// than the squared distance from `Delta` to the reachable span.
pub fn projection_bound_certificate(
    delta: &[f64],
    span_basis: &Matrix,
    realized_residual: f64,
) -> Result<ProjectionCertificate> {
    let best = project_onto(span_basis, delta)?;
    let bound = norm_sq(&sub(delta, &best));
    Ok(ProjectionCertificate {
        bound,
        best_in_span: best,
        realized_residual,
        holds: realized_residual >= bound - PROJECTION_SLACK * (1.0 + bound),
    })
}

/// Relative tolerance for the top-r residual and absolute-plus-relative slack
/// for the random-subspace comparison.
pub const RANK_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankBottleneckReport {
    pub r: usize,
    pub k: usize,
    /// `(1/K) sum_{j > r} sigma_j^2`
    pub tail_energy: f64,
    /// `(1/K) |(I - P_{U_r}) A|_F^2`
    pub top_r_residual: f64,
    pub top_r_matches: bool,
    pub trials: usize,
    /// Smallest `(1/K) |(I - P_G) A|_F^2` over random `r`-dimensional `G`.
    pub min_random_residual: f64,
    pub violations: usize,
}

impl RankBottleneckReport {
    pub fn holds(&self) -> bool {
        self.top_r_matches && self.violations == 0
    }
}

/// `(1/K) |(I - B B^T) A|_F^2` for orthonormal columns `basis`.
pub fn mean_projection_residual(a: &Matrix, basis: &[Vec<f64>]) -> f64 {
    let k = a.cols();
    let mut total = 0.0;
    for j in 0..k {
        let col = a.column(j);
        let mut r = col.clone();
        for q in basis {
            let c = crate::linalg::dot(q, &col);
            crate::linalg::axpy(-c, q, &mut r);
        }
        total += norm_sq(&r);
    }
    total / k as f64
}

/// Random `r`-dimensional subspace of `R^p` from an orthonormalised Gaussian
/// matrix.
pub fn random_subspace(rng: &mut Rng, p: usize, r: usize) -> Vec<Vec<f64>> {
    loop {
        let cols: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..p).map(|_| StandardNormal.sample(&mut *rng)).collect())
            .collect();
        let basis = orthonormalize(&cols, 1e-10);
        if basis.len() == r {
            return basis;
        }
    }
}

/// Compares the Eckart-Young tail energy of `a` against the top-`r` left
/// singular subspace and against `trials` random `r`-dimensional subspaces.
/// Trial `i` draws from `child_rng(seed, i)`.
pub fn rank_bottleneck_certificate(
    a: &Matrix,
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<RankBottleneckReport> {
    let (p, k) = a.shape();
    if r < 1 || r >= p.min(k) {
        return Err(Error::invalid(format!(
            "rank {r} must satisfy 1 <= r < min(p, K) = {}",
            p.min(k)
        )));
    }
    let dec = svd(a)?;
    let tail: f64 = dec.singular_values[r..].iter().map(|s| s * s).sum::<f64>() / k as f64;
    let top: Vec<Vec<f64>> = (0..r).map(|j| dec.left_basis.column(j)).collect();
    let top_res = mean_projection_residual(a, &top);
    let scale = norm_sq(a.data()) / k as f64;
    // relative match, with a rounding floor for exactly low-rank inputs
    let top_ok = (top_res - tail).abs() <= RANK_SLACK * tail + 1e-14 * scale;

    let residuals: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(seed, i as u64);
            mean_projection_residual(a, &random_subspace(&mut rng, p, r))
        })
        .collect();
    let violations = residuals
        .iter()
        .filter(|&&res| res < tail - RANK_SLACK * (1.0 + tail))
        .count();
    Ok(RankBottleneckReport {
        r,
        k,
        tail_energy: tail,
        top_r_residual: top_res,
        top_r_matches: top_ok,
        trials,
        min_random_residual: residuals.iter().copied().fold(f64::INFINITY, f64::min),
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub singular_values: Vec<f64>,
    /// Partial sums of `sigma^2` over their total; the last entry is 1.
    pub cumulative_energy: Vec<f64>,
    pub effective_rank_90: usize,
    pub effective_rank_95: usize,
    pub effective_rank_99: usize,
    pub numerical_rank: usize,
}

impl SpectralReport {
    pub fn from_singular_values(singular_values: Vec<f64>) -> Result<Self> {
        let mut running = 0.0;
        let partial: Vec<f64> = singular_values
            .iter()
            .map(|s| {
                running += s * s;
                running
            })
            .collect();
        let total = running;
        if !(total > 0.0) || !all_finite(&singular_values) {
            return Err(Error::invalid("spectral report of a zero matrix"));
        }
        let cumulative_energy: Vec<f64> = partial.iter().map(|v| v / total).collect();
        let eff = |thr: f64| cumulative_energy.iter().position(|&c| c >= thr).unwrap_or(cumulative_energy.len() - 1) + 1;
        Ok(SpectralReport {
            effective_rank_90: eff(0.90),
            effective_rank_95: eff(0.95),
            effective_rank_99: eff(0.99),
            numerical_rank: numerical_rank(&singular_values),
            singular_values,
            cumulative_energy,
        })
    }

    /// CSV with header `k,sigma_k,cumulative_energy`, `k` 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,sigma_k,cumulative_energy\n");
        for (i, (s, c)) in self
            .singular_values
            .iter()
            .zip(&self.cumulative_energy)
            .enumerate()
        {
            let _ = writeln!(out, "{},{:e},{:.17}", i + 1, s, c);
        }
        out
    }
}

pub fn spectral_report(a: &Matrix) -> Result<SpectralReport> {
    if a.frobenius_norm() == 0.0 {
        return Err(Error::invalid("spectral report of a zero matrix"));
    }
    SpectralReport::from_singular_values(svd(a)?.singular_values)
}

/// Distance of `v` from the span of `basis` relative to `|v|` (0 for `v = 0`).
pub fn relative_span_residual(basis: &Matrix, v: &[f64]) -> Result<f64> {
    let n = norm_sq(v).sqrt();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok(dist(v, &project_onto(basis, v)?) / n)
}

/// Epochs per SGD segment in the spectral comparison.
pub const SPECTRAL_SGD_SEGMENT: usize = 5;
/// Curve-time length per surrogate segment in the spectral comparison.
pub const SPECTRAL_CURVE_SEGMENT: f64 = 0.2;

/// Spectra of SGD, Bezier and linear displacement matrices drawn with the
/// same number of segments per trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralComparison {
    pub segments_per_trajectory: usize,
    pub sgd: SpectralReport,
    pub bezier: SpectralReport,
    pub linear: SpectralReport,
}

/// SGD columns are contiguous `(s, s + 5)` epoch segments; surrogate columns
/// are `(t_s, t_s + 0.2)` curve segments.
pub fn spectral_comparison(
    teachers: &[Trajectory],
    surrogates: &[BezierSurrogate],
    per_trajectory: usize,
    seed: u64,
) -> Result<SpectralComparison> {
    if teachers.len() != surrogates.len() || teachers.is_empty() || per_trajectory == 0 {
        return Err(Error::invalid(
            "spectral comparison needs one surrogate per teacher and >= 1 segment each",
        ));
    }
    let mut rng = child_rng(seed, 0);
    let sgd_segs = sample_epoch_segments(&mut rng, teachers, per_trajectory, SPECTRAL_SGD_SEGMENT)?;
    let curve_segs =
        sample_time_segments(&mut rng, surrogates.len(), per_trajectory, SPECTRAL_CURVE_SEGMENT)?;
    let report = |sup: Supervision<'_>, segs: &[SegmentMeta]| -> Result<SpectralReport> {
        spectral_report(&build_displacements(sup, segs)?.a)
    };
    Ok(SpectralComparison {
        segments_per_trajectory: per_trajectory,
        sgd: report(Supervision::Sgd(teachers), &sgd_segs)?,
        bezier: report(Supervision::Bezier(surrogates), &curve_segs)?,
        linear: report(Supervision::Linear(surrogates), &curve_segs)?,
    })
}
