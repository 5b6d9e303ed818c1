//! Runnable geometry certificates behind `verify-theory`.
//!
//! Each check draws its own random instances from a seed and reports a
//! [`Certificate`]; nothing here reads files.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condense::{random_subset, sample_free_pair, student_unroll};
use crate::config::{RunConfig, Stage, VerifySection};
use crate::error::{Error, Result};
use crate::eval::{generate_benchmark, Dataset};
use crate::geometry::{
    build_displacements, projection_bound_certificate, rank_bottleneck_certificate,
    reachable_span, SegmentMeta, Supervision,
};
use crate::linalg::{dist, norm_sq, project_onto, sub, svd, Matrix};
use crate::model::{Mlp, MlpConfig, Params};
use crate::rng::{child_rng, derive_seed, Rng};
use crate::surrogate::{fit_surrogates, verify_fidelity_geometry, BezierSurrogate, SUP_GRID_POINTS};
use crate::teacher::{run_sgd, train_teachers, Trajectory};

/// Largest admissible `sigma_3 / sigma_1` of a single-curve displacement matrix.
pub const RANK_TWO_RATIO: f64 = 1e-8;
/// Relative tolerance of the pointwise chord law.
pub const CHORD_RTOL: f64 = 1e-10;
/// Gap between the realized residual and the bound in constructed trials.
pub const PROJECTION_ATTAIN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub wall_ms: u128,
}

impl Certificate {
    fn timed(name: &str, start: Instant, passed: bool, detail: String) -> Self {
        Certificate {
            name: name.to_string(),
            passed,
            detail,
            wall_ms: start.elapsed().as_millis(),
        }
    }

    fn failed(name: &str, start: Instant, err: &Error) -> Self {
        Self::timed(name, start, false, format!("error: {err}"))
    }

    /// `PASS name: detail` or `FAIL name: detail`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {} ({} ms)", self.name, self.detail, self.wall_ms)
    }
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

fn random_surrogate(rng: &mut Rng, p: usize) -> Result<BezierSurrogate> {
    BezierSurrogate::new(
        Params(gaussian(rng, p)),
        Params(gaussian(rng, p)),
        Params(gaussian(rng, p)),
    )
}

fn free_segments(rng: &mut Rng, trajectory: usize, k: usize) -> Vec<SegmentMeta> {
    (0..k)
        .map(|_| {
            let (start, end) = sample_free_pair(rng);
            SegmentMeta {
                trajectory,
                start,
                end,
            }
        })
        .collect()
}

/// Every displacement of one quadratic curve lies in a plane: for random
/// curves and segments `sigma_3 / sigma_1 <= RANK_TWO_RATIO`, and the stacked
/// displacements of `combined_surrogates` curves have numerical rank at most
/// twice their number.
pub fn displacement_rank(v: &VerifySection, seed: u64) -> Certificate {
    const NAME: &str = "displacement-rank";
    let start = Instant::now();
    let run = || -> Result<(f64, usize, usize)> {
        let curves = v.displacement_surrogates.max(v.combined_surrogates);
        let mut rng = child_rng(seed, 0);
        let surrs: Vec<BezierSurrogate> = (0..curves)
            .map(|_| random_surrogate(&mut rng, v.displacement_dim))
            .collect::<Result<_>>()?;
        let segs: Vec<Vec<SegmentMeta>> = (0..curves)
            .map(|m| free_segments(&mut rng, m, v.displacement_segments))
            .collect();
        let worst = (0..v.displacement_surrogates)
            .into_par_iter()
            .map(|m| -> Result<f64> {
                let a = build_displacements(Supervision::Bezier(&surrs), &segs[m])?;
                let s = svd(&a.a)?.singular_values;
                Ok(if s.len() < 3 { 0.0 } else { s[2] / s[0] })
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let all: Vec<SegmentMeta> = segs[..v.combined_surrogates].concat();
        let combined = build_displacements(Supervision::Bezier(&surrs), &all)?;
        Ok((worst, combined.numerical_rank()?, 2 * v.combined_surrogates))
    };
    match run() {
        Ok((worst, rank, cap)) => Certificate::timed(
            NAME,
            start,
            worst <= RANK_TWO_RATIO && rank <= cap,
            format!(
                "max sigma3/sigma1 = {worst:.3e} over {} curves (<= {RANK_TWO_RATIO:e}); combined rank {rank} (<= {cap})",
                v.displacement_surrogates
            ),
        ),
        Err(e) => Certificate::failed(NAME, start, &e),
    }
}

/// `|Phi(t) - c(t)| = t (1 - t) kappa / 2` pointwise on the dense grid, with
/// the maximum `kappa / 8` at `t = 1/2`.
pub fn chord_deviation(v: &VerifySection, seed: u64) -> Certificate {
    const NAME: &str = "chord-deviation";
    let start = Instant::now();
    let mut rng = child_rng(seed, 1);
    let mut worst_rel: f64 = 0.0;
    let mut peak_ok = true;
    for _ in 0..v.chord_surrogates {
        let s = match random_surrogate(&mut rng, v.chord_dim) {
            Ok(s) => s,
            Err(e) => return Certificate::failed(NAME, start, &e),
        };
        let kappa = s.kappa();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..SUP_GRID_POINTS {
            let t = i as f64 / (SUP_GRID_POINTS - 1) as f64;
            let got = dist(&s.eval_unchecked(t), &s.chord(t));
            let want = t * (1.0 - t) * kappa / 2.0;
            let err = (got - want).abs();
            let rel = if want > 0.0 { err / want } else if err == 0.0 { 0.0 } else { f64::INFINITY };
            worst_rel = worst_rel.max(rel);
            if got > best.0 {
                best = (got, t);
            }
        }
        let peak = kappa / 8.0;
        peak_ok &= (best.0 - peak).abs() <= CHORD_RTOL * peak && best.1 == 0.5;
    }
    Certificate::timed(
        NAME,
        start,
        worst_rel <= CHORD_RTOL && peak_ok,
        format!(
            "max relative error {worst_rel:.3e} (<= {CHORD_RTOL:e}) over {} curves x {SUP_GRID_POINTS} points; peak kappa/8 at t = 0.5: {peak_ok}",
            v.chord_surrogates
        ),
    )
}

#[derive(Debug, Clone, Copy)]
struct ProjectionTrial {
    holds: bool,
    attained: bool,
    margin: f64,
}

/// One random student unroll: the realized residual `|delta - Delta|^2`
/// against the projection bound for a random `Delta`, and the constructed
/// case `Delta = delta + w` with `w` orthogonal to the reachable span, where
/// the bound is attained.
fn projection_trial(v: &VerifySection, seed: u64, i: usize) -> Result<ProjectionTrial> {
    let mut rng = child_rng(seed, 1000 + i as u64);
    let cfg = MlpConfig::new(v.projection_input_dim, v.projection_hidden_units);
    let mlp = Mlp::new(cfg)?;
    let p = cfg.param_count();
    let per_class = 5;
    let n = 2 * per_class;
    let x = Matrix::new(n, cfg.input_dim, gaussian(&mut rng, n * cfg.input_dim))?;
    let y: Vec<f64> = (0..n).map(|r| if r < per_class { 0.0 } else { 1.0 }).collect();
    let theta_s = cfg.init_params(rng.random());
    let lr = 0.05 + 0.1 * rng.random::<f64>();
    let trace = student_unroll(
        &mlp,
        &theta_s,
        &x,
        &y,
        v.projection_inner_steps,
        lr,
        per_class,
        rng.random(),
    )?;
    let delta = trace.displacement();
    let basis = reachable_span(&trace.gradients, 1e-12)?;

    let scale = norm_sq(&delta).sqrt().max(1e-3);
    let target: Vec<f64> = gaussian(&mut rng, p).iter().map(|g| g * scale / (p as f64).sqrt()).collect();
    let random = projection_bound_certificate(&target, &basis, norm_sq(&sub(&delta, &target)))?;

    let raw = gaussian(&mut rng, p);
    let w = sub(&raw, &project_onto(&basis, &raw)?);
    let built: Vec<f64> = delta.iter().zip(&w).map(|(d, w)| d + w).collect();
    let constructed = projection_bound_certificate(&built, &basis, norm_sq(&sub(&delta, &built)))?;
    let gap = (constructed.realized_residual - constructed.bound).abs();
    Ok(ProjectionTrial {
        holds: random.holds && constructed.holds,
        attained: gap <= PROJECTION_ATTAIN_TOL,
        margin: random.realized_residual - random.bound,
    })
}

/// The realized matching residual of a student unroll never falls below the
/// squared distance from the target displacement to the reachable gradient
/// span, and the bound is attained when the target differs from the student
/// displacement by a vector orthogonal to that span.
pub fn projection_bound(v: &VerifySection, seed: u64) -> Certificate {
    const NAME: &str = "projection-bound";
    let start = Instant::now();
    let trials: Result<Vec<ProjectionTrial>> = (0..v.projection_trials)
        .into_par_iter()
        .map(|i| projection_trial(v, seed, i))
        .collect();
    match trials {
        Ok(trials) => {
            let holds = trials.iter().filter(|t| t.holds).count();
            let attained = trials.iter().filter(|t| t.attained).count();
            let min_margin = trials.iter().map(|t| t.margin).fold(f64::INFINITY, f64::min);
            let n = trials.len();
            Certificate::timed(
                NAME,
                start,
                n > 0 && holds == n && attained >= 1,
                format!(
                    "bound holds {holds}/{n}; attained within {PROJECTION_ATTAIN_TOL:e} in {attained}/{n} constructed trials; min realized - bound = {min_margin:.3e}"
                ),
            )
        }
        Err(e) => Certificate::failed(NAME, start, &e),
    }
}

/// Eckart-Young on random displacement-shaped matrices with a decaying
/// column scale: the top-`r` left singular subspace attains the tail energy
/// and no random `r`-subspace does better.
pub fn rank_bottleneck(v: &VerifySection, seed: u64) -> Certificate {
    const NAME: &str = "rank-bottleneck";
    let start = Instant::now();
    let run = || -> Result<(usize, usize, usize)> {
        let mut checks = 0;
        let mut matched = 0;
        let mut violations = 0;
        for m in 0..v.rank_matrices {
            let mut rng = child_rng(seed, 2000 + m as u64);
            let mut data = gaussian(&mut rng, v.rank_rows * v.rank_cols);
            for row in data.chunks_mut(v.rank_cols) {
                for (j, x) in row.iter_mut().enumerate() {
                    *x /= 1.0 + j as f64;
                }
            }
            let a = Matrix::new(v.rank_rows, v.rank_cols, data)?;
            for &r in &v.rank_values {
                let rep = rank_bottleneck_certificate(&a, r, v.rank_trials, derive_seed(seed, (m * 100 + r) as u64))?;
                checks += 1;
                matched += usize::from(rep.top_r_matches);
                violations += rep.violations;
            }
        }
        Ok((checks, matched, violations))
    };
    match run() {
        Ok((checks, matched, violations)) => Certificate::timed(
            NAME,
            start,
            checks > 0 && matched == checks && violations == 0,
            format!(
                "top-r residual matches tail energy in {matched}/{checks}; {violations} of {} random subspaces beat it",
                checks * v.rank_trials
            ),
        ),
        Err(e) => Certificate::failed(NAME, start, &e),
    }
}

/// Teachers, their fitted surrogates, and one student path per teacher.
#[derive(Debug, Clone)]
pub struct FidelityFixture {
    pub teachers: Vec<Trajectory>,
    pub surrogates: Vec<BezierSurrogate>,
    /// Student parameters after each epoch of SGD on a random real subset,
    /// started at the teacher initialisation.
    pub students: Vec<Vec<Params>>,
    pub probe: Dataset,
    pub model: MlpConfig,
}

/// Trains `verify.fidelity_teachers` short teachers on the configured
/// benchmark and fits a surrogate to each.
pub fn fidelity_fixture(cfg: &RunConfig) -> Result<FidelityFixture> {
    let v = &cfg.verify;
    let seed = cfg.stage_seed(Stage::Verify);
    let split = generate_benchmark(&cfg.benchmark())?;
    let model = cfg.student_model_config();
    let mut tcfg = cfg.teacher_config(derive_seed(seed, 1));
    tcfg.epochs = v.fidelity_epochs;
    let teachers = train_teachers(&split.train, &tcfg, &model, v.fidelity_teachers)?;
    let mlp = Mlp::new(model)?;
    let opts = cfg.control_point_options(derive_seed(seed, 100));
    let surrogates = fit_surrogates(&teachers, &split.train, &mlp, cfg.surrogate.batch_size, &opts)?
        .into_iter()
        .map(|f| f.surrogate)
        .collect();
    let students = teachers
        .par_iter()
        .enumerate()
        .map(|(m, t)| {
            let s = derive_seed(seed, 200 + m as u64);
            let subset = random_subset(&split.train, cfg.condense.ipc, s)?;
            let mut path = vec![t.first().clone()];
            run_sgd(
                &mlp,
                &subset,
                tcfg.lr,
                0.0,
                t.epochs(),
                subset.len(),
                t.first().clone(),
                s,
                |_, theta| path.push(theta.clone()),
            )?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    let probe = split.test.select(&(0..split.test.len().min(200)).collect::<Vec<_>>());
    Ok(FidelityFixture {
        teachers,
        surrogates,
        students,
        probe,
        model,
    })
}

/// `sup |Phi - gamma| <= kappa/8 + D` and the student bound
/// `max_j |gamma_stu(t_j) - gamma(t_j)| <= eps_syn + kappa/8 + D`, per teacher.
pub fn fidelity_triangles(fix: &FidelityFixture) -> (Certificate, Certificate) {
    let start = Instant::now();
    let mlp = match Mlp::new(fix.model) {
        Ok(m) => m,
        Err(e) => {
            return (
                Certificate::failed("fidelity-triangle", start, &e),
                Certificate::failed("student-triangle", start, &e),
            )
        }
    };
    let reports: Result<Vec<_>> = fix
        .surrogates
        .par_iter()
        .zip(&fix.teachers)
        .zip(&fix.students)
        .map(|((s, t), stu)| verify_fidelity_geometry(s, t, stu, Some((&mlp, fix.probe.x()))))
        .collect();
    let reports = match reports {
        Ok(r) => r,
        Err(e) => {
            return (
                Certificate::failed("fidelity-triangle", start, &e),
                Certificate::failed("student-triangle", start, &e),
            )
        }
    };
    let n = reports.len();
    let sur = reports.iter().filter(|r| r.surrogate_bound_holds).count();
    let stu = reports.iter().filter(|r| r.student_bound_holds).count();
    let tightest = reports
        .iter()
        .map(|r| r.surrogate_teacher_gap / r.surrogate_bound)
        .fold(0.0, f64::max);
    let tightest_stu = reports
        .iter()
        .map(|r| r.student_teacher_gap / r.student_bound)
        .fold(0.0, f64::max);
    let ratio = reports
        .iter()
        .filter_map(|r| r.prediction_ratio)
        .fold(0.0, f64::max);
    (
        Certificate::timed(
            "fidelity-triangle",
            start,
            n > 0 && sur == n,
            format!(
                "sup|Phi - gamma| <= kappa/8 + D in {sur}/{n}; largest gap/bound {tightest:.3}; max prediction gap per unit parameter gap {ratio:.3}"
            ),
        ),
        Certificate::timed(
            "student-triangle",
            start,
            n > 0 && stu == n,
            format!("student bound holds in {stu}/{n}; largest gap/bound {tightest_stu:.3}"),
        ),
    )
}

/// Every certificate, in a fixed order. Failures to build an instance are
/// reported as failed certificates.
pub fn run_all(cfg: &RunConfig) -> Vec<Certificate> {
    let v = &cfg.verify;
    let seed = cfg.stage_seed(Stage::Verify);
    let mut out = vec![
        projection_bound(v, seed),
        rank_bottleneck(v, seed),
        displacement_rank(v, seed),
        chord_deviation(v, seed),
    ];
    let start = Instant::now();
    match fidelity_fixture(cfg) {
        Ok(fix) => {
            let (a, b) = fidelity_triangles(&fix);
            out.push(a);
            out.push(b);
        }
        Err(e) => {
            out.push(Certificate::failed("fidelity-triangle", start, &e));
            out.push(Certificate::failed("student-triangle", start, &e));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn small() -> VerifySection {
        VerifySection {
            displacement_surrogates: 3,
            displacement_dim: 40,
            displacement_segments: 12,
            combined_surrogates: 3,
            chord_surrogates: 2,
            chord_dim: 30,
            projection_trials: 8,
            rank_matrices: 2,
            rank_rows: 30,
            rank_cols: 12,
            rank_values: vec![1, 3],
            rank_trials: 50,
            fidelity_teachers: 2,
            fidelity_epochs: 4,
            ..VerifySection::default()
        }
    }

    #[test]
    fn synthetic_certificates_pass() {
        let v = small();
        for c in [
            displacement_rank(&v, 1),
            chord_deviation(&v, 1),
            projection_bound(&v, 1),
            rank_bottleneck(&v, 1),
        ] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn fidelity_on_short_teachers() {
        let text = "seed = 4\n[data]\nn = 400\nd = 5\n[model]\nhidden_units = 4\n[teacher]\nbatch_size = 64\n[verify]\nfidelity_teachers = 2\nfidelity_epochs = 4\n";
        let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
        let fix = fidelity_fixture(&cfg).unwrap();
        assert_eq!(fix.students[0].len(), 5);
        let (a, b) = fidelity_triangles(&fix);
        assert!(a.passed && b.passed, "{}\n{}", a.line(), b.line());
    }

    #[test]
    fn line_format() {
        let c = Certificate {
            name: "x".into(),
            passed: false,
            detail: "d".into(),
            wall_ms: 3,
        };
        assert_eq!(c.line(), "FAIL x: d (3 ms)");
    }
}
