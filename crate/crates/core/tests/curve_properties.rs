//! Bezier surrogate and displacement-geometry invariants, checked against
//! direct evaluation and against nalgebra's singular values.

use btm_core::eval::Dataset;
use btm_core::geometry::{
    build_displacements, rank_bottleneck_certificate, reachable_span, SegmentMeta, Supervision,
};
use btm_core::linalg::{norm, project_onto, sub};
use btm_core::rng::rng_from;
use btm_core::surrogate::{
    mean_path_loss, optimize_control_point, ControlPointOptions, DatasetObjective, PathQuadrature,
    QuadraticLandscape, PATH_LOSS_GRID_POINTS,
};
use btm_core::teacher::{train_teacher, TeacherConfig};
use btm_core::{BezierSurrogate, Matrix, Mlp, MlpConfig, Params};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(p: usize, rng: &mut impl Rng) -> Params {
    Params((0..p).map(|_| StandardNormal.sample(rng)).collect())
}

fn random_surrogate(p: usize, seed: u64) -> BezierSurrogate {
    let mut rng = rng_from(seed);
    BezierSurrogate::new(gaussian(p, &mut rng), gaussian(p, &mut rng), gaussian(p, &mut rng)).unwrap()
}

fn singular_values(a: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
        .singular_values()
        .iter()
        .copied()
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn time_segments(count: usize, seed: u64) -> Vec<SegmentMeta> {
    let mut rng = rng_from(seed);
    (0..count)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            SegmentMeta {
                trajectory: 0,
                start: a.min(b),
                end: a.max(b).max(a.min(b) + 1e-3).min(1.0),
            }
        })
        .collect()
}

#[test]
fn one_d_worked_example() {
    let s = BezierSurrogate::new(Params(vec![0.0]), Params(vec![1.0]), Params(vec![0.0])).unwrap();
    assert_eq!(s.eval(0.5).unwrap().0, vec![0.5]);
    assert_eq!(s.kappa(), 4.0);
    let s = BezierSurrogate::new(Params(vec![0.0]), Params(vec![1.0]), Params(vec![1.0])).unwrap();
    assert_eq!(s.eval(0.5).unwrap().0, vec![0.75]);
    assert_eq!(s.kappa(), 2.0);
    // peak chord gap kappa / 8
    assert_eq!(norm(&sub(&s.eval(0.5).unwrap(), &s.chord(0.5))), 0.25);
}

#[test]
fn linear_surrogate_has_no_bend() {
    let s = random_surrogate(7, 3).linearized();
    assert!(s.kappa() <= 1e-14);
    for t in [0.1, 0.37, 0.8] {
        let gap = norm(&sub(&s.eval(t).unwrap(), &s.chord(t)));
        assert!(gap <= 1e-14);
    }
}

#[test]
fn quadratic_landscape_reaches_closed_form_control_point() {
    // argmin_phi of the path integral of |Phi(t) - c|^2 is 5c/2 - 3(a + b)/4
    let mut rng = rng_from(21);
    let (a, b) = (gaussian(6, &mut rng), gaussian(6, &mut rng));
    let c = gaussian(6, &mut rng).0;
    let want: Vec<f64> = (0..6).map(|i| 2.5 * c[i] - 0.75 * (a[i] + b[i])).collect();
    let opts = ControlPointOptions {
        lr: 0.5,
        tol: 1e-12,
        max_iters: 20_000,
        quadrature: PathQuadrature::GaussLegendre { nodes: 5 },
        seed: 0,
    };
    let fit = optimize_control_point(&a, &b, &QuadraticLandscape { center: c }, &opts).unwrap();
    assert!(fit.accepted);
    let err = norm(&sub(&fit.surrogate.control, &want));
    assert!(err <= 1e-8 * (1.0 + norm(&want)), "{err}");
}

#[test]
fn fitted_curve_beats_straight_line_on_blobs() {
    let mut rng = rng_from(4);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..120 {
        let label = (i % 2) as f64;
        let shift = if label == 1.0 { 2.0 } else { -2.0 };
        rows.push(vec![shift + 0.5 * rng.random::<f64>(), 0.5 * rng.random::<f64>() - shift]);
        y.push(label);
    }
    let data = Dataset::new(Matrix::from_rows(&rows).unwrap(), y).unwrap();
    let model = MlpConfig::new(2, 4);
    let teacher = train_teacher(
        &data,
        &TeacherConfig {
            lr: 0.1,
            momentum: 0.0,
            epochs: 20,
            batch_size: 16,
            seed: 9,
        },
        &model,
    )
    .unwrap();
    let objective = DatasetObjective::new(Mlp::new(model).unwrap(), &data);
    let opts = ControlPointOptions {
        lr: 0.05,
        max_iters: 200,
        seed: 2,
        ..ControlPointOptions::default()
    };
    let fit = optimize_control_point(teacher.first(), teacher.last(), &objective, &opts).unwrap();
    let line = BezierSurrogate::linear(teacher.first().clone(), teacher.last().clone()).unwrap();
    let line_loss = mean_path_loss(&line, &objective, PATH_LOSS_GRID_POINTS).unwrap();
    assert_eq!(fit.start_path_loss, line_loss);
    assert!(fit.end_path_loss < line_loss, "{} vs {line_loss}", fit.end_path_loss);
}

#[test]
fn ten_bezier_segments_have_rank_at_most_two() {
    let s = [random_surrogate(40, 8)];
    let a = build_displacements(Supervision::Bezier(&s), &time_segments(10, 1)).unwrap();
    let sv = singular_values(&a.a);
    assert!(sv[2] <= 1e-8 * sv[0], "{sv:?}");
    let lin = build_displacements(Supervision::Linear(&s), &time_segments(10, 1)).unwrap();
    let sv = singular_values(&lin.a);
    assert!(sv[1] <= 1e-8 * sv[0], "{sv:?}");
}

#[test]
fn rank_four_bottleneck_on_thirty_by_twelve() {
    let mut rng = rng_from(30);
    let data: Vec<f64> = (0..30 * 12).map(|_| StandardNormal.sample(&mut rng)).collect();
    let a = Matrix::new(30, 12, data).unwrap();
    let rep = rank_bottleneck_certificate(&a, 4, 500, 5).unwrap();
    assert!(rep.holds(), "{rep:?}");
    let sv = singular_values(&a);
    let tail: f64 = sv[4..].iter().map(|s| s * s).sum::<f64>() / 12.0;
    assert!((rep.tail_energy - tail).abs() <= 1e-9 * tail);
    assert!(rep.min_random_residual >= tail);
}

#[test]
fn scaled_gradient_sum_lies_in_reachable_span() {
    let mut rng = rng_from(77);
    let grads: Vec<Vec<f64>> = (0..6).map(|_| gaussian(25, &mut rng).0).collect();
    let eta = 0.07;
    let delta: Vec<f64> = (0..25).map(|i| -eta * grads.iter().map(|g| g[i]).sum::<f64>()).collect();
    let basis = reachable_span(&grads, 1e-10).unwrap();
    assert_eq!(basis.cols(), 6);
    let resid = norm(&sub(&delta, &project_onto(&basis, &delta).unwrap()));
    assert!(resid <= 1e-8 * norm(&delta));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_displacement_matches_curve_difference(
        p in 1usize..30, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0
    ) {
        prop_assume!((a - b).abs() > 1e-9);
        let (ts, te) = (a.min(b), a.max(b));
        let s = random_surrogate(p, seed);
        let closed = s.segment_displacement(ts, te).unwrap();
        let direct = sub(&s.eval(te).unwrap(), &s.eval(ts).unwrap());
        let scale = norm(&s.theta0) + norm(&s.control) + norm(&s.theta_t);
        prop_assert!(norm(&sub(&closed, &direct)) <= 1e-12 * (1.0 + scale));
    }

    #[test]
    fn chord_gap_follows_parabola(p in 1usize..30, seed in any::<u64>(), t in 0.0f64..=1.0) {
        let s = random_surrogate(p, seed);
        let gap = norm(&sub(&s.eval(t).unwrap(), &s.chord(t)));
        let law = t * (1.0 - t) * s.kappa() / 2.0;
        prop_assert!((gap - law).abs() <= 1e-12 * (1.0 + s.kappa()));
        prop_assert!(gap <= s.kappa() / 8.0 + 1e-12 * (1.0 + s.kappa()));
    }

    #[test]
    fn endpoints_are_reproduced(p in 1usize..30, seed in any::<u64>()) {
        let s = random_surrogate(p, seed);
        prop_assert_eq!(s.eval(0.0).unwrap(), s.theta0.clone());
        prop_assert_eq!(s.eval(1.0).unwrap(), s.theta_t.clone());
    }

    #[test]
    fn surrogate_bytes_round_trip(p in 1usize..30, seed in any::<u64>()) {
        let s = random_surrogate(p, seed);
        let bytes = s.to_bytes();
        prop_assert_eq!(bytes.len(), 16 + 24 * p);
        prop_assert_eq!(BezierSurrogate::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn combined_surrogates_respect_twice_count(m in 1usize..5, seed in any::<u64>()) {
        let surrs: Vec<BezierSurrogate> = (0..m).map(|i| random_surrogate(30, seed ^ i as u64)).collect();
        let mut segs = Vec::new();
        for i in 0..m {
            for mut sg in time_segments(6, seed.wrapping_add(i as u64)) {
                sg.trajectory = i;
                segs.push(sg);
            }
        }
        let a = build_displacements(Supervision::Bezier(&surrs), &segs).unwrap();
        let sv = singular_values(&a.a);
        if 2 * m < sv.len() {
            prop_assert!(sv[2 * m] <= 1e-8 * sv[0], "{:?}", sv);
        }
    }
}
