//! Randomized oracle suites run by `selftest`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assoc::hungarian;
use crate::geometry::{
    backproject_bbox_planes, compose_dual_quadric, decompose_dual_quadric, ellipsoid_bbox, CameraView, EllipsoidParams,
    PlaneH,
};
use crate::init::build_yaw_system;
use crate::optimize::{
    cost_gradient, optimize_quadric, total_cost, ObjectObservation, OptimizerConfig, PriorSizeTable,
};
use crate::sim::{stream_rng, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest error statistic seen, in the suite's own units.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} ({} cases, {} failures, worst {:.3e}, tolerance {:.0e})",
            self.name,
            if self.passed() { "pass" } else { "FAIL" },
            self.cases,
            self.failures,
            self.worst,
            self.tolerance
        )
    }
}

fn report(name: &str, errors: &[f64], tolerance: f64) -> SuiteReport {
    SuiteReport {
        name: name.to_string(),
        cases: errors.len(),
        failures: errors.iter().filter(|e| !(**e <= tolerance)).count(),
        worst: errors
            .iter()
            .copied()
            .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) }),
        tolerance,
    }
}

fn intrinsics() -> Matrix3<f64> {
    Matrix3::new(721.5, 0.0, 621.0, 0.0, 721.5, 187.5, 0.0, 0.0, 1.0)
}

/// Camera at `centre` looking at `target`, rolled by `roll` radians.
pub fn look_at(centre: &Vector3<f64>, target: &Vector3<f64>, roll: f64) -> Option<CameraView> {
    let z = (target - centre).try_normalize(1e-12)?;
    let x = Vector3::new(0.0, 1.0, 0.0).cross(&z).try_normalize(1e-9)?;
    let y = z.cross(&x);
    let (s, c) = roll.sin_cos();
    let r_wc = Matrix3::from_columns(&[c * x + s * y, -s * x + c * y, z]);
    let r_cw = r_wc.transpose();
    CameraView::from_rt(intrinsics(), r_cw, -r_cw * centre).ok()
}

fn random_ellipsoid(rng: &mut ChaCha8Rng, yaw_only: bool) -> EllipsoidParams {
    let axes = Vector3::from_fn(|_, _| rng.gen_range(0.3..3.0));
    let t = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
    let pi = std::f64::consts::PI;
    let rot = if yaw_only {
        Vector3::new(0.0, rng.gen_range(-pi..pi), 0.0)
    } else {
        Vector3::new(rng.gen_range(-pi..pi), rng.gen_range(-1.5..1.5), rng.gen_range(-pi..pi))
    };
    EllipsoidParams::new(axes, t, rot).expect("positive axes")
}

fn random_views(rng: &mut ChaCha8Rng, target: &Vector3<f64>, n: usize) -> Vec<CameraView> {
    let mut views = Vec::new();
    while views.len() < n {
        let dir = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-1.0..1.0),
        );
        let Some(dir) = dir.try_normalize(1e-6) else { continue };
        let centre = target + dir * rng.gen_range(8.0..20.0);
        if let Some(v) = look_at(&centre, target, rng.gen_range(-0.2..0.2)) {
            views.push(v);
        }
    }
    views
}

/// ‖M v‖ / ‖v‖ for the yaw system of exact boxes and the true reduced vector.
pub fn nullspace_witness(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = stream_rng(seed, Purpose::Object, &[101]);
    let mut errors = Vec::with_capacity(cases);
    while errors.len() < cases {
        let e = random_ellipsoid(&mut rng, true);
        let n = rng.gen_range(2..=6);
        let views = random_views(&mut rng, e.translation(), n);
        let Ok(planes) = views
            .iter()
            .map(|v| ellipsoid_bbox(&e, v).map(|b| backproject_bbox_planes(&b, v)))
            .collect::<Result<Vec<[PlaneH; 4]>, _>>()
        else {
            continue;
        };
        let planes: Vec<PlaneH> = planes.into_iter().flatten().collect();
        let Ok(sys) = build_yaw_system(&planes, e.translation()) else {
            continue;
        };
        let q = compose_dual_quadric(&e);
        let m = q.matrix();
        let v = DVector::from_vec(vec![m[(0, 0)], m[(0, 2)], m[(1, 1)], m[(2, 2)], m[(3, 3)]]);
        errors.push((sys.matrix() * &v).norm() / v.norm());
    }
    report("yaw-system nullspace witness", &errors, 1e-8)
}

/// Best `(cardinality, cost)` over all partial matchings of allowed pairs.
pub fn brute_force_assignment(cost: &DMatrix<f64>) -> (usize, f64) {
    fn go(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, k: usize, c: f64, best: &mut (usize, f64)) {
        if row == cost.nrows() {
            if k > best.0 || (k == best.0 && c < best.1) {
                *best = (k, c);
            }
            return;
        }
        go(cost, row + 1, used, k, c, best);
        for j in 0..cost.ncols() {
            if !used[j] && cost[(row, j)].is_finite() {
                used[j] = true;
                go(cost, row + 1, used, k + 1, c + cost[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(cost, 0, &mut vec![false; cost.ncols()], 0, 0.0, &mut best);
    best
}

/// Hungarian assignment against exhaustive search on integer costs with
/// forbidden pairs. The error is 0 on agreement and 1 otherwise.
pub fn hungarian_oracle(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = stream_rng(seed, Purpose::Object, &[102]);
    let errors: Vec<f64> = (0..cases)
        .map(|_| {
            let (n, m) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
            let cost = DMatrix::from_fn(n, m, |_, _| {
                if rng.gen_bool(0.15) {
                    f64::INFINITY
                } else {
                    rng.gen_range(0..20) as f64
                }
            });
            let a = hungarian(&cost);
            let got = (a.pairs.len(), a.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum::<f64>());
            f64::from(u8::from(got != brute_force_assignment(&cost)))
        })
        .collect();
    report("hungarian vs brute force", &errors, 0.0)
}

fn observe(e: &EllipsoidParams, views: &[CameraView]) -> Option<Vec<ObjectObservation>> {
    views
        .iter()
        .map(|v| ellipsoid_bbox(e, v).ok().map(|b| ObjectObservation::new(*v, b)))
        .collect()
}

/// Relative error of the optimizer gradient against central differences.
pub fn gradient_check(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = stream_rng(seed, Purpose::Object, &[103]);
    let cfg = OptimizerConfig::default();
    let table = PriorSizeTable::new()
        .with("chair", Vector3::new(1.5, 0.8, 1.0))
        .expect("positive prior");
    let mut errors = Vec::with_capacity(cases);
    while errors.len() < cases {
        let e = random_ellipsoid(&mut rng, false);
        let n = rng.gen_range(3..=6);
        let views = random_views(&mut rng, e.translation(), n);
        let Some(obs) = observe(&e, &views) else { continue };
        let q = e.to_array();
        let p: [f64; 9] = std::array::from_fn(|i| match i {
            0..=2 => q[i] * rng.gen_range(0.8..1.2),
            3..=5 => q[i] + rng.gen_range(-0.3..0.3),
            _ => q[i] + rng.gen_range(-0.1..0.1),
        });
        let x = EllipsoidParams::from_array(p).expect("positive axes");
        let cost = |p: [f64; 9]| {
            EllipsoidParams::from_array(p)
                .ok()
                .and_then(|e| total_cost(&e, &obs, "chair", &table, &cfg).ok())
                .map(|c| c.total())
        };
        let Ok(g) = cost_gradient(&x, &obs, "chair", &table, &cfg) else {
            continue;
        };
        let fd: Option<Vec<f64>> = (0..9)
            .map(|k| {
                let h = 1e-5 * (1.0 + p[k].abs());
                let (mut a, mut b) = (p, p);
                a[k] += h;
                b[k] -= h;
                Some((cost(a)? - cost(b)?) / (2.0 * h))
            })
            .collect();
        let Some(fd) = fd else { continue };
        let fd = DVector::from_vec(fd);
        errors.push((&g - &fd).norm() / fd.norm().max(1e-12));
    }
    report("optimizer gradient vs central differences", &errors, 1e-4)
}

/// Largest cost increase between consecutive accepted optimizer steps,
/// relative to the initial cost.
pub fn monotone_descent(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = stream_rng(seed, Purpose::Object, &[104]);
    let cfg = OptimizerConfig::default();
    let table = PriorSizeTable::new()
        .with("car", Vector3::new(2.0, 0.75, 0.85))
        .expect("positive prior");
    let mut errors = Vec::with_capacity(cases);
    while errors.len() < cases {
        let yaw_only = rng.gen_bool(0.5);
        let e = random_ellipsoid(&mut rng, yaw_only);
        let n = rng.gen_range(2..=6);
        let views = random_views(&mut rng, e.translation(), n);
        let Some(obs) = observe(&e, &views) else { continue };
        let q = e.to_array();
        let p: [f64; 9] = std::array::from_fn(|i| match i {
            0..=2 => q[i] * rng.gen_range(0.7..1.3),
            3..=5 => q[i] + rng.gen_range(-0.5..0.5),
            _ => q[i] + rng.gen_range(-0.2..0.2),
        });
        let class = if rng.gen_bool(0.5) { "car" } else { "chair" };
        let Ok((_, r)) = optimize_quadric(
            &EllipsoidParams::from_array(p).expect("positive axes"),
            &obs,
            class,
            &table,
            &cfg,
        ) else {
            continue;
        };
        let rise = r.cost_history.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        errors.push(rise / r.initial_cost.max(1e-300));
    }
    report("optimizer monotone descent", &errors, 0.0)
}

/// Compose/decompose round trip: largest discrepancy in sorted axes,
/// centroid and shape matrix, which are invariant to the axis/angle symmetry.
pub fn round_trip(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = stream_rng(seed, Purpose::Object, &[105]);
    let sorted = |e: &EllipsoidParams| {
        let mut a = [e.axes().x, e.axes().y, e.axes().z];
        a.sort_by(f64::total_cmp);
        Vector3::from(a)
    };
    let errors: Vec<f64> = (0..cases)
        .map(|_| {
            let e = random_ellipsoid(&mut rng, false);
            match decompose_dual_quadric(&compose_dual_quadric(&e)) {
                Ok(back) => (sorted(&back) - sorted(&e))
                    .amax()
                    .max((back.translation() - e.translation()).amax())
                    .max((back.shape_matrix() - e.shape_matrix()).amax()),
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    report("dual quadric round trip", &errors, 1e-8)
}

/// The four planes through an ellipsoid's projected box edges are tangent to it.
pub fn tangency(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = stream_rng(seed, Purpose::Object, &[106]);
    let mut errors = Vec::with_capacity(cases);
    while errors.len() < cases {
        let e = random_ellipsoid(&mut rng, false);
        let view = random_views(&mut rng, e.translation(), 1)[0];
        let Ok(b) = ellipsoid_bbox(&e, &view) else { continue };
        let q = compose_dual_quadric(&e);
        let worst = backproject_bbox_planes(&b, &view)
            .iter()
            .map(|p| {
                let pi = p.coeffs();
                (pi.transpose() * q.matrix() * pi)[(0, 0)].abs() / (pi.norm_squared() * q.matrix().norm())
            })
            .fold(0.0, f64::max);
        errors.push(worst);
    }
    report("back-projected box planes tangent", &errors, 1e-8)
}

pub fn run_all(cases: usize, seed: u64) -> Vec<SuiteReport> {
    vec![
        nullspace_witness(cases, seed),
        hungarian_oracle(cases, seed),
        gradient_check(cases.min(20), seed),
        monotone_descent(cases.min(20), seed),
        round_trip(cases, seed),
        tangency(cases, seed),
    ]
}
