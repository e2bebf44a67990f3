//! Quadric landmark initialization from multi-view bounding boxes.
//!
//! Three initializers share the same inputs:
//!
//! * [`init_dqp`] (`tri+yaw`): triangulate the centroid from box centres,
//!   then solve the five-unknown yaw-constrained system for shape and yaw.
//! * [`init_tri`] (`tri`): triangulate the centroid, then solve the full
//!   symmetric 3×3 block without the yaw constraint.
//! * [`init_baseline_linear`] (`q-slam`): one homogeneous solve over all ten
//!   entries of the dual quadric.
//!
//! All solves happen in the camera frame of the first observation and the
//! result is mapped back to the world frame.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    backproject_bbox_planes, compose_dual_quadric, decompose_dual_quadric, ellipsoid_bbox, rigid_inverse, BBox,
    CameraView, DualQuadric, EllipsoidParams, GeometryError, PlaneH,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InitError {
    #[error("need at least {needed} views, got {got}")]
    TooFewViews { needed: usize, got: usize },
    #[error("insufficient parallax (singular value ratio {ratio:.3})")]
    InsufficientParallax { ratio: f64 },
    #[error("need at least {needed} planes, got {got}")]
    TooFewPlanes { needed: usize, got: usize },
    #[error("linear system is rank deficient (singular value ratio {ratio:.3})")]
    RankDeficient { ratio: f64 },
    #[error("recovered shape is invalid: {0}")]
    InvalidShape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{method} initialization failed: {cause}")]
    InitFailure { method: InitMethod, cause: Box<InitError> },
}

pub type Result<T> = std::result::Result<T, InitError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Reject a homogeneous solve when `σ_{n-1} / σ_n` falls below this.
    pub rank_ratio_threshold: f64,
    /// Gauss-Newton passes refining the triangulated centroid against the
    /// observed boxes. Zero keeps the raw box-centre approximation.
    pub center_refinement_iters: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            rank_ratio_threshold: 10.0,
            center_refinement_iters: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InitMethod {
    #[serde(rename = "tri+yaw")]
    Dqp,
    #[serde(rename = "tri")]
    Tri,
    #[serde(rename = "q-slam")]
    Baseline,
}

impl InitMethod {
    pub const ALL: [InitMethod; 3] = [InitMethod::Dqp, InitMethod::Tri, InitMethod::Baseline];

    pub fn name(&self) -> &'static str {
        match self {
            InitMethod::Dqp => "tri+yaw",
            InitMethod::Tri => "tri",
            InitMethod::Baseline => "q-slam",
        }
    }

    pub fn run(&self, obs: &ObservationSet, cfg: &InitConfig) -> Result<EllipsoidParams> {
        match self {
            InitMethod::Dqp => init_dqp(obs, cfg),
            InitMethod::Tri => init_tri(obs, cfg),
            InitMethod::Baseline => init_baseline_linear(obs, cfg),
        }
    }
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tri+yaw" | "dqp" => Ok(InitMethod::Dqp),
            "tri" => Ok(InitMethod::Tri),
            "q-slam" | "qslam" | "baseline" => Ok(InitMethod::Baseline),
            other => Err(format!("unknown method `{other}` (expected tri+yaw, tri or q-slam)")),
        }
    }
}

/// Camera/box pairs observing one object. The first item's camera frame is
/// the reference frame of the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    items: Vec<(CameraView, BBox)>,
}

impl ObservationSet {
    pub fn new(items: Vec<(CameraView, BBox)>) -> Result<Self> {
        if items.is_empty() {
            return Err(InitError::TooFewViews { needed: 1, got: 0 });
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[(CameraView, BBox)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn views(&self) -> impl Iterator<Item = &CameraView> {
        self.items.iter().map(|(v, _)| v)
    }

    /// `T_wr`: reference camera frame → world.
    pub fn reference_to_world(&self) -> Matrix4<f64> {
        rigid_inverse(self.items[0].0.pose())
    }

    /// The same observations with cameras expressed in the reference frame.
    pub fn in_reference_frame(&self) -> Result<Self> {
        let t_wr = self.reference_to_world();
        let items = self
            .items
            .iter()
            .map(|(v, b)| Ok((v.in_frame(&t_wr)?, *b)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }
}

/// Triangulated centroid with solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterEstimate {
    pub point: Vector3<f64>,
    /// Smallest singular value of the row-normalised system.
    pub residual: f64,
    /// `σ₃ / σ₄`.
    pub singular_ratio: f64,
}

/// Right singular vector of the smallest singular value, with the singular
/// values in descending order.
fn null_vector(a: &DMatrix<f64>) -> (DVector<f64>, Vec<f64>) {
    let cols = a.ncols();
    // thin SVD only yields a full V when rows >= cols
    let padded = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smallest = *order.last().expect("non-empty");
    (v_t.row(smallest).transpose().into_owned(), sv)
}

/// `σ_{n-1} / σ_n`, or zero when the nullspace is numerically more than
/// one-dimensional.
fn tail_ratio(sv: &[f64]) -> f64 {
    let n = sv.len();
    let (a, b) = (sv[n - 2], sv[n - 1]);
    if a <= 1e-10 * sv[0] {
        0.0
    } else if b == 0.0 {
        if a > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        a / b
    }
}

fn normalise_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Linear triangulation of one point from pixel observations.
pub fn triangulate_point(views: &[&CameraView], pixels: &[(f64, f64)], cfg: &InitConfig) -> Result<CenterEstimate> {
    if views.len() < 2 {
        return Err(InitError::TooFewViews {
            needed: 2,
            got: views.len(),
        });
    }
    let mut a = DMatrix::zeros(2 * views.len(), 4);
    for (i, (view, &(u, v))) in views.iter().zip(pixels).enumerate() {
        let p = view.projection();
        a.row_mut(2 * i).copy_from(&(p.row(0) - p.row(2) * u));
        a.row_mut(2 * i + 1).copy_from(&(p.row(1) - p.row(2) * v));
    }
    normalise_rows(&mut a);
    let (x, sv) = null_vector(&a);
    let ratio = tail_ratio(&sv);
    if !(ratio >= cfg.rank_ratio_threshold) {
        return Err(InitError::InsufficientParallax { ratio });
    }
    if x[3].abs() < 1e-300 {
        return Err(InitError::InsufficientParallax { ratio });
    }
    Ok(CenterEstimate {
        point: Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]),
        residual: sv[3],
        singular_ratio: ratio,
    })
}

/// Triangulates the object centroid from the box centres (in the frame the
/// cameras of `obs` are expressed in).
pub fn triangulate_center(obs: &ObservationSet, cfg: &InitConfig) -> Result<CenterEstimate> {
    let views: Vec<&CameraView> = obs.views().collect();
    let centres: Vec<(f64, f64)> = obs.items.iter().map(|(_, b)| b.center()).collect();
    triangulate_point(&views, &centres, cfg)
}

/// Rows of the yaw-constrained tangency system; unknowns ordered
/// `(q*₁₁, q*₁₃, q*₂₂, q*₃₃, q*₄₄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct YawLinearSystem {
    m: DMatrix<f64>,
}

impl YawLinearSystem {
    pub const UNKNOWNS: usize = 5;

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn rows(&self) -> usize {
        self.m.nrows()
    }
}

/// Coefficients of `Πᵀ Q* Π = 0` once the centroid `t` is substituted and the
/// shape block is restricted to a rotation about y.
pub fn yaw_row(plane: &PlaneH, t: &Vector3<f64>) -> [f64; 5] {
    let p = plane.coeffs();
    let (p1, p2, p3, p4) = (p[0], p[1], p[2], p[3]);
    [
        p1 * p1,
        2.0 * p1 * p3,
        p2 * p2,
        p3 * p3,
        p4 * p4
            + 2.0 * p1 * p2 * t.x * t.y
            + 2.0 * p1 * p4 * t.x
            + 2.0 * p2 * p3 * t.y * t.z
            + 2.0 * p2 * p4 * t.y
            + 2.0 * p3 * p4 * t.z,
    ]
}

pub fn build_yaw_system(planes: &[PlaneH], t: &Vector3<f64>) -> Result<YawLinearSystem> {
    if planes.len() < YawLinearSystem::UNKNOWNS {
        return Err(InitError::TooFewPlanes {
            needed: YawLinearSystem::UNKNOWNS,
            got: planes.len(),
        });
    }
    let mut m = DMatrix::zeros(planes.len(), 5);
    for (i, plane) in planes.iter().enumerate() {
        for (j, c) in yaw_row(plane, t).into_iter().enumerate() {
            m[(i, j)] = c;
        }
    }
    normalise_rows(&mut m);
    Ok(YawLinearSystem { m })
}

/// Null vector of a homogeneous system plus its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSolution {
    pub vector: DVector<f64>,
    pub singular_values: Vec<f64>,
    pub ratio: f64,
}

fn solve_homogeneous(m: &DMatrix<f64>, unknowns: usize, cfg: &InitConfig) -> Result<NullSolution> {
    if m.nrows() < unknowns - 1 {
        return Err(InitError::TooFewPlanes {
            needed: unknowns - 1,
            got: m.nrows(),
        });
    }
    let (mut v, sv) = null_vector(m);
    let ratio = tail_ratio(&sv);
    if !(ratio >= cfg.rank_ratio_threshold) {
        return Err(InitError::RankDeficient { ratio });
    }
    // q*44 is the last unknown in every system here
    if v[unknowns - 1] > 0.0 {
        v.neg_mut();
    }
    Ok(NullSolution {
        vector: v,
        singular_values: sv,
        ratio,
    })
}

/// Smallest right singular vector of the yaw system, signed so `q*₄₄ < 0`.
pub fn solve_yaw_system(sys: &YawLinearSystem, cfg: &InitConfig) -> Result<NullSolution> {
    if sys.rows() < YawLinearSystem::UNKNOWNS {
        return Err(InitError::TooFewPlanes {
            needed: YawLinearSystem::UNKNOWNS,
            got: sys.rows(),
        });
    }
    solve_homogeneous(&sys.m, YawLinearSystem::UNKNOWNS, cfg)
}

/// Shape and yaw from the reduced dual vector `(q*₁₁, q*₁₃, q*₂₂, q*₃₃, q*₄₄)`.
///
/// `Q₁, Q₃, Q₈` are the entries of the centred xz shape block
/// `[[Q₁, Q₃], [Q₃, Q₈]] = Ry diag(a_x², a_z²) Ryᵀ`, so the axes follow from
/// rotating that block back by the recovered yaw.
pub fn recover_ellipsoid(v: &[f64; 5], t: &Vector3<f64>) -> Result<EllipsoidParams> {
    let [q11, q13, q22, q33, q44] = *v;
    if q44 == 0.0 || !q44.is_finite() {
        return Err(InitError::InvalidShape("q*44 is zero".into()));
    }
    let big_q1 = -q11 / q44 + t.x * t.x;
    let big_q2 = -q22 / q44 + t.y * t.y;
    let big_q3 = -q13 / q44 + t.x * t.z;
    let big_q8 = -q33 / q44 + t.z * t.z;
    if !(big_q2 > 0.0) {
        return Err(InitError::InvalidShape(format!("Q2 = {big_q2:e} is not positive")));
    }
    let denom = big_q8 - big_q1;
    let yaw = if denom == 0.0 && big_q3 == 0.0 {
        0.0
    } else {
        (2.0 * big_q3 / denom).atan() / 2.0
    };
    let (s, c) = yaw.sin_cos();
    let ax2 = (c * c * big_q1 - 2.0 * c * s * big_q3 + s * s * big_q8).abs();
    let az2 = (s * s * big_q1 + 2.0 * c * s * big_q3 + c * c * big_q8).abs();
    let axes = Vector3::new(ax2.sqrt(), big_q2.sqrt(), az2.sqrt());
    EllipsoidParams::yaw_only(axes, *t, yaw).map_err(|e| InitError::InvalidShape(e.to_string()))
}

fn all_planes(obs: &ObservationSet) -> Vec<PlaneH> {
    obs.items
        .iter()
        .flat_map(|(view, b)| backproject_bbox_planes(b, view))
        .collect()
}

/// Row for the full symmetric block with known centroid; unknowns
/// `(q*₁₁, q*₁₂, q*₁₃, q*₂₂, q*₂₃, q*₃₃, q*₄₄)`.
fn block_row(plane: &PlaneH, t: &Vector3<f64>) -> [f64; 7] {
    let p = plane.coeffs();
    let (p1, p2, p3, p4) = (p[0], p[1], p[2], p[3]);
    [
        p1 * p1,
        2.0 * p1 * p2,
        2.0 * p1 * p3,
        p2 * p2,
        2.0 * p2 * p3,
        p3 * p3,
        p4 * p4 + 2.0 * p4 * (p1 * t.x + p2 * t.y + p3 * t.z),
    ]
}

/// Row over all ten entries, ordered as [`DualQuadric::from_upper`].
fn full_row(plane: &PlaneH) -> [f64; 10] {
    let p = plane.coeffs();
    let (p1, p2, p3, p4) = (p[0], p[1], p[2], p[3]);
    [
        p1 * p1,
        2.0 * p1 * p2,
        2.0 * p1 * p3,
        2.0 * p1 * p4,
        p2 * p2,
        2.0 * p2 * p3,
        2.0 * p2 * p4,
        p3 * p3,
        2.0 * p3 * p4,
        p4 * p4,
    ]
}

fn stack<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> DMatrix<f64> {
    let rows: Vec<[f64; N]> = rows.collect();
    let mut m = DMatrix::zeros(rows.len(), N);
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in r.iter().enumerate() {
            m[(i, j)] = *c;
        }
    }
    normalise_rows(&mut m);
    m
}

fn solve_yaw_given_centre(obs_ref: &ObservationSet, t: &Vector3<f64>, cfg: &InitConfig) -> Result<EllipsoidParams> {
    let sys = build_yaw_system(&all_planes(obs_ref), t)?;
    let sol = solve_yaw_system(&sys, cfg)?;
    let v = &sol.vector;
    recover_ellipsoid(&[v[0], v[1], v[2], v[3], v[4]], t)
}

fn solve_block_given_centre(obs_ref: &ObservationSet, t: &Vector3<f64>, cfg: &InitConfig) -> Result<EllipsoidParams> {
    let planes = all_planes(obs_ref);
    if planes.len() < 6 {
        return Err(InitError::TooFewPlanes {
            needed: 6,
            got: planes.len(),
        });
    }
    let m = stack(planes.iter().map(|p| block_row(p, t)));
    let sol = solve_homogeneous(&m, 7, cfg)?;
    let v = &sol.vector;
    let q44 = v[6];
    if q44 == 0.0 {
        return Err(InitError::InvalidShape("q*44 is zero".into()));
    }
    let s = -1.0 / q44;
    let mut q = Matrix4::zeros();
    let block = Matrix3::new(v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5]) * s;
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&block);
    q.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-t));
    q.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-t.transpose()));
    q[(3, 3)] = -1.0;
    let q = DualQuadric::from_matrix(q)?;
    Ok(decompose_dual_quadric(&q)?)
}

/// Box residuals (all four edges per view) of the shape solved for a
/// candidate centroid.
fn box_residuals(
    obs_ref: &ObservationSet,
    centre: &Vector3<f64>,
    cfg: &InitConfig,
    solve: &impl Fn(&ObservationSet, &Vector3<f64>, &InitConfig) -> Result<EllipsoidParams>,
) -> Option<(EllipsoidParams, DVector<f64>)> {
    let e = solve(obs_ref, centre, cfg).ok()?;
    let mut r = DVector::zeros(4 * obs_ref.len());
    for (i, (view, b)) in obs_ref.items.iter().enumerate() {
        let predicted = ellipsoid_bbox(&e, view).ok()?.to_array();
        for (k, (p, o)) in predicted.iter().zip(b.to_array()).enumerate() {
            r[4 * i + k] = p - o;
        }
    }
    Some((e, r))
}

/// Shared skeleton of the centroid-decoupled initializers: triangulate the
/// centroid from box centres and solve for the shape. A box centre is not
/// the image of the centroid, so the raw triangulation is biased. When
/// enabled, the centroid is refined by Gauss-Newton, within a trust region
/// of the smallest raw axis, so that the boxes cast by the re-solved
/// ellipsoid match the observed boxes.
fn init_decoupled(
    obs: &ObservationSet,
    cfg: &InitConfig,
    solve: impl Fn(&ObservationSet, &Vector3<f64>, &InitConfig) -> Result<EllipsoidParams>,
) -> Result<EllipsoidParams> {
    if obs.len() < 2 {
        return Err(InitError::TooFewViews {
            needed: 2,
            got: obs.len(),
        });
    }
    let obs_ref = obs.in_reference_frame()?;
    let views: Vec<&CameraView> = obs_ref.views().collect();
    let observed: Vec<(f64, f64)> = obs_ref.items.iter().map(|(_, b)| b.center()).collect();

    let mut centre = triangulate_point(&views, &observed, cfg)?.point;
    let mut estimate = solve(&obs_ref, &centre, cfg)?;
    let origin = centre;
    // trust region: the bias being corrected is a fraction of the object size
    let radius = estimate.axes().min();
    if cfg.center_refinement_iters == 0 {
        return to_world(obs, &estimate);
    }
    let Some((_, mut residual)) = box_residuals(&obs_ref, &centre, cfg, &solve) else {
        return to_world(obs, &estimate);
    };

    for _ in 0..cfg.center_refinement_iters {
        let mut jac = DMatrix::zeros(residual.len(), 3);
        let mut ok = true;
        for k in 0..3 {
            let h = 1e-6 * (1.0 + centre[k].abs());
            let mut plus = centre;
            let mut minus = centre;
            plus[k] += h;
            minus[k] -= h;
            match (
                box_residuals(&obs_ref, &plus, cfg, &solve),
                box_residuals(&obs_ref, &minus, cfg, &solve),
            ) {
                (Some((_, rp)), Some((_, rm))) => jac.set_column(k, &((rp - rm) / (2.0 * h))),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jac.transpose() * &residual))) else {
            break;
        };
        let step = Vector3::new(step[0], step[1], step[2]);

        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..6 {
            let candidate = centre + step * scale;
            if (candidate - origin).norm() > radius {
                scale *= 0.5;
                continue;
            }
            if let Some((e, r)) = box_residuals(&obs_ref, &candidate, cfg, &solve) {
                if r.norm() < residual.norm() {
                    centre = candidate;
                    estimate = e;
                    residual = r;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted || step.norm() * scale <= 1e-13 * (1.0 + centre.norm()) {
            break;
        }
    }
    to_world(obs, &estimate)
}

fn to_world(obs: &ObservationSet, e_ref: &EllipsoidParams) -> Result<EllipsoidParams> {
    let t_wr = obs.reference_to_world();
    let r = t_wr.fixed_view::<3, 3>(0, 0).into_owned();
    let t = t_wr.fixed_view::<3, 1>(0, 3).into_owned();
    Ok(e_ref.transformed(&r, &t)?)
}

fn check_valid(method: InitMethod, obs: &ObservationSet, e: EllipsoidParams) -> Result<EllipsoidParams> {
    if is_valid_ellipsoid(&e, obs) {
        Ok(e)
    } else {
        Err(InitError::InitFailure {
            method,
            cause: Box::new(InitError::InvalidShape(
                "ellipsoid behind every observing camera".into(),
            )),
        })
    }
}

fn wrap_failure(method: InitMethod) -> impl Fn(InitError) -> InitError {
    move |cause| match cause {
        e @ InitError::InitFailure { .. } => e,
        other => InitError::InitFailure {
            method,
            cause: Box::new(other),
        },
    }
}

/// Decoupled centroid + yaw-constrained initialization (`tri+yaw`).
pub fn init_dqp(obs: &ObservationSet, cfg: &InitConfig) -> Result<EllipsoidParams> {
    let method = InitMethod::Dqp;
    init_decoupled(obs, cfg, solve_yaw_given_centre)
        .map_err(wrap_failure(method))
        .and_then(|e| check_valid(method, obs, e))
}

/// Decoupled centroid, unconstrained rotation (`tri`).
pub fn init_tri(obs: &ObservationSet, cfg: &InitConfig) -> Result<EllipsoidParams> {
    let method = InitMethod::Tri;
    init_decoupled(obs, cfg, solve_block_given_centre)
        .map_err(wrap_failure(method))
        .and_then(|e| check_valid(method, obs, e))
}

/// Single homogeneous solve over the full dual quadric (`q-slam`).
pub fn init_baseline_linear(obs: &ObservationSet, cfg: &InitConfig) -> Result<EllipsoidParams> {
    let method = InitMethod::Baseline;
    let run = || -> Result<EllipsoidParams> {
        if obs.len() < 3 {
            return Err(InitError::TooFewViews {
                needed: 3,
                got: obs.len(),
            });
        }
        let obs_ref = obs.in_reference_frame()?;
        let planes = all_planes(&obs_ref);
        let m = stack(planes.iter().map(full_row));
        let sol = solve_homogeneous(&m, 10, cfg)?;
        let v = &sol.vector;
        let upper: [f64; 10] = std::array::from_fn(|i| v[i]);
        let q = DualQuadric::from_upper(&upper)?;
        let e = decompose_dual_quadric(&q)?;
        to_world(obs, &e)
    };
    run()
        .map_err(wrap_failure(method))
        .and_then(|e| check_valid(method, obs, e))
}

/// A candidate is valid when it decomposes into an ellipsoid with positive
/// finite axes whose centroid lies in front of at least one observing camera.
pub fn is_valid_ellipsoid(e: &EllipsoidParams, obs: &ObservationSet) -> bool {
    is_valid_quadric(&compose_dual_quadric(e), obs)
}

pub fn is_valid_quadric(q: &DualQuadric, obs: &ObservationSet) -> bool {
    match decompose_dual_quadric(q) {
        Ok(e) => {
            e.axes().iter().all(|a| a.is_finite() && *a > 0.0) && obs.views().any(|v| v.depth(e.translation()) > 0.0)
        }
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_dual_quadric;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector4};

    fn k() -> Matrix3<f64> {
        Matrix3::new(700.0, 0.0, 620.0, 0.0, 700.0, 190.0, 0.0, 0.0, 1.0)
    }

    /// Level cameras on an arc of `radius` around the origin looking at it.
    fn arc_views(n: usize, arc_deg: f64, radius: f64) -> Vec<CameraView> {
        (0..n)
            .map(|i| {
                let phi = (-arc_deg / 2.0 + arc_deg * i as f64 / (n - 1) as f64).to_radians();
                let centre = Vector3::new(radius * phi.sin(), 0.0, -radius * phi.cos());
                let z = (-centre).normalize();
                let y = Vector3::new(0.0, 1.0, 0.0);
                let x = y.cross(&z);
                let r_wc = Matrix3::from_columns(&[x, y, z]);
                let r_cw = r_wc.transpose();
                CameraView::from_rt(k(), r_cw, -r_cw * centre).unwrap()
            })
            .collect()
    }

    fn car(yaw_deg: f64) -> EllipsoidParams {
        EllipsoidParams::yaw_only(
            Vector3::new(2.1, 0.8, 0.9),
            Vector3::new(0.3, 0.7, -0.2),
            yaw_deg.to_radians(),
        )
        .unwrap()
    }

    fn observe(e: &EllipsoidParams, views: &[CameraView]) -> ObservationSet {
        ObservationSet::new(views.iter().map(|v| (*v, ellipsoid_bbox(e, v).unwrap())).collect()).unwrap()
    }

    /// Reduced vector `(q11, q13, q22, q33, q44)` of a yaw-only ellipsoid
    /// expressed in the frame the planes live in.
    fn reduced_vector(e: &EllipsoidParams) -> DVector<f64> {
        let m = compose_dual_quadric(e).matrix().to_owned();
        DVector::from_vec(vec![m[(0, 0)], m[(0, 2)], m[(1, 1)], m[(2, 2)], m[(3, 3)]])
    }

    #[test]
    fn two_exact_views_triangulate_point() {
        let views = arc_views(2, 18.0, 10.0);
        let refs: Vec<&CameraView> = views.iter().collect();
        let target = Vector3::new(0.0, 0.0, 10.0);
        let pixels: Vec<(f64, f64)> = refs.iter().map(|v| v.project_point(&target)).collect();
        let est = triangulate_point(&refs, &pixels, &InitConfig::default()).unwrap();
        assert!((est.point - target).norm() < 1e-9);
    }

    #[test]
    fn identical_views_lack_parallax() {
        let v = arc_views(2, 18.0, 10.0)[0];
        let b = BBox::new(500.0, 150.0, 700.0, 250.0).unwrap();
        let obs = ObservationSet::new(vec![(v, b), (v, b)]).unwrap();
        assert!(matches!(
            triangulate_center(&obs, &InitConfig::default()),
            Err(InitError::InsufficientParallax { .. })
        ));
    }

    #[test]
    fn single_view_is_too_few() {
        let v = arc_views(2, 18.0, 10.0)[0];
        let obs = ObservationSet::new(vec![(v, BBox::new(0.0, 0.0, 1.0, 1.0).unwrap())]).unwrap();
        assert!(matches!(
            triangulate_center(&obs, &InitConfig::default()),
            Err(InitError::TooFewViews { .. })
        ));
    }

    #[test]
    fn axis_plane_row() {
        let plane = PlaneH::new(Vector4::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(yaw_row(&plane, &Vector3::zeros()), [1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    /// Independent expansion: Πᵀ Q* Π evaluated entry by entry.
    fn brute_tangency(plane: &PlaneH, q: &Matrix4<f64>) -> f64 {
        let p = plane.coeffs();
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                acc += p[i] * q[(i, j)] * p[j];
            }
        }
        acc
    }

    #[test]
    fn yaw_row_matches_full_expansion() {
        let e = car(4.0);
        let q = compose_dual_quadric(&e);
        let v = reduced_vector(&e);
        for pi in [
            Vector4::new(0.3, -0.5, 0.8, 2.0),
            Vector4::new(-1.0, 0.2, 0.1, -4.0),
            Vector4::new(0.0, 1.0, 0.0, 0.5),
        ] {
            let plane = PlaneH::new(pi).unwrap();
            let row = DVector::from_row_slice(&yaw_row(&plane, e.translation()));
            assert_relative_eq!(row.dot(&v), brute_tangency(&plane, q.matrix()), epsilon = 1e-12);
        }
    }

    #[test]
    fn ground_truth_spans_nullspace_of_exact_system() {
        let views = arc_views(5, 18.0, 10.0);
        let e = car(-3.0);
        let obs = observe(&e, &views);
        let planes = all_planes(&obs);
        let sys = build_yaw_system(&planes, e.translation()).unwrap();
        let v = reduced_vector(&e);
        assert!((sys.matrix() * &v).norm() / v.norm() < 1e-8);

        // rescaling the planes leaves the nullspace unchanged
        let scaled: Vec<PlaneH> = planes.iter().map(|p| p.flipped()).collect();
        let sys2 = build_yaw_system(&scaled, e.translation()).unwrap();
        assert!((sys2.matrix() * &v).norm() / v.norm() < 1e-8);

        let sol = solve_yaw_system(&sys, &InitConfig::default()).unwrap();
        let cos = sol.vector.dot(&v).abs() / v.norm();
        assert!(cos.min(1.0).acos() < 1e-6);
        assert!(sol.vector[4] < 0.0);
    }

    #[test]
    fn duplicated_rows_keep_direction() {
        let views = arc_views(5, 18.0, 10.0);
        let e = car(2.0);
        let planes = all_planes(&observe(&e, &views));
        let mut doubled = planes.clone();
        doubled.extend(planes.iter().cloned());
        let cfg = InitConfig::default();
        let a = solve_yaw_system(&build_yaw_system(&planes, e.translation()).unwrap(), &cfg).unwrap();
        let b = solve_yaw_system(&build_yaw_system(&doubled, e.translation()).unwrap(), &cfg).unwrap();
        assert!((a.vector - b.vector).norm() < 1e-9);
    }

    #[test]
    fn too_few_planes() {
        let plane = PlaneH::new(Vector4::new(1.0, 0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(
            build_yaw_system(&[plane; 4], &Vector3::zeros()),
            Err(InitError::TooFewPlanes { .. })
        ));
    }

    #[test]
    fn recover_axis_aligned_and_yawed() {
        for yaw in [0.0, 5.0, -5.0, 30.0] {
            let e = car(yaw);
            let v = reduced_vector(&e);
            let r = recover_ellipsoid(&[v[0], v[1], v[2], v[3], v[4]], e.translation()).unwrap();
            assert!((r.rotation().y - yaw.to_radians()).abs() < 1e-8, "yaw {yaw}");
            assert!((r.axes() - e.axes()).amax() < 1e-6);
        }
    }

    #[test]
    fn negative_q2_is_invalid() {
        // q22/q44 large positive makes Q2 negative
        let r = recover_ellipsoid(&[-1.0, 0.0, -10.0, -1.0, -1.0], &Vector3::zeros());
        assert!(matches!(r, Err(InitError::InvalidShape(_))));
    }

    #[test]
    fn noiseless_methods_recover_ground_truth() {
        let views = arc_views(5, 18.0, 10.0);
        for yaw in [-5.0, 0.0, 3.0] {
            let e = car(yaw);
            let obs = observe(&e, &views);
            let cfg = InitConfig::default();
            for method in InitMethod::ALL {
                let r = method.run(&obs, &cfg).unwrap();
                assert!((r.translation() - e.translation()).norm() < 1e-6, "{method} {yaw}");
                assert!((r.axes() - e.axes()).norm() < 1e-6, "{method} {yaw}");
            }
        }
    }

    #[test]
    fn raw_box_centre_is_biased_without_refinement() {
        let views = arc_views(5, 18.0, 10.0);
        let e = car(5.0);
        let obs = observe(&e, &views);
        let raw = InitConfig {
            center_refinement_iters: 0,
            ..InitConfig::default()
        };
        let r = init_dqp(&obs, &raw).unwrap();
        let bias = (r.translation() - e.translation()).norm();
        assert!(bias > 1e-6 && bias < 0.5, "bias {bias}");
    }

    #[test]
    fn dqp_is_frame_equivariant() {
        let views = arc_views(5, 18.0, 10.0);
        let e = car(4.0);
        let cfg = InitConfig::default();
        let base = init_dqp(&observe(&e, &views), &cfg).unwrap();

        let rot = *nalgebra::Rotation3::from_euler_angles(0.1, -0.4, 0.25).matrix();
        let shift = Vector3::new(3.0, -1.0, 7.0);
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&shift);
        let t_inv = rigid_inverse(&t);
        let moved_views: Vec<CameraView> = views.iter().map(|v| v.in_frame(&t_inv).unwrap()).collect();
        let moved_e = e.transformed(&rot, &shift).unwrap();
        let out = init_dqp(&observe(&moved_e, &moved_views), &cfg).unwrap();
        let expected = base.transformed(&rot, &shift).unwrap();
        let dq = compose_dual_quadric(&out).matrix() - compose_dual_quadric(&expected).matrix();
        assert!(dq.amax() < 1e-6);
    }

    #[test]
    fn adding_views_keeps_solution_valid() {
        let views = arc_views(5, 18.0, 10.0);
        let e = car(-2.0);
        let cfg = InitConfig::default();
        for n in 2..=5 {
            let obs = observe(&e, &views[..n]);
            let r = init_dqp(&obs, &cfg).unwrap();
            assert!(is_valid_ellipsoid(&r, &obs));
        }
    }

    #[test]
    fn rank_deficient_block_system() {
        // one view only gives four planes, fewer than the six needed
        let views = arc_views(5, 18.0, 10.0);
        let e = car(0.0);
        let obs = observe(&e, &views[..1]);
        let obs_ref = obs.in_reference_frame().unwrap();
        assert!(solve_block_given_centre(&obs_ref, e.translation(), &InitConfig::default()).is_err());
        // two coincident views: eight planes but only four distinct ones
        let v = views[0];
        let b = ellipsoid_bbox(&e, &v).unwrap();
        let obs = ObservationSet::new(vec![(v, b), (v, b)])
            .unwrap()
            .in_reference_frame()
            .unwrap();
        assert!(matches!(
            solve_block_given_centre(&obs, e.translation(), &InitConfig::default()),
            Err(InitError::RankDeficient { .. })
        ));
    }

    #[test]
    fn validity_predicate() {
        let views = arc_views(5, 18.0, 10.0);
        let e = car(0.0);
        let obs = observe(&e, &views);
        assert!(is_valid_ellipsoid(&e, &obs));
        let bad = DualQuadric::from_matrix(Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, 1.0))).unwrap();
        assert!(!is_valid_quadric(&bad, &obs));
        let t = e.translation();
        let behind = EllipsoidParams::new(*e.axes(), Vector3::new(t.x, t.y, -t.z - 25.0), *e.rotation()).unwrap();
        assert!(!is_valid_ellipsoid(&behind, &obs));
    }

    #[test]
    fn method_names_parse() {
        for m in InitMethod::ALL {
            assert_eq!(m.name().parse::<InitMethod>().unwrap(), m);
        }
        assert!("conic".parse::<InitMethod>().is_err());
    }
}
