//! Projective algebra of ellipsoids.
//!
//! An ellipsoid is carried either as its 9-parameter form ([`EllipsoidParams`]:
//! half-axes, centroid, Z-Y-X Euler angles) or as a 4×4 dual quadric `Q*`
//! ([`DualQuadric`]) whose tangent planes `Π` satisfy `Πᵀ Q* Π = 0`. A calibrated
//! camera `P = K [R | t]` maps a dual quadric to the dual conic `C* = P Q* Pᵀ`,
//! and the axis-aligned box of that conic's tangent lines is the bounding box
//! the ellipsoid casts in the image.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Rotation3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("matrix does not describe a real ellipsoid: {0}")]
    NotAnEllipsoid(String),
    #[error("degenerate conic: {0}")]
    DegenerateConic(String),
    #[error("invalid bounding box [{0}, {1}, {2}, {3}]")]
    InvalidBBox(f64, f64, f64, f64),
    #[error("invalid ellipsoid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("plane has a zero normal")]
    ZeroNormalPlane,
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("object centre lies behind the camera")]
    BehindCamera,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

const SYMMETRY_TOL: f64 = 1e-12;
const ROTATION_TOL: f64 = 1e-9;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x - 2.0 * PI
    } else {
        x
    }
}

/// Rotation for intrinsic Z-Y-X Euler angles: `R = Rz(θz) · Ry(θy) · Rx(θx)`.
pub fn euler_zyx(angles: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_euler_angles(angles.x, angles.y, angles.z).into_inner()
}

/// Inverse of [`euler_zyx`] as `(θx, θy, θz)`. Near θy = ±π/2 the split
/// between θx and θz is arbitrary; θx is taken from the residual rotation so
/// the angles always reproduce `r` to rounding.
pub fn euler_zyx_from_matrix(r: &Matrix3<f64>) -> Vector3<f64> {
    let ty = (-r[(2, 0)]).atan2(r[(0, 0)].hypot(r[(1, 0)]));
    let tz = if r[(0, 0)].hypot(r[(1, 0)]) > 1e-12 {
        r[(1, 0)].atan2(r[(0, 0)])
    } else {
        0.0
    };
    let rest = (Rotation3::from_euler_angles(0.0, ty, tz).into_inner()).transpose() * r;
    let tx = rest[(2, 1)].atan2(rest[(1, 1)]);
    Vector3::new(tx, ty, tz)
}

/// The 9-parameter ellipsoid `[a_x, a_y, a_z, t_x, t_y, t_z, θ_x, θ_y, θ_z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct EllipsoidParams {
    axes: Vector3<f64>,
    translation: Vector3<f64>,
    rotation: Vector3<f64>,
}

impl EllipsoidParams {
    pub fn new(axes: Vector3<f64>, translation: Vector3<f64>, rotation: Vector3<f64>) -> Result<Self> {
        if !axes.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(GeometryError::InvalidParams(format!(
                "axes must be positive and finite, got {:?}",
                axes.as_slice()
            )));
        }
        if !translation.iter().chain(rotation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidParams(
                "non-finite translation or rotation".into(),
            ));
        }
        Ok(Self {
            axes,
            translation,
            rotation: rotation.map(wrap_angle),
        })
    }

    /// Ellipsoid rotated about the y axis only.
    pub fn yaw_only(axes: Vector3<f64>, translation: Vector3<f64>, yaw: f64) -> Result<Self> {
        Self::new(axes, translation, Vector3::new(0.0, yaw, 0.0))
    }

    pub fn from_array(q: [f64; 9]) -> Result<Self> {
        Self::new(
            Vector3::new(q[0], q[1], q[2]),
            Vector3::new(q[3], q[4], q[5]),
            Vector3::new(q[6], q[7], q[8]),
        )
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.axes.x,
            self.axes.y,
            self.axes.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
        ]
    }

    pub fn axes(&self) -> &Vector3<f64> {
        &self.axes
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation(&self) -> &Vector3<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        euler_zyx(&self.rotation)
    }

    /// `R diag(a²) Rᵀ`, the centred shape matrix.
    pub fn shape_matrix(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let d = Matrix3::from_diagonal(&self.axes.component_mul(&self.axes));
        r * d * r.transpose()
    }

    /// Applies the rigid motion `x ↦ R x + t` to the ellipsoid.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<Self> {
        let q = compose_dual_quadric(self);
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        let moved = DualQuadric::from_matrix(t * q.matrix() * t.transpose())?;
        decompose_dual_quadric(&moved)
    }

    /// The canonical representative of the same ellipsoid.
    pub fn canonical(&self) -> Self {
        // compose/decompose of a valid ellipsoid cannot fail
        decompose_dual_quadric(&compose_dual_quadric(self)).unwrap_or(*self)
    }
}

impl TryFrom<[f64; 9]> for EllipsoidParams {
    type Error = GeometryError;

    fn try_from(q: [f64; 9]) -> Result<Self> {
        Self::from_array(q)
    }
}

impl From<EllipsoidParams> for [f64; 9] {
    fn from(e: EllipsoidParams) -> Self {
        e.to_array()
    }
}

fn relative_asymmetry<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Eigenvalues and orthonormal eigenvectors (columns) of a symmetric 3×3
/// matrix by cyclic Jacobi rotations, which stay accurate to rounding when
/// eigenvalues nearly coincide.
pub fn symmetric_eigen3(m: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = Matrix3::identity();
    for _ in 0..64 {
        let off = a[(0, 1)].abs() + a[(0, 2)].abs() + a[(1, 2)].abs();
        if off <= f64::EPSILON * f64::EPSILON * a.amax() || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / t.hypot(1.0);
            let s = t * c;
            let mut g = Matrix3::identity();
            g[(p, p)] = c;
            g[(q, q)] = c;
            g[(p, q)] = s;
            g[(q, p)] = -s;
            a = g.transpose() * a * g;
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            v *= g;
        }
    }
    (a.diagonal(), v)
}

/// Homogeneous 4×4 symmetric dual quadric `Q*`.
///
/// Stored normalised: entry (4,4) is −1 when it is non-zero, otherwise the
/// matrix has unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuadric {
    m: Matrix4<f64>,
}

impl DualQuadric {
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotAnEllipsoid("non-finite entries".into()));
        }
        let asym = relative_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(GeometryError::NotSymmetric(asym));
        }
        let sym = (m + m.transpose()) * 0.5;
        let scale = sym.amax();
        if scale == 0.0 {
            return Err(GeometryError::NotAnEllipsoid("zero matrix".into()));
        }
        let corner = sym[(3, 3)];
        let m = if corner.abs() > 1e-14 * scale {
            sym / -corner
        } else {
            sym / sym.norm()
        };
        Ok(Self { m })
    }

    /// Builds from the 10 independent entries
    /// `(q11, q12, q13, q14, q22, q23, q24, q33, q34, q44)`.
    pub fn from_upper(v: &[f64; 10]) -> Result<Self> {
        let m = Matrix4::new(
            v[0], v[1], v[2], v[3], //
            v[1], v[4], v[5], v[6], //
            v[2], v[5], v[7], v[8], //
            v[3], v[6], v[8], v[9],
        );
        Self::from_matrix(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    /// Centroid `t` read from the last column (valid when entry (4,4) = −1).
    pub fn centre(&self) -> Vector3<f64> {
        -self.m.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `Q*₃₃ + t tᵀ`, positive definite for a real ellipsoid.
    pub fn shape_block(&self) -> Matrix3<f64> {
        let t = self.centre();
        self.m.fixed_view::<3, 3>(0, 0).into_owned() + t * t.transpose()
    }

    pub fn has_unit_corner(&self) -> bool {
        self.m[(3, 3)] == -1.0
    }
}

/// `T · diag(a_x², a_y², a_z², −1) · Tᵀ` with `T = [R(θ) t; 0 1]`.
pub fn compose_dual_quadric(e: &EllipsoidParams) -> DualQuadric {
    let t = e.translation;
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(e.shape_matrix() - t * t.transpose()));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-t));
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-t.transpose()));
    m[(3, 3)] = -1.0;
    // exactly symmetric by construction
    let m = (m + m.transpose()) * 0.5;
    DualQuadric { m }
}

/// Signed permutation matrices with determinant +1, as (column source, sign).
fn proper_signed_permutations() -> Vec<([usize; 3], [f64; 3])> {
    const PERMS: [([usize; 3], f64); 6] = [
        ([0, 1, 2], 1.0),
        ([0, 2, 1], -1.0),
        ([1, 0, 2], -1.0),
        ([1, 2, 0], 1.0),
        ([2, 0, 1], 1.0),
        ([2, 1, 0], -1.0),
    ];
    let mut out = Vec::with_capacity(24);
    for (perm, parity) in PERMS {
        for bits in 0..8u8 {
            let s = [
                if bits & 1 == 0 { 1.0 } else { -1.0 },
                if bits & 2 == 0 { 1.0 } else { -1.0 },
                if bits & 4 == 0 { 1.0 } else { -1.0 },
            ];
            if parity * s[0] * s[1] * s[2] > 0.0 {
                out.push((perm, s));
            }
        }
    }
    out
}

/// Recovers the 9 parameters of an ellipsoid dual quadric.
///
/// The eigen-decomposition of `Q*₃₃ + t tᵀ` fixes the axes only up to the
/// 24 proper signed permutations of the principal frame; the representative
/// returned is the one whose rotation is closest to the identity (largest
/// trace), ties broken by the smallest `|θ_y|`.
pub fn decompose_dual_quadric(q: &DualQuadric) -> Result<EllipsoidParams> {
    if !q.has_unit_corner() {
        return Err(GeometryError::NotAnEllipsoid("entry (4,4) is zero".into()));
    }
    let s = q.shape_block();
    let (eigenvalues, mut v) = symmetric_eigen3(&s);
    if !eigenvalues.iter().all(|l| l.is_finite() && *l > 0.0) {
        return Err(GeometryError::NotAnEllipsoid(format!(
            "shape block eigenvalues {:?}",
            eigenvalues.as_slice()
        )));
    }
    if v.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
    }

    let mut best: Option<(f64, f64, Matrix3<f64>, Vector3<f64>)> = None;
    for (perm, sign) in proper_signed_permutations() {
        let mut r = Matrix3::zeros();
        let mut axes2 = Vector3::zeros();
        for j in 0..3 {
            r.set_column(j, &(v.column(perm[j]) * sign[j]));
            axes2[j] = eigenvalues[perm[j]];
        }
        let trace = r.trace();
        let yaw = euler_zyx_from_matrix(&r).y.abs();
        let better = match &best {
            None => true,
            Some((bt, by, _, _)) => trace > bt + 1e-12 || ((trace - bt).abs() <= 1e-12 && yaw < by - 1e-12),
        };
        if better {
            best = Some((trace, yaw, r, axes2));
        }
    }
    let (_, _, r, axes2) = best.expect("24 candidates");
    EllipsoidParams::new(axes2.map(f64::sqrt), q.centre(), euler_zyx_from_matrix(&r))
        .map_err(|e| GeometryError::NotAnEllipsoid(e.to_string()))
}

/// Axis-aligned image box `[x1, y1, x2, y2]` with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBBox(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box from centre, width and height.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two boxes.
pub fn iou_2d(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Homogeneous plane `π₁x + π₂y + π₃z + π₄ = 0`, stored with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneH {
    pi: Vector4<f64>,
}

impl PlaneH {
    pub fn new(pi: Vector4<f64>) -> Result<Self> {
        let n = pi.fixed_rows::<3>(0).norm();
        if !(n.is_finite() && n > 0.0) || !pi[3].is_finite() {
            return Err(GeometryError::ZeroNormalPlane);
        }
        Ok(Self { pi: pi / n })
    }

    /// Plane `{x : nᵀx = distance}`.
    pub fn from_normal_distance(normal: Vector3<f64>, distance: f64) -> Result<Self> {
        Self::new(Vector4::new(normal.x, normal.y, normal.z, -distance))
    }

    pub fn coeffs(&self) -> &Vector4<f64> {
        &self.pi
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.pi.fixed_rows::<3>(0).into_owned()
    }

    /// Signed offset `Z` such that the plane is `nᵀx = Z`.
    pub fn distance(&self) -> f64 {
        -self.pi[3]
    }

    pub fn flipped(&self) -> Self {
        Self { pi: -self.pi }
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal().dot(x) - self.distance()
    }
}

/// Pinhole camera: intrinsics `K`, world→camera pose `T_cw`, and `P = K [R_cw | t_cw]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    k: Matrix3<f64>,
    pose: Matrix4<f64>,
    p: Matrix3x4<f64>,
}

impl CameraView {
    pub fn new(k: Matrix3<f64>, pose: Matrix4<f64>) -> Result<Self> {
        if !k.iter().chain(pose.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite entries".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(GeometryError::InvalidCamera("K must be upper triangular".into()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        let r = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        if ortho > ROTATION_TOL || (r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidCamera("R_cw is not a proper rotation".into()));
        }
        let last = pose.fixed_view::<1, 4>(3, 0);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(GeometryError::InvalidCamera("pose bottom row must be [0 0 0 1]".into()));
        }
        let p = k * pose.fixed_view::<3, 4>(0, 0);
        Ok(Self { k, pose, p })
    }

    pub fn from_rt(k: Matrix3<f64>, r_cw: Matrix3<f64>, t_cw: Vector3<f64>) -> Result<Self> {
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_cw);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&t_cw);
        Self::new(k, pose)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn pose(&self) -> &Matrix4<f64> {
        &self.pose
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, x: &Vector3<f64>) -> f64 {
        (self.rotation() * x + self.translation()).z
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> (f64, f64) {
        let h = self.p * x.push(1.0);
        (h.x / h.z, h.y / h.z)
    }

    /// The same camera expressed in a frame `r` given `T_wr` (frame r → world).
    pub fn in_frame(&self, t_wr: &Matrix4<f64>) -> Result<Self> {
        Self::new(self.k, self.pose * t_wr)
    }
}

/// Inverse of a rigid 4×4 transform.
pub fn rigid_inverse(t: &Matrix4<f64>) -> Matrix4<f64> {
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let p = -(r * t.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&p);
    out
}

/// 3×3 symmetric homogeneous dual conic `C*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConic {
    m: Matrix3<f64>,
}

impl DualConic {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let asym = relative_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(GeometryError::NotSymmetric(asym));
        }
        Ok(Self {
            m: (m + m.transpose()) * 0.5,
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }
}

/// `P Q Pᵀ` on raw matrices, symmetrised.
pub fn project_dual_matrix(q: &Matrix4<f64>, p: &Matrix3x4<f64>) -> Matrix3<f64> {
    let c = p * q * p.transpose();
    (c + c.transpose()) * 0.5
}

pub fn project_quadric(q: &DualQuadric, view: &CameraView) -> DualConic {
    DualConic {
        m: project_dual_matrix(&q.m, &view.p),
    }
}

/// Roots of `c_aa − 2 s c_a2 + s² c_22 = 0`, the tangency condition for the
/// lines `s = const` (vertical or horizontal image lines).
fn tangent_pair(c_aa: f64, c_a2: f64, c_22: f64) -> Result<(f64, f64)> {
    let disc = c_a2 * c_a2 - c_aa * c_22;
    if !(disc > 0.0) {
        return Err(GeometryError::DegenerateConic(format!("discriminant {disc:e}")));
    }
    let root = disc.sqrt();
    let a = (c_a2 + root) / c_22;
    let b = (c_a2 - root) / c_22;
    Ok((a.min(b), a.max(b)))
}

/// Axis-aligned box of the conic's tangent lines.
///
/// The conic must follow the sign convention of a projected, normalised dual
/// quadric: `C*₃₃ < 0` for a bounded ellipse.
pub fn conic_bbox(c: &DualConic) -> Result<BBox> {
    let m = &c.m;
    let c22 = m[(2, 2)];
    if !(c22 < -1e-14 * m.amax()) {
        return Err(GeometryError::DegenerateConic(format!(
            "image conic is not a bounded ellipse (c33 = {c22:e})"
        )));
    }
    let (x1, x2) = tangent_pair(m[(0, 0)], m[(0, 2)], c22)?;
    let (y1, y2) = tangent_pair(m[(1, 1)], m[(1, 2)], c22)?;
    BBox::new(x1, y1, x2, y2).map_err(|e| GeometryError::DegenerateConic(e.to_string()))
}

/// Bounding box cast by the quadric in `view`, rejecting quadrics whose
/// centre is behind the camera.
pub fn quadric_bbox(q: &DualQuadric, view: &CameraView) -> Result<BBox> {
    if view.depth(&q.centre()) <= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    conic_bbox(&project_quadric(q, view))
}

pub fn ellipsoid_bbox(e: &EllipsoidParams, view: &CameraView) -> Result<BBox> {
    quadric_bbox(&compose_dual_quadric(e), view)
}

/// Back-projects the four box edges to planes `Π = Pᵀ l`, ordered
/// left (x1), top (y1), right (x2), bottom (y2).
pub fn backproject_bbox_planes(b: &BBox, view: &CameraView) -> [PlaneH; 4] {
    let lines = [
        Vector3::new(1.0, 0.0, -b.x1),
        Vector3::new(0.0, 1.0, -b.y1),
        Vector3::new(1.0, 0.0, -b.x2),
        Vector3::new(0.0, 1.0, -b.y2),
    ];
    // Pᵀ l has a zero normal only for a degenerate P, which CameraView excludes
    lines.map(|l| PlaneH::new(view.p.transpose() * l).expect("valid camera"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn k_default() -> Matrix3<f64> {
        Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0)
    }

    fn sphere(t: Vector3<f64>, r: f64) -> EllipsoidParams {
        EllipsoidParams::new(Vector3::repeat(r), t, Vector3::zeros()).unwrap()
    }

    #[test]
    fn unit_sphere_composes_to_diagonal() {
        let q = compose_dual_quadric(&sphere(Vector3::zeros(), 1.0));
        assert_eq!(*q.matrix(), Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, -1.0)));
    }

    #[test]
    fn translated_sphere_block_and_column() {
        let t = Vector3::new(0.0, 0.0, 5.0);
        let q = compose_dual_quadric(&sphere(t, 1.0));
        let m = q.matrix();
        assert_eq!(m.column(3).into_owned(), Vector4::new(0.0, 0.0, -5.0, -1.0));
        let block = Matrix3::identity() - t * t.transpose();
        assert_relative_eq!(m.fixed_view::<3, 3>(0, 0).into_owned(), block, epsilon = 1e-12);
    }

    #[test]
    fn quarter_turn_about_y_swaps_x_and_z() {
        let e = EllipsoidParams::yaw_only(Vector3::new(2.0, 1.0, 1.0), Vector3::zeros(), PI / 2.0).unwrap();
        let q = compose_dual_quadric(&e);
        let expected = Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 4.0, -1.0));
        assert_relative_eq!(*q.matrix(), expected, epsilon = 1e-12);
    }

    #[test]
    fn decompose_identity_and_wrong_signature() {
        let q = DualQuadric::from_matrix(Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, -1.0))).unwrap();
        let e = decompose_dual_quadric(&q).unwrap();
        assert_relative_eq!(*e.axes(), Vector3::repeat(1.0), epsilon = 1e-12);
        assert_relative_eq!(*e.translation(), Vector3::zeros(), epsilon = 1e-12);

        let bad = DualQuadric::from_matrix(Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, 1.0))).unwrap();
        assert!(matches!(
            decompose_dual_quadric(&bad),
            Err(GeometryError::NotAnEllipsoid(_))
        ));
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 1)] = 0.1;
        assert!(matches!(
            DualQuadric::from_matrix(m),
            Err(GeometryError::NotSymmetric(_))
        ));
    }

    #[test]
    fn normalisation_fixes_corner() {
        let q = compose_dual_quadric(&sphere(Vector3::new(1.0, 2.0, 3.0), 0.5));
        let scaled = DualQuadric::from_matrix(q.matrix() * -3.5).unwrap();
        assert_relative_eq!(*scaled.matrix(), *q.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_explicit_product() {
        let view = CameraView::new(Matrix3::identity(), Matrix4::identity()).unwrap();
        let q = compose_dual_quadric(&sphere(Vector3::new(0.0, 0.0, 5.0), 1.0));
        let c = project_quadric(&q, &view);
        let p = view.projection();
        let qm = q.matrix();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        acc += p[(i, a)] * qm[(a, b)] * p[(j, b)];
                    }
                }
                assert_relative_eq!(c.matrix()[(i, j)], acc, epsilon = 1e-12);
            }
        }
        // diag(1, 1, 1 - 25) for this configuration
        assert_relative_eq!(
            *c.matrix(),
            Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -24.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sphere_bbox_matches_tangent_cone() {
        let view = CameraView::new(k_default(), Matrix4::identity()).unwrap();
        let q = compose_dual_quadric(&sphere(Vector3::new(0.0, 0.0, 5.0), 1.0));
        let b = quadric_bbox(&q, &view).unwrap();
        let half = 500.0 / 24f64.sqrt();
        assert_relative_eq!(b.center().0, 320.0, epsilon = 1e-9);
        assert_relative_eq!(b.center().1, 240.0, epsilon = 1e-9);
        assert_relative_eq!(b.width() / 2.0, half, epsilon = 1e-9);
        assert_relative_eq!(b.height() / 2.0, half, epsilon = 1e-9);
    }

    #[test]
    fn imaginary_conic_is_degenerate() {
        // positive definite dual conic has no real tangent lines
        let c = DualConic::from_matrix(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * -1.0).unwrap();
        assert!(matches!(conic_bbox(&c), Err(GeometryError::DegenerateConic(_))));
        let c = DualConic::from_matrix(Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)).unwrap();
        assert!(matches!(conic_bbox(&c), Err(GeometryError::DegenerateConic(_))));
    }

    #[test]
    fn sphere_behind_camera_rejected() {
        let view = CameraView::new(k_default(), Matrix4::identity()).unwrap();
        let q = compose_dual_quadric(&sphere(Vector3::new(0.0, 0.0, -5.0), 1.0));
        assert_eq!(quadric_bbox(&q, &view), Err(GeometryError::BehindCamera));
    }

    #[test]
    fn camera_inside_ellipsoid_is_degenerate() {
        let view = CameraView::new(k_default(), Matrix4::identity()).unwrap();
        let q = compose_dual_quadric(&sphere(Vector3::new(0.0, 0.0, 0.5), 2.0));
        assert!(matches!(
            quadric_bbox(&q, &view),
            Err(GeometryError::DegenerateConic(_))
        ));
    }

    #[test]
    fn backprojected_left_edge_of_identity_camera() {
        let view = CameraView::new(Matrix3::identity(), Matrix4::identity()).unwrap();
        let b = BBox::new(0.0, -1.0, 1.0, 1.0).unwrap();
        let planes = backproject_bbox_planes(&b, &view);
        assert_relative_eq!(*planes[0].coeffs(), Vector4::new(1.0, 0.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let far = BBox::new(10.0, 10.0, 11.0, 11.0).unwrap();
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &far), 0.0);
        // intersection 1, union 4 + 4 - 1
        assert_relative_eq!(iou_2d(&a, &b), 1.0 / 7.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn zero_normal_plane_rejected() {
        assert_eq!(
            PlaneH::new(Vector4::new(0.0, 0.0, 0.0, 1.0)),
            Err(GeometryError::ZeroNormalPlane)
        );
    }

    #[test]
    fn camera_validation() {
        let mut k = k_default();
        k[(1, 0)] = 1.0;
        assert!(CameraView::new(k, Matrix4::identity()).is_err());
        let mut pose = Matrix4::identity();
        pose[(0, 0)] = -1.0;
        assert!(CameraView::new(k_default(), pose).is_err());
    }

    #[test]
    fn angles_wrap_into_half_open_interval() {
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    fn arb_ellipsoid(max_angle: f64) -> impl Strategy<Value = EllipsoidParams> {
        (
            0.3f64..3.0,
            0.3f64..3.0,
            0.3f64..3.0,
            prop::array::uniform3(-10.0f64..10.0),
            prop::array::uniform3(-max_angle..max_angle),
        )
            .prop_filter("distinct axes", |(a, b, c, _, _)| {
                (a - b).abs() > 0.1 && (b - c).abs() > 0.1 && (a - c).abs() > 0.1
            })
            .prop_map(|(a, b, c, t, r)| {
                EllipsoidParams::new(Vector3::new(a, b, c), Vector3::from(t), Vector3::from(r)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn block_identity(e in arb_ellipsoid(PI)) {
            let q = compose_dual_quadric(&e);
            let t = e.translation();
            let block = e.shape_matrix() - t * t.transpose();
            let m = q.matrix();
            prop_assert!((m.fixed_view::<3, 3>(0, 0) - block).amax() < 1e-10);
            prop_assert!((m.column(3) - Vector4::new(-t.x, -t.y, -t.z, -1.0)).amax() < 1e-10);
        }

        #[test]
        fn small_rotations_round_trip_exactly(e in arb_ellipsoid(0.2)) {
            let back = decompose_dual_quadric(&compose_dual_quadric(&e)).unwrap();
            let diff = back.to_array().iter().zip(e.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-8, "diff {}", diff);
        }

        #[test]
        fn eigen_reconstructs_with_close_eigenvalues(
            a in 0.3f64..3.0,
            gap in 0.0f64..1e-3,
            c in 0.3f64..3.0,
            r in prop::array::uniform3(-PI..PI),
        ) {
            let rot = euler_zyx(&Vector3::from(r));
            let m = rot * Matrix3::from_diagonal(&Vector3::new(a, a + gap, c)) * rot.transpose();
            let (l, v) = symmetric_eigen3(&m);
            prop_assert!((v.transpose() * v - Matrix3::identity()).amax() < 1e-14);
            prop_assert!((v * Matrix3::from_diagonal(&l) * v.transpose() - m).amax() < 1e-13);
        }

        #[test]
        fn euler_inverse_reproduces_rotation(r in prop::array::uniform3(-PI..PI), near_lock in any::<bool>()) {
            let mut r = Vector3::from(r);
            if near_lock {
                r.y = PI / 2.0 - 1e-9;
            }
            let m = euler_zyx(&r);
            prop_assert!((euler_zyx(&euler_zyx_from_matrix(&m)) - m).amax() < 1e-14);
        }

        #[test]
        fn projection_is_homogeneous(e in arb_ellipsoid(PI), lambda in -5.0f64..5.0) {
            let view = CameraView::new(k_default(), Matrix4::identity()).unwrap();
            let q = compose_dual_quadric(&e);
            let c = project_dual_matrix(q.matrix(), view.projection());
            let cl = project_dual_matrix(&(q.matrix() * lambda), view.projection());
            prop_assert!((cl - c * lambda).amax() <= 1e-9 * c.amax().max(1.0));
            prop_assert!(relative_asymmetry(&c) == 0.0);
        }

        #[test]
        fn iou_symmetric_and_bounded(
            a in (0.0f64..100.0, 0.0f64..100.0, 1.0f64..50.0, 1.0f64..50.0),
            b in (0.0f64..100.0, 0.0f64..100.0, 1.0f64..50.0, 1.0f64..50.0),
        ) {
            let a = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
            let b = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
            let ab = iou_2d(&a, &b);
            prop_assert_eq!(ab, iou_2d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }
    }
}
