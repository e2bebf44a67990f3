//! Levenberg-Marquardt refinement of an ellipsoid against box detections,
//! a per-class size prior and optional texture planes, each term under a
//! Huber kernel.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ellipsoid_bbox, BBox, CameraView, EllipsoidParams, PlaneH};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("no active residual terms")]
    NoActiveResiduals,
    #[error("invalid starting ellipsoid: {0}")]
    InvalidInitial(String),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, OptimizeError>;

/// One detection of the object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectObservation {
    pub view: CameraView,
    pub bbox: BBox,
    /// Plane fitted to surface features, in the same frame as the ellipsoid.
    pub texture_plane: Option<PlaneH>,
    /// Detections touching the image border are truncated and are ignored.
    pub at_image_edge: bool,
}

impl ObjectObservation {
    pub fn new(view: CameraView, bbox: BBox) -> Self {
        Self {
            view,
            bbox,
            texture_plane: None,
            at_image_edge: false,
        }
    }
}

/// Prior half-axis lengths per class label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorSizeTable {
    sizes: BTreeMap<String, [f64; 3]>,
}

impl PriorSizeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: &str, axes: Vector3<f64>) -> Result<()> {
        if !axes.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(OptimizeError::InvalidConfig(format!(
                "prior axes for {class} must be positive"
            )));
        }
        self.sizes.insert(class.to_string(), [axes.x, axes.y, axes.z]);
        Ok(())
    }

    pub fn with(mut self, class: &str, axes: Vector3<f64>) -> Result<Self> {
        self.insert(class, axes)?;
        Ok(self)
    }

    pub fn get(&self, class: &str) -> Option<Vector3<f64>> {
        self.sizes.get(class).map(|a| Vector3::from(*a))
    }

    pub fn remove(&mut self, class: &str) -> Option<Vector3<f64>> {
        self.sizes.remove(class).map(Vector3::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub huber_delta_bbox: f64,
    pub huber_delta_prior: f64,
    pub huber_delta_plane: f64,
    pub omega_bbox: Matrix4<f64>,
    pub omega_prior: Matrix3<f64>,
    pub omega_plane: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// Classes optimized with pitch and roll held fixed.
    pub planar_classes: Vec<String>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let sigma_px: f64 = 4.0;
        let sigma_a: f64 = 0.3;
        let sigma_p: f64 = 0.5;
        Self {
            huber_delta_bbox: 1.0,
            huber_delta_prior: 1.0,
            huber_delta_plane: 1.0,
            omega_bbox: Matrix4::identity() / (sigma_px * sigma_px),
            omega_prior: Matrix3::identity() / (sigma_a * sigma_a),
            omega_plane: 1.0 / (sigma_p * sigma_p),
            max_iterations: 100,
            gradient_tolerance: 1e-10,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-12,
            initial_damping: 1e-3,
            planar_classes: ["car", "van", "truck", "bus"].map(String::from).to_vec(),
        }
    }
}

fn is_spd<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> bool
where
    nalgebra::Const<N>: nalgebra::DimMin<nalgebra::Const<N>, Output = nalgebra::Const<N>>,
{
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0) && m.cholesky().is_some()
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OptimizeError::InvalidConfig(m.to_string()));
        if !(self.huber_delta_bbox > 0.0 && self.huber_delta_prior > 0.0 && self.huber_delta_plane > 0.0) {
            return bad("Huber deltas must be positive");
        }
        if !is_spd(&self.omega_bbox) || !is_spd(&self.omega_prior) || !(self.omega_plane > 0.0) {
            return bad("information matrices must be symmetric positive definite");
        }
        if !(self.initial_damping > 0.0) {
            return bad("initial damping must be positive");
        }
        Ok(())
    }

    pub fn is_planar(&self, class: &str) -> bool {
        self.planar_classes.iter().any(|c| c == class)
    }
}

/// Huber kernel on a squared, information-weighted norm `f = eᵀΩe`.
pub fn huber(f: f64, delta: f64) -> f64 {
    if f <= delta * delta {
        f
    } else {
        2.0 * delta * f.sqrt() - delta * delta
    }
}

/// `dH/df`.
pub fn huber_weight(f: f64, delta: f64) -> f64 {
    if f <= delta * delta {
        1.0
    } else {
        delta / f.sqrt()
    }
}

/// Projected box minus detected box, in pixels `(x1, y1, x2, y2)`.
pub fn residual_detection(e: &EllipsoidParams, obs: &ObjectObservation) -> Option<Vector4<f64>> {
    let predicted = ellipsoid_bbox(e, &obs.view).ok()?;
    Some(Vector4::from(predicted.to_array()) - Vector4::from(obs.bbox.to_array()))
}

pub fn residual_prior_axes(e: &EllipsoidParams, prior: &Vector3<f64>) -> Vector3<f64> {
    prior - e.axes()
}

/// `Z_D − Z_O` where `Z_O = nᵀt − sqrt(nᵀ R D Rᵀ n)` is the offset of the
/// ellipsoid's tangent plane with normal `n` on the side facing against `n`.
pub fn residual_texture_plane(e: &EllipsoidParams, plane: &PlaneH) -> f64 {
    let n = plane.normal();
    let z_o = n.dot(e.translation()) - (n.transpose() * e.shape_matrix() * n)[0].max(0.0).sqrt();
    plane.distance() - z_o
}

/// Per-term cost contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub detection: f64,
    pub prior: f64,
    pub plane: f64,
    /// Detection cost per observation; `None` when excluded (image edge) or
    /// when the ellipsoid does not project to a box in that view.
    pub detection_terms: Vec<Option<f64>>,
    pub degenerate_projections: usize,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.detection + self.prior + self.plane
    }
}

/// Evaluates the robust cost. Detections whose projection is degenerate are
/// skipped and counted; the prior term is absent when the class has no entry.
pub fn total_cost(
    e: &EllipsoidParams,
    observations: &[ObjectObservation],
    class: &str,
    table: &PriorSizeTable,
    cfg: &OptimizerConfig,
) -> Result<CostBreakdown> {
    let mut out = CostBreakdown {
        detection: 0.0,
        prior: 0.0,
        plane: 0.0,
        detection_terms: Vec::with_capacity(observations.len()),
        degenerate_projections: 0,
    };
    let mut active = 0;
    for obs in observations {
        if let Some(plane) = &obs.texture_plane {
            let r = residual_texture_plane(e, plane);
            out.plane += huber(r * r * cfg.omega_plane, cfg.huber_delta_plane);
            active += 1;
        }
        if obs.at_image_edge {
            out.detection_terms.push(None);
            continue;
        }
        match residual_detection(e, obs) {
            Some(r) => {
                let c = huber((r.transpose() * cfg.omega_bbox * r)[0], cfg.huber_delta_bbox);
                out.detection += c;
                out.detection_terms.push(Some(c));
                active += 1;
            }
            None => {
                out.degenerate_projections += 1;
                out.detection_terms.push(None);
            }
        }
    }
    if let Some(prior) = table.get(class) {
        let r = residual_prior_axes(e, &prior);
        out.prior = huber((r.transpose() * cfg.omega_prior * r)[0], cfg.huber_delta_prior);
        active += 1;
    } else {
        log::debug!("no size prior for class {class}; prior term skipped");
    }
    if active == 0 {
        return Err(OptimizeError::NoActiveResiduals);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub status: ConvergenceStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub gradient_norm: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub breakdown: CostBreakdown,
    /// 7 for yaw-only classes, 9 otherwise.
    pub degrees_of_freedom: usize,
}

const FULL: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
const YAW_ONLY: [usize; 7] = [0, 1, 2, 3, 4, 5, 7];

enum Term {
    Detection(usize),
    Plane(usize),
    Prior(Vector3<f64>),
}

/// The active residual set, fixed at the starting point.
struct Problem<'a> {
    observations: &'a [ObjectObservation],
    terms: Vec<Term>,
    cfg: &'a OptimizerConfig,
    base: [f64; 9],
    free: &'static [usize],
}

struct Linearization {
    cost: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn new(
        e0: &EllipsoidParams,
        observations: &'a [ObjectObservation],
        class: &str,
        table: &PriorSizeTable,
        cfg: &'a OptimizerConfig,
        free: &'static [usize],
    ) -> Result<Self> {
        let mut terms = Vec::new();
        for (i, obs) in observations.iter().enumerate() {
            if !obs.at_image_edge && residual_detection(e0, obs).is_some() {
                terms.push(Term::Detection(i));
            }
            if obs.texture_plane.is_some() {
                terms.push(Term::Plane(i));
            }
        }
        if let Some(prior) = table.get(class) {
            terms.push(Term::Prior(prior));
        }
        if terms.is_empty() {
            return Err(OptimizeError::NoActiveResiduals);
        }
        Ok(Self {
            observations,
            terms,
            cfg,
            base: e0.to_array(),
            free,
        })
    }

    fn params(&self, e: &EllipsoidParams) -> DVector<f64> {
        let q = e.to_array();
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| q[i]))
    }

    fn ellipsoid(&self, x: &DVector<f64>) -> Option<EllipsoidParams> {
        let mut q = self.base;
        for (k, &i) in self.free.iter().enumerate() {
            q[i] = x[k];
        }
        EllipsoidParams::from_array(q).ok()
    }

    /// Stacked residuals of all active terms, or `None` if any is undefined.
    fn residuals(&self, x: &DVector<f64>) -> Option<Vec<DVector<f64>>> {
        let e = self.ellipsoid(x)?;
        self.terms
            .iter()
            .map(|t| match t {
                Term::Detection(i) => {
                    residual_detection(&e, &self.observations[*i]).map(|r| DVector::from_column_slice(r.as_slice()))
                }
                Term::Plane(i) => {
                    let plane = self.observations[*i].texture_plane.as_ref().expect("plane term");
                    Some(DVector::from_element(1, residual_texture_plane(&e, plane)))
                }
                Term::Prior(p) => Some(DVector::from_column_slice(residual_prior_axes(&e, p).as_slice())),
            })
            .collect()
    }

    fn weight(&self, term: &Term) -> (DMatrix<f64>, f64) {
        match term {
            Term::Detection(_) => (
                DMatrix::from_column_slice(4, 4, self.cfg.omega_bbox.as_slice()),
                self.cfg.huber_delta_bbox,
            ),
            Term::Plane(_) => (
                DMatrix::from_element(1, 1, self.cfg.omega_plane),
                self.cfg.huber_delta_plane,
            ),
            Term::Prior(_) => (
                DMatrix::from_column_slice(3, 3, self.cfg.omega_prior.as_slice()),
                self.cfg.huber_delta_prior,
            ),
        }
    }

    fn cost_of(&self, residuals: &[DVector<f64>]) -> f64 {
        self.terms
            .iter()
            .zip(residuals)
            .map(|(t, r)| {
                let (omega, delta) = self.weight(t);
                huber((r.transpose() * &omega * r)[0], delta)
            })
            .sum()
    }

    fn cost(&self, x: &DVector<f64>) -> Option<f64> {
        self.residuals(x).map(|r| self.cost_of(&r))
    }

    /// IRLS gradient `Σ 2ρ' JᵀΩr` and Gauss-Newton Hessian `Σ 2ρ' JᵀΩJ`
    /// with central-difference Jacobians.
    fn linearize(&self, x: &DVector<f64>) -> Option<Linearization> {
        let r0 = self.residuals(x)?;
        let n = x.len();
        let mut jacobians: Vec<DMatrix<f64>> = r0.iter().map(|r| DMatrix::zeros(r.len(), n)).collect();
        for k in 0..n {
            let h = 1e-6 * (1.0 + x[k].abs());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[k] += h;
            minus[k] -= h;
            let rp = self.residuals(&plus)?;
            let rm = self.residuals(&minus)?;
            for (j, (a, b)) in jacobians.iter_mut().zip(rp.iter().zip(&rm)) {
                j.set_column(k, &((a - b) / (2.0 * h)));
            }
        }
        let mut gradient = DVector::zeros(n);
        let mut hessian = DMatrix::zeros(n, n);
        let mut cost = 0.0;
        for ((term, r), j) in self.terms.iter().zip(&r0).zip(&jacobians) {
            let (omega, delta) = self.weight(term);
            let f = (r.transpose() * &omega * r)[0];
            cost += huber(f, delta);
            let w = 2.0 * huber_weight(f, delta);
            let jt_omega = j.transpose() * &omega;
            gradient += &jt_omega * r * w;
            hessian += &jt_omega * j * w;
        }
        Some(Linearization {
            cost,
            gradient,
            hessian,
        })
    }
}

fn free_indices(class: &str, cfg: &OptimizerConfig) -> &'static [usize] {
    if cfg.is_planar(class) {
        &YAW_ONLY
    } else {
        &FULL
    }
}

/// Gradient of the robust cost over all nine parameters, as assembled inside
/// the optimizer (active set taken at `e`).
pub fn cost_gradient(
    e: &EllipsoidParams,
    observations: &[ObjectObservation],
    class: &str,
    table: &PriorSizeTable,
    cfg: &OptimizerConfig,
) -> Result<DVector<f64>> {
    let problem = Problem::new(e, observations, class, table, cfg, &FULL)?;
    let x = problem.params(e);
    problem
        .linearize(&x)
        .map(|l| l.gradient)
        .ok_or_else(|| OptimizeError::InvalidInitial("residuals undefined near the given parameters".into()))
}

/// Refines `e0` with Levenberg-Marquardt. Steps that make an axis
/// non-positive or an active projection degenerate are rejected and the
/// damping raised. On hitting the iteration cap the best estimate so far is
/// returned with [`ConvergenceStatus::MaxIterations`].
pub fn optimize_quadric(
    e0: &EllipsoidParams,
    observations: &[ObjectObservation],
    class: &str,
    table: &PriorSizeTable,
    cfg: &OptimizerConfig,
) -> Result<(EllipsoidParams, OptimizationReport)> {
    cfg.validate()?;
    let free = free_indices(class, cfg);
    let problem = Problem::new(e0, observations, class, table, cfg, free)?;
    let mut x = problem.params(e0);
    let Some(mut lin) = problem.linearize(&x) else {
        return Err(OptimizeError::InvalidInitial(
            "residuals undefined near the starting point".into(),
        ));
    };
    let initial_cost = lin.cost;
    let mut history = vec![lin.cost];
    let mut lambda = cfg.initial_damping;
    let mut status = ConvergenceStatus::MaxIterations;
    let mut iterations = 0;

    'outer: while iterations < cfg.max_iterations {
        if lin.gradient.norm() <= cfg.gradient_tolerance || lin.cost == 0.0 {
            status = ConvergenceStatus::Converged;
            break;
        }
        iterations += 1;
        loop {
            if lambda > 1e16 {
                // no descent direction left at machine precision
                status = ConvergenceStatus::Converged;
                break 'outer;
            }
            let mut a = lin.hessian.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * lin.hessian[(i, i)].max(1e-9);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&lin.gradient));
            let candidate = &x + &step;
            match problem.cost(&candidate) {
                Some(c) if c < lin.cost => {
                    let decrease = lin.cost - c;
                    let Some(next) = problem.linearize(&candidate) else {
                        lambda *= 10.0;
                        continue;
                    };
                    x = candidate;
                    lin = next;
                    history.push(lin.cost);
                    lambda = (lambda / 10.0).max(1e-12);
                    if decrease <= cfg.cost_tolerance * history[history.len() - 2]
                        || step.norm() <= cfg.step_tolerance * (1.0 + x.norm())
                    {
                        status = ConvergenceStatus::Converged;
                        break 'outer;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
    }

    let e = problem.ellipsoid(&x).expect("accepted parameters are valid");
    let breakdown = total_cost(&e, observations, class, table, cfg)?;
    let report = OptimizationReport {
        status,
        iterations,
        initial_cost,
        final_cost: lin.cost,
        gradient_norm: lin.gradient.norm(),
        cost_history: history,
        breakdown,
        degrees_of_freedom: free.len(),
    };
    Ok((e, report))
}
