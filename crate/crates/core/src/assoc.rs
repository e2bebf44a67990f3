//! Object data association: multi-cue affinities, Hungarian assignment,
//! SORT-style Kalman box prediction and the track store.

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ellipsoid_bbox, iou_2d, BBox, CameraView, EllipsoidParams};
use crate::init::{triangulate_point, InitConfig, ObservationSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssocError {
    #[error("invalid association configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
}

pub type Result<T> = std::result::Result<T, AssocError>;

/// Closed polygon in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mask {
    vertices: Vec<[f64; 2]>,
}

impl Mask {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let m = Self { vertices };
        if m.vertices.len() < 3 || !(m.area() > 0.0) {
            return Err(AssocError::InvalidDetection("mask polygon has no area".into()));
        }
        Ok(m)
    }

    pub fn from_bbox(b: &BBox) -> Self {
        Self {
            vertices: vec![[b.x1(), b.y1()], [b.x2(), b.y1()], [b.x2(), b.y2()], [b.x1(), b.y2()]],
        }
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let [x0, y0] = self.vertices[i];
                let [x1, y1] = self.vertices[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum::<f64>()
            .abs()
            / 2.0
    }

    /// Even-odd rule point-in-polygon test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let [xi, yi] = self.vertices[i];
            let [xj, yj] = self.vertices[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInstance {
    pub bbox: BBox,
    pub class: String,
    /// Keypoints tracked into this frame from the previous keyframe.
    #[serde(default)]
    pub keypoints: Vec<[f64; 2]>,
    #[serde(default)]
    pub mask: Option<Mask>,
}

impl DetectionInstance {
    pub fn new(bbox: BBox, class: &str) -> Self {
        Self {
            bbox,
            class: class.to_string(),
            keypoints: Vec::new(),
            mask: None,
        }
    }
}

type State = SVector<f64, 7>;
type Cov = SMatrix<f64, 7, 7>;

/// Constant-velocity box filter on `(cx, cy, s, r, vx, vy, vs)` with `s` the
/// area and `r` the aspect ratio, using the SORT noise settings.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanBoxTracker {
    x: State,
    p: Cov,
    updates: usize,
}

fn to_z(b: &BBox) -> SVector<f64, 4> {
    let (cx, cy) = b.center();
    SVector::<f64, 4>::new(cx, cy, b.area(), b.width() / b.height())
}

impl KalmanBoxTracker {
    pub fn new(b: &BBox) -> Self {
        let z = to_z(b);
        let mut x = State::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(&z);
        let p = Cov::from_diagonal(&State::from_column_slice(&[10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4]));
        Self { x, p, updates: 1 }
    }

    fn transition() -> Cov {
        let mut f = Cov::identity();
        f[(0, 4)] = 1.0;
        f[(1, 5)] = 1.0;
        f[(2, 6)] = 1.0;
        f
    }

    fn process_noise() -> Cov {
        Cov::from_diagonal(&State::from_column_slice(&[1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4]))
    }

    pub fn state(&self) -> &SVector<f64, 7> {
        &self.x
    }

    pub fn covariance(&self) -> &SMatrix<f64, 7, 7> {
        &self.p
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Advances one frame and returns the predicted box.
    pub fn predict(&mut self) -> Option<BBox> {
        if self.x[2] + self.x[6] <= 0.0 {
            self.x[6] = 0.0;
        }
        let f = Self::transition();
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + Self::process_noise();
        self.bbox()
    }

    pub fn update(&mut self, b: &BBox) {
        let z = to_z(b);
        let mut h = SMatrix::<f64, 4, 7>::zeros();
        for i in 0..4 {
            h[(i, i)] = 1.0;
        }
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&SVector::<f64, 4>::new(1.0, 1.0, 10.0, 10.0));
        let y = z - h * self.x;
        let s = h * self.p * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance is positive definite");
        let k = self.p * h.transpose() * s_inv;
        self.x += k * y;
        self.p = (Cov::identity() - k * h) * self.p;
        self.p = (self.p + self.p.transpose()) / 2.0;
        self.updates += 1;
    }

    /// Current box estimate, if the state still describes a valid box.
    pub fn bbox(&self) -> Option<BBox> {
        let (cx, cy, s, r) = (self.x[0], self.x[1], self.x[2], self.x[3]);
        if !(s > 0.0 && r > 0.0) {
            return None;
        }
        let w = (s * r).sqrt();
        BBox::from_center(cx, cy, w, s / w).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub id: u64,
    pub class: String,
    pub ellipsoid: Option<EllipsoidParams>,
    pub kalman: Option<KalmanBoxTracker>,
    pub last_mask: Option<Mask>,
    pub observations: Vec<(CameraView, BBox)>,
    pub dynamic: bool,
    /// Consecutive association steps without a match.
    pub misses: usize,
}

impl ObjectTrack {
    pub fn new(id: u64, det: &DetectionInstance, view: &CameraView) -> Self {
        Self {
            id,
            class: det.class.clone(),
            ellipsoid: None,
            kalman: Some(KalmanBoxTracker::new(&det.bbox)),
            last_mask: det.mask.clone(),
            observations: vec![(*view, det.bbox)],
            dynamic: false,
            misses: 0,
        }
    }

    pub fn observation_set(&self) -> Option<ObservationSet> {
        ObservationSet::new(self.observations.clone()).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssocConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Largest cost accepted as a match.
    pub gate: f64,
    /// An unmatched detection spawns a track only if its cost to every
    /// track exceeds this.
    pub new_track_threshold: f64,
    /// Number of most recent observations used by the dynamic test.
    pub dynamic_window: usize,
    /// Median reprojection residual (px) of the triangulated centre above
    /// which a track is flagged dynamic.
    pub dynamic_threshold_px: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 1.0,
            gamma: 0.8,
            gate: 1.3,
            new_track_threshold: 1.3,
            dynamic_window: 5,
            dynamic_threshold_px: 10.0,
        }
    }
}

impl AssocConfig {
    pub fn max_cost(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(AssocError::InvalidConfig("weights must be non-negative".into()));
        }
        if !(self.gate > 0.0 && self.gate <= self.max_cost()) {
            return Err(AssocError::InvalidConfig(format!(
                "gate must lie in (0, {}]",
                self.max_cost()
            )));
        }
        if self.dynamic_window < 2 || !(self.dynamic_threshold_px > 0.0) {
            return Err(AssocError::InvalidConfig(
                "dynamic window must be ≥ 2 and threshold positive".into(),
            ));
        }
        Ok(())
    }
}

/// Used when a cue cannot be evaluated yet.
pub const NEUTRAL: f64 = 0.5;

/// Fraction of the detection's tracked keypoints falling outside the
/// track's last mask.
pub fn affinity_semantic(track: &ObjectTrack, det: &DetectionInstance) -> f64 {
    match &track.last_mask {
        Some(mask) if !det.keypoints.is_empty() => {
            let inside = det.keypoints.iter().filter(|[x, y]| mask.contains(*x, *y)).count();
            1.0 - inside as f64 / det.keypoints.len() as f64
        }
        _ => NEUTRAL,
    }
}

/// `1 − IoU` between the track ellipsoid's projected box and the detection.
pub fn affinity_iou(track: &ObjectTrack, det: &DetectionInstance, view: &CameraView) -> f64 {
    match &track.ellipsoid {
        Some(e) => match ellipsoid_bbox(e, view) {
            Ok(b) => 1.0 - iou_2d(&b, &det.bbox),
            Err(_) => 1.0,
        },
        None => NEUTRAL,
    }
}

/// `1 − IoU` between the Kalman-predicted track box and the detection.
pub fn affinity_kalman(track: &ObjectTrack, det: &DetectionInstance) -> f64 {
    match &track.kalman {
        Some(k) => match k.bbox() {
            Some(b) => 1.0 - iou_2d(&b, &det.bbox),
            None => 1.0,
        },
        None => NEUTRAL,
    }
}

/// `a_ij = α·a^p + β·a^g + γ·a^k`; `+∞` for class mismatches.
pub fn build_cost_matrix(
    tracks: &[ObjectTrack],
    detections: &[DetectionInstance],
    view: &CameraView,
    cfg: &AssocConfig,
) -> DMatrix<f64> {
    DMatrix::from_fn(tracks.len(), detections.len(), |i, j| {
        let (t, d) = (&tracks[i], &detections[j]);
        if t.class != d.class {
            f64::INFINITY
        } else {
            cfg.alpha * affinity_semantic(t, d)
                + cfg.beta * affinity_iou(t, d, view)
                + cfg.gamma * affinity_kalman(t, d)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `(row, column)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-cost assignment for `rows ≤ cols` (Kuhn-Munkres with potentials).
/// Returns the column assigned to each row.
fn solve_square_ish(a: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = (a.nrows(), a.ncols());
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-cost partial matching. Forbidden (`+∞`) pairs are never matched;
/// the matching first maximizes the number of allowed pairs, then minimizes
/// their total cost.
pub fn hungarian(cost: &DMatrix<f64>) -> Assignment {
    let (n, m) = (cost.nrows(), cost.ncols());
    if n == 0 || m == 0 {
        return Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..n).collect(),
            unmatched_cols: (0..m).collect(),
        };
    }
    let finite_sum: f64 = cost.iter().filter(|c| c.is_finite()).map(|c| c.abs()).sum();
    let big = (finite_sum + 1.0) * 2.0;
    let a = cost.map(|c| if c.is_finite() { c } else { big });
    let transposed = n > m;
    let work = if transposed { a.transpose() } else { a };
    let assigned = solve_square_ish(&work);
    let mut pairs: Vec<(usize, usize)> = assigned
        .iter()
        .enumerate()
        .map(|(r, &c)| if transposed { (c, r) } else { (r, c) })
        .filter(|&(r, c)| cost[(r, c)].is_finite())
        .collect();
    pairs.sort_unstable();
    let unmatched_rows = (0..n).filter(|r| !pairs.iter().any(|p| p.0 == *r)).collect();
    let unmatched_cols = (0..m).filter(|c| !pairs.iter().any(|p| p.1 == *c)).collect();
    Assignment {
        pairs,
        unmatched_rows,
        unmatched_cols,
    }
}

/// Outcome of one association step, in track ids and detection indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AssocResult {
    pub matches: Vec<(u64, usize)>,
    /// `(track id, detection index)` of spawned tracks.
    pub new_tracks: Vec<(u64, usize)>,
    pub lost_tracks: Vec<u64>,
    pub newly_dynamic: Vec<u64>,
}

/// Single-writer store of object tracks, ordered by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackStore {
    tracks: Vec<ObjectTrack>,
    next_id: u64,
}

impl TrackStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> &[ObjectTrack] {
        &self.tracks
    }

    pub fn get(&self, id: u64) -> Option<&ObjectTrack> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut ObjectTrack> {
        self.tracks.iter_mut().find(|t| t.id == id)
    }

    /// Adds a track under its own id, replacing any track with that id.
    pub fn insert(&mut self, track: ObjectTrack) {
        self.next_id = self.next_id.max(track.id + 1);
        match self.tracks.binary_search_by_key(&track.id, |t| t.id) {
            Ok(i) => self.tracks[i] = track,
            Err(i) => self.tracks.insert(i, track),
        }
    }

    pub fn spawn(&mut self, det: &DetectionInstance, view: &CameraView) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(ObjectTrack::new(id, det, view));
        id
    }

    /// Predicts every track one frame ahead, associates `detections` seen
    /// from `view`, updates matched tracks and spawns new ones.
    pub fn associate(
        &mut self,
        detections: &[DetectionInstance],
        view: &CameraView,
        cfg: &AssocConfig,
        init_cfg: &InitConfig,
    ) -> AssocResult {
        for t in &mut self.tracks {
            if let Some(k) = &mut t.kalman {
                k.predict();
            }
        }
        let cost = build_cost_matrix(&self.tracks, detections, view, cfg);
        let assignment = hungarian(&cost);
        let mut result = AssocResult::default();
        let mut det_matched = vec![false; detections.len()];
        let mut track_matched = vec![false; self.tracks.len()];
        for &(r, c) in &assignment.pairs {
            if cost[(r, c)] <= cfg.gate {
                det_matched[c] = true;
                track_matched[r] = true;
                result.matches.push((self.tracks[r].id, c));
            }
        }
        for (r, t) in self.tracks.iter_mut().enumerate() {
            if !track_matched[r] {
                t.misses += 1;
                result.lost_tracks.push(t.id);
            }
        }
        for &(id, c) in &result.matches {
            let det = &detections[c];
            let track = self
                .tracks
                .iter_mut()
                .find(|t| t.id == id)
                .expect("matched track exists");
            track.misses = 0;
            match &mut track.kalman {
                Some(k) => k.update(&det.bbox),
                None => track.kalman = Some(KalmanBoxTracker::new(&det.bbox)),
            }
            if det.mask.is_some() {
                track.last_mask = det.mask.clone();
            }
            track.observations.push((*view, det.bbox));
            if !track.dynamic && is_dynamic(track, cfg, init_cfg) {
                track.dynamic = true;
                track.ellipsoid = None;
                result.newly_dynamic.push(id);
            }
        }
        for (c, det) in detections.iter().enumerate() {
            if det_matched[c] {
                continue;
            }
            let best = (0..cost.nrows()).map(|r| cost[(r, c)]).fold(f64::INFINITY, f64::min);
            if best > cfg.new_track_threshold {
                let id = self.spawn(det, view);
                result.new_tracks.push((id, c));
            }
        }
        result
    }
}

/// Flags a track whose last `dynamic_window` box centres cannot be explained
/// by one static point: the median reprojection residual of the centre
/// triangulated from them exceeds `dynamic_threshold_px`.
pub fn is_dynamic(track: &ObjectTrack, cfg: &AssocConfig, init_cfg: &InitConfig) -> bool {
    let w = cfg.dynamic_window;
    if track.observations.len() < w {
        return false;
    }
    let recent = &track.observations[track.observations.len() - w..];
    let views: Vec<&CameraView> = recent.iter().map(|(v, _)| v).collect();
    let centres: Vec<(f64, f64)> = recent.iter().map(|(_, b)| b.center()).collect();
    let Ok(est) = triangulate_point(&views, &centres, init_cfg) else {
        return false;
    };
    let mut residuals: Vec<f64> = views
        .iter()
        .zip(&centres)
        .map(|(v, &(u, w))| {
            if v.depth(&est.point) <= 0.0 {
                return f64::INFINITY;
            }
            let (pu, pv) = v.project_point(&est.point);
            ((pu - u).powi(2) + (pv - w).powi(2)).sqrt()
        })
        .collect();
    residuals.sort_by(f64::total_cmp);
    residuals[residuals.len() / 2] > cfg.dynamic_threshold_px
}
