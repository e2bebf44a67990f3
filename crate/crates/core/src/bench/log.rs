//! Detection logs: per-frame camera poses and detections, plus optional
//! ground truth, as versioned JSON.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{DetectionInstance, Mask};
use crate::geometry::{euler_zyx_from_matrix, BBox, CameraView, EllipsoidParams, GeometryError};
use crate::sim::{NoiseSpec, NoiseType, Scenario, TrialInput};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed detection log: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema_version {0}")]
    Version(u32),
    #[error("invalid detection log: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, LogError>;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogDetection {
    pub bbox: [f64; 4],
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_polygon: Option<Vec<[f64; 2]>>,
    /// Ground-truth identity, when known; used when association is disabled
    /// and for scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFrame {
    pub id: u64,
    /// World→camera transform, row-major.
    pub pose: [[f64; 4]; 4],
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    pub detections: Vec<LogDetection>,
    #[serde(default = "yes")]
    pub keyframe: bool,
    /// Error-free world→camera transform, for scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<[[f64; 4]; 4]>,
    /// `[width, height]`; enables the image-edge flag on detections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: u64,
    pub class: String,
    /// Half-axis lengths.
    pub size: [f64; 3],
    /// Object→world transform, row-major.
    pub pose: [[f64; 4]; 4],
    /// Exact 9-parameter form; preferred over `size`/`pose` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipsoid: Option<EllipsoidParams>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dynamic: bool,
}

/// Labels carried into metric rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub sweep: String,
    pub noise_type: String,
    pub noise_level: f64,
    #[serde(default)]
    pub object: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLog {
    pub schema_version: u32,
    pub frames: Vec<LogFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_objects: Option<Vec<GtObject>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<LogMeta>,
}

pub fn matrix4_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

pub fn matrix3_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

pub fn rows_matrix4(r: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| r[i][j])
}

pub fn rows_matrix3(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

impl LogDetection {
    pub fn bbox(&self) -> Result<BBox> {
        let [x1, y1, x2, y2] = self.bbox;
        Ok(BBox::new(x1, y1, x2, y2)?)
    }

    pub fn to_instance(&self) -> Result<DetectionInstance> {
        let mask = match &self.mask_polygon {
            Some(poly) => Some(Mask::new(poly.clone()).map_err(|e| LogError::Invalid(e.to_string()))?),
            None => None,
        };
        Ok(DetectionInstance {
            bbox: self.bbox()?,
            class: self.class.clone(),
            keypoints: self.keypoints.clone().unwrap_or_default(),
            mask,
        })
    }

    fn from_instance(d: &DetectionInstance, object_id: Option<u64>) -> Self {
        Self {
            bbox: d.bbox.to_array(),
            class: d.class.clone(),
            keypoints: (!d.keypoints.is_empty()).then(|| d.keypoints.clone()),
            mask_polygon: d.mask.as_ref().map(|m| m.vertices().to_vec()),
            object_id,
        }
    }
}

impl LogFrame {
    pub fn view(&self) -> Result<CameraView> {
        Ok(CameraView::new(rows_matrix3(&self.k), rows_matrix4(&self.pose))?)
    }

    pub fn gt_view(&self) -> Result<Option<CameraView>> {
        match &self.gt_pose {
            Some(p) => Ok(Some(CameraView::new(rows_matrix3(&self.k), rows_matrix4(p))?)),
            None => Ok(None),
        }
    }

    /// Whether a box touches the image border (within one pixel).
    pub fn at_edge(&self, b: &BBox) -> bool {
        match self.image_size {
            Some([w, h]) => b.x1() <= 1.0 || b.y1() <= 1.0 || b.x2() >= w - 1.0 || b.y2() >= h - 1.0,
            None => false,
        }
    }
}

impl GtObject {
    pub fn from_ellipsoid(id: u64, class: &str, e: &EllipsoidParams) -> Self {
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&e.rotation_matrix());
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(e.translation());
        Self {
            id,
            class: class.to_string(),
            size: [e.axes().x, e.axes().y, e.axes().z],
            pose: matrix4_rows(&pose),
            ellipsoid: Some(*e),
            dynamic: false,
        }
    }

    pub fn ellipsoid(&self) -> Result<EllipsoidParams> {
        if let Some(e) = self.ellipsoid {
            return Ok(e);
        }
        let m = rows_matrix4(&self.pose);
        Ok(EllipsoidParams::new(
            Vector3::from(self.size),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
            euler_zyx_from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned()),
        )?)
    }
}

impl DetectionLog {
    pub fn from_json(text: &str) -> Result<Self> {
        let log: Self = serde_json::from_str(text)?;
        log.validate()?;
        Ok(log)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != LOG_SCHEMA_VERSION {
            return Err(LogError::Version(self.schema_version));
        }
        if self.frames.windows(2).any(|w| w[1].id <= w[0].id) {
            return Err(LogError::Invalid("frame ids must increase".into()));
        }
        for f in &self.frames {
            f.view()?;
            f.gt_view()?;
            for d in &f.detections {
                d.to_instance()?;
            }
        }
        if let Some(gt) = &self.gt_objects {
            let mut ids: Vec<u64> = gt.iter().map(|g| g.id).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(LogError::Invalid("ground-truth ids must be unique".into()));
            }
            for g in gt {
                g.ellipsoid()?;
            }
        }
        Ok(())
    }

    /// One simulated trial as a single-object log. The noisy poses become the
    /// frame poses and the true poses `gt_pose`.
    pub fn from_trial(input: &TrialInput, noise_type: NoiseType, noise: &NoiseSpec, object: u64, seed: u64) -> Self {
        let level = match noise_type {
            NoiseType::Translation => noise.translation_pct,
            NoiseType::Rotation => noise.rotation_pct,
            NoiseType::BBox => noise.bbox_pct,
        };
        let frames = input
            .views
            .iter()
            .zip(&input.scene.views)
            .zip(&input.bboxes)
            .enumerate()
            .map(|(i, ((noisy, truth), b))| LogFrame {
                id: i as u64,
                pose: matrix4_rows(noisy.pose()),
                k: matrix3_rows(noisy.intrinsics()),
                detections: vec![LogDetection {
                    bbox: b.to_array(),
                    class: "car".into(),
                    keypoints: None,
                    mask_polygon: None,
                    object_id: Some(0),
                }],
                keyframe: true,
                gt_pose: Some(matrix4_rows(truth.pose())),
                image_size: None,
            })
            .collect();
        Self {
            schema_version: LOG_SCHEMA_VERSION,
            frames,
            gt_objects: Some(vec![GtObject::from_ellipsoid(0, "car", &input.scene.gt)]),
            meta: Some(LogMeta {
                sweep: noise_type.name().to_string(),
                noise_type: noise_type.name().to_string(),
                noise_level: level,
                object,
                seed,
            }),
        }
    }

    /// A scripted tracking scenario; ground truth uses the objects' poses at
    /// the first frame.
    pub fn from_scenario(s: &Scenario) -> Self {
        let frames = s
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| LogFrame {
                id: i as u64,
                pose: matrix4_rows(f.view.pose()),
                k: matrix3_rows(f.view.intrinsics()),
                detections: f
                    .detections
                    .iter()
                    .zip(&f.gt_ids)
                    .map(|(d, id)| LogDetection::from_instance(d, Some(*id)))
                    .collect(),
                keyframe: true,
                gt_pose: Some(matrix4_rows(f.view.pose())),
                image_size: None,
            })
            .collect();
        let gt = s
            .objects
            .iter()
            .enumerate()
            .map(|(id, track)| {
                let mut g = GtObject::from_ellipsoid(id as u64, &s.classes[id], &track[0]);
                g.dynamic = s.dynamic[id];
                g
            })
            .collect();
        Self {
            schema_version: LOG_SCHEMA_VERSION,
            frames,
            gt_objects: Some(gt),
            meta: None,
        }
    }
}
