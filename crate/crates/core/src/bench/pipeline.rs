//! End-to-end processing of a detection log: association, initialization on
//! keyframes, refinement, and scoring against ground truth.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{AssocConfig, DetectionInstance, ObjectTrack, TrackStore};
use crate::bench::log::{DetectionLog, LogError, LogFrame};
use crate::bench::metrics::TrialResult;
use crate::geometry::{ellipsoid_bbox, CameraView, EllipsoidParams};
use crate::init::{InitConfig, InitMethod};
use crate::optimize::{optimize_quadric, ObjectObservation, OptimizerConfig, PriorSizeTable};
use crate::sim::{evaluate, Scene};

pub const PIPELINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("frame {frame}: detection {detection} has no object_id and association is disabled")]
    MissingObjectId { frame: u64, detection: usize },
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Match detections to tracks; when off, the log's `object_id`s are used.
    pub associate: bool,
    /// Refine each initialization with the robust optimizer.
    pub optimize: bool,
    /// Observations a track needs before it is initialized.
    pub min_init_views: usize,
    pub methods: Vec<InitMethod>,
    pub init: InitConfig,
    pub assoc: AssocConfig,
    pub optimizer: OptimizerConfig,
    pub priors: PriorSizeTable,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: PIPELINE_SCHEMA_VERSION,
            associate: true,
            optimize: true,
            min_init_views: 2,
            methods: vec![InitMethod::Dqp],
            init: InitConfig::default(),
            assoc: AssocConfig::default(),
            optimizer: OptimizerConfig::default(),
            priors: PriorSizeTable::new()
                .with("car", Vector3::new(2.0, 0.75, 0.85))
                .expect("positive prior"),
        }
    }
}

impl PipelineConfig {
    /// Settings under which a simulator-exported log reproduces the sweep:
    /// identities from the log and no refinement.
    pub fn sweep_equivalent(methods: &[InitMethod], init: InitConfig) -> Self {
        Self {
            associate: false,
            optimize: false,
            methods: methods.to_vec(),
            init,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.schema_version != PIPELINE_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.min_init_views < 2 {
            return bad("min_init_views must be at least 2".into());
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        self.assoc
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapObject {
    pub id: u64,
    pub class: String,
    pub ellipsoid: EllipsoidParams,
    /// Ground-truth identity most often attached to the track's detections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_id: Option<u64>,
    pub n_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMap {
    pub method: String,
    pub objects: Vec<MapObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub maps: Vec<ObjectMap>,
    /// One result per scored ground-truth object and method.
    pub results: Vec<TrialResult>,
}

struct Frame<'a> {
    log: &'a LogFrame,
    view: CameraView,
    detections: Vec<DetectionInstance>,
}

/// Per-track record of which (frame, detection) pairs fed it.
type Sources = BTreeMap<u64, Vec<(usize, usize)>>;

pub fn run_pipeline(log: &DetectionLog, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    log.validate()?;
    let frames = log
        .frames
        .iter()
        .map(|f| {
            Ok(Frame {
                log: f,
                view: f.view()?,
                detections: f
                    .detections
                    .iter()
                    .map(|d| d.to_instance())
                    .collect::<std::result::Result<_, _>>()?,
            })
        })
        .collect::<std::result::Result<Vec<_>, LogError>>()?;
    if !cfg.associate {
        for f in &frames {
            if let Some(i) = f.log.detections.iter().position(|d| d.object_id.is_none()) {
                return Err(PipelineError::MissingObjectId {
                    frame: f.log.id,
                    detection: i,
                });
            }
        }
    }
    let mut maps = Vec::new();
    let mut results = Vec::new();
    for method in &cfg.methods {
        let map = build_map(&frames, *method, cfg);
        results.extend(score(log, &frames, &map));
        maps.push(map);
    }
    Ok(PipelineOutput { maps, results })
}

/// Runs every log, in parallel, keeping input order.
pub fn run_pipelines(logs: &[DetectionLog], cfg: &PipelineConfig) -> Vec<Result<PipelineOutput>> {
    logs.par_iter().map(|l| run_pipeline(l, cfg)).collect()
}

fn build_map(frames: &[Frame], method: InitMethod, cfg: &PipelineConfig) -> ObjectMap {
    let mut store = TrackStore::new();
    let mut sources = Sources::new();
    for (fi, frame) in frames.iter().enumerate() {
        let touched: Vec<u64> = if cfg.associate {
            let r = store.associate(&frame.detections, &frame.view, &cfg.assoc, &cfg.init);
            r.matches
                .iter()
                .chain(&r.new_tracks)
                .map(|&(id, di)| {
                    sources.entry(id).or_default().push((fi, di));
                    id
                })
                .collect()
        } else {
            frame
                .detections
                .iter()
                .enumerate()
                .map(|(di, det)| {
                    let id = frame.log.detections[di].object_id.expect("checked above");
                    match store.get_mut(id) {
                        Some(t) => t.observations.push((frame.view, det.bbox)),
                        None => store.insert(ObjectTrack::new(id, det, &frame.view)),
                    }
                    sources.entry(id).or_default().push((fi, di));
                    id
                })
                .collect()
        };
        if !frame.log.keyframe {
            continue;
        }
        for id in touched {
            let track = store.get_mut(id).expect("touched track exists");
            if track.dynamic || track.observations.len() < cfg.min_init_views {
                continue;
            }
            track.ellipsoid = estimate(track, &sources[&id], frames, method, cfg);
        }
    }
    let objects = store
        .tracks()
        .iter()
        .filter(|t| !t.dynamic)
        .filter_map(|t| {
            let ellipsoid = t.ellipsoid?;
            Some(MapObject {
                id: t.id,
                class: t.class.clone(),
                ellipsoid,
                gt_id: majority_gt(&sources[&t.id], frames),
                n_views: t.observations.len(),
            })
        })
        .collect();
    ObjectMap {
        method: method.name().to_string(),
        objects,
    }
}

fn estimate(
    track: &ObjectTrack,
    sources: &[(usize, usize)],
    frames: &[Frame],
    method: InitMethod,
    cfg: &PipelineConfig,
) -> Option<EllipsoidParams> {
    let obs = track.observation_set()?;
    let e0 = match method.run(&obs, &cfg.init) {
        Ok(e) => e,
        Err(e) => {
            log::debug!("track {}: {} initialization failed: {e}", track.id, method.name());
            return None;
        }
    };
    if !cfg.optimize {
        return Some(e0);
    }
    let observations: Vec<ObjectObservation> = track
        .observations
        .iter()
        .zip(sources)
        .map(|((view, bbox), &(fi, _))| ObjectObservation {
            at_image_edge: frames[fi].log.at_edge(bbox),
            ..ObjectObservation::new(*view, *bbox)
        })
        .collect();
    match optimize_quadric(&e0, &observations, &track.class, &cfg.priors, &cfg.optimizer) {
        Ok((e, _)) => Some(e),
        Err(e) => {
            log::warn!("track {}: refinement failed, keeping initialization: {e}", track.id);
            Some(e0)
        }
    }
}

fn majority_gt(sources: &[(usize, usize)], frames: &[Frame]) -> Option<u64> {
    let mut votes: BTreeMap<u64, usize> = BTreeMap::new();
    for &(fi, di) in sources {
        if let Some(id) = frames[fi].log.detections[di].object_id {
            *votes.entry(id).or_default() += 1;
        }
    }
    let best = votes.values().copied().max()?;
    votes.into_iter().find(|&(_, n)| n == best).map(|(id, _)| id)
}

fn score(log: &DetectionLog, frames: &[Frame], map: &ObjectMap) -> Vec<TrialResult> {
    let Some(gt_objects) = &log.gt_objects else {
        return Vec::new();
    };
    let (sweep, noise_type, noise_level, seed) = match &log.meta {
        Some(m) => (m.sweep.clone(), m.noise_type.clone(), m.noise_level, m.seed),
        None => ("pipeline".to_string(), "none".to_string(), 0.0, 0),
    };
    gt_objects
        .iter()
        .filter(|g| !g.dynamic)
        .filter_map(|g| {
            let gt = g.ellipsoid().ok()?;
            let labelled: Vec<&Frame> = frames
                .iter()
                .filter(|f| f.log.detections.iter().any(|d| d.object_id == Some(g.id)))
                .collect();
            let scored: Vec<&Frame> = if labelled.is_empty() {
                frames.iter().collect()
            } else {
                labelled
            };
            let mut views = Vec::new();
            let mut gt_bboxes = Vec::new();
            for f in scored {
                let view = f.log.gt_view().ok().flatten().unwrap_or(f.view);
                if let Ok(b) = ellipsoid_bbox(&gt, &view) {
                    views.push(view);
                    gt_bboxes.push(b);
                }
            }
            let scene = Scene { views, gt, gt_bboxes };
            let best = map
                .objects
                .iter()
                .filter(|o| o.gt_id == Some(g.id))
                .max_by(|a, b| a.n_views.cmp(&b.n_views).then(b.id.cmp(&a.id)));
            Some(TrialResult {
                sweep: sweep.clone(),
                method: map.method.clone(),
                noise_type: noise_type.clone(),
                noise_level,
                object: log.meta.as_ref().map_or(g.id, |m| m.object),
                seed,
                metrics: best.map(|o| evaluate(&scene, &o.ellipsoid)),
                wall_time: 0.0,
            })
        })
        .collect()
}

/// The object maps as versioned JSON.
pub fn object_map_json(maps: &[ObjectMap]) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        maps: &'a [ObjectMap],
    }
    serde_json::to_string_pretty(&Doc {
        schema_version: PIPELINE_SCHEMA_VERSION,
        maps,
    })
    .expect("map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::log::LogDetection;
    use crate::sim::{dynamic_scenario, trial_input, NoiseSpec, NoiseType, SceneConfig};

    fn trial(noise: NoiseSpec, object: u64, seed: u64) -> (crate::sim::TrialInput, DetectionLog) {
        let input = trial_input(&SceneConfig::default(), &noise, object, seed).unwrap();
        let log = DetectionLog::from_trial(&input, NoiseType::BBox, &noise, object, seed);
        (input, log)
    }

    #[test]
    fn two_frames_one_object_gives_one_ellipsoid() {
        let (_, mut log) = trial(NoiseSpec::default(), 0, 0);
        log.frames.truncate(2);
        let cfg = PipelineConfig {
            optimize: false,
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&log, &cfg).unwrap();
        assert_eq!(out.maps[0].objects.len(), 1);
        assert_eq!(out.maps[0].objects[0].n_views, 2);
        assert_eq!(out.maps[0].objects[0].gt_id, Some(0));
        assert!(out.results[0].success());
    }

    #[test]
    fn matches_direct_initialization_exactly() {
        for (noise, object, seed) in [
            (NoiseSpec::single(NoiseType::BBox, 0.03), 1, 2),
            (NoiseSpec::single(NoiseType::Translation, 0.1), 4, 0),
            (NoiseSpec::single(NoiseType::Rotation, 0.2), 7, 9),
        ] {
            let (input, log) = trial(noise, object, seed);
            let log = DetectionLog::from_json(&log.to_json()).unwrap();
            let cfg = PipelineConfig::sweep_equivalent(&InitMethod::ALL, InitConfig::default());
            let out = run_pipeline(&log, &cfg).unwrap();
            for (m, r) in InitMethod::ALL.iter().zip(&out.results) {
                let direct = m
                    .run(&input.observations(), &cfg.init)
                    .ok()
                    .map(|e| evaluate(&input.scene, &e));
                assert_eq!(r.metrics, direct, "{}", m.name());
            }
        }
    }

    #[test]
    fn associated_refined_run_recovers_object() {
        let (_, log) = trial(NoiseSpec::single(NoiseType::BBox, 0.02), 3, 1);
        let out = run_pipeline(&log, &PipelineConfig::default()).unwrap();
        assert_eq!(out.maps[0].objects.len(), 1);
        let m = out.results[0].metrics.unwrap();
        assert!(m.e_trans < 1.0 && m.iou2d > 0.8, "{m:?}");
    }

    #[test]
    fn dynamic_object_is_left_out_of_the_map() {
        let log = DetectionLog::from_scenario(&dynamic_scenario(3).unwrap());
        let out = run_pipeline(&log, &PipelineConfig::default()).unwrap();
        let ids: Vec<Option<u64>> = out.maps[0].objects.iter().map(|o| o.gt_id).collect();
        assert_eq!(ids, vec![Some(0)]);
    }

    #[test]
    fn missing_identity_is_an_ingestion_error() {
        let (_, mut log) = trial(NoiseSpec::default(), 0, 0);
        log.frames[1].detections[0] = LogDetection {
            object_id: None,
            ..log.frames[1].detections[0].clone()
        };
        let cfg = PipelineConfig::sweep_equivalent(&[InitMethod::Dqp], InitConfig::default());
        assert!(matches!(
            run_pipeline(&log, &cfg),
            Err(PipelineError::MissingObjectId { frame: 1, detection: 0 })
        ));
    }

    #[test]
    fn non_keyframes_do_not_initialize() {
        let (_, mut log) = trial(NoiseSpec::default(), 0, 0);
        for f in &mut log.frames {
            f.keyframe = false;
        }
        let out = run_pipeline(&log, &PipelineConfig::default()).unwrap();
        assert!(out.maps[0].objects.is_empty());
        assert!(!out.results[0].success());
    }
}
