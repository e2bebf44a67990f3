//! Metrics, detection-log ingestion, the end-to-end pipeline and the
//! experiment drivers behind the command line.

pub mod log;
pub mod metrics;
pub mod pipeline;
pub mod selftest;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::EllipsoidParams;
use crate::init::{InitMethod, ObservationSet};
use crate::optimize::{optimize_quadric, ObjectObservation};
use crate::sim::{evaluate, trial_input, NoiseSpec, NoiseType, SimError, SimulationConfig};
use metrics::{TrialMetrics, TrialResult};
use pipeline::PipelineConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Refinement A/B settings: the noise under which initializations are
/// compared with and without the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbConfig {
    pub noise_type: NoiseType,
    pub level: f64,
    pub method: InitMethod,
}

impl Default for AbConfig {
    fn default() -> Self {
        Self {
            noise_type: NoiseType::BBox,
            level: 0.04,
            method: InitMethod::Dqp,
        }
    }
}

/// Configuration file shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub schema_version: u32,
    pub simulation: SimulationConfig,
    pub pipeline: PipelineConfig,
    pub ab: AbConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            simulation: SimulationConfig::default(),
            pipeline: PipelineConfig::default(),
            ab: AbConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        self.simulation.validate().map_err(|e| e.to_string())?;
        self.pipeline.validate().map_err(|e| e.to_string())?;
        if !(self.ab.level >= 0.0 && self.ab.level.is_finite()) {
            return Err("ab.level must be non-negative".into());
        }
        Ok(())
    }
}

/// One trial of the refinement A/B.
#[derive(Debug, Clone, PartialEq)]
pub struct AbTrial {
    pub object: u64,
    pub seed: u64,
    pub initial: Option<EllipsoidParams>,
    pub refined: Option<EllipsoidParams>,
    pub before: Option<TrialMetrics>,
    pub after: Option<TrialMetrics>,
}

/// Initializes every (object, seed) trial under the A/B noise, refines each
/// success, and scores both. Order is (object, seed) whatever the thread count.
pub fn refinement_ab(cfg: &BenchConfig) -> Result<Vec<AbTrial>, SimError> {
    cfg.simulation.validate()?;
    let scene = &cfg.simulation.scene;
    let noise = NoiseSpec::single(cfg.ab.noise_type, cfg.ab.level);
    let keys: Vec<(u64, u64)> = (0..scene.n_objects as u64)
        .flat_map(|o| (0..scene.n_seeds as u64).map(move |s| (o, s)))
        .collect();
    Ok(keys
        .par_iter()
        .map(|&(object, seed)| {
            let mut t = AbTrial {
                object,
                seed,
                initial: None,
                refined: None,
                before: None,
                after: None,
            };
            let Ok(input) = trial_input(scene, &noise, object, seed) else {
                return t;
            };
            let obs: ObservationSet = input.observations();
            t.initial = cfg.ab.method.run(&obs, &cfg.simulation.init).ok();
            if let Some(e0) = t.initial {
                let observations: Vec<ObjectObservation> = obs
                    .items()
                    .iter()
                    .map(|(v, b)| ObjectObservation::new(*v, *b))
                    .collect();
                t.refined = optimize_quadric(&e0, &observations, "car", &cfg.pipeline.priors, &cfg.pipeline.optimizer)
                    .map(|(e, _)| e)
                    .ok();
                t.before = Some(evaluate(&input.scene, &e0));
                t.after = t.refined.map(|e| evaluate(&input.scene, &e));
            }
            t
        })
        .collect())
}

/// A/B trials as results under two method labels, for aggregation.
pub fn ab_results(cfg: &BenchConfig, trials: &[AbTrial]) -> Vec<TrialResult> {
    let name = cfg.ab.noise_type.name().to_string();
    let base = cfg.ab.method.name();
    trials
        .iter()
        .flat_map(|t| {
            [(base.to_string(), t.before), (format!("{base}+opt"), t.after)].map(|(method, metrics)| TrialResult {
                sweep: "refinement".into(),
                method,
                noise_type: name.clone(),
                noise_level: cfg.ab.level,
                object: t.object,
                seed: t.seed,
                metrics,
                wall_time: 0.0,
            })
        })
        .collect()
}
