//! Evaluation metrics and per-method aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ellipsoid_bbox, iou_2d, BBox, CameraView, EllipsoidParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no trial results to aggregate")]
    EmptyResults,
}

/// Overlap between the ground-truth box and the box cast by the estimate.
pub fn metric_iou2d(gt: &BBox, pred: &BBox) -> f64 {
    iou_2d(gt, pred)
}

/// Centroid distance in the world frame.
pub fn metric_e_trans(gt: &EllipsoidParams, pred: &EllipsoidParams) -> f64 {
    (gt.translation() - pred.translation()).norm()
}

/// Axis-length distance, with both ellipsoids in canonical form so the axes
/// are paired consistently.
pub fn metric_e_axe(gt: &EllipsoidParams, pred: &EllipsoidParams) -> f64 {
    (gt.canonical().axes() - pred.canonical().axes()).norm()
}

/// Mean projected-box IoU of `pred` against ground-truth boxes over views.
/// A view where the estimate does not project to a box scores zero.
pub fn mean_iou2d(pred: &EllipsoidParams, views: &[CameraView], gt_boxes: &[BBox]) -> f64 {
    if views.is_empty() {
        return 0.0;
    }
    let total: f64 = views
        .iter()
        .zip(gt_boxes)
        .map(|(v, gt)| ellipsoid_bbox(pred, v).map(|b| metric_iou2d(gt, &b)).unwrap_or(0.0))
        .sum();
    total / views.len() as f64
}

/// Errors of one successful construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub iou2d: f64,
    pub e_trans: f64,
    pub e_axe: f64,
}

/// One method on one trial. Metrics are present iff the construction succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub sweep: String,
    pub method: String,
    pub noise_type: String,
    pub noise_level: f64,
    pub object: u64,
    pub seed: u64,
    pub metrics: Option<TrialMetrics>,
    /// Wall time in seconds; diagnostic only, never written to outputs.
    #[serde(skip)]
    pub wall_time: f64,
}

impl TrialResult {
    pub fn success(&self) -> bool {
        self.metrics.is_some()
    }
}

/// Aggregate of one (sweep, method, noise level) group. Error means run over
/// successful constructions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sweep: String,
    pub method: String,
    pub noise_type: String,
    pub noise_level: f64,
    pub success_rate: f64,
    pub iou2d: f64,
    pub e_trans: f64,
    pub e_axe: f64,
    pub n_trials: usize,
}

pub const METRICS_HEADER: [&str; 9] = [
    "sweep",
    "method",
    "noise_type",
    "noise_level",
    "success_rate",
    "iou2d",
    "e_trans",
    "e_axe",
    "n_trials",
];

/// Groups results by (sweep, method, noise type, level) in first-seen order.
pub fn aggregate(results: &[TrialResult]) -> Result<Vec<MetricsRow>, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let mut order: Vec<(String, String, String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String, u64), Vec<&TrialResult>> = BTreeMap::new();
    for r in results {
        let key = (
            r.sweep.clone(),
            r.method.clone(),
            r.noise_type.clone(),
            r.noise_level.to_bits(),
        );
        let entry = groups.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(r);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let ok: Vec<&TrialMetrics> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let mean = |f: fn(&TrialMetrics) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
                }
            };
            MetricsRow {
                sweep: key.0,
                method: key.1,
                noise_type: key.2,
                noise_level: f64::from_bits(key.3),
                success_rate: ok.len() as f64 / group.len() as f64,
                iou2d: mean(|m| m.iou2d),
                e_trans: mean(|m| m.e_trans),
                e_axe: mean(|m| m.e_axe),
                n_trials: group.len(),
            }
        })
        .collect())
}

/// Writes aggregated rows under [`METRICS_HEADER`].
pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRIALS_HEADER: [&str; 10] = [
    "sweep",
    "method",
    "noise_type",
    "noise_level",
    "object",
    "seed",
    "success",
    "iou2d",
    "e_trans",
    "e_axe",
];

/// Writes one row per trial and method, long format for plotting. Error
/// columns are empty for failed constructions.
pub fn write_trials_csv<W: std::io::Write>(results: &[TrialResult], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIALS_HEADER)?;
    for r in results {
        let m = r.metrics;
        let num = |f: fn(&TrialMetrics) -> f64| m.as_ref().map(|m| f(m).to_string()).unwrap_or_default();
        w.write_record([
            r.sweep.clone(),
            r.method.clone(),
            r.noise_type.clone(),
            r.noise_level.to_string(),
            r.object.to_string(),
            r.seed.to_string(),
            u8::from(r.success()).to_string(),
            num(|m| m.iou2d),
            num(|m| m.e_trans),
            num(|m| m.e_axe),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn result(success: bool, e: f64) -> TrialResult {
        TrialResult {
            sweep: "bbox".into(),
            method: "tri+yaw".into(),
            noise_type: "bbox".into(),
            noise_level: 0.02,
            object: 0,
            seed: 0,
            metrics: success.then_some(TrialMetrics {
                iou2d: 1.0 - e,
                e_trans: e,
                e_axe: e,
            }),
            wall_time: 0.0,
        }
    }

    #[test]
    fn translation_error_is_euclidean() {
        let a = EllipsoidParams::new(Vector3::repeat(1.0), Vector3::zeros(), Vector3::zeros()).unwrap();
        let b = EllipsoidParams::new(Vector3::repeat(1.0), Vector3::new(3.0, 4.0, 0.0), Vector3::zeros()).unwrap();
        assert_eq!(metric_e_trans(&a, &a), 0.0);
        assert_eq!(metric_e_trans(&a, &b), 5.0);
    }

    #[test]
    fn axis_error_is_euclidean() {
        let a = EllipsoidParams::new(Vector3::new(2.0, 1.0, 0.5), Vector3::zeros(), Vector3::zeros()).unwrap();
        let b = EllipsoidParams::new(Vector3::new(2.3, 1.0, 0.9), Vector3::zeros(), Vector3::zeros()).unwrap();
        assert_eq!(metric_e_axe(&a, &a), 0.0);
        assert!((metric_e_axe(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_metric_delegates() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert_eq!(metric_iou2d(&a, &a), 1.0);
        assert!((metric_iou2d(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn all_success_zero_error() {
        let rows = aggregate(&vec![result(true, 0.0); 4]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].success_rate, 1.0);
        assert_eq!(rows[0].e_trans, 0.0);
        assert_eq!(rows[0].n_trials, 4);
    }

    #[test]
    fn partial_success_rate_and_success_only_means() {
        let mut rs: Vec<TrialResult> = (0..6).map(|i| result(true, i as f64 * 0.1)).collect();
        rs.extend((0..4).map(|_| result(false, 0.0)));
        let rows = aggregate(&rs).unwrap();
        assert!((rows[0].success_rate - 0.6).abs() < 1e-15);
        let without_failures = aggregate(&rs[..6]).unwrap();
        assert_eq!(rows[0].e_trans, without_failures[0].e_trans);
    }

    #[test]
    fn metrics_csv_has_fixed_header_and_is_reproducible() {
        let rows = aggregate(&[result(true, 0.5), result(false, 0.0)]).unwrap();
        let write = || {
            let mut buf = Vec::new();
            write_metrics_csv(&rows, &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let text = write();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text, write());
    }

    #[test]
    fn trials_csv_leaves_failures_blank() {
        let mut buf = Vec::new();
        write_trials_csv(&[result(true, 0.5), result(false, 0.0)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRIALS_HEADER.join(","));
        assert!(lines[2].ends_with(",0,,,"));
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(aggregate(&[]), Err(MetricsError::EmptyResults));
    }
}
