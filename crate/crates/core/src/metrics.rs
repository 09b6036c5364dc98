//! Displacement errors, format-error rates, the common-frame filter and
//! per-run aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{estimate_cost, Pricing};
use crate::domain::{FrameResult, ParseStatus, Trajectory, HORIZON};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectories must have {HORIZON} points, got predicted {predicted} and ground truth {ground_truth}")]
    LengthMismatch { predicted: usize, ground_truth: usize },
    #[error("no results to aggregate")]
    Empty,
    #[error("run {run} references frame {frame_id} outside the universe")]
    UnknownFrame { run: String, frame_id: String },
    #[error("retained frame {0} has no prediction")]
    MissingPrediction(String),
}

/// Displacement errors in meters for one predicted trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DisplacementMetrics {
    pub ade_1s: f64,
    pub ade_2s: f64,
    pub ade_3s: f64,
    pub ade_avg: f64,
    pub fde: f64,
}

impl DisplacementMetrics {
    /// Builds the metrics from horizon ADEs and FDE, deriving the average.
    pub fn from_horizons(ade_1s: f64, ade_2s: f64, ade_3s: f64, fde: f64) -> Self {
        Self {
            ade_1s,
            ade_2s,
            ade_3s,
            ade_avg: (ade_1s + ade_2s + ade_3s) / 3.0,
            fde,
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// ADE at 1/2/3 s averages the first 2/4/6 points; the average ADE is the
/// mean of those three; FDE is the error at the last point.
pub fn displacement_errors(
    predicted: &Trajectory,
    ground_truth: &Trajectory,
) -> Result<DisplacementMetrics, MetricsError> {
    if predicted.len() != HORIZON || ground_truth.len() != HORIZON {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let d: Vec<f64> = predicted
        .points
        .iter()
        .zip(&ground_truth.points)
        .map(|(p, g)| p.distance(g))
        .collect();
    Ok(DisplacementMetrics::from_horizons(
        mean(&d[..2]),
        mean(&d[..4]),
        mean(&d[..6]),
        d[5],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub retained_frame_ids: BTreeSet<String>,
    pub universe_size: usize,
    /// Percent of the universe retained.
    pub retention_rate: f64,
    /// Dropped frame → runs that lacked a valid prediction for it.
    pub excluded: BTreeMap<String, Vec<String>>,
}

/// Keeps only frames for which every run produced a valid prediction.
///
/// `runs` maps a run label to the frames it has valid (strict or corrected)
/// predictions for.
pub fn common_frame_filter(
    runs: &BTreeMap<String, BTreeSet<String>>,
    universe: &BTreeSet<String>,
) -> Result<FilterReport, MetricsError> {
    for (run, ids) in runs {
        if let Some(id) = ids.iter().find(|id| !universe.contains(*id)) {
            return Err(MetricsError::UnknownFrame {
                run: run.clone(),
                frame_id: id.clone(),
            });
        }
    }
    let mut retained = BTreeSet::new();
    let mut excluded = BTreeMap::new();
    for id in universe {
        let culprits: Vec<String> = runs
            .iter()
            .filter(|(_, ids)| !ids.contains(id))
            .map(|(run, _)| run.clone())
            .collect();
        if culprits.is_empty() {
            retained.insert(id.clone());
        } else {
            excluded.insert(id.clone(), culprits);
        }
    }
    let retention_rate = if universe.is_empty() {
        0.0
    } else {
        100.0 * retained.len() as f64 / universe.len() as f64
    };
    Ok(FilterReport {
        retained_frame_ids: retained,
        universe_size: universe.len(),
        retention_rate,
        excluded,
    })
}

/// (FE, FE-Corr) in percent: outputs that were not strictly valid, and
/// outputs still unusable after correction.
pub fn fe_rates(results: &[FrameResult]) -> Result<(f64, f64), MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total = results.len() as f64;
    let not_strict = results
        .iter()
        .filter(|r| r.parse_status != ParseStatus::Strict)
        .count() as f64;
    let failed = results
        .iter()
        .filter(|r| r.parse_status == ParseStatus::Failed)
        .count() as f64;
    Ok((100.0 * not_strict / total, 100.0 * failed / total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model_name: String,
    pub frames_total: usize,
    pub frames_evaluated: usize,
    pub fe_rate: f64,
    pub fe_corr_rate: f64,
    /// Seconds per frame, all three stages.
    pub mean_latency: f64,
    pub mean_input_tokens: f64,
    pub mean_output_tokens: f64,
    /// Cents per frame.
    pub mean_cost: f64,
    pub displacement: DisplacementMetrics,
}

/// Aggregates one run. Efficiency means cover every attempted frame;
/// displacement means cover only the filter's retained frames, summed in
/// frame-id order.
pub fn summarize(
    model_name: &str,
    results: &[FrameResult],
    pricing: &Pricing,
    filter: &FilterReport,
) -> Result<RunSummary, MetricsError> {
    let (fe_rate, fe_corr_rate) = fe_rates(results)?;
    let n = results.len() as f64;
    let mut latency = 0.0;
    let mut input = 0.0;
    let mut output = 0.0;
    let mut cost = 0.0;
    for r in results {
        let usage = r.total_usage();
        latency += r.latency.total;
        input += usage.input_tokens as f64;
        output += usage.output_tokens as f64;
        cost += estimate_cost(usage.input_tokens, usage.output_tokens, pricing);
    }

    let by_id: BTreeMap<&str, &FrameResult> =
        results.iter().map(|r| (r.frame_id.as_str(), r)).collect();
    let mut per_frame = Vec::with_capacity(filter.retained_frame_ids.len());
    for id in &filter.retained_frame_ids {
        let r = by_id
            .get(id.as_str())
            .ok_or_else(|| MetricsError::MissingPrediction(id.clone()))?;
        let predicted = match (&r.predicted, r.parse_status) {
            (Some(p), ParseStatus::Strict | ParseStatus::Corrected) => p,
            _ => return Err(MetricsError::MissingPrediction(id.clone())),
        };
        per_frame.push(displacement_errors(predicted, &r.ground_truth)?);
    }
    let displacement = mean_displacement(&per_frame);

    Ok(RunSummary {
        model_name: model_name.to_string(),
        frames_total: results.len(),
        frames_evaluated: per_frame.len(),
        fe_rate,
        fe_corr_rate,
        mean_latency: latency / n,
        mean_input_tokens: input / n,
        mean_output_tokens: output / n,
        mean_cost: cost / n,
        displacement,
    })
}

fn mean_displacement(items: &[DisplacementMetrics]) -> DisplacementMetrics {
    if items.is_empty() {
        return DisplacementMetrics::default();
    }
    let n = items.len() as f64;
    let sum = |f: fn(&DisplacementMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    DisplacementMetrics::from_horizons(
        sum(|m| m.ade_1s),
        sum(|m| m.ade_2s),
        sum(|m| m.ade_3s),
        sum(|m| m.fde),
    )
}
