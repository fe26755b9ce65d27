//! Calibration reports: per-trial records plus per-slave aggregates.
//!
//! Angles are written in degrees and translations in meters. Field order
//! is fixed by the struct definitions, so equal reports serialize to equal
//! bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{load_toml, to_toml, write_text};
use crate::error::{CalibError, Result};
use crate::geometry::EulerPose;
use crate::scalar::Real;

pub const REPORT_VERSION: u32 = 1;

/// Why a trial did not produce an accepted estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    None,
    DegenerateScene,
    NoOverlap,
    CorrespondenceStarvation,
    AmbiguousGround,
    /// The pipeline finished but the estimate missed the success thresholds.
    OutOfTolerance,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::None => "none",
            FailureReason::DegenerateScene => "degenerate-scene",
            FailureReason::NoOverlap => "no-overlap",
            FailureReason::CorrespondenceStarvation => "correspondence-starvation",
            FailureReason::AmbiguousGround => "ambiguous-ground",
            FailureReason::OutOfTolerance => "out-of-tolerance",
        }
    }
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Six pose values: degrees for angles, meters for offsets.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisValues {
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub yaw_deg: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl AxisValues {
    pub fn from_pose<T: Real>(p: &EulerPose<T>) -> Self {
        Self {
            pitch_deg: p.pitch.as_f64().to_degrees(),
            roll_deg: p.roll.as_f64().to_degrees(),
            yaw_deg: p.yaw.as_f64().to_degrees(),
            x_m: p.x.as_f64(),
            y_m: p.y.as_f64(),
            z_m: p.z.as_f64(),
        }
    }

    pub fn to_pose(&self) -> EulerPose<f64> {
        EulerPose::new(self.pitch_deg.to_radians(), self.roll_deg.to_radians(), self.yaw_deg.to_radians(), self.x_m, self.y_m, self.z_m)
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.pitch_deg, self.roll_deg, self.yaw_deg, self.x_m, self.y_m, self.z_m]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { pitch_deg: a[0], roll_deg: a[1], yaw_deg: a[2], x_m: a[3], y_m: a[4], z_m: a[5] }
    }

    pub fn max_rotation_deg(&self) -> f64 {
        self.as_array()[..3].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_translation_m(&self) -> f64 {
        self.as_array()[3..].iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Pose and alignment cost after one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Slave → master pose after the stage.
    pub pose: AxisValues,
    /// Mean squared nearest-neighbour distance over gated pairs (m²).
    pub cost: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub slave: String,
    pub success: bool,
    pub failure_reason: FailureReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected: Option<AxisValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<AxisValues>,
    /// Present only when ground truth is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<AxisValues>,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub count: usize,
    pub mean: AxisValues,
    /// Sample standard deviation (zero for a single value).
    pub std: AxisValues,
}

impl AxisStats {
    pub fn of(values: &[AxisValues]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mut mean = [0.0; 6];
        for v in values {
            for (m, x) in mean.iter_mut().zip(v.as_array()) {
                *m += x / n;
            }
        }
        let mut var = [0.0; 6];
        if values.len() > 1 {
            for v in values {
                for ((s, x), m) in var.iter_mut().zip(v.as_array()).zip(mean) {
                    *s += (x - m) * (x - m) / (n - 1.0);
                }
            }
        }
        Some(Self { count: values.len(), mean: AxisValues::from_array(mean), std: AxisValues::from_array(var.map(f64::sqrt)) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Slave id, or `"all"` across slaves.
    pub slave: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Error statistics over every trial that produced an estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_trials: Option<AxisStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_only: Option<AxisStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessThresholds {
    pub rotation_deg: f64,
    pub translation_m: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self { rotation_deg: 0.5, translation_m: 0.05 }
    }
}

impl SuccessThresholds {
    /// Every rotation axis below `rotation_deg` and every offset below `translation_m`.
    pub fn accepts(&self, errors: &AxisValues) -> bool {
        errors.max_rotation_deg() < self.rotation_deg && errors.max_translation_m() < self.translation_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub version: u32,
    pub master: String,
    pub thresholds: SuccessThresholds,
    pub trials: Vec<TrialRecord>,
    /// Per-slave rows in first-appearance order, then `"all"` when several
    /// trials are present.
    #[serde(default)]
    pub aggregates: Vec<Aggregate>,
}

impl CalibrationReport {
    /// Sorts trials by (trial, slave order) and computes the aggregates.
    pub fn new(master: impl Into<String>, thresholds: SuccessThresholds, mut trials: Vec<TrialRecord>) -> Result<Self> {
        if trials.is_empty() {
            return Err(CalibError::invalid("a report needs at least one trial"));
        }
        let mut slaves: Vec<String> = Vec::new();
        for t in &trials {
            if !slaves.contains(&t.slave) {
                slaves.push(t.slave.clone());
            }
        }
        let rank = |s: &str| slaves.iter().position(|x| x == s).unwrap_or(usize::MAX);
        trials.sort_by_key(|t| (t.trial, rank(&t.slave)));

        let mut aggregates = Vec::new();
        if trials.len() > 1 {
            for s in &slaves {
                let rows: Vec<&TrialRecord> = trials.iter().filter(|t| &t.slave == s).collect();
                aggregates.push(aggregate(s, &rows));
            }
            if slaves.len() > 1 {
                aggregates.push(aggregate("all", &trials.iter().collect::<Vec<_>>()));
            }
        }
        Ok(Self { version: REPORT_VERSION, master: master.into(), thresholds, trials, aggregates })
    }

    pub fn success_rate(&self) -> f64 {
        self.trials.iter().filter(|t| t.success).count() as f64 / self.trials.len().max(1) as f64
    }

    pub fn to_toml_string(&self) -> Result<String> {
        if self.trials.is_empty() {
            return Err(CalibError::invalid("a report needs at least one trial"));
        }
        to_toml(self)
    }
}

fn aggregate(slave: &str, rows: &[&TrialRecord]) -> Aggregate {
    let successes = rows.iter().filter(|t| t.success).count();
    let errs =
        |only_success: bool| -> Vec<AxisValues> { rows.iter().filter(|t| !only_success || t.success).filter_map(|t| t.errors).collect() };
    Aggregate {
        slave: slave.to_string(),
        trials: rows.len(),
        successes,
        success_rate: successes as f64 / rows.len().max(1) as f64,
        all_trials: AxisStats::of(&errs(false)),
        success_only: AxisStats::of(&errs(true)),
    }
}

pub fn write_report(report: &CalibrationReport, path: &Path) -> Result<()> {
    write_text(path, &report.to_toml_string()?)
}

pub fn read_report(path: &Path) -> Result<CalibrationReport> {
    load_toml(path)
}
