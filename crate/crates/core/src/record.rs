//! JSON Lines output records.

use serde::{Deserialize, Serialize};

use crate::cluster::ThresholdInterval;
use crate::metrics::MetricSuite;

/// One explanation: keys serialize in declaration order. An unbounded upper
/// end of the interval is written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub neuron: usize,
    /// 1-based cluster index, ascending with activation values; 0 for the
    /// top-quantile range.
    pub cluster_index: usize,
    pub interval_lo: f64,
    pub interval_hi: Option<f64>,
    pub formula: String,
    pub iou: f64,
    pub detacc: f64,
    pub samplecov: f64,
    pub actcov: f64,
    pub explcov: f64,
    pub labmask: Option<f64>,
    pub visited_labels: u64,
    pub wall_time_ms: Option<u64>,
}

impl ExplanationRecord {
    pub fn interval(&self) -> ThresholdInterval {
        ThresholdInterval::new(self.interval_lo, self.interval_hi.unwrap_or(f64::INFINITY))
    }

    pub fn metrics(&self) -> MetricSuite {
        MetricSuite {
            iou: self.iou,
            detacc: self.detacc,
            samplecov: self.samplecov,
            actcov: self.actcov,
            explcov: self.explcov,
            labmask: self.labmask,
        }
    }

    pub fn without_timing(mut self) -> Self {
        self.wall_time_ms = None;
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// Encode an interval end for JSON: infinities become `None`.
pub fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
