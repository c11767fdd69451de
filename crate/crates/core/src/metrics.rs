//! Replay metrics: utilization / fragmentation ratios, memory-reduction
//! ratio, per-step timelines and the final report.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmlake::StateCounters;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("step seq {seq} is not strictly increasing")]
    OutOfOrder { seq: u64 },
    #[error("peak active {active} exceeds peak reserved {reserved}")]
    ActiveExceedsReserved { active: u64, reserved: u64 },
    #[error("reserved lists differ in length ({baseline} vs {other})")]
    LengthMismatch { baseline: usize, other: usize },
    #[error("reserved lists must be non-empty")]
    EmptyInput,
    #[error("baseline reserved sum is zero")]
    ZeroDenominator,
}

/// Peak active / peak reserved, in [0, 1]. An empty replay (both zero) counts
/// as fully utilized.
pub fn utilization(peak_active: u64, peak_reserved: u64) -> Result<f64, MetricsError> {
    if peak_active > peak_reserved {
        return Err(MetricsError::ActiveExceedsReserved {
            active: peak_active,
            reserved: peak_reserved,
        });
    }
    if peak_reserved == 0 {
        return Ok(1.0);
    }
    Ok(peak_active as f64 / peak_reserved as f64)
}

/// (sum(baseline) - sum(other)) / sum(baseline) over pairwise-matched
/// workloads. Computed on the sums, not averaged per-workload ratios.
pub fn mem_reduction_ratio(baseline: &[u64], other: &[u64]) -> Result<f64, MetricsError> {
    if baseline.len() != other.len() {
        return Err(MetricsError::LengthMismatch {
            baseline: baseline.len(),
            other: other.len(),
        });
    }
    if baseline.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let base: u128 = baseline.iter().map(|&b| b as u128).sum();
    let got: u128 = other.iter().map(|&b| b as u128).sum();
    if base == 0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok((base as f64 - got as f64) / base as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimelinePoint {
    pub seq: u64,
    pub active_bytes: u64,
    pub reserved_bytes: u64,
}

/// Accumulates the per-step series of one replay and tracks running peaks.
#[derive(Debug, Default)]
pub struct ReplayObservation {
    steps: Vec<TimelinePoint>,
    peak_active: u64,
    peak_reserved: u64,
    last_seq: Option<u64>,
}

impl ReplayObservation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_step(
        &mut self,
        seq: u64,
        active_bytes: u64,
        reserved_bytes: u64,
    ) -> Result<(), MetricsError> {
        if self.last_seq.is_some_and(|prev| seq <= prev) {
            return Err(MetricsError::OutOfOrder { seq });
        }
        self.last_seq = Some(seq);
        self.steps.push(TimelinePoint {
            seq,
            active_bytes,
            reserved_bytes,
        });
        self.peak_active = self.peak_active.max(active_bytes);
        self.peak_reserved = self.peak_reserved.max(reserved_bytes);
        Ok(())
    }

    pub fn peaks(&self) -> (u64, u64) {
        (self.peak_active, self.peak_reserved)
    }

    pub fn steps(&self) -> &[TimelinePoint] {
        &self.steps
    }

    pub fn into_steps(self) -> Vec<TimelinePoint> {
        self.steps
    }

    /// Closes the observation into a report. Fragmentation is defined as the
    /// exact complement of utilization.
    pub fn finalize(
        &self,
        simulated_cost: f64,
        oom: bool,
        state_counters: Option<StateCounters>,
    ) -> Result<ReplayReport, MetricsError> {
        let utilization_ratio = utilization(self.peak_active, self.peak_reserved)?;
        Ok(ReplayReport {
            peak_active: self.peak_active,
            peak_reserved: self.peak_reserved,
            utilization_ratio,
            fragmentation_ratio: 1.0 - utilization_ratio,
            simulated_cost,
            oom,
            state_counters,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub peak_active: u64,
    pub peak_reserved: u64,
    pub utilization_ratio: f64,
    pub fragmentation_ratio: f64,
    pub simulated_cost: f64,
    pub oom: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub state_counters: Option<StateCounters>,
}

impl ReplayReport {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }
}

/// Timeline CSV: `seq,active_bytes,reserved_bytes`, one row per step.
pub fn write_timeline_csv<W: Write>(mut writer: W, steps: &[TimelinePoint]) -> io::Result<()> {
    writeln!(writer, "seq,active_bytes,reserved_bytes")?;
    for p in steps {
        writeln!(writer, "{},{},{}", p.seq, p.active_bytes, p.reserved_bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GIB;

    #[test]
    fn utilization_quotient_and_conventions() {
        assert_eq!(utilization(72 * GIB, 80 * GIB).unwrap(), 0.9);
        assert_eq!(utilization(0, 0).unwrap(), 1.0);
        assert!(matches!(
            utilization(2, 1),
            Err(MetricsError::ActiveExceedsReserved { .. })
        ));
    }

    #[test]
    fn reduction_ratio_worked_examples() {
        assert_eq!(mem_reduction_ratio(&[100], &[75]).unwrap(), 0.25);
        assert_eq!(mem_reduction_ratio(&[100], &[100]).unwrap(), 0.0);
        // formula over the sums, not the mean of per-workload ratios
        assert_eq!(mem_reduction_ratio(&[80, 20], &[60, 20]).unwrap(), 0.2);
        assert!(matches!(
            mem_reduction_ratio(&[1, 2], &[1]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            mem_reduction_ratio(&[], &[]),
            Err(MetricsError::EmptyInput)
        ));
        assert!(matches!(
            mem_reduction_ratio(&[0, 0], &[1, 1]),
            Err(MetricsError::ZeroDenominator)
        ));
        // may go negative when the candidate reserves more
        assert!(mem_reduction_ratio(&[10], &[20]).unwrap() < 0.0);
    }

    #[test]
    fn record_step_tracks_peaks_and_order() {
        let mut obs = ReplayObservation::new();
        obs.record_step(1, 4, 8).unwrap();
        obs.record_step(2, 2, 8).unwrap();
        assert_eq!(obs.peaks(), (4, 8));
        assert!(matches!(
            obs.record_step(2, 1, 1),
            Err(MetricsError::OutOfOrder { seq: 2 })
        ));
        // full-scan oracle
        let max_active = obs.steps().iter().map(|p| p.active_bytes).max().unwrap();
        let max_reserved = obs.steps().iter().map(|p| p.reserved_bytes).max().unwrap();
        assert_eq!(obs.peaks(), (max_active, max_reserved));
    }

    #[test]
    fn finalize_builds_the_exact_complement() {
        let mut obs = ReplayObservation::new();
        obs.record_step(0, 72 * GIB, 80 * GIB).unwrap();
        let report = obs.finalize(12.5, false, None).unwrap();
        assert_eq!(report.fragmentation_ratio, 1.0 - report.utilization_ratio);
        assert!((report.fragmentation_ratio - 0.10).abs() < 1e-12);
        assert_eq!(report.utilization_ratio + report.fragmentation_ratio, 1.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut obs = ReplayObservation::new();
        obs.record_step(0, 10, 20).unwrap();
        let report = obs
            .finalize(3.25, true, Some(StateCounters { s1: 1, s2: 2, s3: 3, s4: 4, s5: 5 }))
            .unwrap();
        let json = report.to_json();
        let back: ReplayReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn timeline_csv_shape() {
        let steps = [
            TimelinePoint { seq: 0, active_bytes: 1, reserved_bytes: 2 },
            TimelinePoint { seq: 1, active_bytes: 3, reserved_bytes: 4 },
        ];
        let mut buffer = Vec::new();
        write_timeline_csv(&mut buffer, &steps).unwrap();
        assert_eq!(
            String::from_utf8(buffer).unwrap(),
            "seq,active_bytes,reserved_bytes\n0,1,2\n1,3,4\n"
        );
    }
}
