//! The contract shared by every heartbeat failure detector.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("heartbeat seq {seq} does not follow previous seq {prev}")]
    NonIncreasingSeq { seq: u64, prev: u64 },
    #[error("arrival {arrival_ms} ms is not after previous arrival {prev_ms} ms")]
    NonIncreasingArrival { arrival_ms: f64, prev_ms: f64 },
    #[error("arrival timestamp {0} is not finite")]
    NonFiniteArrival(f64),
    #[error("detector is still warming up")]
    NotReady,
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
}

/// The deadline for one expected heartbeat: `tau_ms = ea_ms + margin_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreshnessPoint {
    /// Sequence number of the heartbeat being predicted.
    pub for_seq: u64,
    /// Estimated arrival.
    pub ea_ms: f64,
    pub margin_ms: f64,
    pub tau_ms: f64,
}

impl FreshnessPoint {
    pub fn new(for_seq: u64, ea_ms: f64, margin_ms: f64) -> Self {
        debug_assert!(margin_ms >= 0.0);
        FreshnessPoint { for_seq, ea_ms, margin_ms, tau_ms: ea_ms + margin_ms }
    }

    /// A heartbeat arriving exactly at `tau_ms` is still on time.
    pub fn is_safe(&self, arrival_ms: f64) -> bool {
        arrival_ms <= self.tau_ms
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectorStatus {
    pub ready: bool,
    pub last_prediction: Option<FreshnessPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assessment {
    Trust,
    Suspect,
}

/// Trust/suspect output at time `now_ms`.
///
/// `status.last_prediction` always targets the next heartbeat that has not
/// arrived yet, so suspicion only depends on whether its deadline has passed.
pub fn assess(status: &DetectorStatus, now_ms: f64) -> Result<Assessment, DetectorError> {
    match status.last_prediction {
        Some(fp) if status.ready => Ok(if now_ms > fp.tau_ms { Assessment::Suspect } else { Assessment::Trust }),
        _ => Err(DetectorError::NotReady),
    }
}

/// Training problems a detector recovered from; surfaced in reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub training_failures: u64,
    pub last_error: Option<String>,
}

pub trait FailureDetector {
    /// Feeds one received heartbeat and returns the freshness point for the
    /// next one, or `None` while warming up.
    fn on_heartbeat(&mut self, seq: u64, arrival_ms: f64) -> Result<Option<FreshnessPoint>, DetectorError>;

    fn status(&self) -> DetectorStatus;

    /// Zero-based index of the first heartbeat that yields a prediction.
    fn warmup_index(&self) -> usize;

    fn name(&self) -> &'static str;

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics::default()
    }
}

/// Runs one `on_heartbeat` call and measures its wall-clock cost in ms.
pub fn timed_heartbeat<D: FailureDetector + ?Sized>(
    detector: &mut D,
    seq: u64,
    arrival_ms: f64,
) -> (Result<Option<FreshnessPoint>, DetectorError>, f64) {
    let start = Instant::now();
    let out = detector.on_heartbeat(seq, arrival_ms);
    (out, start.elapsed().as_secs_f64() * 1e3)
}

/// Input ordering guard shared by the detectors.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct MonotonicGuard {
    last: Option<(u64, f64)>,
}

impl MonotonicGuard {
    pub(crate) fn admit(&mut self, seq: u64, arrival_ms: f64) -> Result<(), DetectorError> {
        if !arrival_ms.is_finite() {
            return Err(DetectorError::NonFiniteArrival(arrival_ms));
        }
        if let Some((prev_seq, prev_ms)) = self.last {
            if seq <= prev_seq {
                return Err(DetectorError::NonIncreasingSeq { seq, prev: prev_seq });
            }
            if arrival_ms <= prev_ms {
                return Err(DetectorError::NonIncreasingArrival { arrival_ms, prev_ms });
            }
        }
        self.last = Some((seq, arrival_ms));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn status(tau: f64) -> DetectorStatus {
        DetectorStatus { ready: true, last_prediction: Some(FreshnessPoint::new(7, tau - 10.0, 10.0)) }
    }

    #[test]
    fn assess_boundaries() {
        assert_eq!(assess(&status(500.0), 499.0), Ok(Assessment::Trust));
        assert_eq!(assess(&status(500.0), 500.0), Ok(Assessment::Trust));
        assert_eq!(assess(&status(500.0), 500.5), Ok(Assessment::Suspect));
        assert_eq!(assess(&DetectorStatus::default(), 0.0), Err(DetectorError::NotReady));
    }

    #[test]
    fn arrival_at_tau_is_safe() {
        let fp = FreshnessPoint::new(1, 90.0, 10.0);
        assert_eq!(fp.tau_ms, 100.0);
        assert!(fp.is_safe(100.0));
        assert!(!fp.is_safe(100.001));
    }

    #[test]
    fn guard_rejects_out_of_order_input() {
        let mut g = MonotonicGuard::default();
        g.admit(0, 0.0).unwrap();
        g.admit(2, 150.0).unwrap();
        assert!(matches!(g.admit(2, 200.0), Err(DetectorError::NonIncreasingSeq { .. })));
        assert!(matches!(g.admit(3, 150.0), Err(DetectorError::NonIncreasingArrival { .. })));
        assert!(matches!(g.admit(4, f64::NAN), Err(DetectorError::NonFiniteArrival(_))));
    }
}
