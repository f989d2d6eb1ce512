//! Chen's estimated-arrival detector: the mean of drift-corrected arrival
//! times over a sliding window, plus a constant safety margin.
//!
//! For buffered pairs `(i, A_i)` and latest seq `k`:
//!
//! ```text
//! EA_{k+1} = (1/m) * sum(A_i - delta * i) + (k + 1) * delta
//! tau      = EA_{k+1} + alpha
//! ```
//!
//! `m` is the number of buffered heartbeats (at most `n`). Lost heartbeats
//! leave gaps in `i`, so the drift term always follows the real sequence
//! numbers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorError, DetectorStatus, FailureDetector, FreshnessPoint, MonotonicGuard};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChenConfig {
    /// Window size in heartbeats.
    pub n: usize,
    pub alpha_ms: f64,
    /// Heartbeats required before the first prediction.
    pub w_min: usize,
}

impl Default for ChenConfig {
    fn default() -> Self {
        ChenConfig { n: 1000, alpha_ms: 680.0, w_min: 2 }
    }
}

impl ChenConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidConfig(m));
        if self.n < 2 {
            return bad(format!("chen window n must be at least 2, got {}", self.n));
        }
        if !(self.alpha_ms.is_finite() && self.alpha_ms >= 0.0) {
            return bad(format!("chen alpha must be a non-negative duration, got {}", self.alpha_ms));
        }
        if self.w_min < 2 || self.w_min > self.n {
            return bad(format!("chen w_min must lie in [2, n], got {}", self.w_min));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChenDetector {
    config: ChenConfig,
    delta_ms: f64,
    window: VecDeque<(u64, f64)>,
    guard: MonotonicGuard,
    last: Option<FreshnessPoint>,
}

impl ChenDetector {
    pub fn new(config: ChenConfig, delta_ms: f64) -> Result<Self, DetectorError> {
        config.validate()?;
        if !(delta_ms.is_finite() && delta_ms > 0.0) {
            return Err(DetectorError::InvalidConfig(format!("heartbeat interval must be positive, got {delta_ms}")));
        }
        Ok(ChenDetector {
            config,
            delta_ms,
            window: VecDeque::with_capacity(config.n),
            guard: MonotonicGuard::default(),
            last: None,
        })
    }

    pub fn config(&self) -> &ChenConfig {
        &self.config
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Freshness point for the heartbeat after the latest buffered one, or
    /// `None` while fewer than `w_min` heartbeats are buffered.
    pub fn predict(&self) -> Option<FreshnessPoint> {
        if self.window.len() < self.config.w_min {
            return None;
        }
        let &(k, _) = self.window.back()?;
        let m = self.window.len() as f64;
        let offset_sum: f64 = self.window.iter().map(|&(i, a)| a - self.delta_ms * i as f64).sum();
        let ea = offset_sum / m + (k + 1) as f64 * self.delta_ms;
        Some(FreshnessPoint::new(k + 1, ea, self.config.alpha_ms))
    }
}

impl FailureDetector for ChenDetector {
    fn on_heartbeat(&mut self, seq: u64, arrival_ms: f64) -> Result<Option<FreshnessPoint>, DetectorError> {
        self.guard.admit(seq, arrival_ms)?;
        if self.window.len() == self.config.n {
            self.window.pop_front();
        }
        self.window.push_back((seq, arrival_ms));
        let fp = self.predict();
        if fp.is_some() {
            self.last = fp;
        }
        Ok(fp)
    }

    fn status(&self) -> DetectorStatus {
        DetectorStatus { ready: self.last.is_some(), last_prediction: self.last }
    }

    fn warmup_index(&self) -> usize {
        self.config.w_min - 1
    }

    fn name(&self) -> &'static str {
        "chen"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chen(n: usize, alpha: f64) -> ChenDetector {
        ChenDetector::new(ChenConfig { n, alpha_ms: alpha, w_min: 2 }, 100.0).unwrap()
    }

    fn feed(det: &mut ChenDetector, arrivals: &[(u64, f64)]) -> Vec<Option<FreshnessPoint>> {
        arrivals.iter().map(|&(s, a)| det.on_heartbeat(s, a).unwrap()).collect()
    }

    /// Separate-sums evaluation of the estimator, independent of the
    /// detector's single fused sum.
    fn direct_ea(window: &[(u64, f64)], delta: f64) -> f64 {
        let m = window.len() as f64;
        let sum_a: f64 = window.iter().map(|w| w.1).sum();
        let sum_i: f64 = window.iter().map(|w| w.0 as f64).sum();
        let k = window.last().unwrap().0 as f64;
        sum_a / m - delta * sum_i / m + (k + 1.0) * delta
    }

    #[test]
    fn first_heartbeat_is_warmup() {
        let mut d = chen(10, 0.0);
        assert_eq!(d.on_heartbeat(0, 0.0).unwrap(), None);
        assert!(!d.status().ready);
        assert!(d.on_heartbeat(1, 100.0).unwrap().is_some());
        assert!(d.status().ready);
    }

    #[test]
    fn periodic_input_predicts_next_slot() {
        let mut d = chen(4, 0.0);
        let out = feed(&mut d, &[(0, 0.0), (1, 100.0), (2, 200.0), (3, 300.0)]);
        let fp = out[3].unwrap();
        assert_eq!(fp.for_seq, 4);
        assert_eq!(fp.ea_ms, 400.0);
        assert_eq!(fp.tau_ms, 400.0);

        let mut d = chen(1000, 0.0);
        let arrivals: Vec<(u64, f64)> = (0..10).map(|i| (i, 100.0 * i as f64)).collect();
        let fp = feed(&mut d, &arrivals)[9].unwrap();
        assert_eq!((fp.for_seq, fp.tau_ms), (10, 1000.0));
    }

    #[test]
    fn hand_evaluated_window() {
        let mut d = chen(4, 50.0);
        let out = feed(&mut d, &[(0, 0.0), (1, 110.0), (2, 205.0), (3, 330.0)]);
        let fp = out[3].unwrap();
        assert_eq!(fp.ea_ms, 411.25);
        assert_eq!(fp.margin_ms, 50.0);
        assert_eq!(fp.tau_ms, 461.25);
    }

    #[test]
    fn ring_evicts_beyond_n() {
        let mut d = chen(5, 0.0);
        let arrivals: Vec<(u64, f64)> = (0..6).map(|i| (i, 100.0 * i as f64 + 3.0)).collect();
        feed(&mut d, &arrivals);
        assert_eq!(d.window_len(), 5);
    }

    #[test]
    fn warmup_respects_w_min() {
        let mut d = ChenDetector::new(ChenConfig { n: 10, alpha_ms: 0.0, w_min: 4 }, 100.0).unwrap();
        let arrivals: Vec<(u64, f64)> = (0..6).map(|i| (i, 100.0 * i as f64)).collect();
        let out = feed(&mut d, &arrivals);
        assert!(out[..3].iter().all(Option::is_none));
        assert!(out[3..].iter().all(Option::is_some));
        assert_eq!(d.warmup_index(), 3);
    }

    #[test]
    fn tau_strictly_increases_on_periodic_trace() {
        let mut d = chen(8, 25.0);
        let arrivals: Vec<(u64, f64)> = (0..20).map(|i| (i, 100.0 * i as f64 + 7.0)).collect();
        let taus: Vec<f64> = feed(&mut d, &arrivals).into_iter().flatten().map(|f| f.tau_ms).collect();
        assert_eq!(taus.len(), 19);
        // Replay oracle: every window is exact, so tau = next slot + delay + alpha.
        for (j, tau) in taus.iter().enumerate() {
            assert_eq!(*tau, 100.0 * (j + 2) as f64 + 7.0 + 25.0);
        }
        assert!(taus.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn seq_gaps_use_true_sequence_numbers() {
        let mut d = chen(10, 0.0);
        let out = feed(&mut d, &[(0, 0.0), (1, 100.0), (4, 400.0)]);
        assert_eq!(out[2].unwrap().for_seq, 5);
        assert_eq!(out[2].unwrap().ea_ms, 500.0);
    }

    #[test]
    fn rejects_bad_config_and_input() {
        assert!(ChenDetector::new(ChenConfig { n: 1, alpha_ms: 0.0, w_min: 2 }, 100.0).is_err());
        assert!(ChenDetector::new(ChenConfig { n: 4, alpha_ms: -1.0, w_min: 2 }, 100.0).is_err());
        assert!(ChenDetector::new(ChenConfig { n: 4, alpha_ms: 0.0, w_min: 5 }, 100.0).is_err());
        let mut d = chen(4, 0.0);
        d.on_heartbeat(3, 300.0).unwrap();
        assert!(d.on_heartbeat(2, 400.0).is_err());
        assert!(d.on_heartbeat(4, 300.0).is_err());
    }

    fn window_strategy() -> impl Strategy<Value = Vec<(u64, f64)>> {
        (2usize..=8, 0u64..10_000).prop_flat_map(|(len, start)| {
            (
                prop::collection::vec(1u64..4, len),
                prop::collection::vec(-50.0f64..400.0, len),
            )
                .prop_map(move |(gaps, delays)| {
                    let mut seq = start;
                    gaps.iter()
                        .zip(&delays)
                        .enumerate()
                        .map(|(j, (g, d))| {
                            if j > 0 {
                                seq += g;
                            }
                            // Keep arrivals increasing: seq advances by >= 1 slot of 100 ms.
                            (seq, seq as f64 * 100.0 + d * 0.2)
                        })
                        .collect()
                })
        })
    }

    proptest! {
        #[test]
        fn matches_direct_evaluation(window in window_strategy()) {
            let mut d = chen(window.len(), 0.0);
            let fp = feed(&mut d, &window).last().copied().flatten().unwrap();
            let oracle = direct_ea(&window, 100.0);
            prop_assert!(((fp.ea_ms - oracle) / oracle).abs() <= 1e-12);
        }

        #[test]
        fn shifting_arrivals_shifts_ea(window in window_strategy(), c in 0.0f64..1e4) {
            let shifted: Vec<(u64, f64)> = window.iter().map(|&(s, a)| (s, a + c)).collect();
            let mut a = chen(8, 0.0);
            let mut b = chen(8, 0.0);
            let ea = feed(&mut a, &window).last().copied().flatten().unwrap().ea_ms;
            let ea_c = feed(&mut b, &shifted).last().copied().flatten().unwrap().ea_ms;
            prop_assert!((ea_c - (ea + c)).abs() <= 1e-9 * ea_c.abs().max(1.0));
        }

        #[test]
        fn alpha_is_additive(
            slots in prop::sample::select(vec![2usize, 4, 8])
                .prop_flat_map(|len| prop::collection::vec(0u32..800, len)),
            a1 in 0u32..1000,
            a2 in 0u32..1000,
        ) {
            // Arrivals on a 1/8 ms grid and power-of-two windows keep every sum exact.
            let window: Vec<(u64, f64)> = slots.iter().enumerate()
                .map(|(i, s)| (i as u64, i as f64 * 100.0 + *s as f64 / 8.0)).collect();
            let mut x = chen(8, a1 as f64);
            let mut y = chen(8, a2 as f64);
            let t1 = feed(&mut x, &window).last().copied().flatten().unwrap().tau_ms;
            let t2 = feed(&mut y, &window).last().copied().flatten().unwrap().tau_ms;
            prop_assert_eq!(t2 - t1, a2 as f64 - a1 as f64);
        }
    }
}
