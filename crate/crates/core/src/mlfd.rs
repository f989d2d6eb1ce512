//! The LSTM failure detector.
//!
//! On every heartbeat the detector retrains its network on the inter-arrival
//! deltas of the most recent `eta` heartbeats (older history only survives
//! in the weights), predicts the next delta, and pads the resulting
//! estimated arrival with the mean of its last `epsilon` absolute errors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorError, DetectorStatus, Diagnostics, FailureDetector, FreshnessPoint, MonotonicGuard};
use crate::lstm::{sliding_samples, LstmError, LstmModel, TrainConfig};

/// Inter-arrival time as a dimensionless offset from the nominal interval.
pub fn normalize_delta(delta_ms: f64, nominal_ms: f64) -> f64 {
    delta_ms / nominal_ms - 1.0
}

pub fn denormalize_delta(x: f64, nominal_ms: f64) -> f64 {
    (x + 1.0) * nominal_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlfdConfig {
    /// Error window size.
    pub epsilon: usize,
    pub hidden: usize,
    /// Timesteps per training sample.
    pub lookback: usize,
    /// Heartbeats between retraining rounds; 1 retrains on every heartbeat.
    pub retrain_every: usize,
    pub train: TrainConfig,
}

impl Default for MlfdConfig {
    fn default() -> Self {
        MlfdConfig { epsilon: 10, hidden: 32, lookback: 20, retrain_every: 1, train: TrainConfig::default() }
    }
}

impl MlfdConfig {
    /// Small network for desk-scale experiments and tests.
    pub fn desk() -> Self {
        MlfdConfig {
            hidden: 8,
            lookback: 10,
            train: TrainConfig { eta: 100, ..TrainConfig::default() },
            ..MlfdConfig::default()
        }
    }

    pub fn eta(&self) -> usize {
        self.train.eta
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidConfig(m));
        if self.epsilon == 0 {
            return bad("epsilon must be at least 1".into());
        }
        if self.retrain_every == 0 {
            return bad("retrain_every must be at least 1".into());
        }
        if self.hidden == 0 || self.lookback == 0 {
            return bad("hidden size and lookback must be at least 1".into());
        }
        self.train.validate(self.lookback).map_err(|e| DetectorError::InvalidConfig(e.to_string()))
    }
}

/// The most recent absolute prediction errors, in ms.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorWindow {
    capacity: usize,
    errors: VecDeque<f64>,
}

impl ErrorWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "error window needs room for one error");
        ErrorWindow { capacity, errors: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, error_ms: f64) {
        debug_assert!(error_ms >= 0.0);
        if self.errors.len() == self.capacity {
            self.errors.pop_front();
        }
        self.errors.push_back(error_ms);
    }

    /// Arithmetic mean of the held errors, 0 when empty.
    pub fn mean(&self) -> f64 {
        if self.errors.is_empty() {
            0.0
        } else {
            self.errors.iter().sum::<f64>() / self.errors.len() as f64
        }
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.errors.iter()
    }
}

#[derive(Debug, Clone)]
pub struct MlfdDetector {
    config: MlfdConfig,
    delta_ms: f64,
    model: LstmModel,
    /// Normalized inter-arrival deltas, at most `eta`.
    deltas: VecDeque<f64>,
    last_arrival: Option<f64>,
    errors: ErrorWindow,
    pending_ea: Option<f64>,
    eligible_heartbeats: usize,
    last_training_samples: usize,
    guard: MonotonicGuard,
    last: Option<FreshnessPoint>,
    diagnostics: Diagnostics,
}

impl MlfdDetector {
    pub fn new(config: MlfdConfig, delta_ms: f64) -> Result<Self, DetectorError> {
        config.validate()?;
        if !(delta_ms.is_finite() && delta_ms > 0.0) {
            return Err(DetectorError::InvalidConfig(format!("heartbeat interval must be positive, got {delta_ms}")));
        }
        let model = LstmModel::new(config.hidden, config.lookback, config.train)
            .map_err(|e| DetectorError::InvalidConfig(e.to_string()))?;
        Ok(MlfdDetector {
            config,
            delta_ms,
            model,
            deltas: VecDeque::with_capacity(config.train.eta + 1),
            last_arrival: None,
            errors: ErrorWindow::new(config.epsilon),
            pending_ea: None,
            eligible_heartbeats: 0,
            last_training_samples: 0,
            guard: MonotonicGuard::default(),
            last: None,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn config(&self) -> &MlfdConfig {
        &self.config
    }

    pub fn model(&self) -> &LstmModel {
        &self.model
    }

    pub fn error_window(&self) -> &ErrorWindow {
        &self.errors
    }

    /// Number of samples used in the most recent training round.
    pub fn last_training_samples(&self) -> usize {
        self.last_training_samples
    }

    pub fn delta_count(&self) -> usize {
        self.deltas.len()
    }

    fn train_round(&mut self) -> Result<(), LstmError> {
        let series = self.deltas.make_contiguous();
        let samples = sliding_samples(series, self.config.lookback);
        self.last_training_samples = samples.len();
        self.model.train_epochs(&samples).map(|_| ())
    }

    fn predict_next_delta(&mut self) -> Result<f64, LstmError> {
        let l = self.config.lookback;
        let series = self.deltas.make_contiguous();
        let window = &series[series.len() - l..];
        self.model.predict(window)
    }
}

impl FailureDetector for MlfdDetector {
    fn on_heartbeat(&mut self, seq: u64, arrival_ms: f64) -> Result<Option<FreshnessPoint>, DetectorError> {
        self.guard.admit(seq, arrival_ms)?;

        if let Some(ea) = self.pending_ea.take() {
            self.errors.push((arrival_ms - ea).abs());
        }
        if let Some(prev) = self.last_arrival {
            if self.deltas.len() == self.config.train.eta {
                self.deltas.pop_front();
            }
            self.deltas.push_back(normalize_delta(arrival_ms - prev, self.delta_ms));
        }
        self.last_arrival = Some(arrival_ms);

        if self.deltas.len() < self.config.lookback + 1 {
            return Ok(None);
        }

        let due = self.eligible_heartbeats % self.config.retrain_every == 0;
        self.eligible_heartbeats += 1;
        let trained = if due { self.train_round() } else { Ok(()) };

        let ea = match trained.and_then(|_| self.predict_next_delta()) {
            Ok(x) => arrival_ms + denormalize_delta(x, self.delta_ms),
            Err(e) => {
                self.diagnostics.training_failures += 1;
                self.diagnostics.last_error = Some(e.to_string());
                arrival_ms + self.delta_ms
            }
        };
        let fp = FreshnessPoint::new(seq + 1, ea, self.errors.mean());
        self.pending_ea = Some(ea);
        self.last = Some(fp);
        Ok(Some(fp))
    }

    fn status(&self) -> DetectorStatus {
        DetectorStatus { ready: self.last.is_some(), last_prediction: self.last }
    }

    fn warmup_index(&self) -> usize {
        // lookback + 1 deltas need lookback + 2 arrivals.
        self.config.lookback + 1
    }

    fn name(&self) -> &'static str {
        "mlfd"
    }

    fn diagnostics(&self) -> Diagnostics {
        self.diagnostics.clone()
    }
}
