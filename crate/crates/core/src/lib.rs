//! Heartbeat failure-detection workbench.
//!
//! Two detectors share the [`detector::FailureDetector`] contract:
//!
//! - [`chen::ChenDetector`]: sliding-window mean of drift-corrected arrivals
//!   plus a constant safety margin.
//! - [`mlfd::MlfdDetector`]: an LSTM retrained online on the most recent
//!   inter-arrival times, with a safety margin that tracks its recent errors.
//!
//! [`evaluation`] replays [`trace`]s through either detector and reports
//! availability (`P_A`), detection time (`T_D`) and computation time (`T_C`).

pub mod chen;
pub mod cli;
pub mod detector;
pub mod evaluation;
pub mod lstm;
pub mod mlfd;
pub mod trace;

pub use chen::{ChenConfig, ChenDetector};
pub use detector::{assess, Assessment, DetectorError, DetectorStatus, FailureDetector, FreshnessPoint};
pub use evaluation::{DetectorConfig, QosReport, ReplayOptions};
pub use lstm::{LstmModel, LstmParams, TrainConfig};
pub use mlfd::{ErrorWindow, MlfdConfig, MlfdDetector};
pub use trace::{HeartbeatRecord, HeartbeatTrace, TraceSpec};
