//! Heartbeat traces: the arrival log a monitor records for one link.
//!
//! Traces come either from the synthetic generator (a jittered periodic sender
//! with correlated delay bursts, random loss and an optional crash) or from
//! the `fdlab-trace v1` text format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// First line of every trace file.
pub const TRACE_MAGIC: &str = "# fdlab-trace v1";

/// Resolution of stored timestamps (ms).
pub const TIMESTAMP_RESOLUTION_MS: f64 = 0.001;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace spec: {0}")]
    InvalidSpec(String),
    #[error("generated trace is empty (every heartbeat was lost)")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One received heartbeat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatRecord {
    pub seq: u64,
    pub arrival_ms: f64,
}

/// Ordered arrival log for one monitored link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatTrace {
    pub link_id: u32,
    pub delta_ms: f64,
    pub records: Vec<HeartbeatRecord>,
    /// The sender crashed after its last recorded heartbeat.
    pub crashed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NonIncreasingSeq,
    NonIncreasingArrival,
    NegativeArrival,
    NonFiniteArrival,
    NonPositiveDelta,
}

/// A broken invariant. `index` is the offending record, or `None` for
/// trace-level problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

impl HeartbeatTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks every invariant; never fails, an empty result means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(self.delta_ms.is_finite() && self.delta_ms > 0.0) {
            out.push(Violation { index: None, kind: ViolationKind::NonPositiveDelta });
        }
        for (idx, rec) in self.records.iter().enumerate() {
            if !rec.arrival_ms.is_finite() {
                out.push(Violation { index: Some(idx), kind: ViolationKind::NonFiniteArrival });
                continue;
            }
            if rec.arrival_ms < 0.0 {
                out.push(Violation { index: Some(idx), kind: ViolationKind::NegativeArrival });
            }
            if idx > 0 {
                let prev = self.records[idx - 1];
                if rec.seq <= prev.seq {
                    out.push(Violation { index: Some(idx), kind: ViolationKind::NonIncreasingSeq });
                }
                if rec.arrival_ms <= prev.arrival_ms {
                    out.push(Violation {
                        index: Some(idx),
                        kind: ViolationKind::NonIncreasingArrival,
                    });
                }
            }
        }
        out
    }

    /// Serializes into the canonical `fdlab-trace v1` text form.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(32 + self.records.len() * 16);
        out.push_str(TRACE_MAGIC);
        out.push('\n');
        let _ = writeln!(
            out,
            "# link_id={} delta_ms={} crashed={}",
            self.link_id,
            self.delta_ms,
            u8::from(self.crashed)
        );
        out.push_str("seq,arrival_ms\n");
        for rec in &self.records {
            let _ = writeln!(out, "{},{:.3}", rec.seq, rec.arrival_ms);
        }
        out
    }

    /// Parses the `fdlab-trace v1` text form, rejecting anything that breaks
    /// the trace invariants.
    pub fn from_text(text: &str) -> Result<Self, TraceError> {
        let err = |line: usize, message: String| TraceError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

        match lines.next() {
            Some((_, l)) if l.trim_end() == TRACE_MAGIC => {}
            Some((n, l)) => return Err(err(n, format!("expected `{TRACE_MAGIC}`, found `{l}`"))),
            None => return Err(err(1, "empty file".into())),
        }

        let (hdr_line, hdr) = lines.next().ok_or_else(|| err(2, "missing metadata header".into()))?;
        let hdr = hdr
            .strip_prefix('#')
            .ok_or_else(|| err(hdr_line, "metadata header must start with `#`".into()))?;
        let mut link_id = None;
        let mut delta_ms = None;
        let mut crashed = None;
        for field in hdr.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| err(hdr_line, format!("malformed header field `{field}`")))?;
            let bad = |what: &str| err(hdr_line, format!("invalid {what} `{value}`"));
            match key {
                "link_id" => link_id = Some(value.parse::<u32>().map_err(|_| bad("link_id"))?),
                "delta_ms" => {
                    let d = value.parse::<f64>().map_err(|_| bad("delta_ms"))?;
                    if !(d.is_finite() && d > 0.0) {
                        return Err(bad("delta_ms"));
                    }
                    delta_ms = Some(d);
                }
                "crashed" => {
                    crashed = Some(match value {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad("crashed flag")),
                    })
                }
                other => return Err(err(hdr_line, format!("unknown header field `{other}`"))),
            }
        }
        let missing = |name: &str| err(hdr_line, format!("header lacks `{name}`"));
        let link_id = link_id.ok_or_else(|| missing("link_id"))?;
        let delta_ms = delta_ms.ok_or_else(|| missing("delta_ms"))?;
        let crashed = crashed.ok_or_else(|| missing("crashed"))?;

        match lines.next() {
            Some((_, l)) if l.trim_end() == "seq,arrival_ms" => {}
            Some((n, l)) => return Err(err(n, format!("expected column header, found `{l}`"))),
            None => return Err(err(3, "missing column header".into())),
        }

        let mut records: Vec<HeartbeatRecord> = Vec::new();
        for (n, raw) in lines {
            let row = raw.trim_end();
            if row.is_empty() {
                continue;
            }
            let (seq, arrival) =
                row.split_once(',').ok_or_else(|| err(n, format!("expected `seq,arrival_ms`, found `{row}`")))?;
            let seq: u64 = seq.trim().parse().map_err(|_| err(n, format!("invalid seq `{seq}`")))?;
            let arrival_ms: f64 =
                arrival.trim().parse().map_err(|_| err(n, format!("invalid arrival `{arrival}`")))?;
            if !arrival_ms.is_finite() || arrival_ms < 0.0 {
                return Err(err(n, format!("arrival must be a non-negative number, found `{arrival}`")));
            }
            if let Some(prev) = records.last() {
                if seq == prev.seq {
                    return Err(err(n, format!("duplicate seq {seq}")));
                }
                if seq < prev.seq {
                    return Err(err(n, format!("seq {seq} does not follow seq {}", prev.seq)));
                }
                if arrival_ms <= prev.arrival_ms {
                    return Err(err(
                        n,
                        format!("arrival {arrival_ms} is not after previous arrival {}", prev.arrival_ms),
                    ));
                }
            }
            records.push(HeartbeatRecord { seq, arrival_ms });
        }

        Ok(HeartbeatTrace { link_id, delta_ms, records, crashed })
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub fn save_trace(trace: &HeartbeatTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    fs::write(path, trace.to_text())
        .map_err(|source| TraceError::Io { path: path.display().to_string(), source })
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<HeartbeatTrace, TraceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| TraceError::Io { path: path.display().to_string(), source })?;
    HeartbeatTrace::from_text(&text)
}

/// Scenario knobs for the synthetic sender/link model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub links: u32,
    pub heartbeats_per_link: u64,
    pub delta_ms: f64,
    /// Standard deviation of the per-heartbeat Gaussian delay.
    pub jitter_std_ms: f64,
    pub base_delay_ms: f64,
    /// Probability, per heartbeat outside a burst, of a burst starting.
    pub burst_rate: f64,
    /// Mean of the exponentially distributed extra delay held during a burst.
    pub burst_mean_extra_ms: f64,
    /// Expected burst length in heartbeats (geometric).
    pub burst_mean_len: f64,
    pub loss_prob: f64,
    /// The sender stops after emitting this sequence number.
    pub crash_at_seq: Option<u64>,
    pub rng_seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            links: 9,
            heartbeats_per_link: 5000,
            delta_ms: 100.0,
            jitter_std_ms: 10.0,
            base_delay_ms: 5.0,
            burst_rate: 0.005,
            burst_mean_extra_ms: 200.0,
            burst_mean_len: 30.0,
            loss_prob: 0.001,
            crash_at_seq: None,
            rng_seed: 42,
        }
    }
}

impl TraceSpec {
    /// A noise-free periodic sender: arrivals land exactly on `seq * delta_ms`.
    pub fn periodic(links: u32, heartbeats: u64, delta_ms: f64) -> Self {
        TraceSpec {
            links,
            heartbeats_per_link: heartbeats,
            delta_ms,
            jitter_std_ms: 0.0,
            base_delay_ms: 0.0,
            burst_rate: 0.0,
            burst_mean_extra_ms: 0.0,
            burst_mean_len: 1.0,
            loss_prob: 0.0,
            crash_at_seq: None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidSpec(m.to_string()));
        if self.links == 0 {
            return bad("links must be at least 1");
        }
        if self.heartbeats_per_link == 0 {
            return bad("heartbeats_per_link must be at least 1");
        }
        if !(self.delta_ms.is_finite() && self.delta_ms > 0.0) {
            return bad("delta_ms must be positive");
        }
        for (name, v) in [
            ("jitter_std_ms", self.jitter_std_ms),
            ("base_delay_ms", self.base_delay_ms),
            ("burst_mean_extra_ms", self.burst_mean_extra_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TraceError::InvalidSpec(format!("{name} must be a non-negative duration")));
            }
        }
        for (name, p) in [("burst_rate", self.burst_rate), ("loss_prob", self.loss_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TraceError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.loss_prob >= 1.0 {
            return bad("loss_prob = 1 drops every heartbeat");
        }
        if !(self.burst_mean_len.is_finite() && self.burst_mean_len >= 1.0) {
            return bad("burst_mean_len must be at least 1 heartbeat");
        }
        Ok(())
    }
}

fn round_to_resolution(ms: f64) -> f64 {
    (ms * 1000.0).round() / 1000.0
}

/// Generates the trace seen by the monitor for `link_id`.
///
/// Every link draws from its own ChaCha stream of the spec seed, so traces
/// do not depend on how many other links are generated.
pub fn generate_synthetic_trace(spec: &TraceSpec, link_id: u32) -> Result<HeartbeatTrace, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(u64::from(link_id));

    let jitter = Normal::new(0.0, spec.jitter_std_ms)
        .map_err(|e| TraceError::InvalidSpec(format!("jitter: {e}")))?;
    let burst_extra = if spec.burst_mean_extra_ms > 0.0 {
        Some(
            Exp::new(1.0 / spec.burst_mean_extra_ms)
                .map_err(|e| TraceError::InvalidSpec(format!("burst extra: {e}")))?,
        )
    } else {
        None
    };
    let stay_prob = 1.0 - 1.0 / spec.burst_mean_len;

    let last_seq = match spec.crash_at_seq {
        Some(c) => c.min(spec.heartbeats_per_link - 1),
        None => spec.heartbeats_per_link - 1,
    };

    let mut records = Vec::with_capacity(last_seq as usize + 1);
    let mut in_burst = false;
    let mut extra = 0.0;
    let mut prev_arrival: Option<f64> = None;

    for seq in 0..=last_seq {
        if in_burst {
            if rng.random::<f64>() >= stay_prob {
                in_burst = false;
            }
        } else if rng.random::<f64>() < spec.burst_rate {
            in_burst = true;
            extra = burst_extra.map_or(0.0, |d| d.sample(&mut rng));
        }
        let noise = jitter.sample(&mut rng);
        let lost = rng.random::<f64>() < spec.loss_prob;

        let burst = if in_burst { extra } else { 0.0 };
        let delay = (spec.base_delay_ms + noise + burst).max(0.0);
        let mut arrival = round_to_resolution(seq as f64 * spec.delta_ms + delay);
        if lost {
            continue;
        }
        if let Some(prev) = prev_arrival {
            if arrival <= prev {
                arrival = round_to_resolution(prev + TIMESTAMP_RESOLUTION_MS);
            }
        }
        prev_arrival = Some(arrival);
        records.push(HeartbeatRecord { seq, arrival_ms: arrival });
    }

    if records.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(HeartbeatTrace {
        link_id,
        delta_ms: spec.delta_ms,
        records,
        crashed: spec.crash_at_seq.is_some(),
    })
}

/// One trace per link, link ids `1..=spec.links` (the monitor is node 0).
pub fn generate_trace_set(spec: &TraceSpec) -> Result<Vec<HeartbeatTrace>, TraceError> {
    (1..=spec.links).map(|link| generate_synthetic_trace(spec, link)).collect()
}
