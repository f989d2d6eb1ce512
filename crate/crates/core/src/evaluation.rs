//! Trace-driven replay and the QoS metrics built on it.
//!
//! A prediction issued on heartbeat `j` is judged against the next heartbeat
//! that actually arrives. It is safe when that heartbeat lands no later than
//! the freshness point. `P_A` is the safe fraction, `T_D` the mean slack
//! `tau - arrival` over safe predictions, and `T_C` the mean wall-clock cost
//! of one detector call.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chen::{ChenConfig, ChenDetector};
use crate::detector::{timed_heartbeat, DetectorError, FailureDetector, FreshnessPoint};
use crate::mlfd::{MlfdConfig, MlfdDetector};
use crate::trace::HeartbeatTrace;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("link {0}: trace is empty")]
    EmptyTrace(u32),
    #[error("link {link_id}: no predictions left after warm-up index {warmup}")]
    NoPredictions { link_id: u32, warmup: usize },
    #[error("link {link_id}: {source}")]
    Detector {
        link_id: u32,
        #[source]
        source: DetectorError,
    },
    #[error("{0}")]
    InvalidInput(String),
    #[error("combination eta={eta} batch={batch_size} epochs={epochs}: {source}")]
    Combination {
        eta: usize,
        batch_size: usize,
        epochs: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error("no safety margin on the grid reaches P_A >= {target}")]
    Unattainable { target: f64 },
}

/// Which detector to build for each link, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorConfig {
    Chen(ChenConfig),
    Mlfd(MlfdConfig),
}

impl DetectorConfig {
    pub fn build(&self, delta_ms: f64) -> Result<Box<dyn FailureDetector + Send>, DetectorError> {
        Ok(match self {
            DetectorConfig::Chen(c) => Box::new(ChenDetector::new(*c, delta_ms)?),
            DetectorConfig::Mlfd(c) => Box::new(MlfdDetector::new(*c, delta_ms)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DetectorConfig::Chen(_) => "chen",
            DetectorConfig::Mlfd(_) => "mlfd",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            DetectorConfig::Chen(_) => None,
            DetectorConfig::Mlfd(c) => Some(c.train.rng_seed),
        }
    }

    /// Index of the first heartbeat this detector predicts on.
    pub fn warmup_index(&self) -> usize {
        match self {
            DetectorConfig::Chen(c) => c.w_min.saturating_sub(1),
            DetectorConfig::Mlfd(c) => c.lookback + 1,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        match self {
            DetectorConfig::Chen(c) => c.validate(),
            DetectorConfig::Mlfd(c) => c.validate(),
        }
    }
}

/// One judged prediction, keyed by the heartbeat it was judged against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub link_id: u32,
    pub seq: u64,
    pub arrival_ms: f64,
    pub ea_ms: f64,
    pub margin_ms: f64,
    pub tau_ms: f64,
    pub safe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub link_id: u32,
    pub heartbeats: usize,
    pub predictions_total: u64,
    pub predictions_safe: u64,
    pub p_a: f64,
    pub t_d_ms: f64,
    pub t_c_ms: f64,
    /// Freshness point pending when a crashed sender went silent.
    pub suspicion_time_ms: Option<f64>,
    pub warmup_skipped: u64,
    pub training_failures: u64,
    pub last_training_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub p_a: f64,
    pub t_d_ms: f64,
    pub t_c_ms: f64,
    pub predictions_total: u64,
    pub predictions_safe: u64,
}

impl Aggregate {
    /// Unweighted means across links.
    pub fn from_links(links: &[LinkReport]) -> Self {
        let n = links.len().max(1) as f64;
        Aggregate {
            p_a: links.iter().map(|l| l.p_a).sum::<f64>() / n,
            t_d_ms: links.iter().map(|l| l.t_d_ms).sum::<f64>() / n,
            t_c_ms: links.iter().map(|l| l.t_c_ms).sum::<f64>() / n,
            predictions_total: links.iter().map(|l| l.predictions_total).sum(),
            predictions_safe: links.iter().map(|l| l.predictions_safe).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosReport {
    pub detector: String,
    pub config: DetectorConfig,
    pub seed: Option<u64>,
    /// Predictions issued before this heartbeat index were not judged.
    pub warmup: usize,
    pub links: Vec<LinkReport>,
    pub aggregate: Aggregate,
    pub trace_digests: Vec<String>,
}

impl QosReport {
    pub fn link(&self, link_id: u32) -> Option<&LinkReport> {
        self.links.iter().find(|l| l.link_id == link_id)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayOptions {
    /// Judge only predictions issued at or after this heartbeat index; the
    /// detector's own warm-up applies when it is later.
    pub warmup_override: Option<usize>,
    pub keep_log: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub report: LinkReport,
    /// Judged predictions, when requested.
    pub log: Vec<PredictionRecord>,
    /// Per-call computation time samples (ms).
    pub tc_samples: Vec<f64>,
}

/// Feeds `trace` to `detector` heartbeat by heartbeat and scores it.
pub fn replay<D: FailureDetector + ?Sized>(
    trace: &HeartbeatTrace,
    detector: &mut D,
    opts: ReplayOptions,
) -> Result<ReplayOutcome, EvalError> {
    let link_id = trace.link_id;
    if trace.records.is_empty() {
        return Err(EvalError::EmptyTrace(link_id));
    }
    let warmup = opts.warmup_override.unwrap_or(0).max(detector.warmup_index());

    let mut pending: Option<FreshnessPoint> = None;
    let mut total = 0u64;
    let mut safe = 0u64;
    let mut slack_sum = 0.0;
    let mut skipped = 0u64;
    let mut log = Vec::new();
    let mut tc_samples = Vec::with_capacity(trace.records.len());

    for (idx, rec) in trace.records.iter().enumerate() {
        if let Some(fp) = pending.take() {
            let ok = fp.is_safe(rec.arrival_ms);
            total += 1;
            if ok {
                safe += 1;
                slack_sum += fp.tau_ms - rec.arrival_ms;
            }
            if opts.keep_log {
                log.push(PredictionRecord {
                    link_id,
                    seq: rec.seq,
                    arrival_ms: rec.arrival_ms,
                    ea_ms: fp.ea_ms,
                    margin_ms: fp.margin_ms,
                    tau_ms: fp.tau_ms,
                    safe: ok,
                });
            }
        }

        let (out, elapsed) = timed_heartbeat(detector, rec.seq, rec.arrival_ms);
        tc_samples.push(elapsed);
        let fp = out.map_err(|source| EvalError::Detector { link_id, source })?;
        match fp {
            Some(fp) if idx >= warmup => pending = Some(fp),
            Some(_) => skipped += 1,
            None => {}
        }
    }

    if total == 0 {
        return Err(EvalError::NoPredictions { link_id, warmup });
    }
    let suspicion_time_ms =
        if trace.crashed { detector.status().last_prediction.map(|fp| fp.tau_ms) } else { None };
    let diag = detector.diagnostics();
    let report = LinkReport {
        link_id,
        heartbeats: trace.records.len(),
        predictions_total: total,
        predictions_safe: safe,
        p_a: safe as f64 / total as f64,
        t_d_ms: if safe > 0 { slack_sum / safe as f64 } else { 0.0 },
        t_c_ms: tc_samples.iter().sum::<f64>() / tc_samples.len() as f64,
        suspicion_time_ms,
        warmup_skipped: skipped,
        training_failures: diag.training_failures,
        last_training_error: diag.last_error,
    };
    Ok(ReplayOutcome { report, log, tc_samples })
}

/// Replays a fresh detector on every trace (in parallel) and aggregates.
pub fn run_detector(
    traces: &[HeartbeatTrace],
    config: &DetectorConfig,
    opts: ReplayOptions,
) -> Result<(QosReport, Vec<PredictionRecord>), EvalError> {
    if traces.is_empty() {
        return Err(EvalError::InvalidInput("no traces to replay".into()));
    }
    config.validate().map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    let mut outcomes: Vec<ReplayOutcome> = traces
        .par_iter()
        .map(|t| {
            let mut det = config.build(t.delta_ms).map_err(|source| EvalError::Detector { link_id: t.link_id, source })?;
            replay(t, det.as_mut(), opts)
        })
        .collect::<Result<_, _>>()?;
    outcomes.sort_by_key(|o| o.report.link_id);

    let mut digests: Vec<(u32, String)> = traces.iter().map(|t| (t.link_id, t.digest())).collect();
    digests.sort_by_key(|d| d.0);

    let links: Vec<LinkReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let log: Vec<PredictionRecord> = outcomes.into_iter().flat_map(|o| o.log).collect();
    let report = QosReport {
        detector: config.name().to_string(),
        config: *config,
        seed: config.seed(),
        warmup: opts.warmup_override.unwrap_or(0).max(config.warmup_index()),
        aggregate: Aggregate::from_links(&links),
        links,
        trace_digests: digests.into_iter().map(|d| d.1).collect(),
    };
    Ok((report, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignPoint {
    pub alpha_ms: f64,
    pub p_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub target_pa: f64,
    /// Smallest grid margin whose mean P_A reaches the target.
    pub alpha_ms: Option<f64>,
    pub curve: Vec<AlignPoint>,
}

/// Sweeps Chen's constant margin over `alpha_grid` and picks the smallest
/// value whose mean P_A across `traces` reaches `target_pa`.
pub fn align_safety_margin(
    traces: &[HeartbeatTrace],
    target_pa: f64,
    alpha_grid: &[f64],
    base: ChenConfig,
    warmup_override: Option<usize>,
) -> Result<Alignment, EvalError> {
    if alpha_grid.is_empty() {
        return Err(EvalError::InvalidInput("alpha grid is empty".into()));
    }
    if alpha_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::InvalidInput("alpha grid must be strictly ascending".into()));
    }
    let opts = ReplayOptions { warmup_override, keep_log: false };
    let curve: Vec<AlignPoint> = alpha_grid
        .par_iter()
        .map(|&alpha_ms| {
            let cfg = DetectorConfig::Chen(ChenConfig { alpha_ms, ..base });
            run_detector(traces, &cfg, opts).map(|(r, _)| AlignPoint { alpha_ms, p_a: r.aggregate.p_a })
        })
        .collect::<Result<_, _>>()?;
    let alpha_ms = curve.iter().find(|p| p.p_a >= target_pa).map(|p| p.alpha_ms);
    Ok(Alignment { target_pa, alpha_ms, curve })
}

/// `start..=stop` in steps of `step`, computed by multiplication so long
/// grids do not accumulate drift.
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, EvalError> {
    if !(step > 0.0 && start.is_finite() && stop.is_finite() && stop >= start) {
        return Err(EvalError::InvalidInput(format!("bad grid {start}:{stop}:{step}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub eta: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub p_a: f64,
    pub t_d_ms: f64,
    pub t_c_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Sorted by P_A descending, then T_C ascending.
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn ranked(mut rows: Vec<GridRow>) -> Self {
        rows.sort_by(|a, b| b.p_a.total_cmp(&a.p_a).then(a.t_c_ms.total_cmp(&b.t_c_ms)));
        GridResult { rows }
    }
}

/// Exhaustive search over training window, batch size and epoch count.
pub fn grid_search(
    traces: &[HeartbeatTrace],
    eta_list: &[usize],
    batch_list: &[usize],
    epoch_list: &[usize],
    base: MlfdConfig,
    warmup_override: Option<usize>,
) -> Result<GridResult, EvalError> {
    if eta_list.is_empty() || batch_list.is_empty() || epoch_list.is_empty() {
        return Err(EvalError::InvalidInput("grid axes must be non-empty".into()));
    }
    let combos: Vec<(usize, usize, usize)> = eta_list
        .iter()
        .flat_map(|&e| batch_list.iter().flat_map(move |&b| epoch_list.iter().map(move |&p| (e, b, p))))
        .collect();
    let opts = ReplayOptions { warmup_override, keep_log: false };
    let rows: Vec<GridRow> = combos
        .par_iter()
        .map(|&(eta, batch_size, epochs)| {
            let mut cfg = base;
            cfg.train.eta = eta;
            cfg.train.batch_size = batch_size;
            cfg.train.epochs = epochs;
            let wrap = |source: EvalError| EvalError::Combination { eta, batch_size, epochs, source: Box::new(source) };
            cfg.validate().map_err(|e| wrap(EvalError::InvalidInput(e.to_string())))?;
            let (report, _) = run_detector(traces, &DetectorConfig::Mlfd(cfg), opts).map_err(wrap)?;
            Ok(GridRow {
                eta,
                batch_size,
                epochs,
                p_a: report.aggregate.p_a,
                t_d_ms: report.aggregate.t_d_ms,
                t_c_ms: report.aggregate.t_c_ms,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(GridResult::ranked(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPa {
    /// Match the ML detector's mean P_A.
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignRequest {
    pub target: TargetPa,
    pub alpha_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub warmup: usize,
    pub alignment: Option<Alignment>,
    pub chen: QosReport,
    pub mlfd: QosReport,
}

/// Scores both detectors on the same traces from a shared warm-up index,
/// optionally picking Chen's margin first so its P_A reaches the target.
pub fn compare(
    traces: &[HeartbeatTrace],
    chen: ChenConfig,
    mlfd: MlfdConfig,
    warmup_override: Option<usize>,
    align: Option<&AlignRequest>,
) -> Result<Comparison, EvalError> {
    let chen_cfg = DetectorConfig::Chen(chen);
    let mlfd_cfg = DetectorConfig::Mlfd(mlfd);
    let warmup = warmup_override.unwrap_or(0).max(chen_cfg.warmup_index()).max(mlfd_cfg.warmup_index());
    let opts = ReplayOptions { warmup_override: Some(warmup), keep_log: false };

    let (mlfd_report, _) = run_detector(traces, &mlfd_cfg, opts)?;
    let (chen, alignment) = match align {
        Some(req) => {
            let target = match req.target {
                TargetPa::Auto => mlfd_report.aggregate.p_a,
                TargetPa::Value(v) => v,
            };
            let a = align_safety_margin(traces, target, &req.alpha_grid, chen, Some(warmup))?;
            let alpha_ms = a.alpha_ms.ok_or(EvalError::Unattainable { target })?;
            (ChenConfig { alpha_ms, ..chen }, Some(a))
        }
        None => (chen, None),
    };
    let (chen_report, _) = run_detector(traces, &DetectorConfig::Chen(chen), opts)?;
    Ok(Comparison { warmup, alignment, chen: chen_report, mlfd: mlfd_report })
}

fn opt_ms(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

pub fn report_csv(report: &QosReport) -> String {
    let mut out = String::from("link_id,predictions_total,predictions_safe,p_a,t_d_ms,t_c_ms,suspicion_time_ms\n");
    for l in &report.links {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.3},{:.3},{}",
            l.link_id,
            l.predictions_total,
            l.predictions_safe,
            l.p_a,
            l.t_d_ms,
            l.t_c_ms,
            opt_ms(l.suspicion_time_ms)
        );
    }
    let a = &report.aggregate;
    let _ = writeln!(
        out,
        "average,{},{},{:.6},{:.3},{:.3},",
        a.predictions_total, a.predictions_safe, a.p_a, a.t_d_ms, a.t_c_ms
    );
    out
}

pub fn prediction_log_csv(log: &[PredictionRecord]) -> String {
    let mut out = String::from("link_id,seq,arrival_ms,ea_ms,margin_ms,tau_ms,safe\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3},{:.3},{:.3},{}",
            r.link_id,
            r.seq,
            r.arrival_ms,
            r.ea_ms,
            r.margin_ms,
            r.tau_ms,
            u8::from(r.safe)
        );
    }
    out
}

pub fn curve_csv(curve: &[AlignPoint]) -> String {
    let mut out = String::from("alpha_ms,p_a\n");
    for p in curve {
        let _ = writeln!(out, "{:.3},{:.6}", p.alpha_ms, p.p_a);
    }
    out
}

pub fn grid_csv(grid: &GridResult) -> String {
    let mut out = String::from("eta,batch_size,epochs,p_a,t_d_ms,t_c_ms\n");
    for r in &grid.rows {
        let _ = writeln!(out, "{},{},{},{:.6},{:.3},{:.3}", r.eta, r.batch_size, r.epochs, r.p_a, r.t_d_ms, r.t_c_ms);
    }
    out
}

/// Side-by-side per-link table in the shape of the detector comparison tables.
pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from(
        "link_id,predictions_total,chen_p_a,mlfd_p_a,chen_t_d_ms,mlfd_t_d_ms,chen_t_c_ms,mlfd_t_c_ms\n",
    );
    for c in &cmp.chen.links {
        let Some(m) = cmp.mlfd.link(c.link_id) else { continue };
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.3},{:.3},{:.3},{:.3}",
            c.link_id, c.predictions_total, c.p_a, m.p_a, c.t_d_ms, m.t_d_ms, c.t_c_ms, m.t_c_ms
        );
    }
    let (c, m) = (&cmp.chen.aggregate, &cmp.mlfd.aggregate);
    let _ = writeln!(
        out,
        "average,{},{:.6},{:.6},{:.3},{:.3},{:.3},{:.3}",
        c.predictions_total, c.p_a, m.p_a, c.t_d_ms, m.t_d_ms, c.t_c_ms, m.t_c_ms
    );
    out
}
