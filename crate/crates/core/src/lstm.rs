//! A small single-layer LSTM regressor with a linear head, trained by
//! backpropagation through time on an asymmetric squared loss.
//!
//! The network sees one scalar per timestep and emits one scalar after the
//! last step. Gates are laid out in `i, f, g, o` order (input, forget,
//! candidate, output):
//!
//! ```text
//! z_t = W_x * x_t + W_h * h_{t-1} + b
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! y   = w_out . h_L + b_out
//! ```

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const GATES: usize = 4;
const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LstmError {
    #[error("input window has length {got}, model lookback is {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite input value at timestep {0}")]
    NonFiniteInput(usize),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}; step aborted")]
    NonFinite { what: &'static str, epoch: usize, batch: usize },
    #[error("network produced a non-finite prediction")]
    NonFinitePrediction,
    #[error("no training samples")]
    NoSamples,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

/// All weights of the network in one flat buffer.
///
/// The same type doubles as a gradient accumulator, which keeps finite
/// differences and the optimizer step simple element-wise loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    hidden: usize,
    lookback: usize,
    data: Vec<f64>,
}

impl LstmParams {
    fn len_for(hidden: usize) -> usize {
        GATES * hidden + GATES * hidden * hidden + GATES * hidden + hidden + 1
    }

    pub fn zeros(hidden: usize, lookback: usize) -> Self {
        LstmParams { hidden, lookback, data: vec![0.0; Self::len_for(hidden)] }
    }

    /// Uniform weights in `[-scale, scale]`, forget-gate bias set to 1.
    pub fn random<R: Rng + ?Sized>(hidden: usize, lookback: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(hidden, lookback);
        for v in p.data.iter_mut() {
            *v = rng.random_range(-scale..=scale);
        }
        let h = hidden;
        p.bias_mut()[h..2 * h].fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn ranges(&self) -> [Range<usize>; 5] {
        let g = GATES * self.hidden;
        let wx = 0..g;
        let wh = g..g + g * self.hidden;
        let b = wh.end..wh.end + g;
        let wo = b.end..b.end + self.hidden;
        let bo = wo.end..wo.end + 1;
        [wx, wh, b, wo, bo]
    }

    pub fn input_weights(&self) -> &[f64] {
        &self.data[self.ranges()[0].clone()]
    }

    /// `4H x H`, row-major.
    pub fn recurrent_weights(&self) -> &[f64] {
        &self.data[self.ranges()[1].clone()]
    }

    pub fn bias(&self) -> &[f64] {
        &self.data[self.ranges()[2].clone()]
    }

    pub fn head_weights(&self) -> &[f64] {
        &self.data[self.ranges()[3].clone()]
    }

    pub fn head_bias(&self) -> f64 {
        self.data[self.ranges()[4].start]
    }

    pub fn input_weights_mut(&mut self) -> &mut [f64] {
        let r = self.ranges()[0].clone();
        &mut self.data[r]
    }

    pub fn recurrent_weights_mut(&mut self) -> &mut [f64] {
        let r = self.ranges()[1].clone();
        &mut self.data[r]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let r = self.ranges()[2].clone();
        &mut self.data[r]
    }

    pub fn head_weights_mut(&mut self) -> &mut [f64] {
        let r = self.ranges()[3].clone();
        &mut self.data[r]
    }

    pub fn set_head_bias(&mut self, v: f64) {
        let i = self.ranges()[4].start;
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations retained by the forward pass for BPTT.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: usize,
    steps: usize,
    inputs: Vec<f64>,
    /// Activated gates per step, `4H` each.
    gates: Vec<f64>,
    /// `c_0..c_L`, with `c_0 = 0`.
    cells: Vec<f64>,
    /// `h_0..h_L`, with `h_0 = 0`.
    hiddens: Vec<f64>,
    tanh_cells: Vec<f64>,
    pub prediction: f64,
}

impl ForwardCache {
    fn new(hidden: usize, steps: usize) -> Self {
        ForwardCache {
            hidden,
            steps,
            inputs: vec![0.0; steps],
            gates: vec![0.0; steps * GATES * hidden],
            cells: vec![0.0; (steps + 1) * hidden],
            hiddens: vec![0.0; (steps + 1) * hidden],
            tanh_cells: vec![0.0; steps * hidden],
            prediction: 0.0,
        }
    }

    pub fn final_hidden(&self) -> &[f64] {
        &self.hiddens[self.steps * self.hidden..]
    }

    pub fn final_cell(&self) -> &[f64] {
        &self.cells[self.steps * self.hidden..]
    }
}

fn check_window(params: &LstmParams, window: &[f64]) -> Result<(), LstmError> {
    if window.len() != params.lookback {
        return Err(LstmError::Shape { expected: params.lookback, got: window.len() });
    }
    if let Some(t) = window.iter().position(|v| !v.is_finite()) {
        return Err(LstmError::NonFiniteInput(t));
    }
    Ok(())
}

fn forward_into(params: &LstmParams, window: &[f64], cache: &mut ForwardCache) -> f64 {
    let h = params.hidden;
    let g4 = GATES * h;
    let wx = params.input_weights();
    let wh = params.recurrent_weights();
    let b = params.bias();

    cache.cells[..h].fill(0.0);
    cache.hiddens[..h].fill(0.0);
    for (t, &x) in window.iter().enumerate() {
        cache.inputs[t] = x;
        let (prev_h, next_h) = cache.hiddens.split_at_mut((t + 1) * h);
        let h_prev = &prev_h[t * h..];
        let h_next = &mut next_h[..h];
        let (prev_c, next_c) = cache.cells.split_at_mut((t + 1) * h);
        let c_prev = &prev_c[t * h..];
        let c_next = &mut next_c[..h];
        let gates = &mut cache.gates[t * g4..(t + 1) * g4];
        let tanh_c = &mut cache.tanh_cells[t * h..(t + 1) * h];

        for r in 0..g4 {
            let row = &wh[r * h..(r + 1) * h];
            let z = wx[r] * x + b[r] + row.iter().zip(h_prev).map(|(w, v)| w * v).sum::<f64>();
            gates[r] = if r / h == 2 { z.tanh() } else { sigmoid(z) };
        }
        for j in 0..h {
            let (ig, fg, gg, og) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let c = fg * c_prev[j] + ig * gg;
            let tc = c.tanh();
            c_next[j] = c;
            tanh_c[j] = tc;
            h_next[j] = og * tc;
        }
    }
    let h_last = &cache.hiddens[window.len() * h..];
    let y = params.head_bias() + params.head_weights().iter().zip(h_last).map(|(w, v)| w * v).sum::<f64>();
    cache.prediction = y;
    y
}

/// Scratch buffers for one backward pass.
#[derive(Debug, Clone)]
struct BackwardScratch {
    dh: Vec<f64>,
    dc: Vec<f64>,
    dz: Vec<f64>,
}

impl BackwardScratch {
    fn new(hidden: usize) -> Self {
        BackwardScratch { dh: vec![0.0; hidden], dc: vec![0.0; hidden], dz: vec![0.0; GATES * hidden] }
    }
}

/// Accumulates `d_pred * d(prediction)/d(params)` into `grad`.
fn backward_into(
    params: &LstmParams,
    cache: &ForwardCache,
    d_pred: f64,
    grad: &mut LstmParams,
    scratch: &mut BackwardScratch,
) {
    let h = params.hidden;
    let g4 = GATES * h;
    let steps = cache.steps;
    let [r_wx, r_wh, r_b, r_wo, r_bo] = grad.ranges();
    let wh = params.recurrent_weights();
    let wo = params.head_weights();

    let h_last = cache.final_hidden();
    {
        let gdata = &mut grad.data;
        for j in 0..h {
            gdata[r_wo.start + j] += d_pred * h_last[j];
        }
        gdata[r_bo.start] += d_pred;
    }
    for j in 0..h {
        scratch.dh[j] = d_pred * wo[j];
        scratch.dc[j] = 0.0;
    }

    for t in (0..steps).rev() {
        let gates = &cache.gates[t * g4..(t + 1) * g4];
        let tanh_c = &cache.tanh_cells[t * h..(t + 1) * h];
        let c_prev = &cache.cells[t * h..(t + 1) * h];
        let h_prev = &cache.hiddens[t * h..(t + 1) * h];
        let x = cache.inputs[t];

        for j in 0..h {
            let (ig, fg, gg, og) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let dh = scratch.dh[j];
            let tc = tanh_c[j];
            let d_o = dh * tc;
            let dc = scratch.dc[j] + dh * og * (1.0 - tc * tc);
            let d_i = dc * gg;
            let d_g = dc * ig;
            let d_f = dc * c_prev[j];
            scratch.dz[j] = d_i * ig * (1.0 - ig);
            scratch.dz[h + j] = d_f * fg * (1.0 - fg);
            scratch.dz[2 * h + j] = d_g * (1.0 - gg * gg);
            scratch.dz[3 * h + j] = d_o * og * (1.0 - og);
            scratch.dc[j] = dc * fg;
        }

        let gdata = &mut grad.data;
        for r in 0..g4 {
            let dz = scratch.dz[r];
            gdata[r_wx.start + r] += dz * x;
            gdata[r_b.start + r] += dz;
            let row = &mut gdata[r_wh.start + r * h..r_wh.start + (r + 1) * h];
            for (gw, hp) in row.iter_mut().zip(h_prev) {
                *gw += dz * hp;
            }
        }
        // dh_{t-1} = W_h^T dz
        scratch.dh.fill(0.0);
        for r in 0..g4 {
            let dz = scratch.dz[r];
            let row = &wh[r * h..(r + 1) * h];
            for (d, w) in scratch.dh.iter_mut().zip(row) {
                *d += w * dz;
            }
        }
    }
    debug_assert_eq!(r_wh.end, r_b.start);
}

/// Runs the network over one window from zero initial state.
pub fn lstm_forward(params: &LstmParams, window: &[f64]) -> Result<(f64, ForwardCache), LstmError> {
    check_window(params, window)?;
    let mut cache = ForwardCache::new(params.hidden, params.lookback);
    let y = forward_into(params, window, &mut cache);
    Ok((y, cache))
}

/// Squared error, scaled by `multiplier` when the prediction falls short of
/// the target (an under-estimated arrival).
pub fn asymmetric_loss(pred: f64, target: f64, multiplier: f64) -> f64 {
    let e = target - pred;
    let w = if pred < target { multiplier } else { 1.0 };
    w * e * e
}

/// Derivative of [`asymmetric_loss`] with respect to `pred`.
pub fn asymmetric_loss_grad(pred: f64, target: f64, multiplier: f64) -> f64 {
    let w = if pred < target { multiplier } else { 1.0 };
    -2.0 * w * (target - pred)
}

/// One supervised example: a lookback window and the value that followed it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub window: &'a [f64],
    pub target: f64,
}

/// Every consecutive `lookback` window of `series` paired with the next value.
pub fn sliding_samples(series: &[f64], lookback: usize) -> Vec<Sample<'_>> {
    if lookback == 0 || series.len() <= lookback {
        return Vec::new();
    }
    (0..series.len() - lookback)
        .map(|s| Sample { window: &series[s..s + lookback], target: series[s + lookback] })
        .collect()
}

/// Index ranges of consecutive mini-batches; the last one may be short.
pub fn batch_ranges(len: usize, batch_size: usize) -> Vec<Range<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    (0..len).step_by(batch_size).map(|s| s..(s + batch_size).min(len)).collect()
}

/// Mean asymmetric loss over `samples` and its gradient.
pub fn loss_and_gradient(
    params: &LstmParams,
    samples: &[Sample<'_>],
    multiplier: f64,
) -> Result<(f64, LstmParams), LstmError> {
    if samples.is_empty() {
        return Err(LstmError::NoSamples);
    }
    let mut grad = LstmParams::zeros(params.hidden, params.lookback);
    let mut cache = ForwardCache::new(params.hidden, params.lookback);
    let mut scratch = BackwardScratch::new(params.hidden);
    let mut loss = 0.0;
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        check_window(params, s.window)?;
        let y = forward_into(params, s.window, &mut cache);
        loss += asymmetric_loss(y, s.target, multiplier);
        backward_into(params, &cache, scale * asymmetric_loss_grad(y, s.target, multiplier), &mut grad, &mut scratch);
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training window size in samples.
    pub eta: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip_norm: f64,
    /// Weight applied to the squared error of under-estimates.
    pub loss_multiplier: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 500,
            batch_size: 64,
            epochs: 5,
            learning_rate: 0.01,
            grad_clip_norm: 1.0,
            loss_multiplier: 10.0,
            rng_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, lookback: usize) -> Result<(), LstmError> {
        let bad = |m: String| Err(LstmError::InvalidConfig(m));
        if self.eta <= lookback {
            return bad(format!("eta ({}) must exceed the lookback ({lookback})", self.eta));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("gradient clip norm must be positive, got {}", self.grad_clip_norm));
        }
        if !(self.loss_multiplier.is_finite() && self.loss_multiplier >= 1.0) {
            return bad(format!("loss multiplier must be >= 1, got {}", self.loss_multiplier));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Network weights plus the optimizer state that persists across rounds.
#[derive(Debug, Clone)]
pub struct LstmModel {
    params: LstmParams,
    config: TrainConfig,
    rng: ChaCha8Rng,
    cache: ForwardCache,
    scratch: BackwardScratch,
    grad: LstmParams,
    order: Vec<usize>,
}

impl LstmModel {
    pub fn new(hidden: usize, lookback: usize, config: TrainConfig) -> Result<Self, LstmError> {
        if hidden == 0 || lookback == 0 {
            return Err(LstmError::InvalidConfig("hidden size and lookback must be at least 1".into()));
        }
        config.validate(lookback)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let params = LstmParams::random(hidden, lookback, INIT_SCALE, &mut rng);
        Ok(Self::from_parts(params, config, rng))
    }

    /// Wraps existing weights; the shuffling stream starts from `config.rng_seed`.
    pub fn with_params(params: LstmParams, config: TrainConfig) -> Result<Self, LstmError> {
        config.validate(params.lookback)?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self::from_parts(params, config, rng))
    }

    fn from_parts(params: LstmParams, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let (h, l) = (params.hidden, params.lookback);
        LstmModel {
            cache: ForwardCache::new(h, l),
            scratch: BackwardScratch::new(h),
            grad: LstmParams::zeros(h, l),
            params,
            config,
            rng,
            order: Vec::new(),
        }
    }

    pub fn params(&self) -> &LstmParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn lookback(&self) -> usize {
        self.params.lookback
    }

    pub fn predict(&mut self, window: &[f64]) -> Result<f64, LstmError> {
        check_window(&self.params, window)?;
        let y = forward_into(&self.params, window, &mut self.cache);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(LstmError::NonFinitePrediction)
        }
    }

    /// Runs `config.epochs` passes of shuffled mini-batch gradient descent.
    ///
    /// Weights carry over between calls. A step whose loss or gradient is
    /// not finite is skipped and training stops with an error; updates from
    /// earlier steps are kept.
    pub fn train_epochs(&mut self, samples: &[Sample<'_>]) -> Result<TrainReport, LstmError> {
        if samples.is_empty() {
            return Err(LstmError::NoSamples);
        }
        for s in samples {
            check_window(&self.params, s.window)?;
        }
        let cfg = self.config;
        let mut report = TrainReport::default();
        self.order.clear();
        self.order.extend(0..samples.len());

        for epoch in 0..cfg.epochs {
            self.order.shuffle(&mut self.rng);
            let batches = batch_ranges(samples.len(), cfg.batch_size);
            let mut epoch_loss = 0.0;
            for (bi, range) in batches.iter().enumerate() {
                self.grad.data.fill(0.0);
                let scale = 1.0 / range.len() as f64;
                let mut loss = 0.0;
                for &idx in &self.order[range.clone()] {
                    let s = samples[idx];
                    let y = forward_into(&self.params, s.window, &mut self.cache);
                    loss += asymmetric_loss(y, s.target, cfg.loss_multiplier);
                    let d = scale * asymmetric_loss_grad(y, s.target, cfg.loss_multiplier);
                    backward_into(&self.params, &self.cache, d, &mut self.grad, &mut self.scratch);
                }
                loss *= scale;
                if !loss.is_finite() {
                    return Err(LstmError::NonFinite { what: "loss", epoch, batch: bi });
                }
                let norm = self.grad.l2_norm();
                if !norm.is_finite() {
                    return Err(LstmError::NonFinite { what: "gradient", epoch, batch: bi });
                }
                let clip = if norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };
                let step = cfg.learning_rate * clip;
                for (p, g) in self.params.data.iter_mut().zip(&self.grad.data) {
                    *p -= step * g;
                }
                epoch_loss += loss;
                report.steps += 1;
            }
            report.epoch_losses.push(epoch_loss / batches.len() as f64);
        }
        Ok(report)
    }
}

/// Free-function form of [`LstmModel::train_epochs`].
pub fn lstm_train_epochs(model: &mut LstmModel, samples: &[Sample<'_>]) -> Result<TrainReport, LstmError> {
    model.train_epochs(samples)
}
