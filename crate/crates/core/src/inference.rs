//! Action selection over the unrolled trajectory, analytic FLOPs and a
//! wall-clock throughput harness.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::encoders::LoopConfig;
use crate::error::{Error, Result};
use crate::heads::{rma, HaltingTrace};
use crate::model::{IterationOutput, LoopVla, PolicyInput, Unroller};
use crate::numerics::Array;

/// Thresholds for one, two and three standard deviations of a normal.
pub const THETA_W1: f64 = 0.68;
pub const THETA_W2: f64 = 0.95;
pub const THETA_W3: f64 = 0.997;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InferMode {
    Optimal,
    Adaptive { theta: f64 },
    Fixed { n: usize },
}

impl InferMode {
    pub const VALID: &'static str = "optimal, adaptive[:theta], fixed:<n>";

    pub fn validate(&self, config: &LoopConfig) -> Result<()> {
        match *self {
            InferMode::Optimal => Ok(()),
            InferMode::Adaptive { theta } if theta > 0.0 && theta <= 1.0 => Ok(()),
            InferMode::Adaptive { theta } => Err(Error::Config(format!("threshold {theta} outside (0, 1]"))),
            InferMode::Fixed { n } if (1..=config.max_iterations).contains(&n) => Ok(()),
            InferMode::Fixed { n } => Err(Error::Config(format!(
                "fixed depth {n} outside 1..={}",
                config.max_iterations
            ))),
        }
    }

    pub fn theta(&self) -> Option<f64> {
        match *self {
            InferMode::Adaptive { theta } => Some(theta),
            _ => None,
        }
    }
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferMode::Optimal => write!(f, "optimal"),
            InferMode::Adaptive { theta } => write!(f, "adaptive:{theta}"),
            InferMode::Fixed { n } => write!(f, "fixed:{n}"),
        }
    }
}

impl FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("invalid mode '{s}' (valid modes: {})", InferMode::VALID));
        match (head, arg) {
            ("optimal", None) => Ok(InferMode::Optimal),
            ("adaptive", None) => Ok(InferMode::Adaptive { theta: THETA_W1 }),
            ("adaptive", Some(a)) => a.parse().map(|theta| InferMode::Adaptive { theta }).map_err(|_| bad()),
            ("fixed", Some(a)) => a.parse().map(|n| InferMode::Fixed { n }).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Why an adaptive run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Accumulated halting mass reached the threshold.
    Cumulative,
    /// The best visited step already holds at least the remaining mass.
    Mass,
    /// All iterations were computed.
    Exhausted,
    /// Fixed depth reached.
    Depth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// 1-based selected iteration.
    pub n_star: usize,
    /// `c x J` chunk of iteration `n_star`.
    pub action: Array,
    pub visited: usize,
    /// Halting trace over the visited prefix.
    pub trace: HaltingTrace,
    pub stop: StopReason,
}

/// Which adaptive stopping rules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopRules {
    pub cumulative: bool,
    pub mass: bool,
}

impl Default for StopRules {
    fn default() -> Self {
        StopRules {
            cumulative: true,
            mass: true,
        }
    }
}

/// `n* = argmax p` over a complete trace, earliest on ties.
pub fn optimal_select(trace: &HaltingTrace, actions: &[Array]) -> Result<SelectionResult> {
    if actions.len() != trace.iterations() || actions.is_empty() {
        return Err(Error::Dimension(format!(
            "{} chunks for a {}-step trace",
            actions.len(),
            trace.iterations()
        )));
    }
    let n_star = trace.argmax();
    Ok(SelectionResult {
        n_star,
        action: actions[n_star - 1].clone(),
        visited: actions.len(),
        trace: trace.clone(),
        stop: StopReason::Exhausted,
    })
}

/// Stopping decision after visiting the scores in `s` (raw halting mass).
pub fn should_stop(s: &[f64], theta: f64, rules: StopRules) -> Option<StopReason> {
    let t = rma(s);
    let cumulative: f64 = t.p.iter().sum();
    if rules.cumulative && cumulative >= theta {
        return Some(StopReason::Cumulative);
    }
    let best = t.p.iter().copied().fold(0.0, f64::max);
    if rules.mass && best >= t.residual() {
        return Some(StopReason::Mass);
    }
    None
}

struct SampleTrack {
    scores: Vec<f64>,
    chunks: Vec<Array>,
    pooled: Vec<Vec<f64>>,
    stop: Option<StopReason>,
}

fn finish(track: SampleTrack, pick: Option<usize>, stop: StopReason) -> SelectionResult {
    let mut trace = rma(&track.scores);
    trace.z_pooled = track.pooled;
    let n_star = pick.unwrap_or_else(|| trace.argmax());
    SelectionResult {
        n_star,
        action: track.chunks[n_star - 1].clone(),
        visited: track.scores.len(),
        trace,
        stop,
    }
}

fn record(tracks: &mut [SampleTrack], out: &IterationOutput, active: &[bool], chunk: usize) {
    for (b, t) in tracks.iter_mut().enumerate() {
        if active[b] {
            t.scores.push(out.scores[b]);
            t.chunks.push(out.chunk(b, chunk));
            t.pooled.push(out.pooled.row(b).to_vec());
        }
    }
}

/// Runs `mode` on every sample of `input`. Iterations are computed in
/// lockstep until every sample has stopped; a stopped sample's result only
/// uses its own visited prefix. Returns the results and the number of loop
/// iterations computed for the batch.
pub fn select_batch(model: &LoopVla, input: &PolicyInput, mode: InferMode, rules: StopRules) -> Result<(Vec<SelectionResult>, usize)> {
    mode.validate(&model.config)?;
    let batch = input.batch();
    let chunk = model.config.chunk_size;
    let max_n = model.config.max_iterations;
    let depth = match mode {
        InferMode::Fixed { n } => n,
        _ => max_n,
    };
    let mut unroller = Unroller::new(model, input)?;
    let mut tracks: Vec<SampleTrack> = (0..batch)
        .map(|_| SampleTrack {
            scores: Vec::new(),
            chunks: Vec::new(),
            pooled: Vec::new(),
            stop: None,
        })
        .collect();
    let mut active = vec![true; batch];
    while active.iter().any(|&a| a) && unroller.visited() < depth {
        let out = unroller.step()?;
        record(&mut tracks, &out, &active, chunk);
        if let InferMode::Adaptive { theta } = mode {
            for (b, t) in tracks.iter_mut().enumerate() {
                if active[b] {
                    t.stop = should_stop(&t.scores, theta, rules);
                    active[b] = t.stop.is_none();
                }
            }
        }
    }
    let computed = unroller.visited();
    let results = tracks
        .into_iter()
        .map(|t| match mode {
            InferMode::Fixed { n } => finish(t, Some(n), StopReason::Depth),
            _ => {
                let stop = t.stop.unwrap_or(StopReason::Exhausted);
                finish(t, None, stop)
            }
        })
        .collect();
    Ok((results, computed))
}

/// Computes iterations one at a time and stops when either rule fires.
pub fn adaptive_select(model: &LoopVla, input: &PolicyInput, theta: f64) -> Result<SelectionResult> {
    adaptive_select_with(model, input, theta, StopRules::default())
}

/// [`adaptive_select`] with individually switchable stopping rules.
pub fn adaptive_select_with(model: &LoopVla, input: &PolicyInput, theta: f64, rules: StopRules) -> Result<SelectionResult> {
    single(model, input, InferMode::Adaptive { theta }, rules)
}

/// Exactly `n` iterations; returns `A(n)` whatever the halting scores.
pub fn fixed_select(model: &LoopVla, input: &PolicyInput, n: usize) -> Result<SelectionResult> {
    single(model, input, InferMode::Fixed { n }, StopRules::default())
}

fn single(model: &LoopVla, input: &PolicyInput, mode: InferMode, rules: StopRules) -> Result<SelectionResult> {
    if input.batch() != 1 {
        return Err(Error::Dimension(format!("single-sample selection got a batch of {}", input.batch())));
    }
    let (mut r, _) = select_batch(model, input, mode, rules)?;
    Ok(r.remove(0))
}

/// Analytic floating-point operation counts (one multiply-add = 2 FLOPs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub encoder: f64,
    /// `(k + L * visited)` transformer layers.
    pub layers: f64,
    /// Action and sufficiency heads, once per visited iteration.
    pub heads: f64,
    pub total: f64,
}

/// FLOPs of one transformer layer over the full token sequence:
/// `4 T d^2` projections, `2 T^2 d` for scores and weighted values, and
/// `2 T d f` feed-forward, all multiply-adds.
pub fn layer_flops(config: &LoopConfig) -> f64 {
    let t = config.total_tokens() as f64;
    let d = config.model_dim as f64;
    let f = (config.model_dim * config.ffn_mult) as f64;
    2.0 * (4.0 * t * d * d + 2.0 * t * t * d + 2.0 * t * d * f)
}

/// FLOPs of one iteration's readout.
pub fn head_flops(config: &LoopConfig) -> f64 {
    let d = config.model_dim as f64;
    let c = config.chunk_size as f64;
    let j = config.dof as f64;
    let (ns, na) = (config.n_sufficiency_tokens as f64, config.n_action_tokens as f64);
    let action = c * (d * d + d * j);
    let cross = match config.head_variant {
        crate::encoders::HeadVariant::DirectMlp => 0.0,
        crate::encoders::HeadVariant::CrossAttention => {
            config.cross_attn_layers as f64 * (2.0 * ns * d * d + 2.0 * na * d * d + 2.0 * ns * na * d)
        }
    };
    let half = (config.model_dim / 2).max(1) as f64;
    2.0 * (action + cross + d * half + half)
}

/// Per-sample FLOPs when `visited` loop iterations are computed; `visited`
/// may be fractional for averages.
pub fn estimate_flops(config: &LoopConfig, visited: f64) -> FlopEstimate {
    let encoder = 2.0 * (config.obs_dim * config.n_vis_tokens * config.model_dim) as f64;
    let layers = (config.anchor_layers as f64 + config.loop_layers as f64 * visited) * layer_flops(config);
    let heads = visited * head_flops(config);
    FlopEstimate {
        encoder,
        layers,
        heads,
        total: encoder + layers + heads,
    }
}

/// Output of [`benchmark_throughput`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    pub theta: Option<f64>,
    pub batch: usize,
    pub median_hz: f64,
    pub p5_hz: f64,
    pub p95_hz: f64,
    pub mean_visited: f64,
    pub flops_per_action: f64,
    pub trials: usize,
    pub warmup_calls: usize,
    pub warmup_excluded: bool,
    pub threads: usize,
}

pub const MIN_TRIALS: usize = 5;
const WARMUP_CALLS: usize = 3;

/// Measures actions per second for `mode` on `inputs` (each of the same
/// batch size). Warmup calls are excluded; `duration` is split across
/// `trials` timed windows and per-window rates are summarized.
pub fn benchmark_throughput(model: &LoopVla, mode: InferMode, inputs: &[PolicyInput], duration: Duration, trials: usize) -> Result<BenchReport> {
    mode.validate(&model.config)?;
    if inputs.is_empty() {
        return Err(Error::Benchmark("no benchmark inputs".into()));
    }
    if trials < MIN_TRIALS {
        return Err(Error::Benchmark(format!("at least {MIN_TRIALS} trials are required, got {trials}")));
    }
    let batch = inputs[0].batch();
    let warm = Instant::now();
    for i in 0..WARMUP_CALLS {
        select_batch(model, &inputs[i % inputs.len()], mode, StopRules::default())?;
    }
    let per_call = warm.elapsed() / WARMUP_CALLS as u32;
    let window = duration / trials as u32;
    if per_call > window {
        return Err(Error::Benchmark(format!(
            "duration {:?} is too short for {trials} trials of a {:?} call",
            duration, per_call
        )));
    }
    let mut rates = Vec::with_capacity(trials);
    let mut visited_sum = 0.0;
    let mut visited_count = 0usize;
    let mut cursor = 0usize;
    for _ in 0..trials {
        let start = Instant::now();
        let mut actions = 0usize;
        while start.elapsed() < window {
            let (results, _) = select_batch(model, &inputs[cursor % inputs.len()], mode, StopRules::default())?;
            cursor += 1;
            actions += results.len();
            visited_sum += results.iter().map(|r| r.visited as f64).sum::<f64>();
            visited_count += results.len();
        }
        rates.push(actions as f64 / start.elapsed().as_secs_f64());
    }
    let mean_visited = visited_sum / visited_count.max(1) as f64;
    let mut data = Data::new(rates);
    Ok(BenchReport {
        mode: mode.to_string(),
        theta: mode.theta(),
        batch,
        median_hz: data.median(),
        p5_hz: data.percentile(5),
        p95_hz: data.percentile(95),
        mean_visited,
        flops_per_action: estimate_flops(&model.config, mean_visited).total,
        trials,
        warmup_calls: WARMUP_CALLS,
        warmup_excluded: true,
        threads: 1,
    })
}
