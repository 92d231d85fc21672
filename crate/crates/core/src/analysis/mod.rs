//! Closed-loop evaluation, loop-index statistics, ablations and reports.

mod report;
mod stats;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use report::{histogram_csv, validate_report, EvalReport, REPORT_SCHEMA};
pub use stats::{dip_statistic, mann_whitney_u, median_lower, RankSum};

use crate::error::{contract_err, Error, Result};
use crate::inference::{estimate_flops, select_batch, InferMode, StopRules};
use crate::model::checkpoint::Checkpoint;
use crate::model::{denormalize_action, LoopVla, PolicyInput};
use crate::taskgen::{generate_episode, scripted_expert, step, Action, Difficulty, Episode, WorldState, EVAL_SEED_START};
use crate::training::{calibration_agreement, train_stage1, TrainConfig, TrainingSet};

/// Rollout budget as a multiple of the expert horizon.
pub const HORIZON_FACTOR: usize = 2;

/// One decision for one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub actions: Vec<Action>,
    /// Selected iteration, when the policy loops.
    pub n_star: Option<usize>,
    pub visited: usize,
}

/// Anything that maps a batch of states to action chunks.
pub trait ChunkPolicy {
    fn decide(&mut self, states: &[(&WorldState, u32)]) -> Result<Vec<Decision>>;
}

/// A trained model under one selection mode.
pub struct ModelPolicy<'m> {
    pub model: &'m LoopVla,
    pub mode: InferMode,
}

impl ChunkPolicy for ModelPolicy<'_> {
    fn decide(&mut self, states: &[(&WorldState, u32)]) -> Result<Vec<Decision>> {
        let input = PolicyInput::from_states(states.iter().map(|&(s, i)| (s, i)));
        let (results, _) = select_batch(self.model, &input, self.mode, StopRules::default())?;
        Ok(results
            .into_iter()
            .map(|r| Decision {
                actions: (0..r.action.shape()[0]).map(|k| denormalize_action(r.action.row(k))).collect(),
                n_star: Some(r.n_star),
                visited: r.visited,
            })
            .collect())
    }
}

/// The scripted expert, replanned every step.
pub struct ExpertPolicy;

impl ChunkPolicy for ExpertPolicy {
    fn decide(&mut self, states: &[(&WorldState, u32)]) -> Result<Vec<Decision>> {
        Ok(states
            .iter()
            .map(|&(s, id)| Decision {
                actions: vec![scripted_expert(s, id)],
                n_star: None,
                visited: 0,
            })
            .collect())
    }
}

/// Rollout protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub seeds: Range<u64>,
    /// Actions executed per decision; `0` executes the whole chunk.
    pub execute: usize,
    /// Rollouts advanced in lockstep per policy call.
    pub batch: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            seeds: Difficulty::eval_seeds(),
            execute: 0,
            batch: 100,
        }
    }
}

impl EvalSpec {
    pub fn with_seeds(seeds: Range<u64>) -> Self {
        EvalSpec {
            seeds,
            ..EvalSpec::default()
        }
    }

    /// Seeds must lie in the held-out range.
    pub fn check_seeds(&self) -> Result<()> {
        if self.seeds.start < EVAL_SEED_START {
            return Err(contract_err!(
                "evaluation seeds {:?} overlap the training seeds 0..{EVAL_SEED_START}",
                self.seeds
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("empty evaluation seed range".into()));
        }
        Ok(())
    }
}

/// Per-suite closed-loop outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub difficulty: Difficulty,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Count of decisions per selected iteration, bin `i` holds `n* = i + 1`.
    pub n_star_histogram: Vec<usize>,
    pub mean_visited: f64,
    pub decisions: usize,
}

struct Rollout {
    state: WorldState,
    id: u32,
    budget: usize,
    steps: usize,
    done: bool,
    success: bool,
}

/// Rolls `policy` out on every seed of `spec` for `difficulty`. An episode
/// succeeds if the suite's goal condition holds after any step within
/// [`HORIZON_FACTOR`] times the expert horizon.
pub fn rollout_suite(policy: &mut dyn ChunkPolicy, difficulty: Difficulty, spec: &EvalSpec, bins: usize) -> Result<SuiteResult> {
    spec.check_seeds()?;
    let mut rollouts: Vec<Rollout> = spec
        .seeds
        .clone()
        .map(|seed| {
            let ep = generate_episode(difficulty, seed);
            Rollout {
                state: ep.observations[0].clone(),
                id: ep.instruction_id,
                budget: HORIZON_FACTOR * ep.horizon(),
                steps: 0,
                done: false,
                success: false,
            }
        })
        .collect();
    let mut histogram = vec![0usize; bins];
    let mut visited = 0usize;
    let mut decisions = 0usize;
    let batch = spec.batch.max(1);
    loop {
        let active: Vec<usize> = (0..rollouts.len()).filter(|&i| !rollouts[i].done).collect();
        if active.is_empty() {
            break;
        }
        for group in active.chunks(batch) {
            let states: Vec<(&WorldState, u32)> = group.iter().map(|&i| (&rollouts[i].state, rollouts[i].id)).collect();
            let out = policy.decide(&states)?;
            for (&i, d) in group.iter().zip(out) {
                decisions += 1;
                visited += d.visited;
                if let Some(n) = d.n_star {
                    if n == 0 || n > bins {
                        return Err(contract_err!("selected iteration {n} outside 1..={bins}"));
                    }
                    histogram[n - 1] += 1;
                }
                let take = if spec.execute == 0 { d.actions.len() } else { spec.execute.min(d.actions.len()) };
                let r = &mut rollouts[i];
                for a in &d.actions[..take] {
                    r.state = step(&r.state, *a);
                    r.steps += 1;
                    if difficulty.success(&r.state) {
                        r.success = true;
                    }
                    if r.success || r.steps >= r.budget {
                        r.done = true;
                        break;
                    }
                }
            }
        }
    }
    let episodes = rollouts.len();
    let successes = rollouts.iter().filter(|r| r.success).count();
    Ok(SuiteResult {
        difficulty,
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
        n_star_histogram: histogram,
        mean_visited: visited as f64 / decisions.max(1) as f64,
        decisions,
    })
}

/// Closed-loop success of `model` under `mode`.
pub fn eval_closed_loop(model: &LoopVla, difficulty: Difficulty, mode: InferMode, spec: &EvalSpec) -> Result<SuiteResult> {
    mode.validate(&model.config)?;
    let mut policy = ModelPolicy { model, mode };
    rollout_suite(&mut policy, difficulty, spec, model.config.max_iterations)
}

/// Full report for one checkpoint and mode over several suites. Agreement is
/// measured on the expert states of the same held-out episodes.
pub fn evaluate(model: &LoopVla, suites: &[Difficulty], mode: InferMode, spec: &EvalSpec) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(suites.len());
    let mut held_out = Vec::new();
    for &d in suites {
        results.push(eval_closed_loop(model, d, mode, spec)?);
        held_out.extend(spec.seeds.clone().map(|s| generate_episode(d, s)));
    }
    let data = TrainingSet::from_episodes(&held_out, model.config.chunk_size);
    let agreement = calibration_agreement(model, &data, 256)?;
    let mean_visited = mean_over_decisions(&results);
    Ok(EvalReport {
        mode: mode.to_string(),
        theta: mode.theta(),
        loops: model.config.loop_layers,
        max_iterations: model.config.max_iterations,
        seeds: [spec.seeds.start, spec.seeds.end],
        execute: spec.execute,
        agreement,
        mean_visited,
        flops_per_action: estimate_flops(&model.config, mean_visited).total,
        suites: results,
    })
}

fn mean_over_decisions(results: &[SuiteResult]) -> f64 {
    let decisions: usize = results.iter().map(|r| r.decisions).sum();
    let visited: f64 = results.iter().map(|r| r.mean_visited * r.decisions as f64).sum();
    visited / decisions.max(1) as f64
}

/// Selected iterations of one suite, one value per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopIndexDistribution {
    pub difficulty: Difficulty,
    /// Per-episode `n*`.
    pub n_star: Vec<usize>,
    /// Bin `i` counts episodes with `n* = i + 1`.
    pub histogram: Vec<usize>,
    pub median: usize,
    pub dip: f64,
}

/// Runs optimal selection on the expert states of each held-out episode at
/// chunk boundaries (`t = 0, c, 2c, ...`). An episode's `n*` is the lower
/// median over its decision states.
pub fn loop_index_distribution(model: &LoopVla, suites: &[Difficulty], seeds: Range<u64>) -> Result<Vec<LoopIndexDistribution>> {
    EvalSpec::with_seeds(seeds.clone()).check_seeds()?;
    suites
        .iter()
        .map(|&d| {
            let episodes: Vec<Episode> = seeds.clone().map(|s| generate_episode(d, s)).collect();
            distribution_from_episodes(model, d, &episodes)
        })
        .collect()
}

/// [`loop_index_distribution`] over given held-out episodes.
pub fn distribution_from_episodes(model: &LoopVla, difficulty: Difficulty, episodes: &[Episode]) -> Result<LoopIndexDistribution> {
    let c = model.config.chunk_size;
    let max_n = model.config.max_iterations;
    let mut owners = Vec::new();
    let mut states = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for t in (0..ep.horizon().max(1)).step_by(c) {
            owners.push(e);
            states.push((&ep.observations[t], ep.instruction_id));
        }
    }
    let mut per_episode = vec![Vec::new(); episodes.len()];
    for (chunk_owners, chunk_states) in owners.chunks(256).zip(states.chunks(256)) {
        let input = PolicyInput::from_states(chunk_states.iter().map(|&(s, i)| (s, i)));
        let (res, _) = select_batch(model, &input, InferMode::Optimal, StopRules::default())?;
        for (&e, r) in chunk_owners.iter().zip(res) {
            per_episode[e].push(r.n_star);
        }
    }
    let n_star: Vec<usize> = per_episode.iter().map(|v| median_lower(v)).collect();
    let mut histogram = vec![0usize; max_n];
    for &n in &n_star {
        histogram[n - 1] += 1;
    }
    let values: Vec<f64> = n_star.iter().map(|&n| n as f64).collect();
    Ok(LoopIndexDistribution {
        difficulty,
        median: median_lower(&n_star),
        dip: dip_statistic(&values),
        n_star,
        histogram,
    })
}

/// Success of every fixed depth and of optimal selection on one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub mode: String,
    pub success: Vec<f64>,
    pub average: f64,
}

pub fn depth_sweep(model: &LoopVla, suites: &[Difficulty], spec: &EvalSpec) -> Result<Vec<DepthRow>> {
    let mut modes = vec![InferMode::Optimal];
    modes.extend((1..=model.config.max_iterations).map(|n| InferMode::Fixed { n }));
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let success = suites
            .iter()
            .map(|&d| eval_closed_loop(model, d, mode, spec).map(|r| r.success_rate))
            .collect::<Result<Vec<f64>>>()?;
        let average = success.iter().sum::<f64>() / success.len().max(1) as f64;
        rows.push(DepthRow {
            mode: mode.to_string(),
            success,
            average,
        });
    }
    Ok(rows)
}

/// One trained configuration of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loops: usize,
    pub max_iterations: usize,
    pub params: usize,
    pub depth: Vec<DepthRow>,
}

/// Trains each `(L, N)` from the same seed and budget and evaluates every
/// depth. All configurations must share `L * N`.
pub fn ablation_sweep(
    base: &crate::encoders::LoopConfig,
    configs: &[(usize, usize)],
    data: &TrainingSet,
    train: &TrainConfig,
    suites: &[Difficulty],
    spec: &EvalSpec,
) -> Result<Vec<AblationRow>> {
    if let Some(&(l0, n0)) = configs.first() {
        if let Some(&(l, n)) = configs.iter().find(|&&(l, n)| l * n != l0 * n0) {
            return Err(Error::Config(format!("{l}x{n} breaks the constant product {}", l0 * n0)));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    for &(l, n) in configs {
        let config = crate::encoders::LoopConfig {
            loop_layers: l,
            max_iterations: n,
            ..base.clone()
        };
        let model = LoopVla::new(config, train.seed)?;
        let trained = train_stage1(Checkpoint::fresh(model), data, train, None, None)?;
        let model = trained.checkpoint.model;
        rows.push(AblationRow {
            loops: l,
            max_iterations: n,
            params: model.param_count(),
            depth: depth_sweep(&model, suites, spec)?,
        });
    }
    Ok(rows)
}

/// Success and agreement of one head variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRow {
    pub variant: crate::encoders::HeadVariant,
    pub head_params: usize,
    pub report: EvalReport,
}

/// Evaluates two checkpoints that differ only in the sufficiency head under
/// the same protocol.
pub fn sufficiency_head_ablation(pair: [&LoopVla; 2], suites: &[Difficulty], spec: &EvalSpec) -> Result<Vec<HeadRow>> {
    let mut a = pair[0].config.clone();
    a.head_variant = pair[1].config.head_variant;
    if a != pair[1].config {
        return Err(Error::Config("head ablation checkpoints differ beyond the head variant".into()));
    }
    pair.iter()
        .map(|m| {
            Ok(HeadRow {
                variant: m.config.head_variant,
                head_params: m.store.count_group(crate::model::params::ParamGroup::SufficiencyHead),
                report: evaluate(m, suites, InferMode::Optimal, spec)?,
            })
        })
        .collect()
}
