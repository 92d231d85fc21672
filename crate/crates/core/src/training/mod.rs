//! Two-stage optimization: joint multi-iteration supervision, then
//! calibration of the halting head against loss-derived targets.

mod losses;
mod optim;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    action_loss, action_loss_tape, diversity_reg, diversity_tape, entropy_reg, entropy_tape, kl_divergence,
    stage1_loss, stage2_loss, stage2_tape, target_distribution, LossProfile, KL_FLOOR,
};
pub use optim::{cosine_lr, AdamW};

use crate::error::{contract_err, Error, Result};
use crate::heads::{argmax_earliest, rma, rma_tape};
use crate::model::checkpoint::Checkpoint;
use crate::model::params::{ParamGroup, Trainable};
use crate::model::{normalize_action, ForwardOptions, IterationOutput, LoopVla, PolicyInput};
use crate::numerics::{Array, SeedStream, Tape};
use crate::taskgen::{Episode, OBS_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_ent: f64,
    pub lambda_div: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage2_lr: f64,
    pub stage2_warmup_steps: u64,
    /// Fraction of stage 1 after which the regularizer weights reach zero.
    pub reg_anneal_fraction: f64,
    pub grad_clip: f64,
    pub eval_interval: u64,
    /// Keep stage-1 regularizer gradients inside the sufficiency head.
    pub detach_halting_inputs: bool,
    pub freeze_anchors: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ent: 0.001,
            lambda_div: 0.01,
            tau: 0.5,
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 1000,
            batch_size: 16,
            stage1_steps: 5000,
            stage2_steps: 1000,
            stage2_lr: 1e-3,
            stage2_warmup_steps: 50,
            reg_anneal_fraction: 0.4,
            grad_clip: 1.0,
            eval_interval: 100,
            detach_halting_inputs: false,
            freeze_anchors: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_ent", self.lambda_ent), ("lambda_div", self.lambda_div), ("tau", self.tau)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reg_anneal_fraction) {
            return Err(Error::Config("reg_anneal_fraction must lie in [0, 1]".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier on both regularizer weights at a stage-1 step: linear decay
    /// from 1 to 0 over the first `reg_anneal_fraction` of the stage.
    pub fn reg_scale(&self, step: u64) -> f64 {
        let end = self.reg_anneal_fraction * self.stage1_steps as f64;
        if end <= 0.0 {
            return 0.0;
        }
        (1.0 - step as f64 / end).max(0.0)
    }
}

/// One supervised example: an observation and the normalized expert chunk
/// starting at it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: [f64; OBS_DIM],
    pub instruction: u32,
    /// `chunk_size x dof`, row-major.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub chunk_size: usize,
}

impl TrainingSet {
    /// Every time step of every episode. Chunks running past the episode end
    /// are padded with zero motion and the final grip command.
    pub fn from_episodes(episodes: &[Episode], chunk_size: usize) -> Self {
        let mut samples = Vec::new();
        for ep in episodes {
            let horizon = ep.horizon();
            for t in 0..horizon {
                let mut target = Vec::with_capacity(chunk_size * 3);
                for k in 0..chunk_size {
                    let row = match ep.actions.get(t + k) {
                        Some(a) => normalize_action(*a),
                        None => [0.0, 0.0, ep.actions[horizon - 1].grip],
                    };
                    target.extend_from_slice(&row);
                }
                samples.push(Sample {
                    features: ep.observations[t].features(),
                    instruction: ep.instruction_id,
                    target,
                });
            }
        }
        TrainingSet { samples, chunk_size }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Model input and a `(batch * c) x J` target for the given indices.
    pub fn batch(&self, idx: &[usize]) -> (PolicyInput, Array) {
        let mut feats = Vec::with_capacity(idx.len() * OBS_DIM);
        let mut ids = Vec::with_capacity(idx.len());
        let mut target = Vec::new();
        for &i in idx {
            let s = &self.samples[i];
            feats.extend_from_slice(&s.features);
            ids.push(s.instruction);
            target.extend_from_slice(&s.target);
        }
        let input = PolicyInput {
            features: Array::from_vec(vec![idx.len(), OBS_DIM], feats).expect("fixed width"),
            instructions: ids,
        };
        let rows = idx.len() * self.chunk_size;
        let dof = target.len() / rows.max(1);
        (input, Array::from_vec(vec![rows, dof], target).expect("fixed width"))
    }
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_action_per_iter: Vec<f64>,
    pub l_ent: f64,
    pub l_div: f64,
    pub kl: f64,
    pub mean_p: Vec<f64>,
    pub agreement: f64,
}

/// Mean absolute error of every iteration's chunk for each sample of a
/// batch: `[sample][iteration]`.
pub fn per_sample_losses(chunks: &[Array], target: &Array, chunk_size: usize) -> Vec<Vec<f64>> {
    let cols = target.cols();
    let per = chunk_size * cols;
    let batch = target.len() / per;
    (0..batch)
        .map(|b| {
            let t = &target.data()[b * per..(b + 1) * per];
            chunks
                .iter()
                .map(|c| {
                    let v = &c.data()[b * per..(b + 1) * per];
                    v.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / per as f64
                })
                .collect()
        })
        .collect()
}

/// Batch statistics shared by both stages' log records.
struct BatchStats {
    l_action_per_iter: Vec<f64>,
    l_ent: f64,
    l_div: f64,
    kl: f64,
    mean_p: Vec<f64>,
    agreement: f64,
}

fn batch_stats(outputs: &[IterationOutput], target: &Array, chunk_size: usize, tau: f64) -> Result<BatchStats> {
    let chunks: Vec<Array> = outputs.iter().map(|o| o.chunks.clone()).collect();
    let losses = per_sample_losses(&chunks, target, chunk_size);
    let n = outputs.len();
    let batch = losses.len();
    let mut stats = BatchStats {
        l_action_per_iter: vec![0.0; n],
        l_ent: 0.0,
        l_div: 0.0,
        kl: 0.0,
        mean_p: vec![0.0; n],
        agreement: 0.0,
    };
    for (b, l) in losses.iter().enumerate() {
        let s: Vec<f64> = outputs.iter().map(|o| o.scores[b]).collect();
        let mut trace = rma(&s);
        trace.z_pooled = outputs.iter().map(|o| o.pooled.row(b).to_vec()).collect();
        let q = target_distribution(l, tau)?;
        stats.kl += stage2_loss(&q, &trace)? / batch as f64;
        stats.l_ent += entropy_reg(&trace.p) / batch as f64;
        stats.l_div += diversity_reg(&trace.z_pooled) / batch as f64;
        for i in 0..n {
            stats.l_action_per_iter[i] += l[i] / batch as f64;
            stats.mean_p[i] += trace.p[i] / batch as f64;
        }
        if argmax_earliest(&trace.folded()) == argmin_earliest(l) {
            stats.agreement += 1.0 / batch as f64;
        }
    }
    Ok(stats)
}

pub fn argmin_earliest(v: &[f64]) -> usize {
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    argmax_earliest(&neg)
}

fn sample_indices(stream: &SeedStream, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = stream.index(step).rng("batch");
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn write_record(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(rec)?;
        writeln!(w, "{line}").map_err(|e| Error::io("writing training log", e))?;
    }
    Ok(())
}

/// Result of a training stage.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<LogRecord>,
}

fn record_from(stage: u8, step: u64, lr: f64, loss: f64, stats: BatchStats) -> LogRecord {
    LogRecord {
        stage,
        step,
        lr,
        loss,
        l_action_per_iter: stats.l_action_per_iter,
        l_ent: stats.l_ent,
        l_div: stats.l_div,
        kl: stats.kl,
        mean_p: stats.mean_p,
        agreement: stats.agreement,
    }
}

fn tape_outputs(tape: &Tape, f: &crate::model::ForwardVars) -> Vec<IterationOutput> {
    (0..f.chunks.len())
        .map(|i| IterationOutput {
            n: i + 1,
            chunks: tape.value(f.chunks[i]).clone(),
            scores: tape.value(f.scores[i]).data().to_vec(),
            pooled: tape.value(f.pooled[i]).clone(),
        })
        .collect()
}

/// Stage 1: minimizes `L_action + l1 L_ent + l2 L_div` over all modules
/// (anchors optionally frozen). Resumes from `checkpoint.step` when the
/// checkpoint is a partial stage-1 run and stops at `config.stage1_steps`.
pub fn train_stage1(
    checkpoint: Checkpoint,
    data: &TrainingSet,
    config: &TrainConfig,
    trainable: Option<Trainable>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("stage 1 needs a nonempty dataset".into()));
    }
    if checkpoint.stage > 1 {
        return Err(contract_err!("stage 1 cannot resume a stage-{} checkpoint", checkpoint.stage));
    }
    let Checkpoint {
        mut model, step, state, ..
    } = checkpoint;
    let trainable = trainable.unwrap_or(if config.freeze_anchors {
        Trainable::AllButAnchors
    } else {
        Trainable::All
    });
    let mut opt = match AdamW::import(&model.store, &state, config.weight_decay)? {
        Some(o) if step > 0 => o,
        _ => AdamW::new(&model.store, config.weight_decay),
    };
    let stream = SeedStream::new(config.seed).child("stage1");
    let n_iter = model.config.max_iterations;
    let mut records = Vec::new();
    let mut step = step;
    while step < config.stage1_steps {
        let idx = sample_indices(&stream, step, data.len(), config.batch_size);
        let (input, target) = data.batch(&idx);
        let lr = cosine_lr(step, config.lr, config.warmup_steps, config.stage1_steps);
        let reg = config.reg_scale(step);
        let tape = Tape::new();
        let opts = ForwardOptions {
            trainable,
            iterations: n_iter,
            detach_halting_inputs: config.detach_halting_inputs,
        };
        let f = model.forward(&tape, &input, opts)?;
        let tgt = tape.constant(target.clone());
        let l_act = action_loss_tape(&tape, &f.chunks, tgt)?;
        let (p, _) = rma_tape(&tape, &f.scores)?;
        let l_ent = entropy_tape(&tape, &p)?;
        let l_div = diversity_tape(&tape, &f.pooled)?;
        let loss = tape.add(l_act, tape.scale(l_ent, config.lambda_ent * reg))?;
        let loss = tape.add(loss, tape.scale(l_div, config.lambda_div * reg))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("stage-1 loss is {value} (action {})", tape.value(l_act).item()),
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut model.store, &grads, trainable, lr, config.grad_clip)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged { step, detail: what },
                other => other,
            })?;
        if step % config.eval_interval == 0 || step + 1 == config.stage1_steps {
            let stats = batch_stats(&tape_outputs(&tape, &f), &target, data.chunk_size, config.tau)?;
            let rec = record_from(1, step, lr, value, stats);
            log::debug!("stage1 step {step} loss {value:.5}");
            write_record(&mut log, &rec)?;
            records.push(rec);
        }
        step += 1;
    }
    let state = opt.export(&model.store);
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            step,
            stage: 1,
            state,
        },
        records,
    })
}

/// Stage 2: fits the halting distribution to `softmax(-loss / tau)` with
/// every module except the sufficiency head frozen.
pub fn train_stage2(checkpoint: Checkpoint, data: &TrainingSet, config: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("stage 2 needs a nonempty dataset".into()));
    }
    let (mut model, start, state) = match checkpoint.stage {
        0 => return Err(contract_err!("stage 2 needs a stage-1 checkpoint")),
        1 => (checkpoint.model, 0, Vec::new()),
        _ => (checkpoint.model, checkpoint.step, checkpoint.state),
    };
    let frozen = [ParamGroup::Encoder, ParamGroup::Anchor, ParamGroup::Loop, ParamGroup::ActionHead];
    let before: Vec<u64> = frozen.iter().map(|&g| model.store.group_hash(g)).collect();
    let mut opt = match AdamW::import(&model.store, &state, config.weight_decay)? {
        Some(o) if start > 0 => o,
        _ => AdamW::new(&model.store, config.weight_decay),
    };
    let stream = SeedStream::new(config.seed).child("stage2");
    let n_iter = model.config.max_iterations;
    let mut records = Vec::new();
    let mut step = start;
    while step < config.stage2_steps {
        let idx = sample_indices(&stream, step, data.len(), config.batch_size);
        let (input, target) = data.batch(&idx);
        let lr = cosine_lr(step, config.stage2_lr, config.stage2_warmup_steps, config.stage2_steps);
        let tape = Tape::new();
        let opts = ForwardOptions {
            trainable: Trainable::SufficiencyOnly,
            iterations: n_iter,
            detach_halting_inputs: false,
        };
        let f = model.forward(&tape, &input, opts)?;
        let outputs = tape_outputs(&tape, &f);
        let chunks: Vec<Array> = outputs.iter().map(|o| o.chunks.clone()).collect();
        let losses = per_sample_losses(&chunks, &target, data.chunk_size);
        let mut q_cols = vec![Vec::with_capacity(losses.len()); n_iter];
        for l in &losses {
            for (i, qi) in target_distribution(l, config.tau)?.into_iter().enumerate() {
                q_cols[i].push(qi);
            }
        }
        let q: Vec<Array> = q_cols
            .into_iter()
            .map(|c| Array::from_vec(vec![c.len(), 1], c).expect("one entry per sample"))
            .collect();
        let (p, r) = rma_tape(&tape, &f.scores)?;
        let kl = stage2_tape(&tape, &q, &p, &r)?;
        let value = tape.value(kl).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("stage-2 KL is {value}"),
            });
        }
        let grads = tape.backward(kl)?;
        opt.step(&mut model.store, &grads, Trainable::SufficiencyOnly, lr, config.grad_clip)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged { step, detail: what },
                other => other,
            })?;
        if step % config.eval_interval == 0 || step + 1 == config.stage2_steps {
            let stats = batch_stats(&outputs, &target, data.chunk_size, config.tau)?;
            let rec = record_from(2, step, lr, value, stats);
            log::debug!("stage2 step {step} kl {value:.5}");
            write_record(&mut log, &rec)?;
            records.push(rec);
        }
        step += 1;
    }
    for (g, h) in frozen.iter().zip(&before) {
        if model.store.group_hash(*g) != *h {
            return Err(contract_err!("stage 2 modified frozen group {}", g.name()));
        }
    }
    let state = opt.export(&model.store);
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            step,
            stage: 2,
            state,
        },
        records,
    })
}

/// Fraction of samples whose `argmax p~` equals the iteration with the
/// smallest action loss.
pub fn calibration_agreement(model: &LoopVla, data: &TrainingSet, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("agreement over an empty set".into()));
    }
    let mut hits = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch.max(1)) {
        let (input, target) = data.batch(idx);
        let outputs = model.unroll_values(&input)?;
        let chunks: Vec<Array> = outputs.iter().map(|o| o.chunks.clone()).collect();
        let losses = per_sample_losses(&chunks, &target, data.chunk_size);
        for (b, l) in losses.iter().enumerate() {
            let s: Vec<f64> = outputs.iter().map(|o| o.scores[b]).collect();
            if argmax_earliest(&rma(&s).folded()) == argmin_earliest(l) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
