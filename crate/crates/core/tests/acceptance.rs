//! Acceptance suite: the ten primary criteria, run in order inside one test
//! so the two trained models are built once. Each criterion prints a single
//! PASS/FAIL line; the test fails if any criterion fails.
//!
//! Runtime is dominated by training (a 3x4 and a 3x8 model at d = 64).

use std::time::{Duration, Instant};

use loopvla::analysis::{depth_sweep, distribution_from_episodes, eval_closed_loop, mann_whitney_u, EvalSpec};
use loopvla::encoders::{build_mask, ActionVisibility, LoopConfig, SequenceLayout};
use loopvla::heads::{rma, rma_tape};
use loopvla::inference::{adaptive_select, adaptive_select_with, benchmark_throughput, optimal_select, InferMode, StopRules};
use loopvla::model::checkpoint::Checkpoint;
use loopvla::model::params::Trainable;
use loopvla::model::{ForwardOptions, LoopVla, PolicyInput};
use loopvla::numerics::{finite_diff_report, Array, Tape};
use loopvla::taskgen::{generate_episode, generate_split, Difficulty, OBS_DIM};
use loopvla::training::{
    action_loss_tape, calibration_agreement, diversity_tape, entropy_tape, per_sample_losses, stage2_tape, target_distribution,
    train_stage1, train_stage2, TrainConfig, TrainingSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn rma_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut recur, mut total, mut over) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..100_000 {
        let s: Vec<f64> = (0..8)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let t = rma(&s);
        for n in 0..8 {
            recur = recur.max((t.r[n + 1] - t.r[n] * (1.0 - t.s[n])).abs());
        }
        let sum: f64 = t.p.iter().sum();
        total = total.max((sum + t.residual() - 1.0).abs());
        if sum > 1.0 {
            over += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = recur < 1e-12 && total < 1e-12 && over == 0 && secs < 5.0;
    outcome(
        pass,
        format!("max recurrence residual {recur:.1e}, max mass residual {total:.1e}, sum p > 1 in {over} cases, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

fn tiny_batch(config: &LoopConfig) -> (PolicyInput, Array) {
    let eps: Vec<_> = Difficulty::ALL.iter().map(|&d| generate_episode(d, 3)).collect();
    let set = TrainingSet::from_episodes(&eps, config.chunk_size);
    let idx: Vec<usize> = (0..3).map(|i| i * set.len() / 3).collect();
    set.batch(&idx)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let config = LoopConfig::tiny();
    let model = LoopVla::new(config.clone(), 7).unwrap();
    let (input, target) = tiny_batch(&config);
    let values: Vec<Array> = model.store.entries().iter().map(|e| e.value.clone()).collect();
    let train = TrainConfig::default();
    let opts = ForwardOptions {
        trainable: Trainable::All,
        iterations: config.max_iterations,
        detach_halting_inputs: false,
    };

    let stage1 = finite_diff_report(
        &values,
        |tape, _| {
            let f = model.forward(tape, &input, opts)?;
            let tgt = tape.constant(target.clone());
            let l_act = action_loss_tape(tape, &f.chunks, tgt)?;
            let (p, _) = rma_tape(tape, &f.scores)?;
            let l_ent = entropy_tape(tape, &p)?;
            let l_div = diversity_tape(tape, &f.pooled)?;
            let loss = tape.add(l_act, tape.scale(l_ent, train.lambda_ent))?;
            tape.add(loss, tape.scale(l_div, train.lambda_div))
        },
        1e-5,
    )
    .unwrap();

    // the stage-2 target is a fixed distribution computed from the unperturbed model
    let outputs = model.unroll_values(&input).unwrap();
    let chunks: Vec<Array> = outputs.iter().map(|o| o.chunks.clone()).collect();
    let losses = per_sample_losses(&chunks, &target, config.chunk_size);
    let q_rows: Vec<Vec<f64>> = losses.iter().map(|l| target_distribution(l, train.tau).unwrap()).collect();
    let q: Vec<Array> = (0..config.max_iterations)
        .map(|i| Array::from_vec(vec![q_rows.len(), 1], q_rows.iter().map(|r| r[i]).collect()).unwrap())
        .collect();
    let stage2 = finite_diff_report(
        &values,
        |tape, _| {
            let f = model.forward(tape, &input, opts)?;
            let (p, r) = rma_tape(tape, &f.scores)?;
            stage2_tape(tape, &q, &p, &r)
        },
        1e-5,
    )
    .unwrap();

    let secs = start.elapsed().as_secs_f64();
    let worst = |errs: &[f64]| {
        let (i, e) = errs.iter().copied().enumerate().fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        (model.store.entries()[i].name.clone(), e)
    };
    let (n1, e1) = worst(&stage1.tensor_errors);
    let (n2, e2) = worst(&stage2.tensor_errors);
    let pass = e1 < 1e-4 && e2 < 1e-4 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{} tensors; stage 1 worst {e1:.1e} ({n1}), stage 2 worst {e2:.1e} ({n2}), {secs:.1}s",
            values.len()
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Visibility written directly from the segment rules.
fn closed_form(layout: SequenceLayout, i: usize, j: usize) -> bool {
    let prefix = layout.n_txt + layout.n_vis;
    let act_end = prefix + layout.n_act;
    let is_prefix = |k: usize| k < prefix;
    let is_act = |k: usize| (prefix..act_end).contains(&k);
    let is_suf = |k: usize| k >= act_end;
    if i == j || is_suf(i) {
        return true;
    }
    if is_prefix(i) {
        return is_prefix(j) && j <= i;
    }
    debug_assert!(is_act(i));
    is_prefix(j) || (is_act(j) && j <= i)
}

fn mask_exhaustive() -> Outcome {
    let mut mismatches = 0usize;
    let mut entries = 0usize;
    for (n_txt, n_vis, n_act, n_suf) in [(2, 2, 4, 2), (4, 4, 8, 3)] {
        let layout = SequenceLayout { n_txt, n_vis, n_act, n_suf };
        let mask = build_mask(layout, ActionVisibility::Causal);
        let total = n_txt + n_vis + n_act + n_suf;
        for i in 0..total {
            for j in 0..total {
                entries += 1;
                if mask.allows(i, j) != closed_form(layout, i, j) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {entries} entries"))
}

// ---------------------------------------------------------------- 4

fn weight_sharing() -> Outcome {
    let count = |l, n| LoopVla::new(LoopConfig::with_loops(l, n), 0).unwrap().param_count();
    let (deep, shallow, unique) = (count(3, 8), count(3, 1), count(24, 1));
    let pass = deep == shallow && deep < unique;
    outcome(
        pass,
        format!(
            "3x8 {deep}, 3x1 {shallow}, 24 unique layers {unique} ({:.0}% fewer)",
            100.0 * (1.0 - deep as f64 / unique as f64)
        ),
    )
}

// ---------------------------------------------------------------- 5

fn random_input(rng: &mut ChaCha8Rng) -> PolicyInput {
    let feats: Vec<f64> = (0..OBS_DIM).map(|_| rng.random::<f64>()).collect();
    let id = rng.random_range(0..3u32);
    PolicyInput::new(Array::from_vec(vec![1, OBS_DIM], feats).unwrap(), vec![id]).unwrap()
}

fn adaptive_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rules = StopRules {
        cumulative: true,
        mass: false,
    };
    let (mut n_mismatch, mut a_mismatch, mut prefix_mismatch) = (0usize, 0usize, 0usize);
    let mut picked = std::collections::BTreeSet::new();
    for m in 0..10u64 {
        // spread the halting bias so selections cover many depths
        let config = LoopConfig {
            halting_bias_init: -2.5 + 0.5 * m as f64,
            ..LoopConfig::with_loops(3, 8)
        };
        let model = LoopVla::new(config.clone(), 100 + m).unwrap();
        for _ in 0..100 {
            let input = random_input(&mut rng);
            let full = model.unroll_values(&input).unwrap();
            let s: Vec<f64> = full.iter().map(|o| o.scores[0]).collect();
            let chunks: Vec<Array> = full.iter().map(|o| o.chunks.clone()).collect();
            let opt = optimal_select(&rma(&s), &chunks).unwrap();
            let ada = adaptive_select_with(&model, &input, 1.0, rules).unwrap();
            picked.insert(opt.n_star);
            if ada.n_star != opt.n_star {
                n_mismatch += 1;
            }
            if ada.action != opt.action {
                a_mismatch += 1;
            }

            // prefix of a real early-stopping run against the gradient-path forward
            let early = adaptive_select(&model, &input, 0.68).unwrap();
            let tape = Tape::inference();
            let opts = ForwardOptions {
                trainable: Trainable::Nothing,
                iterations: config.max_iterations,
                detach_halting_inputs: false,
            };
            let f = model.forward(&tape, &input, opts).unwrap();
            let ok = (0..early.visited).all(|n| tape.value(f.scores[n]).data()[0].to_bits() == early.trace.s[n].to_bits())
                && *tape.value(f.chunks[early.n_star - 1]) == early.action;
            if !ok {
                prefix_mismatch += 1;
            }
        }
    }
    let pass = n_mismatch == 0 && a_mismatch == 0 && prefix_mismatch == 0 && picked.len() > 1;
    outcome(
        pass,
        format!(
            "1000 inputs: n* mismatches {n_mismatch}, action mismatches {a_mismatch}, prefix mismatches {prefix_mismatch}, distinct n* {picked:?}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn training_convergence() -> Outcome {
    let start = Instant::now();
    let mut eps = generate_split(Difficulty::Easy, 0..900);
    eps.extend(generate_split(Difficulty::Medium, 0..900));
    let config = LoopConfig::with_loops(3, 4);
    let data = TrainingSet::from_episodes(&eps, config.chunk_size);
    let model = LoopVla::new(config, 0).unwrap();
    let train = TrainConfig {
        stage1_steps: 5000,
        ..TrainConfig::default()
    };
    let out = train_stage1(Checkpoint::fresh(model), &data, &train, None, None).unwrap();
    let model = out.checkpoint.model;
    let spec = EvalSpec::default();
    let easy = eval_closed_loop(&model, Difficulty::Easy, InferMode::Optimal, &spec).unwrap();
    let medium = eval_closed_loop(&model, Difficulty::Medium, InferMode::Optimal, &spec).unwrap();
    let pass = easy.success_rate >= 0.90 && medium.success_rate >= 0.60;
    outcome(
        pass,
        format!(
            "easy {:.2}, medium {:.2} over {} episodes each, {:.0}s",
            easy.success_rate,
            medium.success_rate,
            easy.episodes,
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7..10

struct Deep {
    stage1: LoopVla,
    stage2: LoopVla,
}

fn train_deep() -> Deep {
    let mut eps = Vec::new();
    for d in Difficulty::ALL {
        eps.extend(generate_split(d, 0..900));
    }
    let config = LoopConfig::with_loops(3, 8);
    let data = TrainingSet::from_episodes(&eps, config.chunk_size);
    let train = TrainConfig::default();
    let s1 = train_stage1(Checkpoint::fresh(LoopVla::new(config, 0).unwrap()), &data, &train, None, None).unwrap();
    let stage1 = s1.checkpoint.model.clone();
    let s2 = train_stage2(s1.checkpoint, &data, &train, None).unwrap();
    Deep {
        stage1,
        stage2: s2.checkpoint.model,
    }
}

fn calibration(deep: &Deep) -> Outcome {
    let mut held_out = Vec::new();
    for d in Difficulty::ALL {
        held_out.extend(generate_split(d, Difficulty::eval_seeds()));
    }
    let data = TrainingSet::from_episodes(&held_out, deep.stage2.config.chunk_size);
    let before = calibration_agreement(&deep.stage1, &data, 256).unwrap();
    let after = calibration_agreement(&deep.stage2, &data, 256).unwrap();
    let chance = 1.0 / deep.stage2.config.max_iterations as f64;
    let pass = after >= 2.0 * chance && after > before;
    outcome(
        pass,
        format!("agreement {after:.3} after stage 2, {before:.3} before, chance {chance:.3}, {} samples", data.len()),
    )
}

fn depth_ordering(deep: &Deep) -> Outcome {
    let seeds = 900..1100;
    let dist = |d| {
        let eps: Vec<_> = seeds.clone().map(|s| generate_episode(d, s)).collect();
        distribution_from_episodes(&deep.stage2, d, &eps).unwrap()
    };
    let (easy, hard) = (dist(Difficulty::Easy), dist(Difficulty::Hard));
    let x: Vec<f64> = hard.n_star.iter().map(|&n| n as f64).collect();
    let y: Vec<f64> = easy.n_star.iter().map(|&n| n as f64).collect();
    let test = mann_whitney_u(&x, &y);
    let pass = hard.median >= easy.median && test.p_greater < 0.05 && x.len() >= 200 && y.len() >= 200;
    outcome(
        pass,
        format!(
            "median n* hard {} vs easy {}, one-sided rank-sum p = {:.2e}, {} episodes per suite; hist easy {:?} hard {:?}",
            hard.median,
            easy.median,
            test.p_greater,
            x.len(),
            easy.histogram,
            hard.histogram
        ),
    )
}

fn throughput(deep: &Deep) -> Outcome {
    let model = &deep.stage2;
    let inputs: Vec<PolicyInput> = Difficulty::ALL
        .iter()
        .flat_map(|&d| (900..910).map(move |s| generate_episode(d, s)))
        .map(|ep| PolicyInput::from_states([(&ep.observations[0], ep.instruction_id)]))
        .collect();
    let bench = |mode| benchmark_throughput(model, mode, &inputs, Duration::from_secs(3), 7).unwrap();
    let one = bench(InferMode::Fixed { n: 1 });
    let eight = bench(InferMode::Fixed { n: 8 });
    let ratio = one.median_hz / eight.median_hz;

    let spec = EvalSpec::default();
    let mut visited = 0.0;
    for d in Difficulty::ALL {
        visited += eval_closed_loop(model, d, InferMode::Adaptive { theta: 0.68 }, &spec).unwrap().mean_visited;
    }
    visited /= Difficulty::ALL.len() as f64;
    let pass = ratio >= 2.0 && visited < 8.0;
    outcome(
        pass,
        format!(
            "fixed(1) {:.0} Hz, fixed(8) {:.0} Hz, ratio {ratio:.2}; adaptive(0.68) mean visited {visited:.2}",
            one.median_hz, eight.median_hz
        ),
    )
}

fn ablation_direction(deep: &Deep) -> Outcome {
    let rows = depth_sweep(&deep.stage2, &Difficulty::ALL, &EvalSpec::default()).unwrap();
    let optimal = rows.iter().find(|r| r.mode == "optimal").unwrap().average;
    let best = rows
        .iter()
        .filter(|r| r.mode.starts_with("fixed"))
        .max_by(|a, b| a.average.total_cmp(&b.average))
        .unwrap();
    let pass = optimal >= best.average - 0.02;
    let table: Vec<String> = rows.iter().map(|r| format!("{}={:.3}", r.mode, r.average)).collect();
    outcome(
        pass,
        format!("optimal {optimal:.3} vs best {} {:.3}; {}", best.mode, best.average, table.join(" ")),
    )
}

#[test]
fn primary_criteria() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 (rma algebra)", rma_algebra());
    report("2 (gradient oracle)", gradient_oracle());
    report("3 (mask exhaustiveness)", mask_exhaustive());
    report("4 (weight sharing)", weight_sharing());
    report("5 (adaptive-optimal equivalence)", adaptive_equivalence());
    report("6 (training convergence)", training_convergence());
    let deep = train_deep();
    report("7 (calibration)", calibration(&deep));
    report("8 (difficulty-depth ordering)", depth_ordering(&deep));
    report("9 (throughput)", throughput(&deep));
    report("10 (ablation direction)", ablation_direction(&deep));
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
