//! Action readout, sufficiency scoring and remaining-mass allocation.

use crate::encoders::{HeadVariant, LoopConfig};
use crate::error::{contract_err, Error, Result};
use crate::model::params::{Binder, ParamGroup, ParamStore};
use crate::numerics::rng::StreamRng;
use crate::numerics::{Array, AttnSpec, Tape, Var};

/// Per-token readout `norm -> d x d -> SiLU -> d x J`.
#[derive(Clone, Debug)]
pub struct ActionHeadParams {
    pub norm: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl ActionHeadParams {
    pub fn init(store: &mut ParamStore, config: &LoopConfig, rng: &mut StreamRng) -> Self {
        let d = config.model_dim;
        let g = ParamGroup::ActionHead;
        let sd = 1.0 / (d as f64).sqrt();
        ActionHeadParams {
            norm: store.constant("action_head.norm", g, &[d], 1.0),
            w1: store.normal("action_head.w1", g, rng, &[d, d], sd),
            b1: store.constant("action_head.b1", g, &[d], 0.0),
            w2: store.normal("action_head.w2", g, rng, &[d, config.dof], 0.5 * sd),
            b2: store.constant("action_head.b2", g, &[config.dof], 0.0),
        }
    }
}

/// Maps `(batch * n_act) x d` action tokens to `(batch * c) x J` chunk rows,
/// one row per token.
pub fn action_predict(bind: &Binder, p: &ActionHeadParams, config: &LoopConfig, h_act: Var) -> Result<Var> {
    if config.n_action_tokens != config.chunk_size {
        return Err(Error::Config(format!(
            "action head ties one token to one chunk row: {} tokens for chunk size {}",
            config.n_action_tokens, config.chunk_size
        )));
    }
    let tape = bind.tape;
    let xn = tape.rms_norm(h_act, bind.get(p.norm))?;
    let h = tape.add_row(tape.matmul(xn, bind.get(p.w1))?, bind.get(p.b1))?;
    let h = tape.silu(h);
    tape.add_row(tape.matmul(h, bind.get(p.w2))?, bind.get(p.b2))
}

/// Sinusoidal encoding of loop index `n` in `1..=max_n`.
pub fn loop_positional_encoding(n: usize, d: usize, max_n: usize) -> Result<Array> {
    if n == 0 || n > max_n {
        return Err(contract_err!("loop index {n} outside 1..={max_n}"));
    }
    let data = (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = n as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect();
    Array::from_vec(vec![d], data)
}

/// One pre-norm cross-attention layer: sufficiency queries over action
/// keys and values.
#[derive(Clone, Debug)]
pub struct CrossAttnParams {
    pub norm_q: usize,
    pub norm_kv: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub struct SufficiencyHeadParams {
    pub variant: HeadVariant,
    /// Empty for the direct-MLP variant.
    pub cross: Vec<CrossAttnParams>,
    pub norm_out: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl SufficiencyHeadParams {
    pub fn init(store: &mut ParamStore, config: &LoopConfig, rng: &mut StreamRng) -> Self {
        let d = config.model_dim;
        let hidden = (d / 2).max(1);
        let g = ParamGroup::SufficiencyHead;
        let sd = 1.0 / (d as f64).sqrt();
        let cross = match config.head_variant {
            HeadVariant::DirectMlp => Vec::new(),
            HeadVariant::CrossAttention => (0..config.cross_attn_layers)
                .map(|t| {
                    let name = |s: &str| format!("suf_head.cross.{t}.{s}");
                    CrossAttnParams {
                        norm_q: store.constant(&name("norm_q"), g, &[d], 1.0),
                        norm_kv: store.constant(&name("norm_kv"), g, &[d], 1.0),
                        wq: store.normal(&name("wq"), g, rng, &[d, d], sd),
                        wk: store.normal(&name("wk"), g, rng, &[d, d], sd),
                        wv: store.normal(&name("wv"), g, rng, &[d, d], sd),
                        wo: store.normal(&name("wo"), g, rng, &[d, d], 0.5 * sd),
                    }
                })
                .collect(),
        };
        SufficiencyHeadParams {
            variant: config.head_variant,
            cross,
            norm_out: store.constant("suf_head.norm_out", g, &[d], 1.0),
            w1: store.normal("suf_head.w1", g, rng, &[d, hidden], sd),
            b1: store.constant("suf_head.b1", g, &[hidden], 0.0),
            w2: store.normal("suf_head.w2", g, rng, &[hidden, 1], 1.0 / (hidden as f64).sqrt()),
            b2: store.constant("suf_head.b2", g, &[1], config.halting_bias_init),
        }
    }
}

/// Halting score and pooled representation for one iteration.
#[derive(Clone, Copy, Debug)]
pub struct SufficiencyOutput {
    /// `batch x 1`, strictly inside `(0, 1)` for finite logits.
    pub score: Var,
    /// `batch x d`.
    pub pooled: Var,
}

/// Scores iteration `n` from `(batch * n_suf) x d` sufficiency tokens and
/// `(batch * n_act) x d` action tokens.
pub fn sufficiency_score(
    bind: &Binder,
    p: &SufficiencyHeadParams,
    config: &LoopConfig,
    h_suf: Var,
    h_act: Var,
    n: usize,
) -> Result<SufficiencyOutput> {
    let tape = bind.tape;
    let d = config.model_dim;
    let n_suf = config.n_sufficiency_tokens;
    let batch = tape.shape(h_suf)[0] / n_suf;
    let x = match p.variant {
        HeadVariant::DirectMlp => h_suf,
        HeadVariant::CrossAttention => {
            let pe = tape.constant(loop_positional_encoding(n, d, config.max_iterations)?);
            let mut x = tape.add_row(h_suf, pe)?;
            for layer in &p.cross {
                let qn = tape.rms_norm(x, bind.get(layer.norm_q))?;
                let kvn = tape.rms_norm(h_act, bind.get(layer.norm_kv))?;
                let q = tape.matmul(qn, bind.get(layer.wq))?;
                let k = tape.matmul(kvn, bind.get(layer.wk))?;
                let v = tape.matmul(kvn, bind.get(layer.wv))?;
                let spec = AttnSpec {
                    batch,
                    q_len: n_suf,
                    kv_len: config.n_action_tokens,
                    heads: config.attn_heads,
                    mask: None,
                };
                let a = tape.attention(q, k, v, spec)?;
                x = tape.add(x, tape.matmul(a, bind.get(layer.wo))?)?;
            }
            x
        }
    };
    let xn = tape.rms_norm(x, bind.get(p.norm_out))?;
    let pooled = tape.group_mean_rows(xn, n_suf)?;
    let h = tape.add_row(tape.matmul(pooled, bind.get(p.w1))?, bind.get(p.b1))?;
    let h = tape.silu(h);
    let logit = tape.add_row(tape.matmul(h, bind.get(p.w2))?, bind.get(p.b2))?;
    Ok(SufficiencyOutput {
        score: tape.sigmoid(logit),
        pooled,
    })
}

/// Scores, remaining mass and halting probabilities of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltingTrace {
    pub s: Vec<f64>,
    /// `r[0] = 1`; `r.len() == s.len() + 1`.
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub z_pooled: Vec<Vec<f64>>,
}

impl HaltingTrace {
    pub fn iterations(&self) -> usize {
        self.s.len()
    }

    /// Mass never allocated, `r(N+1)`.
    pub fn residual(&self) -> f64 {
        *self.r.last().expect("r is never empty")
    }

    /// Proper distribution with the residual folded into the last step.
    pub fn folded(&self) -> Vec<f64> {
        let mut q = self.p.clone();
        if let Some(last) = q.last_mut() {
            *last += self.residual();
        }
        q
    }

    /// Earliest index of the largest `p`, 1-based.
    pub fn argmax(&self) -> usize {
        argmax_earliest(&self.p) + 1
    }
}

/// Index of the maximum, earliest on ties.
pub fn argmax_earliest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Remaining-mass allocation: `p(n) = s(n) r(n)`, `r(n+1) = r(n) (1 - s(n))`.
/// Scores are clamped to `[0, 1]`.
///
/// Rounding in `s r` can push the left-to-right float sum of `p` one ulp
/// past 1. A step that would do so is capped at `1 - sum`, which keeps
/// `sum(p) <= 1` exact in f64 and moves `p` by less than an ulp.
pub fn rma(s: &[f64]) -> HaltingTrace {
    let s: Vec<f64> = s.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut r = Vec::with_capacity(s.len() + 1);
    let mut p = Vec::with_capacity(s.len());
    r.push(1.0);
    let mut total = 0.0f64;
    for &sn in &s {
        let rn = *r.last().expect("seeded with 1");
        let mut pn = sn * rn;
        if total + pn > 1.0 {
            // 1 - total is within half an ulp of the true gap, so total + pn rounds to at most 1
            pn = 1.0 - total;
        }
        total += pn;
        p.push(pn);
        r.push(rn * (1.0 - sn));
    }
    HaltingTrace {
        s,
        r,
        p,
        z_pooled: Vec::new(),
    }
}

/// The same recurrence on batched `batch x 1` score nodes; returns `p(1..N)`
/// and `r(1..N+1)`.
pub fn rma_tape(tape: &Tape, scores: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
    let Some(&first) = scores.first() else {
        return Err(contract_err!("rma over zero iterations"));
    };
    let shape = tape.shape(first);
    let mut r = vec![tape.constant(Array::full(&shape, 1.0))];
    let mut p = Vec::with_capacity(scores.len());
    for &s in scores {
        let rn = *r.last().expect("seeded");
        p.push(tape.mul(s, rn)?);
        let keep = tape.affine(s, -1.0, 1.0);
        r.push(tape.mul(rn, keep)?);
    }
    Ok((p, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Trainable;
    use crate::numerics::rng::normal_array;
    use crate::numerics::SeedStream;

    #[test]
    fn rma_examples() {
        let t = rma(&[1.0, 0.3]);
        assert_eq!(t.p, vec![1.0, 0.0]);
        assert_eq!(t.r, vec![1.0, 0.0, 0.0]);
        let t = rma(&[0.5, 0.5, 0.5]);
        assert_eq!(t.p, vec![0.5, 0.25, 0.125]);
        assert_eq!(t.residual(), 0.125);
        let t = rma(&[0.0, 0.0, 0.0]);
        assert_eq!(t.p, vec![0.0; 3]);
        assert_eq!(t.r, vec![1.0; 4]);
    }

    #[test]
    fn rma_clamps_out_of_range_scores() {
        let t = rma(&[1.5, -0.2]);
        assert_eq!(t.s, vec![1.0, 0.0]);
        assert_eq!(t.p.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn folded_is_a_distribution() {
        let t = rma(&[0.2, 0.1, 0.3]);
        let f = t.folded();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(f[..2], t.p[..2]);
    }

    #[test]
    fn argmax_breaks_ties_early() {
        assert_eq!(argmax_earliest(&[0.1, 0.6, 0.3]), 1);
        assert_eq!(argmax_earliest(&[0.25; 4]), 0);
    }

    #[test]
    fn positional_encoding_values() {
        let pe = loop_positional_encoding(1, 8, 8).unwrap();
        assert!((pe.data()[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[1] - 1f64.cos()).abs() < 1e-15);
        for n in 1..=8 {
            let a = loop_positional_encoding(n, 64, 8).unwrap();
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!((a.data()[1] - (n as f64).cos()).abs() < 1e-15);
            for m in 1..n {
                let b = loop_positional_encoding(m, 64, 8).unwrap();
                assert!(a.zip_map(&b, |x, y| x - y).norm() > 0.0);
            }
        }
        assert!(matches!(loop_positional_encoding(0, 8, 8), Err(Error::Contract(_))));
        assert!(matches!(loop_positional_encoding(9, 8, 8), Err(Error::Contract(_))));
    }

    fn head_fixture(config: &LoopConfig) -> (ParamStore, ActionHeadParams, SufficiencyHeadParams) {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(5).rng("heads");
        let a = ActionHeadParams::init(&mut store, config, &mut rng);
        let s = SufficiencyHeadParams::init(&mut store, config, &mut rng);
        (store, a, s)
    }

    #[test]
    fn zero_hidden_gives_zero_chunk() {
        let config = LoopConfig::default();
        let (store, a, _) = head_fixture(&config);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let h = tape.constant(Array::zeros(&[8, 64]));
        let out = action_predict(&bind, &a, &config, h).unwrap();
        assert_eq!(tape.shape(out), vec![8, 3]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let config = LoopConfig::default();
        let (store, a, _) = head_fixture(&config);
        let mut rng = SeedStream::new(9).rng("perm");
        let h = normal_array(&mut rng, &[8, 64], 1.0);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let permuted = Array::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let x = action_predict(&bind, &a, &config, tape.constant(h)).unwrap();
        let y = action_predict(&bind, &a, &config, tape.constant(permuted)).unwrap();
        let (x, y) = (tape.value(x), tape.value(y));
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(y.row(k), x.row(i));
        }
    }

    #[test]
    fn mismatched_chunk_is_config_error() {
        let config = LoopConfig::default();
        let (store, a, _) = head_fixture(&config);
        let bad = LoopConfig {
            chunk_size: 4,
            ..config
        };
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let h = tape.constant(Array::zeros(&[8, 64]));
        assert!(matches!(action_predict(&bind, &a, &bad, h), Err(Error::Config(_))));
    }

    fn score(store: &ParamStore, s: &SufficiencyHeadParams, config: &LoopConfig, n: usize, seed: u64) -> f64 {
        let mut rng = SeedStream::new(seed).rng("inputs");
        let hs = normal_array(&mut rng, &[3, 64], 1.0);
        let ha = normal_array(&mut rng, &[8, 64], 1.0);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, store, Trainable::Nothing);
        let out = sufficiency_score(&bind, s, config, tape.constant(hs), tape.constant(ha), n).unwrap();
        assert_eq!(tape.shape(out.pooled), vec![1, 64]);
        let v = tape.value(out.score).item();
        v
    }

    #[test]
    fn score_is_in_open_unit_interval_and_depends_on_n() {
        let config = LoopConfig::default();
        let (store, _, s) = head_fixture(&config);
        let a = score(&store, &s, &config, 1, 1);
        let b = score(&store, &s, &config, 8, 1);
        assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
        assert!((a - b).abs() > 0.0);
    }

    #[test]
    fn saturated_bias_dominates() {
        let config = LoopConfig::default();
        let (mut store, _, s) = head_fixture(&config);
        store.set(s.b2, Array::full(&[1], 10.0)).unwrap();
        let w2 = store.value(s.w2).shape().to_vec();
        store.set(s.w2, Array::zeros(&w2)).unwrap();
        for seed in 0..3 {
            let v = score(&store, &s, &config, 2, seed);
            assert!((v - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn initial_scores_start_near_a_fifth() {
        let config = LoopConfig::default();
        let (mut store, _, s) = head_fixture(&config);
        let w2 = store.value(s.w2).shape().to_vec();
        store.set(s.w2, Array::zeros(&w2)).unwrap();
        assert!((score(&store, &s, &config, 1, 0) - 0.2).abs() < 1e-4);
    }

    #[test]
    fn direct_head_has_fewer_parameters() {
        let cross = LoopConfig::default();
        let direct = LoopConfig {
            head_variant: HeadVariant::DirectMlp,
            ..LoopConfig::default()
        };
        let (a, _, _) = head_fixture(&cross);
        let (b, _, _) = head_fixture(&direct);
        assert!(b.count_group(ParamGroup::SufficiencyHead) < a.count_group(ParamGroup::SufficiencyHead));
        // the direct head ignores the loop index
        let (store, _, s) = head_fixture(&direct);
        assert_eq!(score(&store, &s, &direct, 1, 4), score(&store, &s, &direct, 8, 4));
    }

    #[test]
    fn tape_recurrence_matches_scalar() {
        let tape = Tape::inference();
        let s: Vec<Var> = [0.3, 0.6, 0.9]
            .iter()
            .map(|&v| tape.constant(Array::full(&[1, 1], v)))
            .collect();
        let (p, r) = rma_tape(&tape, &s).unwrap();
        let t = rma(&[0.3, 0.6, 0.9]);
        for n in 0..3 {
            assert_eq!(tape.value(p[n]).item(), t.p[n]);
        }
        assert_eq!(tape.value(r[3]).item(), t.residual());
    }
}
