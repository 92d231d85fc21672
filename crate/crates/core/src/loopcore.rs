//! Perceptual anchor layers and the weight-shared loop block.

use crate::encoders::{AttentionMask, LoopConfig, TokenSequence};
use crate::error::{contract_err, Result};
use crate::model::params::{Binder, ParamGroup, ParamStore};
use crate::numerics::rng::StreamRng;
use crate::numerics::{AttnSpec, Var};

/// Parameter ids of one pre-norm transformer layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerLayerParams {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
}

impl TransformerLayerParams {
    pub fn init(store: &mut ParamStore, prefix: &str, group: ParamGroup, config: &LoopConfig, rng: &mut StreamRng) -> Self {
        let d = config.model_dim;
        let f = d * config.ffn_mult;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let name = |s: &str| format!("{prefix}.{s}");
        TransformerLayerParams {
            attn_norm: store.constant(&name("attn_norm"), group, &[d], 1.0),
            wq: store.normal(&name("wq"), group, rng, &[d, d], sd),
            wk: store.normal(&name("wk"), group, rng, &[d, d], sd),
            wv: store.normal(&name("wv"), group, rng, &[d, d], sd),
            wo: store.normal(&name("wo"), group, rng, &[d, d], 0.5 * sd),
            ffn_norm: store.constant(&name("ffn_norm"), group, &[d], 1.0),
            w_in: store.normal(&name("w_in"), group, rng, &[d, f], sd),
            w_out: store.normal(&name("w_out"), group, rng, &[f, d], 0.5 * sf),
        }
    }

    /// Scalar count of one layer at width `d`.
    pub fn count(config: &LoopConfig) -> usize {
        let d = config.model_dim;
        2 * d + 4 * d * d + 2 * d * d * config.ffn_mult
    }
}

/// `x + Attn(norm(x)); x + FFN(norm(x))` over a batch of sequences.
pub fn layer_forward(bind: &Binder, p: &TransformerLayerParams, x: Var, batch: usize, mask: &AttentionMask, heads: usize) -> Result<Var> {
    let tape = bind.tape;
    let xn = tape.rms_norm(x, bind.get(p.attn_norm))?;
    let q = tape.matmul(xn, bind.get(p.wq))?;
    let k = tape.matmul(xn, bind.get(p.wk))?;
    let v = tape.matmul(xn, bind.get(p.wv))?;
    let spec = AttnSpec {
        batch,
        q_len: mask.total(),
        kv_len: mask.total(),
        heads,
        mask: Some(mask.shared()),
    };
    let a = tape.attention(q, k, v, spec)?;
    let x = tape.add(x, tape.matmul(a, bind.get(p.wo))?)?;
    let xn = tape.rms_norm(x, bind.get(p.ffn_norm))?;
    let hdn = tape.silu(tape.matmul(xn, bind.get(p.w_in))?);
    tape.add(x, tape.matmul(hdn, bind.get(p.w_out))?)
}

fn stack_forward(bind: &Binder, layers: &[TransformerLayerParams], seq: TokenSequence, mask: &AttentionMask, heads: usize) -> Result<TokenSequence> {
    let mut h = seq.hidden;
    for p in layers {
        h = layer_forward(bind, p, h, seq.batch, mask, heads)?;
    }
    Ok(TokenSequence { hidden: h, ..seq })
}

/// Applies the independent anchor layers, producing `h(0)`.
pub fn anchor_forward(bind: &Binder, anchors: &[TransformerLayerParams], seq: TokenSequence, mask: &AttentionMask, heads: usize) -> Result<TokenSequence> {
    stack_forward(bind, anchors, seq, mask, heads)
}

/// Hidden state after `n` loop iterations.
#[derive(Clone, Copy, Debug)]
pub struct LoopState {
    pub n: usize,
    pub hidden: TokenSequence,
}

impl LoopState {
    pub fn initial(h0: TokenSequence) -> Self {
        LoopState { n: 0, hidden: h0 }
    }
}

/// The shared `L`-layer stack and its iteration limit.
#[derive(Clone, Debug)]
pub struct LoopBlock {
    pub layers: Vec<TransformerLayerParams>,
    pub max_iterations: usize,
    pub heads: usize,
}

impl LoopBlock {
    pub fn init(store: &mut ParamStore, config: &LoopConfig, rng: &mut StreamRng) -> Self {
        let layers = (0..config.loop_layers)
            .map(|i| TransformerLayerParams::init(store, &format!("loop.{i}"), ParamGroup::Loop, config, rng))
            .collect();
        LoopBlock {
            layers,
            max_iterations: config.max_iterations,
            heads: config.attn_heads,
        }
    }
}

/// One pass through the shared stack; the same parameter ids are bound at
/// every iteration.
pub fn loop_step(bind: &Binder, block: &LoopBlock, state: LoopState, mask: &AttentionMask) -> Result<LoopState> {
    if state.n >= block.max_iterations {
        return Err(contract_err!(
            "loop step {} exceeds the maximum of {} iterations",
            state.n + 1,
            block.max_iterations
        ));
    }
    let hidden = stack_forward(bind, &block.layers, state.hidden, mask, block.heads)?;
    Ok(LoopState { n: state.n + 1, hidden })
}

/// `h(1) ... h(n)` from `h(0)`.
pub fn unroll(bind: &Binder, block: &LoopBlock, h0: LoopState, n: usize, mask: &AttentionMask) -> Result<Vec<LoopState>> {
    if n == 0 {
        return Err(contract_err!("unroll needs at least one iteration"));
    }
    if h0.n != 0 {
        return Err(contract_err!("unroll starts from h(0), got h({})", h0.n));
    }
    let mut out = Vec::with_capacity(n);
    let mut state = h0;
    for _ in 0..n {
        state = loop_step(bind, block, state, mask)?;
        out.push(state);
    }
    Ok(out)
}
