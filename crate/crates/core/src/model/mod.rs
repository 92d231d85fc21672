//! The full looped policy: parameters, batched forward pass and checkpoints.

pub mod checkpoint;
pub mod params;

use std::rc::Rc;

use crate::encoders::{
    build_mask, build_sequence, encode_instruction, encode_observation, AttentionMask, EncoderParams, LoopConfig,
    SequenceLayout,
};
use crate::error::{contract_err, dim_err, Result};
use crate::heads::{action_predict, sufficiency_score, ActionHeadParams, SufficiencyHeadParams};
use crate::loopcore::{anchor_forward, loop_step, LoopBlock, LoopState, TransformerLayerParams};
use crate::numerics::{Array, SeedStream, Tape, Var};
use crate::taskgen::{Action, WorldState, MAX_STEP, OBS_DIM};
use params::{Binder, ParamGroup, ParamStore, Trainable};

/// Per-dimension scale between environment actions and model outputs.
pub const ACTION_SCALE: [f64; 3] = [MAX_STEP, MAX_STEP, 1.0];

pub fn normalize_action(a: Action) -> [f64; 3] {
    [a.dx / ACTION_SCALE[0], a.dy / ACTION_SCALE[1], a.grip / ACTION_SCALE[2]]
}

pub fn denormalize_action(row: &[f64]) -> Action {
    Action::new(row[0] * ACTION_SCALE[0], row[1] * ACTION_SCALE[1], row[2] * ACTION_SCALE[2])
}

/// A batch of observations with their instruction ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    /// `batch x OBS_DIM`.
    pub features: Array,
    pub instructions: Vec<u32>,
}

impl PolicyInput {
    pub fn new(features: Array, instructions: Vec<u32>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != instructions.len() {
            return Err(dim_err!(
                "features {:?} for {} instructions",
                features.shape(),
                instructions.len()
            ));
        }
        Ok(PolicyInput { features, instructions })
    }

    pub fn from_states<'a>(items: impl IntoIterator<Item = (&'a WorldState, u32)>) -> Self {
        let mut data = Vec::new();
        let mut instructions = Vec::new();
        for (s, id) in items {
            data.extend_from_slice(&s.features());
            instructions.push(id);
        }
        let rows = instructions.len();
        PolicyInput {
            features: Array::from_vec(vec![rows, OBS_DIM], data).expect("fixed width rows"),
            instructions,
        }
    }

    pub fn batch(&self) -> usize {
        self.instructions.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub trainable: Trainable,
    pub iterations: usize,
    /// Feed the sufficiency head constant copies of the tokens so its losses
    /// stay head-local.
    pub detach_halting_inputs: bool,
}

/// Per-iteration outputs of a batched forward pass on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub batch: usize,
    /// `(batch * c) x J` per iteration.
    pub chunks: Vec<Var>,
    /// `batch x 1` per iteration.
    pub scores: Vec<Var>,
    /// `batch x d` per iteration.
    pub pooled: Vec<Var>,
}

/// Plain values of one iteration for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutput {
    pub n: usize,
    pub chunks: Array,
    pub scores: Vec<f64>,
    pub pooled: Array,
}

impl IterationOutput {
    /// The `c x J` chunk of sample `b`.
    pub fn chunk(&self, b: usize, chunk_size: usize) -> Array {
        let cols = self.chunks.cols();
        let rows = self.chunks.data()[b * chunk_size * cols..(b + 1) * chunk_size * cols].to_vec();
        Array::from_vec(vec![chunk_size, cols], rows).expect("slice of a chunk block")
    }
}

#[derive(Clone, Debug)]
pub struct LoopVla {
    pub config: LoopConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub anchors: Vec<TransformerLayerParams>,
    pub block: LoopBlock,
    pub action_head: ActionHeadParams,
    pub suf_head: SufficiencyHeadParams,
    layout: SequenceLayout,
    mask: AttentionMask,
}

impl LoopVla {
    /// Fresh model; every module draws from its own seed stream.
    pub fn new(config: LoopConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeedStream::new(seed).child("model-init");
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config, &mut root.rng("encoder"));
        let mut rng = root.rng("anchors");
        let anchors = (0..config.anchor_layers)
            .map(|i| TransformerLayerParams::init(&mut store, &format!("anchor.{i}"), ParamGroup::Anchor, &config, &mut rng))
            .collect();
        let block = LoopBlock::init(&mut store, &config, &mut root.rng("loop"));
        let action_head = ActionHeadParams::init(&mut store, &config, &mut root.rng("action_head"));
        let suf_head = SufficiencyHeadParams::init(&mut store, &config, &mut root.rng("suf_head"));
        let layout = SequenceLayout::of(&config);
        let mask = build_mask(layout, config.action_visibility);
        Ok(LoopVla {
            config,
            store,
            encoder,
            anchors,
            block,
            action_head,
            suf_head,
            layout,
            mask,
        })
    }

    pub fn layout(&self) -> SequenceLayout {
        self.layout
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    fn h0(&self, bind: &Binder, input: &PolicyInput) -> Result<LoopState> {
        let tape = bind.tape;
        let features = tape.constant(input.features.clone());
        let txt = encode_instruction(bind, &self.encoder, &self.config, &input.instructions)?;
        let vis = encode_observation(bind, &self.encoder, &self.config, features)?;
        let seq = build_sequence(bind, &self.encoder, &self.config, txt, vis)?;
        let h0 = anchor_forward(bind, &self.anchors, seq, &self.mask, self.config.attn_heads)?;
        Ok(LoopState::initial(h0))
    }

    fn readout(&self, bind: &Binder, state: &LoopState, rows: &(Rc<Vec<usize>>, Rc<Vec<usize>>), detach: bool) -> Result<(Var, Var, Var)> {
        let tape = bind.tape;
        let h = state.hidden.hidden;
        let act = tape.gather_rows(h, Rc::clone(&rows.0))?;
        let suf = tape.gather_rows(h, Rc::clone(&rows.1))?;
        let chunk = action_predict(bind, &self.action_head, &self.config, act)?;
        let (act_in, suf_in) = if detach {
            let a = tape.value(act).clone();
            let s = tape.value(suf).clone();
            (tape.constant(a), tape.constant(s))
        } else {
            (act, suf)
        };
        let out = sufficiency_score(bind, &self.suf_head, &self.config, suf_in, act_in, state.n)?;
        Ok((chunk, out.score, out.pooled))
    }

    fn rows(&self, batch: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
        (self.layout.action_rows(batch), self.layout.sufficiency_rows(batch))
    }

    /// Runs `opts.iterations` loop steps on `tape`, reading out every step.
    pub fn forward(&self, tape: &Tape, input: &PolicyInput, opts: ForwardOptions) -> Result<ForwardVars> {
        let bind = Binder::new(tape, &self.store, opts.trainable);
        let mut state = self.h0(&bind, input)?;
        let rows = self.rows(input.batch());
        let mut out = ForwardVars {
            batch: input.batch(),
            chunks: Vec::with_capacity(opts.iterations),
            scores: Vec::with_capacity(opts.iterations),
            pooled: Vec::with_capacity(opts.iterations),
        };
        for _ in 0..opts.iterations {
            state = loop_step(&bind, &self.block, state, &self.mask)?;
            let (c, s, z) = self.readout(&bind, &state, &rows, opts.detach_halting_inputs)?;
            out.chunks.push(c);
            out.scores.push(s);
            out.pooled.push(z);
        }
        Ok(out)
    }

    /// Every iteration's outputs without recording gradients.
    pub fn unroll_values(&self, input: &PolicyInput) -> Result<Vec<IterationOutput>> {
        let mut u = Unroller::new(self, input)?;
        (0..self.config.max_iterations).map(|_| u.step()).collect()
    }
}

/// Computes loop iterations one at a time without gradient bookkeeping.
pub struct Unroller<'m> {
    model: &'m LoopVla,
    tape: Tape,
    state: LoopState,
    rows: (Rc<Vec<usize>>, Rc<Vec<usize>>),
}

impl<'m> Unroller<'m> {
    pub fn new(model: &'m LoopVla, input: &PolicyInput) -> Result<Self> {
        let tape = Tape::inference();
        let state = {
            let bind = Binder::new(&tape, &model.store, Trainable::Nothing);
            model.h0(&bind, input)?
        };
        Ok(Unroller {
            model,
            tape,
            state,
            rows: model.rows(input.batch()),
        })
    }

    /// Iterations computed so far.
    pub fn visited(&self) -> usize {
        self.state.n
    }

    pub fn step(&mut self) -> Result<IterationOutput> {
        if self.state.n >= self.model.config.max_iterations {
            return Err(contract_err!("all {} iterations already computed", self.model.config.max_iterations));
        }
        let bind = Binder::new(&self.tape, &self.model.store, Trainable::Nothing);
        self.state = loop_step(&bind, &self.model.block, self.state, &self.model.mask)?;
        let (c, s, z) = self.model.readout(&bind, &self.state, &self.rows, false)?;
        let out = IterationOutput {
            n: self.state.n,
            chunks: self.tape.value(c).clone(),
            scores: self.tape.value(s).data().to_vec(),
            pooled: self.tape.value(z).clone(),
        };
        Ok(out)
    }
}
