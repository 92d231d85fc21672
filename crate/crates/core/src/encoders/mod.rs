//! Token sequence assembly `[txt, vis, act, suf]` and its visibility mask.

mod config;

use std::rc::Rc;

pub use config::{ActionVisibility, HeadVariant, LoopConfig};

use crate::error::{dim_err, Error, Result};
use crate::model::params::{Binder, ParamGroup, ParamStore};
use crate::numerics::rng::StreamRng;
use crate::numerics::{Array, Var};

/// Segment sizes of one token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub n_txt: usize,
    pub n_vis: usize,
    pub n_act: usize,
    pub n_suf: usize,
}

/// Segment a token index falls into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Txt,
    Vis,
    Act,
    Suf,
}

impl SequenceLayout {
    pub fn of(config: &LoopConfig) -> Self {
        SequenceLayout {
            n_txt: config.n_txt_tokens,
            n_vis: config.n_vis_tokens,
            n_act: config.n_action_tokens,
            n_suf: config.n_sufficiency_tokens,
        }
    }

    pub fn total(&self) -> usize {
        self.n_txt + self.n_vis + self.n_act + self.n_suf
    }

    /// Start index of the txt, vis, act and suf segments.
    pub fn offsets(&self) -> [usize; 4] {
        [0, self.n_txt, self.n_txt + self.n_vis, self.n_txt + self.n_vis + self.n_act]
    }

    pub fn segment(&self, i: usize) -> Segment {
        let [_, vis, act, suf] = self.offsets();
        if i < vis {
            Segment::Txt
        } else if i < act {
            Segment::Vis
        } else if i < suf {
            Segment::Act
        } else {
            Segment::Suf
        }
    }

    /// Row indices of segment `start..start+len` for every sample of a batch.
    pub fn rows(&self, batch: usize, start: usize, len: usize) -> Rc<Vec<usize>> {
        let t = self.total();
        Rc::new(
            (0..batch)
                .flat_map(|b| (start..start + len).map(move |i| b * t + i))
                .collect(),
        )
    }

    pub fn action_rows(&self, batch: usize) -> Rc<Vec<usize>> {
        self.rows(batch, self.offsets()[2], self.n_act)
    }

    pub fn sufficiency_rows(&self, batch: usize) -> Rc<Vec<usize>> {
        self.rows(batch, self.offsets()[3], self.n_suf)
    }
}

/// Hidden states of a batch of sequences, `(batch * total) x d` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub hidden: Var,
    pub layout: SequenceLayout,
    pub batch: usize,
}

impl TokenSequence {
    pub fn offsets(&self) -> [usize; 4] {
        self.layout.offsets()
    }
}

/// `allow[i * total + j]`: token `i` may attend to token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    total: usize,
    allow: Rc<Vec<bool>>,
}

impl AttentionMask {
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.total + j]
    }

    pub fn shared(&self) -> Rc<Vec<bool>> {
        Rc::clone(&self.allow)
    }
}

/// Builds the mask block by block: causal prefix, action tokens reading the
/// prefix and (per `visibility`) each other, sufficiency tokens reading all.
pub fn build_mask(layout: SequenceLayout, visibility: ActionVisibility) -> AttentionMask {
    let total = layout.total();
    let [_, _, act, suf] = layout.offsets();
    let mut allow = vec![false; total * total];
    let mut set = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        for i in rows {
            for j in cols.clone() {
                allow[i * total + j] = true;
            }
        }
    };
    for i in 0..act {
        set(i..i + 1, 0..i + 1);
    }
    set(act..suf, 0..act);
    match visibility {
        ActionVisibility::Causal => {
            for i in act..suf {
                set(i..i + 1, act..i + 1);
            }
        }
        ActionVisibility::Bidirectional => set(act..suf, act..suf),
    }
    set(suf..total, 0..total);
    AttentionMask {
        total,
        allow: Rc::new(allow),
    }
}

/// Parameter ids of the input embeddings and learned tokens.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// `vocab x (n_txt * d)`.
    pub txt_embed: usize,
    /// `obs_dim x (n_vis * d)`.
    pub vis_weight: usize,
    pub vis_bias: usize,
    pub act_tokens: usize,
    pub suf_tokens: usize,
    /// Learned position embedding over the fixed layout, `total x d`.
    pub pos_embed: usize,
}

const TOKEN_INIT_STD: f64 = 0.02;

impl EncoderParams {
    pub fn init(store: &mut ParamStore, config: &LoopConfig, rng: &mut StreamRng) -> Self {
        let d = config.model_dim;
        let g = ParamGroup::Encoder;
        EncoderParams {
            txt_embed: store.normal("enc.txt_embed", g, rng, &[config.vocab_size, config.n_txt_tokens * d], 1.0),
            vis_weight: store.normal(
                "enc.vis_weight",
                g,
                rng,
                &[config.obs_dim, config.n_vis_tokens * d],
                1.0 / (config.obs_dim as f64).sqrt(),
            ),
            vis_bias: store.constant("enc.vis_bias", g, &[config.n_vis_tokens * d], 0.0),
            act_tokens: store.normal("enc.act_tokens", g, rng, &[config.n_action_tokens, d], TOKEN_INIT_STD),
            suf_tokens: store.normal("enc.suf_tokens", g, rng, &[config.n_sufficiency_tokens, d], TOKEN_INIT_STD),
            pos_embed: store.normal("enc.pos_embed", g, rng, &[config.total_tokens(), d], TOKEN_INIT_STD),
        }
    }
}

/// Projects a `batch x obs_dim` feature matrix to `(batch * n_vis) x d`
/// visual tokens.
pub fn encode_observation(bind: &Binder, p: &EncoderParams, config: &LoopConfig, features: Var) -> Result<Var> {
    let tape = bind.tape;
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[1] != config.obs_dim {
        return Err(dim_err!("observation features {:?}, expected [batch, {}]", shape, config.obs_dim));
    }
    let proj = tape.matmul(features, bind.get(p.vis_weight))?;
    let proj = tape.add_row(proj, bind.get(p.vis_bias))?;
    tape.reshape(proj, &[shape[0] * config.n_vis_tokens, config.model_dim])
}

/// Embedding lookup of one instruction id per sample, `(batch * n_txt) x d`.
pub fn encode_instruction(bind: &Binder, p: &EncoderParams, config: &LoopConfig, ids: &[u32]) -> Result<Var> {
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Vocabulary {
            id: id as usize,
            vocab: config.vocab_size,
        });
    }
    let tape = bind.tape;
    let rows = Rc::new(ids.iter().map(|&id| id as usize).collect());
    let emb = tape.gather_rows(bind.get(p.txt_embed), rows)?;
    tape.reshape(emb, &[ids.len() * config.n_txt_tokens, config.model_dim])
}

/// Interleaves per-sample `txt` and `vis` rows with the shared action and
/// sufficiency tokens and adds the position embedding.
pub fn build_sequence(bind: &Binder, p: &EncoderParams, config: &LoopConfig, txt: Var, vis: Var) -> Result<TokenSequence> {
    let tape = bind.tape;
    let layout = SequenceLayout::of(config);
    let (ts, vs) = (tape.shape(txt), tape.shape(vis));
    let d = config.model_dim;
    if ts.len() != 2 || vs.len() != 2 || ts[1] != d || vs[1] != d {
        return Err(dim_err!("token widths {:?} and {:?}, expected {d}", ts, vs));
    }
    if ts[0] == 0 || layout.n_txt == 0 {
        return Err(dim_err!("text segment is empty"));
    }
    if ts[0] % layout.n_txt != 0 {
        return Err(dim_err!("{} text rows for {} tokens per sample", ts[0], layout.n_txt));
    }
    let batch = ts[0] / layout.n_txt;
    if vs[0] != batch * layout.n_vis {
        return Err(dim_err!("{} visual rows, expected {}", vs[0], batch * layout.n_vis));
    }
    let stacked = tape.concat_rows(&[txt, vis, bind.get(p.act_tokens), bind.get(p.suf_tokens)])?;
    let vis_start = batch * layout.n_txt;
    let act_start = vis_start + batch * layout.n_vis;
    let suf_start = act_start + layout.n_act;
    let mut order = Vec::with_capacity(batch * layout.total());
    for b in 0..batch {
        order.extend((0..layout.n_txt).map(|i| b * layout.n_txt + i));
        order.extend((0..layout.n_vis).map(|i| vis_start + b * layout.n_vis + i));
        order.extend(act_start..act_start + layout.n_act);
        order.extend(suf_start..suf_start + layout.n_suf);
    }
    let seq = tape.gather_rows(stacked, Rc::new(order))?;
    let pos_rows = Rc::new((0..batch * layout.total()).map(|r| r % layout.total()).collect());
    let pos = tape.gather_rows(bind.get(p.pos_embed), pos_rows)?;
    Ok(TokenSequence {
        hidden: tape.add(seq, pos)?,
        layout,
        batch,
    })
}

/// Features of a batch of observations as a `batch x obs_dim` array.
pub fn feature_matrix(rows: &[[f64; crate::taskgen::OBS_DIM]]) -> Array {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array::from_vec(vec![rows.len(), crate::taskgen::OBS_DIM], data).expect("fixed width rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Trainable;
    use crate::numerics::{SeedStream, Tape};

    fn layout(n_txt: usize, n_vis: usize, n_act: usize, n_suf: usize) -> SequenceLayout {
        SequenceLayout { n_txt, n_vis, n_act, n_suf }
    }

    #[test]
    fn default_offsets() {
        let l = SequenceLayout::of(&LoopConfig::default());
        assert_eq!(l.total(), 19);
        assert_eq!(l.offsets(), [0, 4, 8, 16]);
    }

    #[test]
    fn mask_examples() {
        let l = layout(4, 4, 8, 3);
        let m = build_mask(l, ActionVisibility::Causal);
        let [_, vis, act, suf] = l.offsets();
        assert!(m.allows(suf, suf + 2));
        assert!(!m.allows(act, suf));
        assert!(!m.allows(0, vis));
        for i in 0..l.total() {
            assert!(m.allows(i, i));
        }
    }

    #[test]
    fn bidirectional_actions_see_each_other_only() {
        let l = layout(2, 2, 4, 2);
        let m = build_mask(l, ActionVisibility::Bidirectional);
        assert!(m.allows(4, 7));
        assert!(!m.allows(4, 8));
        assert!(!m.allows(0, 4));
    }

    fn setup(config: &LoopConfig) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(3).rng("enc");
        let p = EncoderParams::init(&mut store, config, &mut rng);
        (store, p)
    }

    #[test]
    fn zero_state_with_zero_bias_gives_zero_tokens() {
        let config = LoopConfig::default();
        let (store, p) = setup(&config);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let f = tape.constant(Array::zeros(&[1, config.obs_dim]));
        let v = encode_observation(&bind, &p, &config, f).unwrap();
        assert_eq!(tape.shape(v), vec![4, 64]);
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_coordinate_change_moves_along_its_column() {
        let config = LoopConfig::default();
        let (store, p) = setup(&config);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let mut a = Array::zeros(&[1, 16]);
        a.data_mut().copy_from_slice(&[0.3; 16]);
        let mut b = a.clone();
        b.data_mut()[5] += 0.25;
        let va = encode_observation(&bind, &p, &config, tape.constant(a)).unwrap();
        let vb = encode_observation(&bind, &p, &config, tape.constant(b)).unwrap();
        let diff = tape.value(vb).zip_map(&tape.value(va), |x, y| x - y);
        let col: Vec<f64> = store.value(p.vis_weight).row(5).iter().map(|w| 0.25 * w).collect();
        for (x, y) in diff.data().iter().zip(&col) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn instruction_lookup() {
        let config = LoopConfig::default();
        let (store, p) = setup(&config);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let e = encode_instruction(&bind, &p, &config, &[0, 1, 0]).unwrap();
        let v = tape.value(e);
        assert_eq!(v.shape(), &[12, 64]);
        assert_eq!(v.row(0), v.row(8));
        assert_ne!(v.row(0), v.row(4));
        drop(v);
        let err = encode_instruction(&bind, &p, &config, &[3]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 3, vocab: 3 }));
    }

    #[test]
    fn sequence_interleaves_segments() {
        let config = LoopConfig::default();
        let (store, p) = setup(&config);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let txt = encode_instruction(&bind, &p, &config, &[2, 1]).unwrap();
        let vis = encode_observation(&bind, &p, &config, tape.constant(Array::full(&[2, 16], 0.5))).unwrap();
        let seq = build_sequence(&bind, &p, &config, txt, vis).unwrap();
        assert_eq!(seq.batch, 2);
        assert_eq!(seq.offsets(), [0, 4, 8, 16]);
        let h = tape.value(seq.hidden);
        assert_eq!(h.shape(), &[38, 64]);
        let pos = store.value(p.pos_embed);
        let txt_emb = store.value(p.txt_embed);
        let act = store.value(p.act_tokens);
        for c in 0..64 {
            // sample 1, text token 1 is embedding row 1, slice 1
            assert_eq!(h.get(19 + 1, c), txt_emb.get(1, 64 + c) + pos.get(1, c));
            // action token 3 of sample 1
            assert_eq!(h.get(19 + 8 + 3, c), act.get(3, c) + pos.get(11, c));
        }
    }

    #[test]
    fn empty_text_segment_rejected() {
        let config = LoopConfig::default();
        let (store, p) = setup(&config);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store, Trainable::Nothing);
        let txt = tape.constant(Array::zeros(&[0, 64]));
        let vis = tape.constant(Array::zeros(&[4, 64]));
        assert!(matches!(
            build_sequence(&bind, &p, &config, txt, vis),
            Err(Error::Dimension(_))
        ));
    }
}
