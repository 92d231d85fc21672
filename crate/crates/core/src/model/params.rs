use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{normal_array, StreamRng};
use crate::numerics::{Array, Tape, Var};

/// Module a parameter belongs to; freezing works at this granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Anchor,
    Loop,
    ActionHead,
    SufficiencyHead,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Anchor => "anchor",
            ParamGroup::Loop => "loop",
            ParamGroup::ActionHead => "action_head",
            ParamGroup::SufficiencyHead => "sufficiency_head",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            ParamGroup::Encoder,
            ParamGroup::Anchor,
            ParamGroup::Loop,
            ParamGroup::ActionHead,
            ParamGroup::SufficiencyHead,
        ]
        .into_iter()
        .find(|g| g.name() == s)
    }
}

/// Which groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Everything except the perceptual anchors.
    AllButAnchors,
    SufficiencyOnly,
    Nothing,
}

impl Trainable {
    pub fn allows(self, group: ParamGroup) -> bool {
        match self {
            Trainable::All => true,
            Trainable::AllButAnchors => group != ParamGroup::Anchor,
            Trainable::SufficiencyOnly => group == ParamGroup::SufficiencyHead,
            Trainable::Nothing => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array,
}

/// Named parameter tensors. A parameter's id is its insertion index and is
/// stable for a given configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Array) -> usize {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        id
    }

    pub fn normal(&mut self, name: &str, group: ParamGroup, rng: &mut StreamRng, shape: &[usize], std: f64) -> usize {
        let v = normal_array(rng, shape, std);
        self.register(name, group, v)
    }

    pub fn constant(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: f64) -> usize {
        self.register(name, group, Array::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: usize) -> &Array {
        &self.entries[id].value
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Replaces a tensor's value; the shape must not change.
    pub fn set(&mut self, id: usize, value: Array) -> Result<()> {
        let e = &mut self.entries[id];
        if e.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {}: shape {:?} cannot become {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array {
        &mut self.entries[id].value
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    /// Hash over the bit patterns of every tensor in `group`.
    pub fn group_hash(&self, group: ParamGroup) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            e.name.hash(&mut h);
            for v in e.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Places parameters on a tape, honouring the freeze policy.
pub struct Binder<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    pub trainable: Trainable,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, trainable: Trainable) -> Self {
        Binder { tape, store, trainable }
    }

    pub fn get(&self, id: usize) -> Var {
        let e = self.store.entry(id);
        self.tape.param(id, &e.value, self.trainable.allows(e.group))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_count() {
        let mut s = ParamStore::new();
        let a = s.constant("a", ParamGroup::Loop, &[2, 3], 1.0);
        let b = s.constant("b", ParamGroup::SufficiencyHead, &[4], 0.0);
        assert_eq!((a, b), (0, 1));
        assert_eq!(s.count(), 10);
        assert_eq!(s.count_group(ParamGroup::Loop), 6);
        assert_eq!(s.id("b"), Some(1));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        let a = s.constant("a", ParamGroup::Loop, &[2], 1.0);
        assert!(s.set(a, Array::zeros(&[3])).is_err());
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut s = ParamStore::new();
        let a = s.constant("a", ParamGroup::Loop, &[2], 1.0);
        s.constant("b", ParamGroup::SufficiencyHead, &[2], 1.0);
        let before = s.group_hash(ParamGroup::Loop);
        let other = s.group_hash(ParamGroup::SufficiencyHead);
        s.value_mut(a).data_mut()[0] = 2.0;
        assert_ne!(s.group_hash(ParamGroup::Loop), before);
        assert_eq!(s.group_hash(ParamGroup::SufficiencyHead), other);
    }

    #[test]
    fn frozen_groups_bind_without_gradient() {
        let mut s = ParamStore::new();
        let a = s.constant("a", ParamGroup::Loop, &[2], 1.0);
        let b = s.constant("b", ParamGroup::SufficiencyHead, &[2], 1.0);
        let tape = Tape::new();
        let bind = Binder::new(&tape, &s, Trainable::SufficiencyOnly);
        assert!(!tape.requires_grad(bind.get(a)));
        assert!(tape.requires_grad(bind.get(b)));
    }
}
