//! Synthetic planar manipulation tasks with a scripted expert.

mod dataset;
mod env;
mod expert;
mod generate;
pub mod geometry;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{decode_dataset, encode_dataset, export_jsonl, import_jsonl, load_dataset, serialize_dataset, MAGIC};
pub use env::{step, Action, WorldState, GRASP_RADIUS, MAX_OBSTACLES, MAX_STEP, OBS_DIM};
pub use expert::{plan_path, scripted_expert, task_complete};
pub use generate::{expert_rollout, generate_episode};

use crate::error::{Error, Result};
use geometry::dist;

/// Distance under which a task target counts as reached.
pub const SUCCESS_RADIUS: f64 = 0.03;
/// Seeds below this value form the training split; the rest are held out.
pub const EVAL_SEED_START: u64 = 900;
pub const SEEDS_PER_DIFFICULTY: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn instruction_id(self) -> u32 {
        self as u32
    }

    pub fn from_instruction(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    /// Upper bound on the expert horizon.
    pub fn max_horizon(self) -> usize {
        match self {
            Difficulty::Easy => 25,
            Difficulty::Medium => 45,
            Difficulty::Hard => 80,
        }
    }

    /// Reach tasks (easy, medium) grasp the object in place; hard also
    /// transports it to the goal.
    pub fn transports(self) -> bool {
        self == Difficulty::Hard
    }

    /// Success test: the gripper reaches the object for reach tasks, the
    /// object reaches the goal for transport tasks.
    pub fn success(self, state: &WorldState) -> bool {
        if self.transports() {
            dist(state.object, state.goal) < SUCCESS_RADIUS
        } else {
            dist(state.gripper, state.object) < SUCCESS_RADIUS
        }
    }

    pub fn train_seeds() -> Range<u64> {
        0..EVAL_SEED_START
    }

    pub fn eval_seeds() -> Range<u64> {
        EVAL_SEED_START..SEEDS_PER_DIFFICULTY
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!(
                "unknown difficulty '{other}' (expected easy, medium, hard)"
            ))),
        }
    }
}

/// One expert demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction_id: u32,
    pub difficulty: Difficulty,
    pub observations: Vec<WorldState>,
    pub actions: Vec<Action>,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Folds the recorded actions through [`step`] from the first observation.
    pub fn replay(&self) -> Vec<WorldState> {
        let mut out = vec![self.observations[0].clone()];
        for a in &self.actions {
            let next = step(out.last().expect("nonempty"), *a);
            out.push(next);
        }
        out
    }
}

/// Episodes for `difficulty` over a seed range.
pub fn generate_split(difficulty: Difficulty, seeds: Range<u64>) -> Vec<Episode> {
    seeds.map(|s| generate_episode(difficulty, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn easy_seed_zero_reaches_object() {
        let ep = generate_episode(Difficulty::Easy, 0);
        let last = ep.replay().pop().unwrap();
        assert!(dist(last.gripper, last.object) < 0.03);
    }

    #[test]
    fn hard_is_longer_than_easy() {
        let e = generate_episode(Difficulty::Easy, 7);
        let h = generate_episode(Difficulty::Hard, 7);
        assert!(h.horizon() > e.horizon());
    }

    #[test]
    fn generation_is_deterministic() {
        for d in Difficulty::ALL {
            assert_eq!(generate_episode(d, 42), generate_episode(d, 42));
        }
    }

    #[test]
    fn episode_invariants_hold() {
        for d in Difficulty::ALL {
            for seed in 0..50 {
                let ep = generate_episode(d, seed);
                assert_eq!(ep.observations.len(), ep.actions.len() + 1);
                assert!(ep.horizon() <= d.max_horizon());
                for a in &ep.actions {
                    assert!(a.dx.abs() <= MAX_STEP && a.dy.abs() <= MAX_STEP);
                }
                assert_eq!(ep.replay(), ep.observations);
                let first = &ep.observations[0];
                for b in &first.obstacles {
                    assert!(!b.contains_open(first.gripper) && !b.contains_open(first.goal));
                }
                for s in &ep.observations {
                    for p in [s.gripper, s.object, s.goal] {
                        assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
                    }
                }
            }
        }
    }
}
