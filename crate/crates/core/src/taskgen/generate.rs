use rand::Rng;

use super::env::{step, Action, WorldState};
use super::expert::{scripted_expert, task_complete};
use super::geometry::{dist, Aabb, Point};
use super::{Difficulty, Episode};
use crate::numerics::rng::{SeedStream, StreamRng};

/// Minimum distance between any box and the gripper, object, or goal.
const CLEARANCE: f64 = 0.07;
/// Boxes stay inside `[BORDER, 1 - BORDER]`.
const BORDER: f64 = 0.06;

fn point(rng: &mut StreamRng, lo: f64, hi: f64) -> Point {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Box centred near a point on segment `a -> b`, sized to block it.
fn blocking_box(rng: &mut StreamRng, a: Point, b: Point) -> Aabb {
    let u = rng.random_range(0.35..0.65);
    let c = [
        a[0] + u * (b[0] - a[0]) + rng.random_range(-0.03..0.03),
        a[1] + u * (b[1] - a[1]) + rng.random_range(-0.03..0.03),
    ];
    let hx = rng.random_range(0.05..0.12);
    let hy = rng.random_range(0.05..0.12);
    Aabb::new([c[0] - hx, c[1] - hy], [c[0] + hx, c[1] + hy])
}

fn box_ok(b: &Aabb, keep_clear: &[Point]) -> bool {
    let inside = b.min[0] >= BORDER && b.min[1] >= BORDER && b.max[0] <= 1.0 - BORDER && b.max[1] <= 1.0 - BORDER;
    inside && keep_clear.iter().all(|p| b.distance(*p) >= CLEARANCE)
}

fn layout(difficulty: Difficulty, rng: &mut StreamRng) -> Option<WorldState> {
    let gripper = point(rng, 0.1, 0.9);
    let object = point(rng, 0.1, 0.9);
    let (goal, obstacles) = match difficulty {
        Difficulty::Easy => {
            if dist(gripper, object) < 0.15 {
                return None;
            }
            (point(rng, 0.1, 0.9), vec![])
        }
        Difficulty::Medium => {
            if dist(gripper, object) < 0.35 {
                return None;
            }
            let goal = point(rng, 0.1, 0.9);
            let b = blocking_box(rng, gripper, object);
            if !box_ok(&b, &[gripper, object, goal]) {
                return None;
            }
            (goal, vec![b])
        }
        Difficulty::Hard => {
            let goal = point(rng, 0.1, 0.9);
            if dist(gripper, object) < 0.35 || dist(object, goal) < 0.35 || dist(gripper, goal) < 0.2 {
                return None;
            }
            let b1 = blocking_box(rng, gripper, object);
            let b2 = blocking_box(rng, object, goal);
            let pts = [gripper, object, goal];
            if !box_ok(&b1, &pts) || !box_ok(&b2, &pts) {
                return None;
            }
            // keep a navigable gap between the two boxes
            let gap_x = (b1.min[0] - b2.max[0]).max(b2.min[0] - b1.max[0]);
            let gap_y = (b1.min[1] - b2.max[1]).max(b2.min[1] - b1.max[1]);
            if gap_x.max(gap_y) < 0.15 {
                return None;
            }
            (goal, vec![b1, b2])
        }
    };
    Some(WorldState {
        gripper,
        gripper_closed: false,
        object,
        goal,
        obstacles,
        step_index: 0,
    })
}

/// Rolls the expert forward from `initial`; `None` if it exceeds `max_steps`.
pub fn expert_rollout(initial: &WorldState, instruction_id: u32, max_steps: usize) -> Option<(Vec<WorldState>, Vec<Action>)> {
    let mut observations = vec![initial.clone()];
    let mut actions = Vec::new();
    let mut state = initial.clone();
    while !task_complete(&state, instruction_id) {
        if actions.len() >= max_steps {
            return None;
        }
        let a = scripted_expert(&state, instruction_id);
        state = step(&state, a);
        actions.push(a);
        observations.push(state.clone());
    }
    Some((observations, actions))
}

/// Deterministic episode for `(difficulty, seed)`. Layouts the expert cannot
/// finish within the difficulty's horizon bound are redrawn from derived
/// seeds.
pub fn generate_episode(difficulty: Difficulty, seed: u64) -> Episode {
    let stream = SeedStream::new(seed).child(difficulty.name());
    let id = difficulty.instruction_id();
    for attempt in 0u64.. {
        let mut rng = stream.index(attempt).rng("layout");
        let Some(initial) = layout(difficulty, &mut rng) else { continue };
        let Some((observations, actions)) = expert_rollout(&initial, id, difficulty.max_horizon()) else {
            continue;
        };
        if difficulty.success(observations.last().expect("nonempty")) {
            return Episode {
                instruction_id: id,
                difficulty,
                observations,
                actions,
            };
        }
    }
    unreachable!("attempt counter is unbounded")
}
