//! Scripted waypoint-following expert.
//!
//! Each call plans a shortest path on the visibility graph spanned by the
//! current position, the target, and obstacle corners pushed outward by
//! [`WAYPOINT_INFLATION`], then steps toward the first waypoint. The plan is
//! recomputed from the state alone, so the expert is a pure function of the
//! observation.

use super::env::{Action, WorldState, MAX_STEP};
use super::geometry::{dist, Aabb, Point};
use super::Difficulty;

pub const WAYPOINT_INFLATION: f64 = 0.05;
/// Clearance every planned segment keeps from obstacle faces.
pub const PATH_CLEARANCE: f64 = 0.04;
/// Positions closer than this count as coincident.
pub const ARRIVAL_EPS: f64 = 1e-6;

pub const GRIP_OPEN: f64 = -1.0;
pub const GRIP_CLOSED: f64 = 1.0;

fn blocked(p: Point, q: Point, boxes: &[Aabb]) -> bool {
    boxes.iter().any(|b| b.segment_blocked(p, q))
}

/// Waypoint sequence from `start` to `target` (excluding `start`), or `None`
/// when the target is unreachable.
pub fn plan_path(start: Point, target: Point, obstacles: &[Aabb]) -> Option<Vec<Point>> {
    let solid: Vec<Aabb> = obstacles.iter().map(|b| b.inflate(PATH_CLEARANCE)).collect();
    // a start inside a clearance band may leave it through the band itself
    let from_start: Vec<Aabb> = obstacles
        .iter()
        .zip(&solid)
        .map(|(b, s)| if s.contains_open(start) { *b } else { *s })
        .collect();
    if !blocked(start, target, &from_start) {
        return Some(vec![target]);
    }
    let mut nodes = vec![start, target];
    for b in obstacles {
        for c in b.inflate(WAYPOINT_INFLATION).corners() {
            let inside_square = (0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]);
            if inside_square && !solid.iter().any(|s| s.contains_open(c)) {
                nodes.push(c);
            }
        }
    }
    let n = nodes.len();
    let mut best = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    best[0] = 0.0;
    for _ in 0..n {
        let Some(u) = (0..n)
            .filter(|&i| !done[i] && best[i].is_finite())
            .min_by(|&a, &b| best[a].total_cmp(&best[b]))
        else {
            break;
        };
        done[u] = true;
        if u == 1 {
            break;
        }
        for v in 0..n {
            let boxes = if u == 0 { &from_start } else { &solid };
            if done[v] || blocked(nodes[u], nodes[v], boxes) {
                continue;
            }
            let cand = best[u] + dist(nodes[u], nodes[v]);
            if cand < best[v] {
                best[v] = cand;
                prev[v] = u;
            }
        }
    }
    if !best[1].is_finite() {
        return None;
    }
    let mut path = vec![nodes[1]];
    let mut cur = 1;
    while prev[cur] != 0 {
        cur = prev[cur];
        path.push(nodes[cur]);
    }
    path.reverse();
    Some(path)
}

/// Motion toward `target` along the planned path, scaled so neither axis
/// exceeds the step bound.
pub fn motion_toward(from: Point, target: Point, obstacles: &[Aabb]) -> Point {
    let waypoint = plan_path(from, target, obstacles)
        .and_then(|p| p.first().copied())
        .unwrap_or(target);
    let d = [waypoint[0] - from[0], waypoint[1] - from[1]];
    let scale = d[0].abs().max(d[1].abs()) / MAX_STEP;
    if scale > 1.0 {
        [
            (d[0] / scale).clamp(-MAX_STEP, MAX_STEP),
            (d[1] / scale).clamp(-MAX_STEP, MAX_STEP),
        ]
    } else {
        d
    }
}

fn transports(instruction_id: u32) -> bool {
    Difficulty::from_instruction(instruction_id).is_none_or(Difficulty::transports)
}

/// Whether the task encoded by `instruction_id` is complete in `state`.
pub fn task_complete(state: &WorldState, instruction_id: u32) -> bool {
    if transports(instruction_id) {
        !state.gripper_closed && dist(state.object, state.goal) <= ARRIVAL_EPS
    } else {
        state.gripper_closed && dist(state.gripper, state.object) <= ARRIVAL_EPS
    }
}

/// The expert action for `state` under the task `instruction_id`.
pub fn scripted_expert(state: &WorldState, instruction_id: u32) -> Action {
    let g = state.gripper;
    let pick_only = !transports(instruction_id);
    if state.holding() {
        if pick_only {
            return Action::new(0.0, 0.0, GRIP_CLOSED);
        }
        if dist(state.object, state.goal) <= ARRIVAL_EPS {
            return Action::new(0.0, 0.0, GRIP_OPEN);
        }
        // carry: bring the object, which rides at a fixed offset, onto the goal
        let target = [
            state.goal[0] + g[0] - state.object[0],
            state.goal[1] + g[1] - state.object[1],
        ];
        let m = motion_toward(g, target, &state.obstacles);
        return Action::new(m[0], m[1], GRIP_CLOSED);
    }
    if !pick_only && dist(state.object, state.goal) <= ARRIVAL_EPS {
        return Action::new(0.0, 0.0, GRIP_OPEN);
    }
    if dist(g, state.object) <= ARRIVAL_EPS {
        return Action::new(0.0, 0.0, GRIP_CLOSED);
    }
    let m = motion_toward(g, state.object, &state.obstacles);
    Action::new(m[0], m[1], GRIP_OPEN)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> WorldState {
        WorldState {
            gripper: [0.1, 0.1],
            gripper_closed: false,
            object: [0.5, 0.3],
            goal: [0.8, 0.8],
            obstacles: vec![],
            step_index: 0,
        }
    }

    #[test]
    fn holding_at_goal_opens_without_motion() {
        let mut s = base();
        s.gripper = s.goal;
        s.object = s.goal;
        s.gripper_closed = true;
        assert_eq!(scripted_expert(&s, 2), Action::new(0.0, 0.0, GRIP_OPEN));
    }

    #[test]
    fn free_line_moves_along_direction() {
        let s = base();
        let a = scripted_expert(&s, 0);
        // direction (0.4, 0.2), scaled so the x component is the step bound
        assert!((a.dx - 0.08).abs() < 1e-15);
        assert!((a.dy - 0.04).abs() < 1e-15);
        assert_eq!(a.grip, GRIP_OPEN);
        let cross = a.dx * 0.2 - a.dy * 0.4;
        assert!(cross.abs() < 1e-15);
    }

    #[test]
    fn short_final_move_lands_on_target() {
        let mut s = base();
        s.gripper = [0.47, 0.29];
        let a = scripted_expert(&s, 0);
        assert!((a.dx - 0.03).abs() < 1e-12 && (a.dy - 0.01).abs() < 1e-12);
    }

    #[test]
    fn obstacle_diverts_to_corner_waypoint() {
        let mut s = base();
        s.gripper = [0.1, 0.5];
        s.object = [0.9, 0.5];
        let b = Aabb::new([0.4, 0.35], [0.6, 0.7]);
        s.obstacles = vec![b];
        // shortest route passes below the box through its lower-left corner
        let corner = [0.4 - WAYPOINT_INFLATION, 0.35 - WAYPOINT_INFLATION];
        let path = plan_path(s.gripper, s.object, &s.obstacles).unwrap();
        assert_eq!(path[0], corner);
        let a = scripted_expert(&s, 1);
        let d = [corner[0] - 0.1, corner[1] - 0.5];
        let scale = d[0].abs().max(d[1].abs()) / MAX_STEP;
        assert!((a.dx - d[0] / scale).abs() < 1e-12);
        assert!((a.dy - d[1] / scale).abs() < 1e-12);
    }

    #[test]
    fn at_object_closes() {
        let mut s = base();
        s.gripper = s.object;
        assert_eq!(scripted_expert(&s, 1), Action::new(0.0, 0.0, GRIP_CLOSED));
    }

    #[test]
    fn start_against_a_face_still_gets_around() {
        let mut s = base();
        let b = Aabb::new([0.4, 0.35], [0.6, 0.7]);
        s.obstacles = vec![b];
        s.object = [0.1, 0.5];
        s.gripper = [0.6, 0.5];
        let path = plan_path(s.gripper, s.object, &s.obstacles).unwrap();
        assert_ne!(path[0], s.object);
        let (states, _) = crate::taskgen::expert_rollout(&s, 0, 60).unwrap();
        assert!(dist(states.last().unwrap().gripper, s.object) <= ARRIVAL_EPS);
    }
}
