use serde::{Deserialize, Serialize};

use super::geometry::{clamp_unit, dist, Aabb, Point};

/// Largest per-axis gripper displacement in one step.
pub const MAX_STEP: f64 = 0.08;
/// Gripper-object distance under which a closed gripper carries the object.
pub const GRASP_RADIUS: f64 = 0.03;
/// Length of the observation feature vector.
pub const OBS_DIM: usize = 16;
/// Obstacle slots in the feature vector.
pub const MAX_OBSTACLES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: Point,
    pub gripper_closed: bool,
    pub object: Point,
    pub goal: Point,
    pub obstacles: Vec<Aabb>,
    pub step_index: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, grip: f64) -> Self {
        Action { dx, dy, grip }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.grip]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Action::new(v[0], v[1], v[2])
    }

    /// Clips motion to the step bound and the grip to `[-1, 1]`.
    pub fn clipped(self) -> Self {
        Action {
            dx: self.dx.clamp(-MAX_STEP, MAX_STEP),
            dy: self.dy.clamp(-MAX_STEP, MAX_STEP),
            grip: self.grip.clamp(-1.0, 1.0),
        }
    }
}

impl WorldState {
    /// Feature layout: gripper xy, closed flag, object xy, goal xy, two boxes
    /// as (min x, min y, max x, max y) zero-padded, obstacle count / 2.
    pub fn features(&self) -> [f64; OBS_DIM] {
        let mut f = [0.0; OBS_DIM];
        f[..2].copy_from_slice(&self.gripper);
        f[2] = if self.gripper_closed { 1.0 } else { 0.0 };
        f[3..5].copy_from_slice(&self.object);
        f[5..7].copy_from_slice(&self.goal);
        for (i, b) in self.obstacles.iter().take(MAX_OBSTACLES).enumerate() {
            f[7 + 4 * i..9 + 4 * i].copy_from_slice(&b.min);
            f[9 + 4 * i..11 + 4 * i].copy_from_slice(&b.max);
        }
        f[15] = self.obstacles.len() as f64 * 0.5;
        f
    }

    /// Inverse of [`WorldState::features`]; the step index is not encoded.
    pub fn from_features(f: &[f64], step_index: u32) -> Self {
        let count = ((f[15] * 2.0).round() as usize).min(MAX_OBSTACLES);
        WorldState {
            gripper: [f[0], f[1]],
            gripper_closed: f[2] > 0.5,
            object: [f[3], f[4]],
            goal: [f[5], f[6]],
            obstacles: (0..count)
                .map(|i| Aabb::new([f[7 + 4 * i], f[8 + 4 * i]], [f[9 + 4 * i], f[10 + 4 * i]]))
                .collect(),
            step_index,
        }
    }

    pub fn holding(&self) -> bool {
        self.gripper_closed && dist(self.gripper, self.object) < GRASP_RADIUS
    }
}

fn earliest_entry(p: Point, d: Point, obstacles: &[Aabb]) -> Option<(f64, usize, &Aabb)> {
    obstacles
        .iter()
        .filter_map(|b| b.entry(p, d).map(|(t, a)| (t, a, b)))
        .min_by(|x, y| x.0.total_cmp(&y.0))
}

/// Moves from `p` by `d`, stopping at the first obstacle face and sliding the
/// remaining tangential motion once.
fn move_blocked(p: Point, d: Point, obstacles: &[Aabb]) -> Point {
    let Some((t, axis, b)) = earliest_entry(p, d, obstacles) else {
        return clamp_unit([p[0] + d[0], p[1] + d[1]]);
    };
    let mut stop = [p[0] + t * d[0], p[1] + t * d[1]];
    stop[axis] = if d[axis] > 0.0 { b.min[axis] } else { b.max[axis] };
    let mut slide = [(1.0 - t) * d[0], (1.0 - t) * d[1]];
    slide[axis] = 0.0;
    let end = match earliest_entry(stop, slide, obstacles) {
        None => [stop[0] + slide[0], stop[1] + slide[1]],
        Some((t2, axis2, b2)) => {
            let mut s = [stop[0] + t2 * slide[0], stop[1] + t2 * slide[1]];
            s[axis2] = if slide[axis2] > 0.0 { b2.min[axis2] } else { b2.max[axis2] };
            s
        }
    };
    clamp_unit(end)
}

/// Environment dynamics. Motion is clipped, obstacles block the gripper, and
/// a gripper that was closed near the object and stays closed carries it.
pub fn step(state: &WorldState, action: Action) -> WorldState {
    let a = action.clipped();
    let closed = a.grip > 0.0;
    let attached = state.holding() && closed;
    let gripper = move_blocked(state.gripper, [a.dx, a.dy], &state.obstacles);
    let moved = [gripper[0] - state.gripper[0], gripper[1] - state.gripper[1]];
    let object = if attached {
        clamp_unit([state.object[0] + moved[0], state.object[1] + moved[1]])
    } else {
        state.object
    };
    WorldState {
        gripper,
        gripper_closed: closed,
        object,
        goal: state.goal,
        obstacles: state.obstacles.clone(),
        step_index: state.step_index + 1,
    }
}
