use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Axis-aligned box; its open interior is solid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn new(min: Point, max: Point) -> Self {
        Aabb { min, max }
    }

    pub fn inflate(&self, margin: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }

    pub fn contains_open(&self, p: Point) -> bool {
        (0..2).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    /// Euclidean distance from `p` to the closed box (0 inside).
    pub fn distance(&self, p: Point) -> f64 {
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx.hypot(dy)
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            [self.min[0], self.min[1]],
            [self.max[0], self.min[1]],
            [self.max[0], self.max[1]],
            [self.min[0], self.max[1]],
        ]
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    /// First time `t in [0, 1]` at which `p + t * d` enters the open interior,
    /// with the axis whose face is crossed. Grazing a face or corner is not an
    /// entry.
    pub fn entry(&self, p: Point, d: Point) -> Option<(f64, usize)> {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let mut axis = 0;
        for a in 0..2 {
            if d[a] == 0.0 {
                if p[a] <= self.min[a] || p[a] >= self.max[a] {
                    return None;
                }
                continue;
            }
            let t1 = (self.min[a] - p[a]) / d[a];
            let t2 = (self.max[a] - p[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_enter {
                t_enter = lo;
                axis = a;
            }
            t_exit = t_exit.min(hi);
        }
        if t_enter < t_exit && t_exit > 0.0 && t_enter < 1.0 {
            Some((t_enter.max(0.0), axis))
        } else {
            None
        }
    }

    pub fn segment_blocked(&self, p: Point, q: Point) -> bool {
        self.entry(p, [q[0] - p[0], q[1] - p[1]]).is_some()
    }
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn clamp_unit(p: Point) -> Point {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}
