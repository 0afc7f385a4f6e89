//! Waypoint-following kinematics with swept collision checks.

use super::map::GridMap;

/// Continuous robot pose in cell units. Heading is radians in [-pi, pi),
/// measured counterclockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    /// Rotate an egocentric offset into the world frame.
    pub fn ego_to_world(&self, ex: f64, ey: f64) -> (f64, f64) {
        let (sin, cos) = self.heading.sin_cos();
        (self.x + ex * cos - ey * sin, self.y + ex * sin + ey * cos)
    }

    /// Rotate a world-frame displacement into this pose's egocentric frame.
    pub fn world_to_ego(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (sin, cos) = self.heading.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        (dx * cos + dy * sin, -dx * sin + dy * cos)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = a.rem_euclid(2.0 * PI);
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

/// Outcome of executing one waypoint chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub pose: Pose,
    /// Contact events; motion stops at the first one, so 0 or 1 per call.
    pub collisions: u32,
    pub distance_traveled: f64,
}

/// Stop this far short of the first contact point, along the segment.
const CONTACT_MARGIN: f64 = 0.1;

/// Execute egocentric per-step waypoint deltas. Deltas are accumulated into
/// waypoints in the world frame using the *initial* heading, and the robot
/// follows straight segments between them. On the first swept contact with
/// an occupied cell, motion stops at the contact point minus a 0.1-cell
/// margin, the collision count becomes 1, and remaining waypoints are
/// dropped. The final heading is the direction of the last actual motion
/// (unchanged if nothing moved).
pub fn step_waypoints(map: &GridMap, pose: &Pose, deltas: &[[f64; 2]]) -> StepResult {
    let mut pos = (pose.x, pose.y);
    let mut heading = pose.heading;
    let mut traveled = 0.0;
    let mut collisions = 0;

    // world-frame waypoints from cumulative egocentric deltas
    let mut waypoints = Vec::with_capacity(deltas.len());
    let mut acc = (0.0, 0.0);
    for d in deltas {
        acc.0 += d[0];
        acc.1 += d[1];
        waypoints.push(pose.ego_to_world(acc.0, acc.1));
    }

    for target in waypoints {
        let (dx, dy) = (target.0 - pos.0, target.1 - pos.1);
        let len = (dx * dx + dy * dy).sqrt();
        if len < 1e-12 {
            continue;
        }
        let dir = (dx / len, dy / len);
        match first_hit(map, pos, dir, len) {
            Some(t_hit) => {
                let stop = (t_hit - CONTACT_MARGIN).max(0.0);
                pos = (pos.0 + dir.0 * stop, pos.1 + dir.1 * stop);
                traveled += stop;
                if stop > 1e-12 {
                    heading = dir.1.atan2(dir.0);
                }
                collisions = 1;
                break;
            }
            None => {
                pos = target;
                traveled += len;
                heading = dir.1.atan2(dir.0);
            }
        }
    }

    StepResult {
        pose: Pose::new(pos.0, pos.1, heading),
        collisions,
        distance_traveled: traveled,
    }
}

/// True when the straight segment from `a` to `b` sweeps through an occupied
/// cell (the start cell is not checked; it is assumed free).
pub fn segment_blocked(map: &GridMap, a: (f64, f64), b: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    if len < 1e-12 {
        return false;
    }
    first_hit(map, a, (dx / len, dy / len), len).is_some()
}

/// Distance along the ray (origin, dir) at which it first enters an occupied
/// cell, within max_t. Grid traversal visits each boundary crossing in order.
fn first_hit(map: &GridMap, origin: (f64, f64), dir: (f64, f64), max_t: f64) -> Option<f64> {
    let (mut cx, mut cy) = (origin.0.floor() as i32, origin.1.floor() as i32);

    let step_x = if dir.0 > 0.0 { 1 } else { -1 };
    let step_y = if dir.1 > 0.0 { 1 } else { -1 };
    let next_boundary = |c: i32, step: i32| -> f64 {
        if step > 0 {
            (c + 1) as f64
        } else {
            c as f64
        }
    };
    let mut t_max_x = if dir.0 != 0.0 {
        (next_boundary(cx, step_x) - origin.0) / dir.0
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dir.1 != 0.0 {
        (next_boundary(cy, step_y) - origin.1) / dir.1
    } else {
        f64::INFINITY
    };
    let t_delta_x = if dir.0 != 0.0 {
        1.0 / dir.0.abs()
    } else {
        f64::INFINITY
    };
    let t_delta_y = if dir.1 != 0.0 {
        1.0 / dir.1.abs()
    } else {
        f64::INFINITY
    };

    loop {
        let t = t_max_x.min(t_max_y);
        if t > max_t {
            return None;
        }
        if t_max_x <= t_max_y {
            cx += step_x;
            t_max_x += t_delta_x;
        } else {
            cy += step_y;
            t_max_y += t_delta_y;
        }
        if map.occupied(cx, cy) {
            return Some(t);
        }
    }
}
