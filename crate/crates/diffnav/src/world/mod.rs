//! 2D occupancy gridworld: maps, egocentric observations, kinematics.

mod map;
mod motion;
mod observe;

pub use map::{
    generate_map, geodesic_distance, geodesic_field, ring_junction_map, ring_junction_poses,
    sample_far_pair, Cell, GridMap, MapParams, MAP_SIZE,
};
pub use motion::{segment_blocked, step_waypoints, wrap_angle, Pose, StepResult};
pub use observe::{render_observation, Observation, OBS_SIZE};
