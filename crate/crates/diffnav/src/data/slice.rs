//! Slicing trajectories into supervised samples.

use rand::Rng;

use super::expert::Trajectory;
use crate::world::{Observation, Pose};
use crate::{Error, Result};

/// Supervised tuple: observation context, hindsight goal, normalized future
/// waypoint deltas, and the normalized temporal distance to the goal.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// P+1 observations, oldest first; last is the current frame.
    pub context: Vec<Observation>,
    pub goal: Observation,
    /// H per-step egocentric deltas in the frame of the current pose,
    /// divided by the action normalizer (componentwise in [-1, 1]).
    pub actions: Vec<[f32; 2]>,
    /// (goal index - current index) / dist_max, in [0, 1].
    pub dist_label: f32,
    /// Generation-time provenance for replay validation; not serialized.
    pub replay: Option<ReplayInfo>,
}

/// Enough context to re-execute the expert's segment in the simulator.
#[derive(Debug, Clone)]
pub struct ReplayInfo {
    pub map_seed: u64,
    pub start_pose: Pose,
    /// World positions of poses t+1 ..= t+H.
    pub future: Vec<(f64, f64)>,
}

/// Slice parameters; defaults are the artifact's declared constants.
#[derive(Debug, Clone, Copy)]
pub struct SliceParams {
    /// P: past frames kept alongside the current one.
    pub context_len: usize,
    /// H: future waypoint deltas per sample.
    pub horizon: usize,
    /// d_max: hindsight goal window and distance normalizer, in timesteps.
    pub dist_max: usize,
    /// d_norm: per-step delta normalizer, in cells.
    pub action_norm: f64,
}

impl Default for SliceParams {
    fn default() -> Self {
        SliceParams {
            context_len: 3,
            horizon: 8,
            dist_max: 20,
            action_norm: 2.0,
        }
    }
}

/// Clamped context indices [t-P ..= t]: positions before the start repeat
/// frame 0. For t >= P this is the plain window.
pub fn context_indices(t: usize, context_len: usize) -> Vec<usize> {
    (0..=context_len)
        .map(|i| (t + i).saturating_sub(context_len))
        .collect()
}

/// One sample per index t in [P, L-H-1]. The goal index is drawn uniformly
/// from [t, min(t+d_max, L-1)]; actions are the consecutive pose deltas
/// t..t+H rotated into the frame of pose t and normalized.
pub fn slice_samples(
    traj: &Trajectory,
    params: &SliceParams,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingSample>> {
    let (p, h) = (params.context_len, params.horizon);
    let l = traj.len();
    if l < p + h + 1 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(l - h - p);
    for t in p..=(l - h - 1) {
        let g_hi = (t + params.dist_max).min(l - 1);
        let g = rng.gen_range(t..=g_hi);
        out.push(make_sample(traj, t, g, params)?);
    }
    Ok(out)
}

fn make_sample(
    traj: &Trajectory,
    t: usize,
    g: usize,
    params: &SliceParams,
) -> Result<TrainingSample> {
    let (p, h) = (params.context_len, params.horizon);
    if g < t || t + h >= traj.len() {
        return Err(Error::InvalidArgument(format!(
            "sample indices t={t}, g={g} out of range for length {}",
            traj.len()
        )));
    }
    let context: Vec<Observation> = context_indices(t, p)
        .into_iter()
        .map(|i| traj.observations[i].clone())
        .collect();
    let pose_t = traj.poses[t];
    let mut actions = Vec::with_capacity(h);
    let mut future = Vec::with_capacity(h);
    let (sin, cos) = pose_t.heading.sin_cos();
    for i in 1..=h {
        let (a, b) = (traj.poses[t + i - 1], traj.poses[t + i]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        // world delta rotated into the frame of pose t
        let ex = (dx * cos + dy * sin) / params.action_norm;
        let ey = (-dx * sin + dy * cos) / params.action_norm;
        actions.push([ex as f32, ey as f32]);
        future.push((b.x, b.y));
    }
    Ok(TrainingSample {
        context,
        goal: traj.observations[g].clone(),
        actions,
        dist_label: (g - t) as f32 / params.dist_max as f32,
        replay: Some(ReplayInfo {
            map_seed: traj.map_seed,
            start_pose: pose_t,
            future,
        }),
    })
}

/// Denormalize sample actions back to egocentric cell deltas.
pub fn denormalize_actions(actions: &[[f32; 2]], action_norm: f64) -> Vec<[f64; 2]> {
    actions
        .iter()
        .map(|a| [a[0] as f64 * action_norm, a[1] as f64 * action_norm])
        .collect()
}
