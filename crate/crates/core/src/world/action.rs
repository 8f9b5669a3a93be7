//! Action vectors: for each planned pose, the displacement from the previous
//! pose and the absolute heading, all in the ego frame at decision time.
//!
//! Every action inside [`action_bounds`] decodes to a kinematically feasible
//! trajectory, so a policy with a bounded output cannot leave the feasible set.

use super::{wrap_angle, Pose, Trajectory};
use crate::config::WorldConfig;
use crate::error::{Error, Result};

/// Largest backward displacement allowed per step.
pub const MAX_BACKWARD_STEP: f64 = 0.5;

/// Physical per-coordinate box `(lo, hi)` of the action vector.
pub fn action_bounds(world: &WorldConfig) -> (Vec<f64>, Vec<f64>) {
    let forward = world.v_max * world.dt;
    let mut lo = Vec::with_capacity(world.action_dim());
    let mut hi = Vec::with_capacity(world.action_dim());
    for _ in 0..world.horizon {
        lo.extend([-MAX_BACKWARD_STEP, -world.max_lateral_step, -world.max_heading]);
        hi.extend([forward, world.max_lateral_step, world.max_heading]);
    }
    (lo, hi)
}

pub fn trajectory_to_action(start: &Pose, trajectory: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * trajectory.len());
    let mut prev = Pose { x: 0.0, y: 0.0, heading: 0.0 };
    for p in trajectory.poses() {
        let local = start.to_local(p);
        out.extend([local.x - prev.x, local.y - prev.y, local.heading]);
        prev = local;
    }
    out
}

pub fn action_to_trajectory(start: &Pose, action: &[f64], world: &WorldConfig) -> Result<Trajectory> {
    if action.len() != world.action_dim() {
        return Err(Error::Shape(format!(
            "action has {} entries, expected {}",
            action.len(),
            world.action_dim()
        )));
    }
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    let mut local = Pose { x: 0.0, y: 0.0, heading: 0.0 };
    let poses = action
        .chunks_exact(3)
        .map(|c| {
            local = Pose {
                x: local.x + c[0],
                y: local.y + c[1],
                heading: wrap_angle(c[2]),
            };
            start.to_world(&local)
        })
        .collect();
    Trajectory::new(poses, world.dt)
}

/// Whether every coordinate lies inside [`action_bounds`].
pub fn action_in_bounds(action: &[f64], world: &WorldConfig) -> bool {
    let (lo, hi) = action_bounds(world);
    action.len() == lo.len() && action.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| v >= l && v <= h)
}
