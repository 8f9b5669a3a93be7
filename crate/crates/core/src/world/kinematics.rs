use serde::{Deserialize, Serialize};

use super::{wrap_angle, Pose, Trajectory, VehicleState};
use crate::config::WorldConfig;
use crate::error::{Error, Result};

/// One step of bicycle-model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    /// m/s^2
    pub accel: f64,
    /// Front-wheel angle, radians.
    pub steer: f64,
}

/// Advances the kinematic bicycle by one step.
///
/// Speed changes linearly over the step and is clamped to `[0, v_max]`; the
/// path over the step is the exact circular arc of curvature
/// `tan(steer) / wheelbase`, so constant inputs trace the closed-form circle.
pub fn advance(state: &VehicleState, control: Control, dt: f64, world: &WorldConfig) -> VehicleState {
    let v0 = state.speed;
    let v1 = (v0 + control.accel * dt).clamp(0.0, world.v_max);
    let dist = 0.5 * (v0 + v1) * dt;
    let curvature = control.steer.tan() / world.wheelbase;
    let turn = curvature * dist;
    let h0 = state.heading;
    let (dx, dy) = if turn.abs() < 1e-9 {
        // second-order expansion of the arc
        let mid = h0 + 0.5 * turn;
        (dist * mid.cos(), dist * mid.sin())
    } else {
        (
            ((h0 + turn).sin() - h0.sin()) / curvature,
            (h0.cos() - (h0 + turn).cos()) / curvature,
        )
    };
    VehicleState {
        x: state.x + dx,
        y: state.y + dy,
        heading: wrap_angle(h0 + turn),
        speed: v1,
        accel: (v1 - v0) / dt,
    }
}

/// Integrates a control sequence from `start`, returning one pose per control.
pub fn rollout_bicycle(
    start: &VehicleState,
    controls: &[Control],
    dt: f64,
    world: &WorldConfig,
) -> Result<Trajectory> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if controls.is_empty() {
        return Err(Error::InvalidInput("empty control sequence".into()));
    }
    for (i, c) in controls.iter().enumerate() {
        if !(c.accel.is_finite() && c.steer.is_finite()) {
            return Err(Error::NonFinite(format!("control {i}: accel {} steer {}", c.accel, c.steer)));
        }
        if c.steer.abs() > world.steer_max + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "control {i}: steer {} exceeds limit {}",
                c.steer, world.steer_max
            )));
        }
    }
    let mut state = VehicleState {
        speed: start.speed.clamp(0.0, world.v_max),
        ..*start
    };
    let mut poses: Vec<Pose> = Vec::with_capacity(controls.len());
    for c in controls {
        state = advance(&state, *c, dt, world);
        poses.push(state.pose());
    }
    Trajectory::new(poses, dt)
}
