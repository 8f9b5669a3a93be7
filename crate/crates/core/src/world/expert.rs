//! Scripted two-mode demonstrator: IDM speed control plus pure-pursuit
//! tracking of a lateral offset path.

use super::kinematics::{advance, rollout_bicycle, Control};
use super::{Frenet, SceneContext, Trajectory, VehicleState};
use crate::config::{IdmConfig, WorldConfig};
use crate::error::Result;

/// Side on which the expert passes a blocking obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertMode {
    Left,
    Right,
}

impl ExpertMode {
    pub fn from_seed(mode_seed: u64) -> Self {
        if mode_seed.is_multiple_of(2) {
            ExpertMode::Left
        } else {
            ExpertMode::Right
        }
    }

    fn sign(&self) -> f64 {
        match self {
            ExpertMode::Left => 1.0,
            ExpertMode::Right => -1.0,
        }
    }
}

/// Intelligent driver model acceleration. `lead` is (bumper gap, lead speed).
pub fn idm_accel(speed: f64, desired_speed: f64, lead: Option<(f64, f64)>, p: &IdmConfig) -> f64 {
    let v0 = desired_speed.max(0.1);
    let free = p.max_accel * (1.0 - (speed / v0).powf(p.exponent));
    let interaction = match lead {
        Some((gap, lead_speed)) => {
            let closing = speed - lead_speed;
            let desired_gap = p.min_gap
                + (speed * p.headway + speed * closing / (2.0 * (p.max_accel * p.comfortable_decel).sqrt()))
                    .max(0.0);
            -p.max_accel * (desired_gap / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    free + interaction
}

const PASS_CLEARANCE: f64 = 3.2;
const PASS_HOLD: f64 = 25.0;
const PASS_RAMP: f64 = 35.0;
const PATH_MARGIN: f64 = 0.5;
const PARKED_MIN_OFFSET: f64 = 0.4;

/// Lateral target path around the nearest parked agent: stopped, inside the
/// ego's path, but off the centerline. A stopped car on the centerline is
/// queued behind instead.
struct OffsetPath {
    obstacle: Option<(f64, f64)>,
    side: f64,
}

impl OffsetPath {
    fn new(scene: &SceneContext, ego: &Frenet, mode: ExpertMode, world: &WorldConfig) -> Self {
        let obstacle = scene
            .agents
            .iter()
            .filter(|a| a.state.speed < 0.5)
            .filter_map(|a| {
                let f = scene.centerline.project(a.state.x, a.state.y);
                let blocks = f.lateral.abs() < a.half_width + world.ego_half_width + PATH_MARGIN;
                let parked = f.lateral.abs() >= PARKED_MIN_OFFSET;
                let relevant = f.s > ego.s - PASS_HOLD;
                (blocks && parked && relevant).then_some((f.s, f.lateral))
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Self {
            obstacle,
            side: mode.sign(),
        }
    }

    fn lateral_at(&self, s: f64) -> f64 {
        let Some((s_obs, l_obs)) = self.obstacle else {
            return 0.0;
        };
        let d = (s - s_obs).abs();
        let weight = if d <= PASS_HOLD {
            1.0
        } else if d >= PASS_HOLD + PASS_RAMP {
            0.0
        } else {
            let u = 1.0 - (d - PASS_HOLD) / PASS_RAMP;
            u * u * (3.0 - 2.0 * u)
        };
        weight * (l_obs + self.side * PASS_CLEARANCE)
    }
}

/// Constant-acceleration, constant-lateral-rate forecast of an agent in
/// centerline coordinates.
struct AgentForecast {
    s: f64,
    lateral: f64,
    speed: f64,
    accel: f64,
    lateral_rate: f64,
    half_length: f64,
    half_width: f64,
}

impl AgentForecast {
    fn at(&self, tau: f64) -> (f64, f64, f64) {
        let (s, v) = if self.accel < 0.0 && self.speed + self.accel * tau <= 0.0 {
            let t_stop = -self.speed / self.accel;
            (self.s + self.speed * t_stop + 0.5 * self.accel * t_stop * t_stop, 0.0)
        } else {
            (self.s + self.speed * tau + 0.5 * self.accel * tau * tau, self.speed + self.accel * tau)
        };
        let mut l = self.lateral + self.lateral_rate * tau;
        if l * self.lateral < 0.0 {
            l = 0.0;
        }
        (s, l, v)
    }
}

/// Plans the expert trajectory for `scene`. `mode_seed` parity picks the
/// passing side when a stationary agent blocks the lane.
pub fn expert_demonstrate(
    scene: &SceneContext,
    mode_seed: u64,
    world: &WorldConfig,
    idm: &IdmConfig,
) -> Result<Trajectory> {
    scene.validate(world)?;
    let start = *scene.ego();
    let cl = &scene.centerline;
    let ego_f = cl.project(start.x, start.y);
    let path = OffsetPath::new(scene, &ego_f, ExpertMode::from_seed(mode_seed), world);
    let forecasts: Vec<AgentForecast> = scene
        .agents
        .iter()
        .map(|a| {
            let f = cl.project(a.state.x, a.state.y);
            let slip = super::wrap_angle(a.state.heading - f.tangent);
            AgentForecast {
                s: f.s,
                lateral: f.lateral,
                speed: a.state.speed,
                accel: a.state.accel,
                lateral_rate: a.state.speed * slip.tan(),
                half_length: a.half_length,
                half_width: a.half_width,
            }
        })
        .collect();

    let mut state: VehicleState = start;
    let mut controls = Vec::with_capacity(world.horizon);
    for k in 0..world.horizon {
        let tau = k as f64 * world.dt;
        let f = cl.project(state.x, state.y);
        let lead = forecasts
            .iter()
            .filter_map(|a| {
                let (s, l, v) = a.at(tau);
                let in_path = (l - path.lateral_at(s)).abs() < a.half_width + world.ego_half_width + PATH_MARGIN;
                (in_path && s > f.s).then_some((s - f.s - world.ego_half_length - a.half_length, v))
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let accel = idm_accel(state.speed, scene.speed_limit, lead, idm).clamp(-idm.max_decel, idm.max_accel);

        let lookahead = (1.5 * state.speed).max(12.0);
        let target = cl.pose_at(f.s + lookahead, path.lateral_at(f.s + lookahead));
        let local = state.pose().to_local(&target);
        let dist = local.x.hypot(local.y).max(1e-6);
        let alpha = local.y.atan2(local.x);
        let steer = (2.0 * world.wheelbase * alpha.sin() / dist)
            .atan()
            .clamp(-world.steer_max, world.steer_max);

        let control = Control { accel, steer };
        state = advance(&state, control, world.dt, world);
        controls.push(control);
    }
    rollout_bicycle(&start, &controls, world.dt, world)
}
