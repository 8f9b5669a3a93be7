//! Toy driving world: kinematics, scenarios, scripted expert, state encoder.

mod action;
mod encoder;
mod expert;
mod kinematics;
mod scenario;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::{Error, Result};

pub use action::{action_bounds, action_in_bounds, action_to_trajectory, trajectory_to_action, MAX_BACKWARD_STEP};
pub use encoder::{
    encode_state, raw_features, Normalizer, StateEncoding, ENCODED_AGENTS, FEATURE_DIM, FIRST_AGENT_GAP, HEADING_ERROR,
    LATERAL_OFFSET,
};
pub use expert::{expert_demonstrate, idm_accel, ExpertMode};
pub use kinematics::{advance, rollout_bicycle, Control};
pub use scenario::{generate_scenario, AgentScript, Scenario, ScenarioKind};
pub(crate) use scenario::state_from_frenet;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
}

impl VehicleState {
    pub fn pose(&self) -> Pose {
        Pose {
            x: self.x,
            y: self.y,
            heading: self.heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Expresses `world` in the frame of `self`.
    pub fn to_local(&self, world: &Pose) -> Pose {
        let (s, c) = self.heading.sin_cos();
        let dx = world.x - self.x;
        let dy = world.y - self.y;
        Pose {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            heading: wrap_angle(world.heading - self.heading),
        }
    }

    /// Inverse of [`Pose::to_local`].
    pub fn to_world(&self, local: &Pose) -> Pose {
        let (s, c) = self.heading.sin_cos();
        Pose {
            x: self.x + c * local.x - s * local.y,
            y: self.y + s * local.x + c * local.y,
            heading: wrap_angle(self.heading + local.heading),
        }
    }
}

/// Fixed-horizon sequence of future poses at a uniform timestep.
///
/// The pose at decision time is not part of the trajectory; `poses[0]` is the
/// pose one `dt` later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<Pose>,
    dt: f64,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidInput(format!("trajectory dt must be positive, got {dt}")));
        }
        if poses.is_empty() {
            return Err(Error::InvalidInput("trajectory has no poses".into()));
        }
        if poses
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite()))
        {
            return Err(Error::NonFinite("trajectory pose".into()));
        }
        Ok(Self { poses, dt })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn last(&self) -> &Pose {
        self.poses.last().expect("trajectory is non-empty")
    }

    /// Largest displacement between consecutive poses, including the step
    /// from `start` when given.
    pub fn max_step(&self, start: Option<&Pose>) -> f64 {
        let mut prev = start.copied();
        let mut worst: f64 = 0.0;
        for p in &self.poses {
            if let Some(q) = prev {
                worst = worst.max(p.distance(&q));
            }
            prev = Some(*p);
        }
        worst
    }

    /// Checks the horizon length and the per-step displacement bound.
    pub fn check_feasible(&self, world: &WorldConfig, start: Option<&Pose>) -> Result<()> {
        if self.poses.len() != world.horizon {
            return Err(Error::Shape(format!(
                "trajectory has {} poses, horizon is {}",
                self.poses.len(),
                world.horizon
            )));
        }
        let bound = world.v_max * self.dt + world.feasibility_margin;
        let step = self.max_step(start);
        if step > bound {
            return Err(Error::InvalidInput(format!(
                "step displacement {step:.3} m exceeds bound {bound:.3} m"
            )));
        }
        Ok(())
    }
}

/// Surrounding vehicle with its footprint half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub state: VehicleState,
    pub half_length: f64,
    pub half_width: f64,
}

/// Arc-length coordinates of a point relative to the centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frenet {
    pub s: f64,
    /// Positive to the left of the driving direction.
    pub lateral: f64,
    /// Tangent heading of the centerline at `s`.
    pub tangent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    points: Vec<[f64; 2]>,
    arc: Vec<f64>,
}

impl Centerline {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput("centerline needs at least two points".into()));
        }
        let mut arc = Vec::with_capacity(points.len());
        arc.push(0.0);
        for w in points.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidInput("centerline arc length must strictly increase".into()));
            }
            arc.push(arc.last().unwrap() + d);
        }
        Ok(Self { points, arc })
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn arc(&self) -> &[f64] {
        &self.arc
    }

    fn segment_heading(&self, i: usize) -> f64 {
        let a = self.points[i];
        let b = self.points[i + 1];
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Projects a point. Points beyond either end extrapolate along the end
    /// segments.
    pub fn project(&self, x: f64, y: f64) -> Frenet {
        let n = self.points.len() - 1;
        let mut best = (f64::INFINITY, Frenet { s: 0.0, lateral: 0.0, tangent: 0.0 });
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[i + 1];
            let len = self.arc[i + 1] - self.arc[i];
            let (ux, uy) = ((b[0] - a[0]) / len, (b[1] - a[1]) / len);
            let (dx, dy) = (x - a[0], y - a[1]);
            let mut along = dx * ux + dy * uy;
            if i > 0 {
                along = along.max(0.0);
            }
            if i + 1 < n {
                along = along.min(len);
            }
            let (px, py) = (a[0] + along * ux, a[1] + along * uy);
            let dist = (x - px).hypot(y - py);
            if dist < best.0 {
                let lateral = ux * (y - py) - uy * (x - px);
                best = (
                    dist,
                    Frenet {
                        s: self.arc[i] + along,
                        lateral,
                        tangent: uy.atan2(ux),
                    },
                );
            }
        }
        best.1
    }

    /// World pose at arc length `s`, offset laterally, heading along the tangent.
    pub fn pose_at(&self, s: f64, lateral: f64) -> Pose {
        let n = self.points.len() - 1;
        let i = match self.arc.binary_search_by(|a| a.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        };
        let h = self.segment_heading(i);
        let along = s - self.arc[i];
        let (sh, ch) = h.sin_cos();
        let a = self.points[i];
        Pose {
            x: a[0] + along * ch - lateral * sh,
            y: a[1] + along * sh + lateral * ch,
            heading: h,
        }
    }
}

/// Snapshot of the world seen by the planner at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    /// Oldest first; the last entry is the current ego state.
    pub ego_history: Vec<VehicleState>,
    pub agents: Vec<Agent>,
    pub centerline: Centerline,
    pub corridor_half_width: f64,
    pub speed_limit: f64,
    pub goal_arc_length: f64,
}

impl SceneContext {
    pub fn ego(&self) -> &VehicleState {
        self.ego_history.last().expect("validated scene has history")
    }

    /// Scene after the ego drives the first `steps` poses of `plan`, with the
    /// agents replaced by `agents`. Speeds and accelerations of the new history
    /// entries come from finite differences.
    pub fn after_executing(&self, plan: &Trajectory, steps: usize, agents: Vec<Agent>) -> Result<SceneContext> {
        if steps == 0 || steps > plan.len() {
            return Err(Error::InvalidInput(format!(
                "cannot execute {steps} steps of a {}-pose plan",
                plan.len()
            )));
        }
        let dt = plan.dt();
        let mut history = self.ego_history.clone();
        let mut prev = *self.ego();
        for p in &plan.poses()[..steps] {
            let speed = p.distance(&prev.pose()) / dt;
            let next = VehicleState {
                x: p.x,
                y: p.y,
                heading: wrap_angle(p.heading),
                speed,
                accel: (speed - prev.speed) / dt,
            };
            history.push(next);
            prev = next;
        }
        let keep = self.ego_history.len();
        history.drain(..history.len() - keep);
        Ok(SceneContext {
            ego_history: history,
            agents,
            ..self.clone()
        })
    }

    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.ego_history.len() != world.history_len {
            return Err(Error::InvalidInput(format!(
                "ego history has {} states, expected {}",
                self.ego_history.len(),
                world.history_len
            )));
        }
        if self.agents.len() > world.max_agents {
            return Err(Error::InvalidInput(format!(
                "{} agents exceed the limit of {}",
                self.agents.len(),
                world.max_agents
            )));
        }
        let finite = |v: &VehicleState| {
            [v.x, v.y, v.heading, v.speed, v.accel].iter().all(|x| x.is_finite()) && v.speed >= 0.0
        };
        if !self.ego_history.iter().all(finite) || !self.agents.iter().all(|a| finite(&a.state)) {
            return Err(Error::NonFinite("scene vehicle state".into()));
        }
        if !(self.speed_limit > 0.0 && self.corridor_half_width > 0.0) {
            return Err(Error::InvalidInput("speed limit and corridor must be positive".into()));
        }
        Ok(())
    }
}

/// Two covering discs per footprint, centred half a wheelbase-like offset
/// ahead of and behind the reference point.
pub fn footprint_discs(pose: &Pose, half_length: f64, half_width: f64) -> [(f64, f64, f64); 2] {
    let offset = (half_length - half_width).max(0.0);
    let r = half_width * std::f64::consts::SQRT_2;
    let (s, c) = pose.heading.sin_cos();
    [
        (pose.x + offset * c, pose.y + offset * s, r),
        (pose.x - offset * c, pose.y - offset * s, r),
    ]
}

pub fn footprints_overlap(a: &Pose, a_half: (f64, f64), b: &Pose, b_half: (f64, f64)) -> bool {
    let da = footprint_discs(a, a_half.0, a_half.1);
    let db = footprint_discs(b, b_half.0, b_half.1);
    da.iter().any(|p| {
        db.iter()
            .any(|q| (p.0 - q.0).hypot(p.1 - q.1) < p.2 + q.2)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_stays_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn local_world_round_trip() {
        let frame = Pose { x: 3.0, y: -2.0, heading: 0.7 };
        let p = Pose { x: 10.0, y: 4.0, heading: -0.3 };
        let back = frame.to_world(&frame.to_local(&p));
        assert!((back.x - p.x).abs() < 1e-12);
        assert!((back.y - p.y).abs() < 1e-12);
        assert!((back.heading - p.heading).abs() < 1e-12);
    }

    #[test]
    fn projection_on_bent_polyline() {
        let cl = Centerline::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]).unwrap();
        let f = cl.project(4.0, 1.5);
        assert!((f.s - 4.0).abs() < 1e-12 && (f.lateral - 1.5).abs() < 1e-12);
        let f = cl.project(9.0, 6.0);
        assert!((f.s - 16.0).abs() < 1e-12 && (f.lateral - 1.0).abs() < 1e-12);
        let f = cl.project(-5.0, -1.0);
        assert!((f.s + 5.0).abs() < 1e-12 && (f.lateral + 1.0).abs() < 1e-12);
        let p = cl.pose_at(16.0, 1.0);
        assert!((p.x - 9.0).abs() < 1e-12 && (p.y - 6.0).abs() < 1e-12);
    }

    #[test]
    fn centerline_rejects_repeated_points() {
        assert!(Centerline::new(vec![[0.0, 0.0], [0.0, 0.0]]).is_err());
        assert!(Centerline::new(vec![[0.0, 0.0]]).is_err());
    }

    #[test]
    fn disc_overlap() {
        let a = Pose { x: 0.0, y: 0.0, heading: 0.0 };
        let near = Pose { x: 5.5, y: 0.0, heading: 0.0 };
        let far = Pose { x: 0.0, y: 3.0, heading: 0.0 };
        assert!(footprints_overlap(&a, (2.5, 1.0), &near, (2.5, 1.0)));
        assert!(!footprints_overlap(&a, (2.5, 1.0), &far, (2.5, 1.0)));
    }
}
