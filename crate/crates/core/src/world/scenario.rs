use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Agent, Centerline, Pose, SceneContext, Trajectory, VehicleState};
use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LaneFollow,
    LeadStop,
    ObstaclePass,
    Merge,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::LaneFollow,
        ScenarioKind::LeadStop,
        ScenarioKind::ObstaclePass,
        ScenarioKind::Merge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::LaneFollow => "lane_follow",
            ScenarioKind::LeadStop => "lead_stop",
            ScenarioKind::ObstaclePass => "obstacle_pass",
            ScenarioKind::Merge => "merge",
        }
    }

    pub fn index(&self) -> u8 {
        match self {
            ScenarioKind::LaneFollow => 0,
            ScenarioKind::LeadStop => 1,
            ScenarioKind::ObstaclePass => 2,
            ScenarioKind::Merge => 3,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Open-loop script of one surrounding vehicle, in centerline coordinates.
///
/// Longitudinal motion has constant acceleration with a speed floor at zero;
/// lateral motion is a smoothstep from `lateral_start` to `lateral_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentScript {
    pub s0: f64,
    pub v0: f64,
    pub accel: f64,
    pub lateral_start: f64,
    pub lateral_end: f64,
    pub merge_start: f64,
    pub merge_duration: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl AgentScript {
    /// (arc length, speed, acceleration) at time `t`.
    pub fn longitudinal(&self, t: f64) -> (f64, f64, f64) {
        if self.accel < 0.0 {
            let t_stop = -self.v0 / self.accel;
            if t >= t_stop {
                let s = self.s0 + self.v0 * t_stop + 0.5 * self.accel * t_stop * t_stop;
                return (s, 0.0, 0.0);
            }
        }
        (
            self.s0 + self.v0 * t + 0.5 * self.accel * t * t,
            self.v0 + self.accel * t,
            self.accel,
        )
    }

    /// (lateral offset, lateral rate) at time `t`.
    pub fn lateral(&self, t: f64) -> (f64, f64) {
        if self.merge_duration <= 0.0 {
            return (self.lateral_start, 0.0);
        }
        let u = ((t - self.merge_start) / self.merge_duration).clamp(0.0, 1.0);
        let span = self.lateral_end - self.lateral_start;
        let rate = if u > 0.0 && u < 1.0 {
            span * 6.0 * u * (1.0 - u) / self.merge_duration
        } else {
            0.0
        };
        (self.lateral_start + span * u * u * (3.0 - 2.0 * u), rate)
    }

    pub fn state_at(&self, t: f64, centerline: &Centerline) -> VehicleState {
        let (s, v, a) = self.longitudinal(t);
        let (l, l_rate) = self.lateral(t);
        state_from_frenet(s, l, v, l_rate, a, centerline)
    }

    pub fn agent_at(&self, t: f64, centerline: &Centerline) -> Agent {
        Agent {
            state: self.state_at(t, centerline),
            half_length: self.half_length,
            half_width: self.half_width,
        }
    }
}

pub(crate) fn state_from_frenet(
    s: f64,
    lateral: f64,
    speed: f64,
    lateral_rate: f64,
    accel: f64,
    centerline: &Centerline,
) -> VehicleState {
    let base = centerline.pose_at(s, lateral);
    let slip = if speed > 0.1 { lateral_rate.atan2(speed) } else { 0.0 };
    VehicleState {
        x: base.x,
        y: base.y,
        heading: super::wrap_angle(base.heading + slip),
        speed,
        accel,
    }
}

/// A generated episode start: the initial scene plus the agents' scripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Drives the expert's choice between equally valid maneuvers.
    pub mode_seed: u64,
    pub scene: SceneContext,
    pub scripts: Vec<AgentScript>,
}

impl Scenario {
    pub fn agents_at(&self, t: f64) -> Vec<Agent> {
        self.scripts.iter().map(|s| s.agent_at(t, &self.scene.centerline)).collect()
    }

    /// Scripted future poses of every agent for the `horizon` steps after `t0`.
    pub fn agent_futures(&self, t0: f64, horizon: usize, dt: f64) -> Vec<Trajectory> {
        self.scripts
            .iter()
            .map(|script| {
                let poses: Vec<Pose> = (1..=horizon)
                    .map(|k| script.state_at(t0 + k as f64 * dt, &self.scene.centerline).pose())
                    .collect();
                Trajectory::new(poses, dt).expect("scripted poses are finite")
            })
            .collect()
    }
}

const EGO_START_ARC: f64 = 50.0;
const GOAL_DISTANCE: f64 = 350.0;

/// Builds a seeded scenario of the requested kind.
/// Smallest lateral offset of the parked car in `obstacle_pass`.
pub const PARKED_OFFSET_MIN: f64 = 0.5;

pub fn generate_scenario(seed: u64, kind: ScenarioKind, world: &WorldConfig) -> Result<Scenario> {
    let mut rng = rng::stream(seed, kind.as_str());
    let centerline = Centerline::new(vec![
        [-EGO_START_ARC, 0.0],
        [world.centerline_length - EGO_START_ARC, 0.0],
    ])?;
    let speed_limit: f64 = rng.random_range(10.0..14.0);
    let ego_speed: f64 = match kind {
        ScenarioKind::LaneFollow => rng.random_range(5.0..13.0),
        _ => rng.random_range(6.0..12.0),
    };
    let ego_lateral = rng.random_range(-0.1..0.1);
    let ego_heading = rng.random_range(-0.02..0.02);
    let mode_seed = rng.next_u64();

    let mut scripts = Vec::new();
    let car = |s0, v0, accel, lat| AgentScript {
        s0,
        v0,
        accel,
        lateral_start: lat,
        lateral_end: lat,
        merge_start: 0.0,
        merge_duration: 0.0,
        half_length: 2.5,
        half_width: 1.0,
    };
    match kind {
        ScenarioKind::LaneFollow => {}
        ScenarioKind::LeadStop => {
            let lead_speed = rng.random_range(0.0..6.0);
            let decel = rng.random_range(1.5..3.0);
            let min_gap: f64 = ego_speed * ego_speed / (2.0 * 2.5) + 12.0;
            let gap = rng.random_range(min_gap.max(20.0)..min_gap.max(20.0) + 25.0);
            scripts.push(car(EGO_START_ARC + gap, lead_speed, -decel, 0.0));
        }
        ScenarioKind::ObstaclePass => {
            let dist = rng.random_range(35.0..55.0);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let lat = side * rng.random_range(PARKED_OFFSET_MIN..0.8);
            scripts.push(car(EGO_START_ARC + dist, 0.0, 0.0, lat));
        }
        ScenarioKind::Merge => {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let ahead = rng.random_bool(0.5);
            let (gap, speed) = if ahead {
                (rng.random_range(14.0..26.0), (ego_speed - rng.random_range(0.0f64..3.0)).max(2.0))
            } else {
                (rng.random_range(-26.0..-16.0), (ego_speed - rng.random_range(0.5f64..3.0)).max(1.0))
            };
            let mut script = car(EGO_START_ARC + gap, speed, 0.0, side * 3.6);
            script.lateral_end = 0.0;
            script.merge_start = rng.random_range(0.5..2.5);
            script.merge_duration = rng.random_range(2.5..4.0);
            scripts.push(script);
        }
    }

    let history: Vec<VehicleState> = (0..world.history_len)
        .rev()
        .map(|j| {
            let back = j as f64 * world.dt * ego_speed;
            let mut st = state_from_frenet(EGO_START_ARC - back, ego_lateral, ego_speed, 0.0, 0.0, &centerline);
            st.heading = super::wrap_angle(st.heading + ego_heading);
            st
        })
        .collect();

    let scene = SceneContext {
        ego_history: history,
        agents: scripts.iter().map(|s| s.agent_at(0.0, &centerline)).collect(),
        centerline,
        corridor_half_width: world.corridor_half_width,
        speed_limit,
        goal_arc_length: EGO_START_ARC + GOAL_DISTANCE,
    };
    scene.validate(world)?;
    Ok(Scenario {
        kind,
        seed,
        mode_seed,
        scene,
        scripts,
    })
}
