//! PDM-style trajectory scorer: three multiplicative safety gates times a
//! weighted mean of six soft metrics.

use serde::{Deserialize, Serialize};

use crate::config::{ScorerConfig, ScorerWeights, WorldConfig};
use crate::error::{Error, Result};
use crate::world::{footprints_overlap, wrap_angle, Frenet, Pose, SceneContext, Trajectory};

/// The nine sub-metrics behind one composite score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBreakdown {
    pub no_collision: f64,
    pub drivable_area: f64,
    pub direction: f64,
    pub speed_limit: f64,
    pub progress: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub lane_following: f64,
    pub proximity: f64,
}

impl MetricBreakdown {
    pub const NAMES: [&'static str; 9] = [
        "no_collision",
        "drivable_area",
        "direction",
        "speed_limit",
        "progress",
        "ttc",
        "comfort",
        "lane_following",
        "proximity",
    ];

    pub fn perfect() -> Self {
        Self {
            no_collision: 1.0,
            drivable_area: 1.0,
            direction: 1.0,
            speed_limit: 1.0,
            progress: 1.0,
            ttc: 1.0,
            comfort: 1.0,
            lane_following: 1.0,
            proximity: 1.0,
        }
    }

    pub fn values(&self) -> [f64; 9] {
        [
            self.no_collision,
            self.drivable_area,
            self.direction,
            self.speed_limit,
            self.progress,
            self.ttc,
            self.comfort,
            self.lane_following,
            self.proximity,
        ]
    }

    pub fn multiplier(&self) -> f64 {
        self.no_collision * self.drivable_area * self.direction
    }

    pub fn weighted_mean(&self, w: &ScorerWeights) -> f64 {
        let num = w.ttc * self.ttc
            + w.comfort * self.comfort
            + w.proximity * self.proximity
            + w.progress * self.progress
            + w.speed_limit * self.speed_limit
            + w.lane_following * self.lane_following;
        num / w.total()
    }

    /// Product of gates times the weighted mean of the soft metrics.
    pub fn aggregate(&self, w: &ScorerWeights) -> f64 {
        (self.multiplier() * self.weighted_mean(w)).clamp(0.0, 1.0)
    }

    pub fn in_range(&self) -> bool {
        let binary = |v: f64| v == 0.0 || v == 1.0;
        binary(self.no_collision)
            && binary(self.drivable_area)
            && [0.0, 0.5, 1.0].contains(&self.direction)
            && self.values()[3..].iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Coordinate-wise mean.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a MetricBreakdown>) -> Option<Self> {
        let mut acc = [0.0; 9];
        let mut n = 0usize;
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let v = acc.map(|a| a / n as f64);
        Some(Self {
            no_collision: v[0],
            drivable_area: v[1],
            direction: v[2],
            speed_limit: v[3],
            progress: v[4],
            ttc: v[5],
            comfort: v[6],
            lane_following: v[7],
            proximity: v[8],
        })
    }
}

/// Time to collision for a closing pair; infinite when the gap is not closing.
pub fn time_to_collision(gap: f64, ego_speed: f64, lead_speed: f64) -> f64 {
    if gap <= 0.0 {
        return 0.0;
    }
    let closing = ego_speed - lead_speed;
    if closing <= 0.0 {
        f64::INFINITY
    } else {
        gap / closing
    }
}

/// Distance covered in `duration` by a vehicle that moves from `v0` toward
/// `v_target` at constant `accel` magnitude and then holds `v_target`.
pub fn reference_distance(v0: f64, v_target: f64, accel: f64, duration: f64) -> f64 {
    let sign = if v_target >= v0 { 1.0 } else { -1.0 };
    let t_reach = (v_target - v0).abs() / accel;
    if duration <= t_reach {
        v0 * duration + 0.5 * sign * accel * duration * duration
    } else {
        v0 * t_reach + 0.5 * sign * accel * t_reach * t_reach + v_target * (duration - t_reach)
    }
}

/// Ego samples along the trajectory, with the decision-time pose prepended.
struct EgoTrack {
    frenet: Vec<Frenet>,
    poses: Vec<Pose>,
    /// `speed[k]` is the mean speed over step k (k >= 1); `speed[0]` is the
    /// current speed from the scene.
    speed: Vec<f64>,
}

struct AgentTrack {
    frenet: Vec<Frenet>,
    poses: Vec<Pose>,
    speed: Vec<f64>,
    half_length: f64,
    half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdmScorer {
    pub config: ScorerConfig,
    pub ego_half_length: f64,
    pub ego_half_width: f64,
}

impl PdmScorer {
    pub fn new(config: ScorerConfig, world: &WorldConfig) -> Self {
        Self {
            config,
            ego_half_length: world.ego_half_length,
            ego_half_width: world.ego_half_width,
        }
    }

    fn check_inputs(&self, scene: &SceneContext, trajectory: &Trajectory, agent_futures: &[Trajectory]) -> Result<()> {
        if trajectory.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "scoring needs at least 3 poses, got {}",
                trajectory.len()
            )));
        }
        if agent_futures.len() != scene.agents.len() {
            return Err(Error::Shape(format!(
                "{} agent futures for {} agents",
                agent_futures.len(),
                scene.agents.len()
            )));
        }
        for (i, f) in agent_futures.iter().enumerate() {
            if f.len() != trajectory.len() || (f.dt() - trajectory.dt()).abs() > 1e-12 {
                return Err(Error::Shape(format!(
                    "agent {i} future has {} poses at dt {}, ego has {} at dt {}",
                    f.len(),
                    f.dt(),
                    trajectory.len(),
                    trajectory.dt()
                )));
            }
        }
        Ok(())
    }

    fn ego_track(&self, scene: &SceneContext, trajectory: &Trajectory) -> EgoTrack {
        let cl = &scene.centerline;
        let ego = scene.ego();
        let mut poses = vec![ego.pose()];
        poses.extend_from_slice(trajectory.poses());
        let frenet = poses.iter().map(|p| cl.project(p.x, p.y)).collect();
        let mut speed = vec![ego.speed];
        speed.extend(poses.windows(2).map(|w| w[1].distance(&w[0]) / trajectory.dt()));
        EgoTrack { frenet, poses, speed }
    }

    fn agent_tracks(&self, scene: &SceneContext, futures: &[Trajectory]) -> Vec<AgentTrack> {
        let cl = &scene.centerline;
        scene
            .agents
            .iter()
            .zip(futures)
            .map(|(a, fut)| {
                let mut poses = vec![a.state.pose()];
                poses.extend_from_slice(fut.poses());
                let mut speed = vec![a.state.speed];
                speed.extend(poses.windows(2).map(|w| w[1].distance(&w[0]) / fut.dt()));
                AgentTrack {
                    frenet: poses.iter().map(|p| cl.project(p.x, p.y)).collect(),
                    poses,
                    speed,
                    half_length: a.half_length,
                    half_width: a.half_width,
                }
            })
            .collect()
    }

    /// Bumper gap and speed of the nearest in-lane agent ahead at sample `k`.
    fn lead_at(&self, ego: &EgoTrack, agents: &[AgentTrack], k: usize) -> Option<(f64, f64)> {
        let e = ego.frenet[k];
        agents
            .iter()
            .filter_map(|a| {
                let f = a.frenet[k];
                let overlap = (f.lateral - e.lateral).abs()
                    < a.half_width + self.ego_half_width + self.config.lead_lateral_margin;
                (overlap && f.s > e.s).then(|| (f.s - e.s - self.ego_half_length - a.half_length, a.speed[k]))
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
    }

    /// Composite score and its breakdown.
    pub fn score(
        &self,
        scene: &SceneContext,
        trajectory: &Trajectory,
        agent_futures: &[Trajectory],
    ) -> Result<(f64, MetricBreakdown)> {
        self.check_inputs(scene, trajectory, agent_futures)?;
        let ego = self.ego_track(scene, trajectory);
        let agents = self.agent_tracks(scene, agent_futures);
        let m = MetricBreakdown {
            no_collision: self.no_collision(&ego, &agents),
            drivable_area: self.drivable_area(scene, &ego),
            direction: self.direction(&ego),
            speed_limit: self.speed_limit(scene, &ego),
            progress: self.progress(scene, &ego, trajectory.dt()),
            ttc: self.ttc(&ego, &agents),
            comfort: self.comfort_metric(trajectory)?,
            lane_following: self.lane_following(&ego),
            proximity: self.proximity(&ego, &agents, trajectory.dt()),
        };
        Ok((m.aggregate(&self.config.weights), m))
    }

    pub fn ttc_metric(&self, scene: &SceneContext, trajectory: &Trajectory, agent_futures: &[Trajectory]) -> Result<f64> {
        self.check_inputs(scene, trajectory, agent_futures)?;
        let ego = self.ego_track(scene, trajectory);
        Ok(self.ttc(&ego, &self.agent_tracks(scene, agent_futures)))
    }

    pub fn proximity_metric(
        &self,
        scene: &SceneContext,
        trajectory: &Trajectory,
        agent_futures: &[Trajectory],
    ) -> Result<f64> {
        self.check_inputs(scene, trajectory, agent_futures)?;
        let ego = self.ego_track(scene, trajectory);
        Ok(self.proximity(&ego, &self.agent_tracks(scene, agent_futures), trajectory.dt()))
    }

    pub fn progress_metric(&self, scene: &SceneContext, trajectory: &Trajectory) -> f64 {
        self.progress(scene, &self.ego_track(scene, trajectory), trajectory.dt())
    }

    pub fn drivable_area_check(&self, scene: &SceneContext, trajectory: &Trajectory) -> f64 {
        self.drivable_area(scene, &self.ego_track(scene, trajectory))
    }

    pub fn direction_check(&self, scene: &SceneContext, trajectory: &Trajectory) -> f64 {
        self.direction(&self.ego_track(scene, trajectory))
    }

    pub fn speed_limit_metric(&self, scene: &SceneContext, trajectory: &Trajectory) -> f64 {
        self.speed_limit(scene, &self.ego_track(scene, trajectory))
    }

    pub fn lane_following_metric(&self, scene: &SceneContext, trajectory: &Trajectory) -> f64 {
        self.lane_following(&self.ego_track(scene, trajectory))
    }

    /// Fraction of finite-difference timesteps within the acceleration, jerk
    /// and yaw-rate bounds.
    pub fn comfort_metric(&self, trajectory: &Trajectory) -> Result<f64> {
        let p = trajectory.poses();
        if p.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "comfort needs at least 3 poses, got {}",
                p.len()
            )));
        }
        let dt = trajectory.dt();
        let c = &self.config;
        let speed: Vec<f64> = p.windows(2).map(|w| w[1].distance(&w[0]) / dt).collect();
        let yaw: Vec<f64> = p.windows(2).map(|w| wrap_angle(w[1].heading - w[0].heading) / dt).collect();
        let mut ok = 0usize;
        let mut prev_accel = None;
        for j in 0..speed.len() {
            let accel = (j >= 1).then(|| (speed[j] - speed[j - 1]) / dt);
            let jerk = match (accel, prev_accel) {
                (Some(a), Some(b)) => Some((a - b) / dt),
                _ => None,
            };
            let good = yaw[j].abs() <= c.max_yaw_rate
                && accel.is_none_or(|a| a.abs() <= c.max_accel)
                && jerk.is_none_or(|j: f64| j.abs() <= c.max_jerk);
            ok += usize::from(good);
            prev_accel = accel;
        }
        Ok(ok as f64 / speed.len() as f64)
    }

    fn no_collision(&self, ego: &EgoTrack, agents: &[AgentTrack]) -> f64 {
        let ego_half = (self.ego_half_length, self.ego_half_width);
        for k in 1..ego.poses.len() {
            for a in agents {
                if footprints_overlap(&ego.poses[k], ego_half, &a.poses[k], (a.half_length, a.half_width)) {
                    return 0.0;
                }
            }
        }
        1.0
    }

    fn drivable_area(&self, scene: &SceneContext, ego: &EgoTrack) -> f64 {
        let inside = ego.frenet[1..]
            .iter()
            .all(|f| f.lateral.abs() <= scene.corridor_half_width);
        if inside { 1.0 } else { 0.0 }
    }

    fn direction(&self, ego: &EgoTrack) -> f64 {
        let regress: f64 = ego.frenet.windows(2).map(|w| (w[0].s - w[1].s).max(0.0)).sum();
        if regress <= 1e-9 {
            1.0
        } else if regress <= self.config.direction_tolerance {
            0.5
        } else {
            0.0
        }
    }

    fn speed_limit(&self, scene: &SceneContext, ego: &EgoTrack) -> f64 {
        let limit = scene.speed_limit;
        let steps = &ego.speed[1..];
        steps
            .iter()
            .map(|v| (1.0 - (v - limit).max(0.0) / limit).clamp(0.0, 1.0))
            .sum::<f64>()
            / steps.len() as f64
    }

    fn progress(&self, scene: &SceneContext, ego: &EgoTrack, dt: f64) -> f64 {
        let s0 = ego.frenet[0].s;
        let gained = ego.frenet.last().unwrap().s - s0;
        let duration = (ego.frenet.len() - 1) as f64 * dt;
        let remaining = (scene.goal_arc_length - s0).max(0.0);
        let reference = reference_distance(ego.speed[0], scene.speed_limit, self.config.reference_accel, duration)
            .min(remaining);
        if reference <= 1e-6 {
            return 1.0;
        }
        (gained / reference).clamp(0.0, 1.0)
    }

    fn lane_following(&self, ego: &EgoTrack) -> f64 {
        let steps = &ego.frenet[1..];
        steps
            .iter()
            .map(|f| (1.0 - f.lateral.abs() / self.config.lane_tolerance).clamp(0.0, 1.0))
            .sum::<f64>()
            / steps.len() as f64
    }

    fn ttc(&self, ego: &EgoTrack, agents: &[AgentTrack]) -> f64 {
        let min_ttc = (1..ego.poses.len())
            .filter_map(|k| self.lead_at(ego, agents, k).map(|(gap, v)| time_to_collision(gap, ego.speed[k], v)))
            .fold(f64::INFINITY, f64::min);
        let c = &self.config;
        if min_ttc >= c.ttc_safe {
            1.0
        } else if min_ttc < c.ttc_critical {
            0.0
        } else {
            (min_ttc - c.ttc_critical) / (c.ttc_safe - c.ttc_critical)
        }
    }

    fn proximity(&self, ego: &EgoTrack, agents: &[AgentTrack], dt: f64) -> f64 {
        let n = ego.poses.len() - 1;
        (1..=n)
            .map(|k| match self.lead_at(ego, agents, k) {
                Some((gap, _)) => {
                    let comfortable = 2.0 * ego.speed[k] * dt + self.config.proximity_buffer;
                    (gap / comfortable).clamp(0.0, 1.0)
                }
                None => 1.0,
            })
            .sum::<f64>()
            / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Agent, Centerline, VehicleState};
    use proptest::prelude::*;

    fn scene_at(speed: f64, speed_limit: f64, agents: Vec<Agent>) -> SceneContext {
        let history = (0..4)
            .map(|j| VehicleState {
                x: -(3 - j) as f64 * speed * 0.5,
                y: 0.0,
                heading: 0.0,
                speed,
                accel: 0.0,
            })
            .collect();
        SceneContext {
            ego_history: history,
            agents,
            centerline: Centerline::new(vec![[-100.0, 0.0], [500.0, 0.0]]).unwrap(),
            corridor_half_width: 4.5,
            speed_limit,
            goal_arc_length: 1000.0,
        }
    }

    fn straight(speed: f64, lateral: f64, n: usize, x0: f64) -> Trajectory {
        let poses = (1..=n)
            .map(|k| Pose { x: x0 + speed * 0.5 * k as f64, y: lateral, heading: 0.0 })
            .collect();
        Trajectory::new(poses, 0.5).unwrap()
    }

    fn car_at(x: f64, y: f64, speed: f64) -> Agent {
        Agent {
            state: VehicleState { x, y, heading: 0.0, speed, accel: 0.0 },
            half_length: 2.5,
            half_width: 1.0,
        }
    }

    fn scorer() -> PdmScorer {
        PdmScorer::new(ScorerConfig::default(), &WorldConfig::default())
    }

    #[test]
    fn perfect_reference_rollout_scores_one() {
        let scene = scene_at(10.0, 10.0, vec![]);
        let traj = straight(10.0, 0.0, 16, 0.0);
        let (score, m) = scorer().score(&scene, &traj, &[]).unwrap();
        assert_eq!(m, MetricBreakdown::perfect());
        assert_eq!(score, 1.0);
    }

    #[test]
    fn collision_zeroes_score() {
        let agent = car_at(30.0, 0.0, 0.0);
        let scene = scene_at(10.0, 10.0, vec![agent]);
        let traj = straight(10.0, 0.0, 16, 0.0);
        let stopped = Trajectory::new(vec![agent.state.pose(); 16], 0.5).unwrap();
        let (score, m) = scorer().score(&scene, &traj, &[stopped]).unwrap();
        assert_eq!(m.no_collision, 0.0);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn weighted_mean_hand_example() {
        let mut m = MetricBreakdown::perfect();
        m.progress = 0.5;
        let w = ScorerWeights::default();
        assert_eq!(m.aggregate(&w), 22.0 / 23.0);
    }

    #[test]
    fn ttc_closed_forms() {
        assert_eq!(time_to_collision(30.0, 10.0, 5.0), 6.0);
        assert_eq!(time_to_collision(30.0, 5.0, 10.0), f64::INFINITY);
        assert_eq!(time_to_collision(10.0, 12.0, 0.0), 10.0 / 12.0);
    }

    /// Steps both vehicles at constant speed until the gap closes.
    fn simulated_ttc(gap: f64, ego: f64, lead: f64) -> f64 {
        let h = 1e-4;
        let mut t = 0.0;
        let mut g = gap;
        while g > 0.0 && t < 100.0 {
            g -= (ego - lead) * h;
            t += h;
        }
        t
    }

    #[test]
    fn ttc_metric_against_stepped_simulation() {
        let s = scorer();
        // bumper gap = 10 m when the centres are 15 m apart
        let lead = car_at(15.0, 0.0, 0.0);
        let scene = scene_at(12.0, 14.0, vec![lead]);
        let traj = straight(12.0, 0.0, 3, 0.0);
        let fut = Trajectory::new(vec![lead.state.pose(); 3], 0.5).unwrap();
        let closed = time_to_collision(10.0, 12.0, 0.0);
        assert!((closed - simulated_ttc(10.0, 12.0, 0.0)).abs() < 1e-3);
        assert!(closed < 0.95);
        assert_eq!(s.ttc_metric(&scene, &traj, &[fut]).unwrap(), 0.0);

        // faster lead: gap opens, metric saturates
        let lead = car_at(35.0, 0.0, 14.0);
        let scene = scene_at(10.0, 14.0, vec![lead]);
        let fut = straight(14.0, 0.0, 16, 35.0);
        assert_eq!(s.ttc_metric(&scene, &straight(10.0, 0.0, 16, 0.0), &[fut]).unwrap(), 1.0);

        // 30 m gap closing at 5 m/s -> 6 s now; the gap shrinks over the horizon
        let lead = car_at(35.0, 0.0, 5.0);
        let scene = scene_at(10.0, 14.0, vec![lead]);
        let fut = straight(5.0, 0.0, 4, 35.0);
        let ego = straight(10.0, 0.0, 4, 0.0);
        // last sample: gap 30 - 4*2.5 = 20 m, ttc 4 s
        assert_eq!(s.ttc_metric(&scene, &ego, &[fut]).unwrap(), 1.0);
    }

    #[test]
    fn comfort_cases() {
        let s = scorer();
        assert_eq!(s.comfort_metric(&straight(8.0, 0.0, 16, 0.0)).unwrap(), 1.0);

        // stationary, then a jump to v_max * dt per step
        let mut poses = vec![Pose { x: 0.0, y: 0.0, heading: 0.0 }; 6];
        for k in 0..10 {
            poses.push(Pose { x: 7.5 * (k + 1) as f64, y: 0.0, heading: 0.0 });
        }
        let traj = Trajectory::new(poses.clone(), 0.5).unwrap();
        // independent finite-difference count
        let dt = 0.5;
        let v: Vec<f64> = poses.windows(2).map(|w| (w[1].x - w[0].x) / dt).collect();
        let a: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
        let j: Vec<f64> = a.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
        let mut violations = 0;
        for i in 0..v.len() {
            let bad_a = i >= 1 && a[i - 1].abs() > 4.0;
            let bad_j = i >= 2 && j[i - 2].abs() > 8.0;
            violations += usize::from(bad_a || bad_j);
        }
        assert!(violations > 0);
        let expected = (v.len() - violations) as f64 / v.len() as f64;
        assert_eq!(s.comfort_metric(&traj).unwrap(), expected);

        // arc at 0.5 rad/s yaw rate
        let (speed, yaw_rate) = (8.0, 0.5);
        let r = speed / yaw_rate;
        let poses: Vec<Pose> = (1..=16)
            .map(|k| {
                let th = yaw_rate * 0.5 * k as f64;
                Pose { x: r * th.sin(), y: r * (1.0 - th.cos()), heading: th }
            })
            .collect();
        assert_eq!(s.comfort_metric(&Trajectory::new(poses, 0.5).unwrap()).unwrap(), 1.0);

        let short = Trajectory::new(vec![Pose { x: 0.0, y: 0.0, heading: 0.0 }; 2], 0.5).unwrap();
        assert!(s.comfort_metric(&short).is_err());
    }

    #[test]
    fn proximity_cases() {
        let s = scorer();
        let scene = scene_at(10.0, 10.0, vec![]);
        assert_eq!(s.proximity_metric(&scene, &straight(10.0, 0.0, 16, 0.0), &[]).unwrap(), 1.0);

        let comfortable = 2.0 * 10.0 * 0.5 + 3.0;
        for (frac, expected) in [(1.0, 1.0), (0.5, 0.5)] {
            let centre_gap = frac * comfortable + 5.0;
            let lead = car_at(centre_gap, 0.0, 10.0);
            let scene = scene_at(10.0, 10.0, vec![lead]);
            let fut = straight(10.0, 0.0, 16, centre_gap);
            let got = s.proximity_metric(&scene, &straight(10.0, 0.0, 16, 0.0), &[fut]).unwrap();
            assert!((got - expected).abs() < 1e-12, "{frac}: {got}");
        }
    }

    #[test]
    fn progress_direction_and_lane() {
        let s = scorer();
        let scene = scene_at(0.0, 10.0, vec![]);
        let parked = Trajectory::new(vec![Pose { x: 0.0, y: 0.0, heading: 0.0 }; 16], 0.5).unwrap();
        assert_eq!(s.progress_metric(&scene, &parked), 0.0);
        assert_eq!(s.direction_check(&scene, &parked), 1.0);

        let scene = scene_at(10.0, 10.0, vec![]);
        let reference = straight(10.0, 0.0, 16, 0.0);
        assert_eq!(s.progress_metric(&scene, &reference), 1.0);
        assert_eq!(s.speed_limit_metric(&scene, &reference), 1.0);
        assert_eq!(s.lane_following_metric(&scene, &reference), 1.0);

        let offset = straight(10.0, 0.5, 16, 0.0);
        assert!((s.lane_following_metric(&scene, &offset) - 0.5).abs() < 1e-12);

        let backwards: Vec<Pose> = (1..=16).map(|k| Pose { x: -0.02 * k as f64, y: 0.0, heading: 0.0 }).collect();
        assert_eq!(s.direction_check(&scene, &Trajectory::new(backwards, 0.5).unwrap()), 0.5);
        let backwards: Vec<Pose> = (1..=16).map(|k| Pose { x: -(k as f64), y: 0.0, heading: 0.0 }).collect();
        assert_eq!(s.direction_check(&scene, &Trajectory::new(backwards, 0.5).unwrap()), 0.0);

        let outside = straight(10.0, 5.0, 16, 0.0);
        assert_eq!(s.drivable_area_check(&scene, &outside), 0.0);
    }

    #[test]
    fn mismatched_horizons_are_rejected() {
        let lead = car_at(40.0, 0.0, 5.0);
        let scene = scene_at(10.0, 10.0, vec![lead]);
        let err = scorer()
            .score(&scene, &straight(10.0, 0.0, 16, 0.0), &[straight(5.0, 0.0, 8, 40.0)])
            .unwrap_err();
        assert_eq!(err.code(), "E_SHAPE");
        assert!(scorer().score(&scene, &straight(10.0, 0.0, 16, 0.0), &[]).is_err());
    }

    #[test]
    fn raising_one_soft_metric_never_lowers_score() {
        let w = ScorerWeights::default();
        let base = MetricBreakdown {
            no_collision: 1.0,
            drivable_area: 1.0,
            direction: 0.5,
            speed_limit: 0.3,
            progress: 0.2,
            ttc: 0.4,
            comfort: 0.6,
            lane_following: 0.1,
            proximity: 0.7,
        };
        for i in 3..9 {
            let mut v = base.values();
            v[i] = (v[i] + 0.25).min(1.0);
            let up = MetricBreakdown {
                no_collision: v[0],
                drivable_area: v[1],
                direction: v[2],
                speed_limit: v[3],
                progress: v[4],
                ttc: v[5],
                comfort: v[6],
                lane_following: v[7],
                proximity: v[8],
            };
            assert!(up.aggregate(&w) >= base.aggregate(&w));
        }
    }

    proptest! {
        #[test]
        fn score_is_bounded(
            steps in proptest::collection::vec((-3.0f64..9.0, -2.0f64..2.0, -1.0f64..1.0), 16),
            lead_x in 5.0f64..60.0,
            lead_y in -3.0f64..3.0,
            lead_v in 0.0f64..12.0,
        ) {
            let lead = car_at(lead_x, lead_y, lead_v);
            let scene = scene_at(8.0, 12.0, vec![lead]);
            let mut x = 0.0;
            let mut y = 0.0;
            let poses: Vec<Pose> = steps.iter().map(|(dx, dy, h)| { x += dx; y += dy; Pose { x, y, heading: *h } }).collect();
            let traj = Trajectory::new(poses, 0.5).unwrap();
            let fut = straight(lead_v, lead_y, 16, lead_x);
            let (score, m) = scorer().score(&scene, &traj, &[fut]).unwrap();
            prop_assert!((0.0..=1.0).contains(&score));
            prop_assert!(m.in_range());
            if m.no_collision == 0.0 {
                prop_assert_eq!(score, 0.0);
            }
        }
    }
}
