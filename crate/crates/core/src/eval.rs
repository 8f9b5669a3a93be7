//! Receding-horizon closed-loop episodes, suite summaries and planner latency.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, IdmConfig, WorldConfig};
use crate::diffusion::{ddpm_sample, ActionBox, DenoiserNet};
use crate::error::{Error, Result};
use crate::pdm::{MetricBreakdown, PdmScorer};
use crate::rng::{derive_seed, StreamRng};
use crate::srpo::{normalized_bounds, plan as policy_plan, PolicyNet};
use crate::world::{
    action_bounds, action_to_trajectory, encode_state, expert_demonstrate, footprints_overlap, generate_scenario, idm_accel,
    state_from_frenet, Agent, AgentScript, Normalizer, Pose, Scenario, ScenarioKind, SceneContext, Trajectory, VehicleState,
};

/// Anything that maps a scene to a planned trajectory.
pub trait Planner {
    fn name(&self) -> &str;

    /// Called once before each episode.
    fn reset(&mut self, _scenario: &Scenario) {}

    fn plan(&mut self, scene: &SceneContext) -> Result<Trajectory>;
}

/// One forward pass of a deterministic policy.
#[derive(Debug, Clone)]
pub struct PolicyPlanner {
    pub name: String,
    pub policy: PolicyNet,
    pub world: WorldConfig,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
}

impl Planner for PolicyPlanner {
    fn name(&self) -> &str {
        &self.name
    }

    fn plan(&mut self, scene: &SceneContext) -> Result<Trajectory> {
        policy_plan(&self.policy, scene, &self.world, &self.state_norm, &self.action_norm)
    }
}

/// Ancestral sampling from the diffusion prior. Reseeded per episode from
/// the scenario so results do not depend on episode order.
#[derive(Debug, Clone)]
pub struct DiffusionPlanner {
    pub prior: DenoiserNet,
    pub world: WorldConfig,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
    pub n_steps: usize,
    pub t_lo: f64,
    bounds: ActionBox,
    seed: u64,
    rng: StreamRng,
}

impl DiffusionPlanner {
    /// `box_half_width` limits the normalized sample box in addition to the
    /// physical action box.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prior: DenoiserNet,
        world: WorldConfig,
        state_norm: Normalizer,
        action_norm: Normalizer,
        n_steps: usize,
        t_lo: f64,
        box_half_width: f64,
        seed: u64,
    ) -> Result<Self> {
        let physical = normalized_bounds(&world, &action_norm)?;
        let bounds = physical.intersect(&ActionBox::symmetric(physical.dim(), box_half_width)?)?;
        Ok(Self {
            prior,
            world,
            state_norm,
            action_norm,
            n_steps,
            t_lo,
            bounds,
            seed,
            rng: StreamRng::seed_from_u64(seed),
        })
    }
}

impl Planner for DiffusionPlanner {
    fn name(&self) -> &str {
        "diffusion"
    }

    fn reset(&mut self, scenario: &Scenario) {
        let label = format!("sampler/{}/{}", scenario.kind, scenario.seed);
        self.rng = StreamRng::seed_from_u64(derive_seed(self.seed, &label));
    }

    fn plan(&mut self, scene: &SceneContext) -> Result<Trajectory> {
        let state = encode_state(scene, &self.world, &self.state_norm)?;
        let z = ddpm_sample(&self.prior, &state.features, self.n_steps, self.t_lo, &self.bounds, &mut self.rng)?;
        let mut action = self.action_norm.denormalize(&z);
        let (lo, hi) = action_bounds(&self.world);
        ActionBox { lo, hi }.clamp(&mut action);
        action_to_trajectory(&scene.ego().pose(), &action, &self.world)
    }
}

/// The scripted demonstrator, with its passing side taken from the scenario.
#[derive(Debug, Clone)]
pub struct ExpertPlanner {
    pub world: WorldConfig,
    pub idm: IdmConfig,
    mode_seed: u64,
}

impl ExpertPlanner {
    pub fn new(world: WorldConfig, idm: IdmConfig) -> Self {
        Self { world, idm, mode_seed: 0 }
    }
}

impl Planner for ExpertPlanner {
    fn name(&self) -> &str {
        "expert"
    }

    fn reset(&mut self, scenario: &Scenario) {
        self.mode_seed = scenario.mode_seed;
    }

    fn plan(&mut self, scene: &SceneContext) -> Result<Trajectory> {
        expert_demonstrate(scene, self.mode_seed, &self.world, &self.idm)
    }
}

/// Holds the current speed and heading.
#[derive(Debug, Clone)]
pub struct ConstantVelocityPlanner {
    pub world: WorldConfig,
}

impl Planner for ConstantVelocityPlanner {
    fn name(&self) -> &str {
        "constant_velocity"
    }

    fn plan(&mut self, scene: &SceneContext) -> Result<Trajectory> {
        let ego = scene.ego();
        let step = ego.speed.clamp(0.0, self.world.v_max) * self.world.dt;
        let start = ego.pose();
        let poses = (1..=self.world.horizon)
            .map(|k| start.to_world(&Pose { x: step * k as f64, y: 0.0, heading: 0.0 }))
            .collect();
        Trajectory::new(poses, self.world.dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub ego: VehicleState,
    /// Short content hash of the chosen plan.
    pub plan_id: String,
    /// Score of the plan against the agents' predicted futures.
    pub plan_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Score of the executed ego path against the realized agent motion.
    pub composite: f64,
    pub breakdown: MetricBreakdown,
    pub collided: bool,
    /// The planner errored or returned an infeasible plan.
    pub failed: bool,
    pub steps: usize,
    pub log: Vec<StepLog>,
}

fn plan_id(plan: &Trajectory) -> String {
    let mut h = Sha256::new();
    for p in plan.poses() {
        for v in [p.x, p.y, p.heading] {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Agent driven along its script's lateral profile, with longitudinal speed
/// limited by an IDM response to the ego when the ego is ahead in its lane.
#[derive(Debug, Clone, Copy)]
struct ReactiveAgent {
    script: AgentScript,
    s: f64,
    v: f64,
    a: f64,
}

const REACTIVE_LATERAL_MARGIN: f64 = 0.2;

impl ReactiveAgent {
    fn new(script: AgentScript) -> Self {
        let (s, v, a) = script.longitudinal(0.0);
        Self { script, s, v, a }
    }

    fn agent(&self, t: f64, scene: &SceneContext) -> Agent {
        let (l, rate) = self.script.lateral(t);
        Agent {
            state: state_from_frenet(self.s, l, self.v, rate, self.a, &scene.centerline),
            half_length: self.script.half_length,
            half_width: self.script.half_width,
        }
    }

    /// Advances from `t` to `t + dt` given the ego pose and speed at `t`.
    fn step(&mut self, t: f64, ego: (&Pose, f64), scene: &SceneContext, world: &WorldConfig, idm: &IdmConfig) {
        let (_, _, scripted) = self.script.longitudinal(t);
        let scripted = if self.v <= 0.0 && scripted < 0.0 { 0.0 } else { scripted };
        let e = scene.centerline.project(ego.0.x, ego.0.y);
        let (l, _) = self.script.lateral(t);
        let in_lane = (e.lateral - l).abs() < self.script.half_width + world.ego_half_width + REACTIVE_LATERAL_MARGIN;
        let mut accel = scripted;
        if in_lane && e.s > self.s {
            let gap = e.s - self.s - world.ego_half_length - self.script.half_length;
            accel = accel.min(idm_accel(self.v, self.script.v0.max(1.0), Some((gap, ego.1)), idm));
        }
        let accel = accel.clamp(-idm.max_decel, idm.max_accel);
        let v_next = (self.v + accel * world.dt).max(0.0);
        self.s += 0.5 * (self.v + v_next) * world.dt;
        self.a = (v_next - self.v) / world.dt;
        self.v = v_next;
    }
}

fn ego_speeds(start: &VehicleState, poses: &[Pose], dt: f64) -> Vec<f64> {
    let mut prev = start.pose();
    let mut out = vec![start.speed];
    for p in poses {
        out.push(p.distance(&prev) / dt);
        prev = *p;
    }
    out
}

/// Reactive agents' futures if the ego follows `plan` from time `t`.
fn reactive_futures(
    agents: &[ReactiveAgent],
    t: f64,
    scene: &SceneContext,
    plan: &Trajectory,
    world: &WorldConfig,
    idm: &IdmConfig,
) -> Result<Vec<Trajectory>> {
    let ego = scene.ego();
    let mut ego_poses = vec![ego.pose()];
    ego_poses.extend_from_slice(plan.poses());
    let speeds = ego_speeds(ego, plan.poses(), plan.dt());
    let mut sim = agents.to_vec();
    let mut tracks = vec![Vec::with_capacity(plan.len()); sim.len()];
    for k in 0..plan.len() {
        let tk = t + k as f64 * world.dt;
        for (a, track) in sim.iter_mut().zip(tracks.iter_mut()) {
            a.step(tk, (&ego_poses[k], speeds[k]), scene, world, idm);
            track.push(a.agent(tk + world.dt, scene).state.pose());
        }
    }
    tracks.into_iter().map(|p| Trajectory::new(p, world.dt)).collect()
}

fn validate_plan(plan: &Trajectory, scene: &SceneContext, world: &WorldConfig) -> Result<()> {
    let finite = plan.poses().iter().all(|p| p.x.is_finite() && p.y.is_finite() && p.heading.is_finite());
    if !finite {
        return Err(Error::NonFinite("planned trajectory".into()));
    }
    plan.check_feasible(world, Some(&scene.ego().pose()))
}

/// Runs one receding-horizon episode: plan, execute the first `replan_every`
/// poses with perfect tracking, advance the agents, repeat until the episode
/// length, the goal, or a collision.
pub fn run_episode(planner: &mut dyn Planner, scenario: &Scenario, cfg: &ExperimentConfig, reactive: bool) -> Result<EpisodeResult> {
    let world = &cfg.world;
    let ev = &cfg.eval;
    if ev.replan_every == 0 || ev.replan_every > world.horizon || ev.episode_len < 3 {
        return Err(Error::Config("eval: need 1 <= replan_every <= horizon and episode_len >= 3".into()));
    }
    scenario.scene.validate(world)?;
    let scorer = PdmScorer::new(cfg.scorer.clone(), world);
    planner.reset(scenario);

    let initial = scenario.scene.clone();
    let mut scene = initial.clone();
    let mut reactive_agents: Vec<ReactiveAgent> = scenario.scripts.iter().map(|s| ReactiveAgent::new(*s)).collect();
    let mut ego_trace: Vec<Pose> = Vec::new();
    let mut agent_traces: Vec<Vec<Pose>> = vec![Vec::new(); scenario.scripts.len()];
    let mut log = Vec::new();
    let (mut collided, mut failed) = (false, false);
    let mut k = 0;

    while k < ev.episode_len {
        let t = k as f64 * world.dt;
        let plan = match planner.plan(&scene).and_then(|p| validate_plan(&p, &scene, world).map(|_| p)) {
            Ok(p) => p,
            Err(_) => {
                failed = true;
                break;
            }
        };
        let futures = if reactive {
            reactive_futures(&reactive_agents, t, &scene, &plan, world, &cfg.idm)?
        } else {
            scenario.agent_futures(t, world.horizon, world.dt)
        };
        let (plan_score, _) = scorer.score(&scene, &plan, &futures)?;
        log.push(StepLog {
            step: k,
            ego: *scene.ego(),
            plan_id: plan_id(&plan),
            plan_score,
        });

        let n = ev.replan_every.min(ev.episode_len - k);
        let speeds = ego_speeds(scene.ego(), &plan.poses()[..n], world.dt);
        let mut prev_pose = scene.ego().pose();
        let mut agents_now = Vec::new();
        for (j, (&ego_pose, &speed)) in plan.poses()[..n].iter().zip(&speeds).enumerate() {
            let tj = t + j as f64 * world.dt;
            agents_now = if reactive {
                reactive_agents
                    .iter_mut()
                    .map(|a| {
                        a.step(tj, (&prev_pose, speed), &scene, world, &cfg.idm);
                        a.agent(tj + world.dt, &scene)
                    })
                    .collect()
            } else {
                scenario.agents_at(tj + world.dt)
            };
            ego_trace.push(ego_pose);
            for (trace, a) in agent_traces.iter_mut().zip(&agents_now) {
                trace.push(a.state.pose());
            }
            let ego_half = (world.ego_half_length, world.ego_half_width);
            if agents_now
                .iter()
                .any(|a| footprints_overlap(&ego_pose, ego_half, &a.state.pose(), (a.half_length, a.half_width)))
            {
                collided = true;
            }
            prev_pose = ego_pose;
        }
        scene = scene.after_executing(&plan, n, agents_now)?;
        k += n;
        let e = scene.ego();
        if collided || scene.centerline.project(e.x, e.y).s >= scene.goal_arc_length {
            break;
        }
    }

    let mut breakdown = MetricBreakdown::default();
    let mut composite = 0.0;
    if !failed && ego_trace.len() >= 3 {
        let executed = Trajectory::new(ego_trace.clone(), world.dt)?;
        let agents = agent_traces
            .into_iter()
            .map(|p| Trajectory::new(p, world.dt))
            .collect::<Result<Vec<_>>>()?;
        let (score, m) = scorer.score(&initial, &executed, &agents)?;
        composite = score;
        breakdown = m;
        collided |= m.no_collision == 0.0;
    }
    if collided {
        breakdown.no_collision = 0.0;
        composite = 0.0;
    }
    Ok(EpisodeResult {
        kind: scenario.kind,
        seed: scenario.seed,
        composite,
        breakdown,
        collided,
        failed,
        steps: ego_trace.len(),
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteSummary {
    pub planner: String,
    pub episodes: usize,
    pub mean_composite: f64,
    pub mean_breakdown: MetricBreakdown,
    pub collision_rate: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub episodes: Vec<EpisodeResult>,
    pub summary: SuiteSummary,
}

/// Evaluation scenario seed: consecutive from `seed_offset`.
pub fn eval_seed(seed_offset: u64, index: usize) -> u64 {
    seed_offset + index as u64
}

pub fn summarize(planner: &str, episodes: &[EpisodeResult]) -> SuiteSummary {
    let n = episodes.len().max(1) as f64;
    SuiteSummary {
        planner: planner.to_string(),
        episodes: episodes.len(),
        mean_composite: episodes.iter().map(|e| e.composite).sum::<f64>() / n,
        mean_breakdown: MetricBreakdown::mean(episodes.iter().map(|e| &e.breakdown)).unwrap_or_default(),
        collision_rate: episodes.iter().filter(|e| e.collided).count() as f64 / n,
        failures: episodes.iter().filter(|e| e.failed).count(),
    }
}

/// Runs `per_kind` scenarios of every kind in `kinds`, in parallel, with a
/// fresh copy of `planner` per episode. Output order is fixed.
pub fn evaluate_suite<P: Planner + Clone + Send + Sync>(
    planner: &P,
    cfg: &ExperimentConfig,
    kinds: &[ScenarioKind],
    per_kind: usize,
    reactive: bool,
) -> Result<SuiteResult> {
    if per_kind == 0 || kinds.is_empty() {
        return Err(Error::InvalidInput("suite needs at least one scenario".into()));
    }
    let jobs: Vec<(ScenarioKind, u64)> = kinds
        .iter()
        .flat_map(|k| (0..per_kind).map(move |i| (*k, eval_seed(cfg.eval.seed_offset, i))))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let chunk = jobs.len().div_ceil(workers);
    let results: Vec<Result<EpisodeResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(kind, seed)| {
                            let scenario = generate_scenario(*seed, *kind, &cfg.world)?;
                            run_episode(&mut planner.clone(), &scenario, cfg, reactive)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(planner.name(), &episodes);
    Ok(SuiteResult { episodes, summary })
}

/// Column names of the per-episode CSV.
pub const EPISODE_COLUMNS: [&str; 17] = [
    "planner",
    "kind",
    "seed",
    "composite",
    "no_collision",
    "drivable_area",
    "direction",
    "speed_limit",
    "progress",
    "ttc",
    "comfort",
    "lane_following",
    "proximity",
    "collided",
    "failed",
    "steps",
    "reactive",
];

/// One row per episode, then a summary row with kind `summary` whose
/// `collided` column holds the collision rate.
pub fn write_suite_csv<W: Write>(out: W, suite: &SuiteResult, reactive: bool) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: "<csv>".into(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPISODE_COLUMNS).map_err(io)?;
    let name = &suite.summary.planner;
    let metrics = |m: &MetricBreakdown| m.values().map(|v| v.to_string());
    for e in &suite.episodes {
        let mut row = vec![name.clone(), e.kind.to_string(), e.seed.to_string(), e.composite.to_string()];
        row.extend(metrics(&e.breakdown));
        row.extend([
            u8::from(e.collided).to_string(),
            u8::from(e.failed).to_string(),
            e.steps.to_string(),
            u8::from(reactive).to_string(),
        ]);
        w.write_record(&row).map_err(io)?;
    }
    let s = &suite.summary;
    let mut row = vec![name.clone(), "summary".into(), String::new(), s.mean_composite.to_string()];
    row.extend(metrics(&s.mean_breakdown));
    row.extend([
        s.collision_rate.to_string(),
        s.failures.to_string(),
        s.episodes.to_string(),
        u8::from(reactive).to_string(),
    ]);
    w.write_record(&row).map_err(io)?;
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannerLatency {
    pub name: String,
    pub warmup: usize,
    pub times_ns: Vec<u64>,
    pub mean_ns: f64,
    pub median_ns: f64,
    pub p95_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub planners: Vec<PlannerLatency>,
}

impl LatencyReport {
    /// `mean(slow) / mean(fast)` by planner name.
    pub fn ratio(&self, slow: &str, fast: &str) -> Option<f64> {
        let mean = |n: &str| self.planners.iter().find(|p| p.name == n).map(|p| p.mean_ns);
        Some(mean(slow)? / mean(fast)?)
    }
}

fn latency_stats(name: &str, warmup: usize, times: Vec<u64>) -> PlannerLatency {
    let mut sorted = times.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) as f64
    };
    let p95 = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1] as f64;
    PlannerLatency {
        name: name.to_string(),
        warmup,
        mean_ns: times.iter().sum::<u64>() as f64 / n as f64,
        median_ns: median,
        p95_ns: p95,
        times_ns: times,
    }
}

/// Times each planner on the same scene, single-threaded. Calls are
/// interleaved across planners so slow drift affects all of them alike.
/// Planners sharing a name are reported as separate entries.
pub fn bench_latency(planners: &mut [&mut dyn Planner], scene: &SceneContext, warmup: usize, calls: usize) -> Result<LatencyReport> {
    if calls < 100 || warmup < 10 {
        return Err(Error::InvalidInput(format!(
            "latency bench needs at least 100 timed and 10 warm-up calls, got {calls} and {warmup}"
        )));
    }
    for _ in 0..warmup {
        for p in planners.iter_mut() {
            std::hint::black_box(p.plan(scene)?);
        }
    }
    let mut times = vec![Vec::with_capacity(calls); planners.len()];
    for _ in 0..calls {
        for (p, t) in planners.iter_mut().zip(times.iter_mut()) {
            let start = Instant::now();
            let out = p.plan(scene);
            let elapsed = start.elapsed();
            std::hint::black_box(out?);
            t.push(elapsed.as_nanos() as u64);
        }
    }
    Ok(LatencyReport {
        planners: planners
            .iter()
            .zip(times)
            .map(|(p, t)| latency_stats(p.name(), warmup, t))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::ScenarioKind;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    fn scenario(kind: ScenarioKind, seed: u64) -> Scenario {
        generate_scenario(seed, kind, &cfg().world).unwrap()
    }

    #[test]
    fn expert_drives_empty_road_well() {
        let c = cfg();
        let mut expert = ExpertPlanner::new(c.world.clone(), c.idm.clone());
        for seed in 0..5 {
            let r = run_episode(&mut expert, &scenario(ScenarioKind::LaneFollow, seed), &c, false).unwrap();
            assert!(r.composite >= 0.9, "seed {seed}: {}", r.composite);
            assert!(!r.collided && !r.failed);
            assert_eq!(r.steps, c.eval.episode_len);
            assert_eq!(r.log.len(), c.eval.episode_len / c.eval.replan_every);
        }
    }

    /// Lead brakes hard right in front of a constant-speed ego.
    #[test]
    fn constant_velocity_hits_braking_lead() {
        let c = cfg();
        let mut sc = scenario(ScenarioKind::LeadStop, 3);
        let ego_speed = sc.scene.ego().speed;
        let ego_s = sc.scene.centerline.project(sc.scene.ego().x, sc.scene.ego().y).s;
        sc.scripts[0].s0 = ego_s + 12.0;
        sc.scripts[0].v0 = ego_speed;
        sc.scripts[0].accel = -c.idm.max_decel;
        sc.scene.agents = sc.agents_at(0.0);
        let mut cv = ConstantVelocityPlanner { world: c.world.clone() };
        let r = run_episode(&mut cv, &sc, &c, false).unwrap();
        assert!(r.collided);
        assert_eq!(r.composite, 0.0);
        assert_eq!(r.breakdown.no_collision, 0.0);
        assert!(r.steps < c.eval.episode_len);
    }

    #[test]
    fn episodes_are_deterministic() {
        let c = cfg();
        for kind in ScenarioKind::ALL {
            let sc = scenario(kind, 11);
            let mut a = ExpertPlanner::new(c.world.clone(), c.idm.clone());
            let mut b = a.clone();
            for reactive in [false, true] {
                assert_eq!(run_episode(&mut a, &sc, &c, reactive).unwrap(), run_episode(&mut b, &sc, &c, reactive).unwrap());
            }
        }
    }

    struct Broken;

    impl Planner for Broken {
        fn name(&self) -> &str {
            "broken"
        }

        fn plan(&mut self, scene: &SceneContext) -> Result<Trajectory> {
            let p = scene.ego().pose();
            let poses = (1..=16).map(|k| Pose { x: p.x + 40.0 * k as f64, ..p }).collect();
            Trajectory::new(poses, 0.5)
        }
    }

    #[test]
    fn infeasible_plan_fails_episode() {
        let r = run_episode(&mut Broken, &scenario(ScenarioKind::LaneFollow, 1), &cfg(), false).unwrap();
        assert!(r.failed);
        assert_eq!((r.composite, r.steps), (0.0, 0));
    }

    #[test]
    fn executed_path_is_feasible() {
        let c = cfg();
        let mut expert = ExpertPlanner::new(c.world.clone(), c.idm.clone());
        for kind in ScenarioKind::ALL {
            for seed in 0..4 {
                let sc = scenario(kind, seed);
                let r = run_episode(&mut expert, &sc, &c, true).unwrap();
                let mut prev = sc.scene.ego().pose();
                let bound = c.world.v_max * c.world.dt + c.world.feasibility_margin;
                for step in r.log.iter().skip(1) {
                    let p = step.ego.pose();
                    // two executed steps between decisions
                    assert!(p.distance(&prev) <= 2.0 * bound);
                    prev = p;
                }
            }
        }
    }

    /// Non-reactive agents replay their scripts whatever the ego does.
    #[test]
    fn non_reactive_agents_ignore_the_ego() {
        let c = cfg();
        let sc = scenario(ScenarioKind::Merge, 5);
        let mut expert = ExpertPlanner::new(c.world.clone(), c.idm.clone());
        let mut cv = ConstantVelocityPlanner { world: c.world.clone() };
        let traces = |p: &mut dyn Planner| {
            p.reset(&sc);
            let mut scene = sc.scene.clone();
            let mut out = Vec::new();
            for k in (0..8).step_by(2) {
                let plan = p.plan(&scene).unwrap();
                let agents = sc.agents_at((k + 2) as f64 * c.world.dt);
                out.push(agents.clone());
                scene = scene.after_executing(&plan, 2, agents).unwrap();
            }
            out
        };
        assert_eq!(traces(&mut expert), traces(&mut cv));
    }

    #[test]
    fn reactive_agents_respect_bounds() {
        let c = cfg();
        let world = &c.world;
        for kind in [ScenarioKind::LeadStop, ScenarioKind::Merge] {
            for seed in 0..10 {
                let sc = scenario(kind, seed);
                let mut agents: Vec<ReactiveAgent> = sc.scripts.iter().map(|s| ReactiveAgent::new(*s)).collect();
                // an ego parked just ahead of every agent forces strong braking
                for k in 0..40 {
                    let t = k as f64 * world.dt;
                    for a in agents.iter_mut() {
                        let ego = sc.scene.centerline.pose_at(a.s + 8.0, a.script.lateral(t).0);
                        let v_before = a.v;
                        a.step(t, (&ego, 0.0), &sc.scene, world, &c.idm);
                        assert!(a.v >= 0.0);
                        let accel = (a.v - v_before) / world.dt;
                        assert!(accel <= c.idm.max_accel + 1e-9 && accel >= -c.idm.max_decel - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn reactive_agent_stops_behind_stopped_ego() {
        let c = cfg();
        let world = &c.world;
        let sc = scenario(ScenarioKind::LaneFollow, 2);
        let script = AgentScript {
            s0: sc.scene.centerline.project(sc.scene.ego().x, sc.scene.ego().y).s - 30.0,
            v0: 12.0,
            accel: 0.0,
            lateral_start: 0.0,
            lateral_end: 0.0,
            merge_start: 0.0,
            merge_duration: 0.0,
            half_length: 2.5,
            half_width: 1.0,
        };
        let mut a = ReactiveAgent::new(script);
        let ego = sc.scene.ego().pose();
        for k in 0..20 {
            a.step(k as f64 * world.dt, (&ego, 0.0), &sc.scene, world, &c.idm);
        }
        assert!(a.v < 0.5, "{}", a.v);
        let e = sc.scene.centerline.project(ego.x, ego.y).s;
        assert!(a.s + 2.5 < e - 2.5, "agent ran into the stopped ego");
    }

    #[test]
    fn suite_summary_is_mean_of_rows() {
        let c = cfg();
        let expert = ExpertPlanner::new(c.world.clone(), c.idm.clone());
        let suite = evaluate_suite(&expert, &c, &ScenarioKind::ALL, 2, false).unwrap();
        assert_eq!(suite.episodes.len(), 8);
        let mean = suite.episodes.iter().map(|e| e.composite).sum::<f64>() / 8.0;
        assert!((suite.summary.mean_composite - mean).abs() < 1e-15);
        let single = evaluate_suite(&expert, &c, &[ScenarioKind::Merge], 1, false).unwrap();
        let sc = generate_scenario(eval_seed(c.eval.seed_offset, 0), ScenarioKind::Merge, &c.world).unwrap();
        assert_eq!(single.episodes[0], run_episode(&mut expert.clone(), &sc, &c, false).unwrap());
        let mut bytes = Vec::new();
        write_suite_csv(&mut bytes, &suite, false).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], EPISODE_COLUMNS.join(","));
        assert!(lines[9].starts_with("expert,summary,,"));
    }

    #[test]
    fn latency_stats_and_ratio() {
        let s = latency_stats("x", 10, vec![5, 1, 3, 2, 4]);
        assert_eq!((s.mean_ns, s.median_ns, s.p95_ns), (3.0, 3.0, 5.0));
        let report = LatencyReport {
            planners: vec![s, latency_stats("y", 10, vec![30; 4])],
        };
        assert_eq!(report.ratio("y", "x"), Some(10.0));
        assert_eq!(report.ratio("z", "x"), None);
        let c = cfg();
        let mut cv = ConstantVelocityPlanner { world: c.world.clone() };
        let scene = scenario(ScenarioKind::LaneFollow, 0).scene;
        assert!(bench_latency(&mut [&mut cv], &scene, 10, 50).is_err());
        let r = bench_latency(&mut [&mut cv], &scene, 10, 100).unwrap();
        assert_eq!(r.planners[0].times_ns.len(), 100);
    }
}
