//! Scored replay buffer built from expert episodes, with a binary file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! header:     magic "DSTLDATA" | version u32 | state_dim u32 | action_dim u32 |
//!             count u64 | world hash (64 ASCII hex bytes)
//! records:    count x (state f64*D_s, action f64*A, reward f64, next_state f64*D_s, done u8)
//! stats:      state mean, state std (f64*D_s each), action mean, action std (f64*A each)
//! provenance: count x (kind u8, scenario seed u64, step u32)
//! trailer:    skipped scenarios u64
//! ```
//!
//! States and actions are stored normalized by the stats block.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::Rng;

use crate::config::{ExperimentConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::pdm::PdmScorer;
use crate::rng::derive_seed;
use crate::world::{
    action_in_bounds, action_to_trajectory, expert_demonstrate, generate_scenario, raw_features,
    trajectory_to_action, Normalizer, Scenario, ScenarioKind, SceneContext, Trajectory,
};

pub const DATASET_MAGIC: &[u8; 8] = b"DSTLDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Where a record came from, enough to regenerate its scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub world_hash: String,
    pub transitions: Vec<Transition>,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
    pub provenance: Vec<Provenance>,
    /// Scenarios dropped because planning or scoring failed.
    pub skipped: u64,
}

/// Row-stacked batch of transitions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

/// One decision point of an expert episode.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    pub scene: SceneContext,
    pub time: f64,
    pub plan: Trajectory,
    pub agent_futures: Vec<Trajectory>,
}

/// Scenario seed for index `i` of `kind` under the dataset root seed.
pub fn scenario_seed(root: u64, kind: ScenarioKind, i: usize) -> u64 {
    derive_seed(root, &format!("dataset/{kind}/{i}"))
}

/// Replays the expert through `scenario`, replanning every `executed_steps`.
/// Agents follow their scripts.
pub fn expert_episode(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<Vec<EpisodeStep>> {
    let world = &cfg.world;
    let d = &cfg.dataset;
    if d.executed_steps == 0 || d.executed_steps > world.horizon || d.episode_len == 0 {
        return Err(Error::Config("dataset: need 1 <= executed_steps <= horizon and episode_len >= 1".into()));
    }
    let mut scene = scenario.scene.clone();
    let mut steps = Vec::new();
    let mut k = 0;
    while k < d.episode_len {
        let time = k as f64 * world.dt;
        let plan = expert_demonstrate(&scene, scenario.mode_seed, world, &cfg.idm)?;
        let agent_futures = scenario.agent_futures(time, world.horizon, world.dt);
        let next_time = (k + d.executed_steps) as f64 * world.dt;
        let next = scene.after_executing(&plan, d.executed_steps, scenario.agents_at(next_time))?;
        steps.push(EpisodeStep {
            scene,
            time,
            plan,
            agent_futures,
        });
        scene = next;
        k += d.executed_steps;
    }
    steps.push(EpisodeStep {
        scene,
        time: k as f64 * world.dt,
        plan: steps.last().expect("at least one step").plan.clone(),
        agent_futures: Vec::new(),
    });
    Ok(steps)
}

struct RawRecord {
    state: Vec<f64>,
    action: Vec<f64>,
    reward: f64,
    next_state: Vec<f64>,
    done: bool,
    provenance: Provenance,
}

fn scenario_records(
    cfg: &ExperimentConfig,
    scorer: &PdmScorer,
    kind: ScenarioKind,
    seed: u64,
) -> Result<Vec<RawRecord>> {
    let world = &cfg.world;
    let scenario = generate_scenario(seed, kind, world)?;
    let episode = expert_episode(&scenario, cfg)?;
    let decisions = episode.len() - 1;
    let mut out = Vec::with_capacity(decisions);
    for (i, pair) in episode.windows(2).enumerate() {
        let (cur, next) = (&pair[0], &pair[1]);
        let start = cur.scene.ego().pose();
        let action = trajectory_to_action(&start, &cur.plan);
        if !action_in_bounds(&action, world) {
            return Err(Error::InvalidInput(format!("{kind} seed {seed} step {i}: expert action outside the box")));
        }
        let plan = action_to_trajectory(&start, &action, world)?;
        let (reward, _) = scorer.score(&cur.scene, &plan, &cur.agent_futures)?;
        let goal_reached = {
            let e = next.scene.ego();
            next.scene.centerline.project(e.x, e.y).s >= next.scene.goal_arc_length
        };
        out.push(RawRecord {
            state: raw_features(&cur.scene, world)?,
            action,
            reward,
            next_state: raw_features(&next.scene, world)?,
            done: i + 1 == decisions || goal_reached,
            provenance: Provenance {
                kind,
                seed,
                step: (i * cfg.dataset.executed_steps) as u32,
            },
        });
        if goal_reached {
            break;
        }
    }
    Ok(out)
}

/// Builds the buffer over `per_kind` scenarios of each kind in `kinds`.
/// Scenarios are processed in parallel and merged in a fixed order.
pub fn build_buffer(cfg: &ExperimentConfig, kinds: &[ScenarioKind], per_kind: usize, seed: u64) -> Result<Dataset> {
    if per_kind == 0 || kinds.is_empty() {
        return Err(Error::InvalidInput("need at least one scenario".into()));
    }
    cfg.validate()?;
    let scorer = PdmScorer::new(cfg.scorer.clone(), &cfg.world);
    let jobs: Vec<(ScenarioKind, u64)> = kinds
        .iter()
        .flat_map(|k| (0..per_kind).map(move |i| (*k, scenario_seed(seed, *k, i))))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let chunk = jobs.len().div_ceil(workers);
    let results: Vec<Result<Vec<RawRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let scorer = &scorer;
                scope.spawn(move || {
                    part.iter()
                        .map(|(kind, s)| scenario_records(cfg, scorer, *kind, *s))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut raw = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(records) => raw.extend(records),
            Err(_) => skipped += 1,
        }
    }
    if raw.is_empty() {
        return Err(Error::InvalidInput("every scenario failed; dataset is empty".into()));
    }
    let d_s = cfg.world.state_dim;
    let a_dim = cfg.world.action_dim();
    let state_norm = Normalizer::fit(raw.iter().map(|r| r.state.as_slice()), d_s)?;
    let action_norm = Normalizer::fit(raw.iter().map(|r| r.action.as_slice()), a_dim)?;
    let provenance = raw.iter().map(|r| r.provenance).collect();
    let transitions = raw
        .into_iter()
        .map(|r| Transition {
            state: state_norm.normalize(&r.state),
            action: action_norm.normalize(&r.action),
            reward: r.reward,
            next_state: state_norm.normalize(&r.next_state),
            done: r.done,
        })
        .collect();
    let ds = Dataset {
        state_dim: d_s,
        action_dim: a_dim,
        world_hash: cfg.world.hash(),
        transitions,
        state_norm,
        action_norm,
        provenance,
        skipped,
    };
    ds.check()?;
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.provenance.len() != self.transitions.len() {
            return Err(Error::Shape("provenance count differs from record count".into()));
        }
        if self.state_norm.dim() != self.state_dim || self.action_norm.dim() != self.action_dim {
            return Err(Error::Shape("normalizer width differs from dataset dims".into()));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim || t.action.len() != self.action_dim {
                return Err(Error::Shape(format!("record {i} has inconsistent widths")));
            }
            let finite = t.state.iter().chain(&t.action).chain(&t.next_state).all(|v| v.is_finite());
            if !finite || !t.reward.is_finite() {
                return Err(Error::NonFinite(format!("record {i}")));
            }
            if !(0.0..=1.0).contains(&t.reward) {
                return Err(Error::InvalidInput(format!("record {i} reward {} outside [0, 1]", t.reward)));
            }
        }
        Ok(())
    }

    /// Uniform draw of `batch` records with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::InvalidInput("cannot sample from an empty dataset".into()));
        }
        let indices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        Ok(self.gather(&indices))
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let n = indices.len();
        let mut states = Array2::zeros((n, self.state_dim));
        let mut actions = Array2::zeros((n, self.action_dim));
        let mut next_states = Array2::zeros((n, self.state_dim));
        let mut rewards = Array1::zeros(n);
        let mut dones = Array1::zeros(n);
        for (row, &i) in indices.iter().enumerate() {
            let t = &self.transitions[i];
            states.row_mut(row).assign(&ndarray::ArrayView1::from(&t.state));
            actions.row_mut(row).assign(&ndarray::ArrayView1::from(&t.action));
            next_states.row_mut(row).assign(&ndarray::ArrayView1::from(&t.next_state));
            rewards[row] = t.reward;
            dones[row] = if t.done { 1.0 } else { 0.0 };
        }
        Batch {
            indices: indices.to_vec(),
            states,
            actions,
            rewards,
            next_states,
            dones,
        }
    }

    pub fn states(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.state_dim), |(i, j)| self.transitions[i].state[j])
    }

    pub fn actions(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.action_dim), |(i, j)| self.transitions[i].action[j])
    }

    /// Recomputes the reward of record `index` by regenerating its scenario,
    /// replaying the expert to the recorded step, and scoring the
    /// de-normalized action.
    pub fn rescore(&self, index: usize, cfg: &ExperimentConfig) -> Result<f64> {
        let p = self
            .provenance
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("record {index} out of range")))?;
        let scenario = generate_scenario(p.seed, p.kind, &cfg.world)?;
        let episode = expert_episode(&scenario, cfg)?;
        let step = episode
            .get(p.step as usize / cfg.dataset.executed_steps)
            .ok_or_else(|| Error::InvalidInput(format!("record {index} step {} beyond episode", p.step)))?;
        let action = self.action_norm.denormalize(&self.transitions[index].action);
        let plan = action_to_trajectory(&step.scene.ego().pose(), &action, &cfg.world)?;
        let scorer = PdmScorer::new(cfg.scorer.clone(), &cfg.world);
        Ok(scorer.score(&step.scene, &plan, &step.agent_futures)?.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.write_u32::<LE>(DATASET_VERSION).unwrap();
        out.write_u32::<LE>(self.state_dim as u32).unwrap();
        out.write_u32::<LE>(self.action_dim as u32).unwrap();
        out.write_u64::<LE>(self.len() as u64).unwrap();
        out.extend_from_slice(self.world_hash.as_bytes());
        let put = |out: &mut Vec<u8>, vs: &[f64]| {
            for v in vs {
                out.write_f64::<LE>(*v).unwrap();
            }
        };
        for t in &self.transitions {
            put(&mut out, &t.state);
            put(&mut out, &t.action);
            put(&mut out, &[t.reward]);
            put(&mut out, &t.next_state);
            out.push(u8::from(t.done));
        }
        put(&mut out, &self.state_norm.mean);
        put(&mut out, &self.state_norm.std);
        put(&mut out, &self.action_norm.mean);
        put(&mut out, &self.action_norm.std);
        for p in &self.provenance {
            out.push(p.kind.index());
            out.write_u64::<LE>(p.seed).unwrap();
            out.write_u32::<LE>(p.step).unwrap();
        }
        out.write_u64::<LE>(self.skipped).unwrap();
        out
    }

    /// Parses a dataset file and checks its dims and world hash against `world`.
    pub fn from_bytes(bytes: &[u8], world: &WorldConfig) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::format("header.magic", "file too short"))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("header.magic", "not a dataset file"));
        }
        let u32_field = |r: &mut Cursor<&[u8]>, f: &str| r.read_u32::<LE>().map_err(|_| Error::format(f, "truncated header"));
        let version = u32_field(&mut r, "header.version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(
                "header.version",
                format!("unsupported version {version}, expected {DATASET_VERSION}"),
            ));
        }
        let state_dim = u32_field(&mut r, "header.state_dim")? as usize;
        let action_dim = u32_field(&mut r, "header.action_dim")? as usize;
        if state_dim != world.state_dim {
            return Err(Error::format(
                "header.state_dim",
                format!("file has {state_dim}, world config expects {}", world.state_dim),
            ));
        }
        if action_dim != world.action_dim() {
            return Err(Error::format(
                "header.action_dim",
                format!("file has {action_dim}, world config expects {}", world.action_dim()),
            ));
        }
        let count = r.read_u64::<LE>().map_err(|_| Error::format("header.count", "truncated header"))?;
        let mut hash = [0u8; 64];
        r.read_exact(&mut hash).map_err(|_| Error::format("header.world_hash", "truncated header"))?;
        let world_hash = String::from_utf8(hash.to_vec()).map_err(|_| Error::format("header.world_hash", "not ASCII hex"))?;
        let expected = world.hash();
        if world_hash != expected {
            return Err(Error::HashMismatch {
                what: "dataset world config".into(),
                expected,
                found: world_hash,
            });
        }
        let record_bytes = 8 * (2 * state_dim + action_dim + 1) + 1;
        let stats_bytes = 16 * (state_dim + action_dim);
        let needed = (count as u128) * (record_bytes as u128 + 13) + stats_bytes as u128 + 8;
        let remaining = (bytes.len() - r.position() as usize) as u128;
        if needed != remaining {
            let field = if remaining < (count as u128) * record_bytes as u128 { "records" } else { "trailer" };
            return Err(Error::format(
                field,
                format!("{count} records of {state_dim}/{action_dim} need {needed} bytes after the header, found {remaining}"),
            ));
        }
        let get = |r: &mut Cursor<&[u8]>, n: usize| -> Vec<f64> { (0..n).map(|_| r.read_f64::<LE>().unwrap()).collect() };
        let mut transitions = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let state = get(&mut r, state_dim);
            let action = get(&mut r, action_dim);
            let reward = get(&mut r, 1)[0];
            let next_state = get(&mut r, state_dim);
            let done = match r.read_u8().unwrap() {
                0 => false,
                1 => true,
                other => return Err(Error::format("records.done", format!("flag {other} is not 0 or 1"))),
            };
            transitions.push(Transition { state, action, reward, next_state, done });
        }
        let state_norm = Normalizer { mean: get(&mut r, state_dim), std: get(&mut r, state_dim) };
        let action_norm = Normalizer { mean: get(&mut r, action_dim), std: get(&mut r, action_dim) };
        if state_norm.std.iter().chain(&action_norm.std).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::format("stats", "standard deviations must be positive"));
        }
        let mut provenance = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let k = r.read_u8().unwrap();
            let kind = ScenarioKind::from_index(k)
                .ok_or_else(|| Error::format("provenance.kind", format!("unknown scenario index {k}")))?;
            let seed = r.read_u64::<LE>().unwrap();
            let step = r.read_u32::<LE>().unwrap();
            provenance.push(Provenance { kind, seed, step });
        }
        let skipped = r.read_u64::<LE>().unwrap();
        let ds = Dataset {
            state_dim,
            action_dim,
            world_hash,
            transitions,
            state_norm,
            action_norm,
            provenance,
            skipped,
        };
        ds.check().map_err(|e| Error::format("records", e.to_string()))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, world: &WorldConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                what: "dataset".into(),
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, world)
    }
}
