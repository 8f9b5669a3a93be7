//! Experiment configuration.
//!
//! One nested TOML document holds every constant the stages need. Unknown keys
//! are rejected, and the SHA-256 of the canonical JSON rendering of the config
//! is stamped into every artifact so stages can refuse mismatched inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub wheelbase: f64,
    pub v_max: f64,
    pub steer_max: f64,
    pub dt: f64,
    pub horizon: usize,
    pub history_len: usize,
    pub state_dim: usize,
    pub max_agents: usize,
    pub nearest_agents: usize,
    pub ego_half_length: f64,
    pub ego_half_width: f64,
    pub corridor_half_width: f64,
    pub centerline_length: f64,
    /// Slack added to `v_max * dt` when checking per-step displacement.
    pub feasibility_margin: f64,
    /// Bound on the per-step lateral displacement in the ego frame.
    pub max_lateral_step: f64,
    /// Bound on the ego-frame heading of any planned pose.
    pub max_heading: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            wheelbase: 3.0,
            v_max: 15.0,
            steer_max: 0.5,
            dt: 0.5,
            horizon: 16,
            history_len: 4,
            state_dim: 32,
            max_agents: 4,
            nearest_agents: 4,
            ego_half_length: 2.5,
            ego_half_width: 1.0,
            corridor_half_width: 4.5,
            centerline_length: 500.0,
            feasibility_margin: 0.5,
            max_lateral_step: 2.5,
            max_heading: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl WorldConfig {
    pub fn action_dim(&self) -> usize {
        3 * self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wheelbase", self.wheelbase),
            ("v_max", self.v_max),
            ("steer_max", self.steer_max),
            ("dt", self.dt),
            ("ego_half_length", self.ego_half_length),
            ("ego_half_width", self.ego_half_width),
            ("corridor_half_width", self.corridor_half_width),
            ("centerline_length", self.centerline_length),
            ("max_lateral_step", self.max_lateral_step),
            ("max_heading", self.max_heading),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("world.{name} must be positive, got {v}")));
            }
        }
        if self.horizon < 3 {
            return Err(Error::Config("world.horizon must be at least 3".into()));
        }
        if self.history_len < 2 {
            return Err(Error::Config("world.history_len must be at least 2".into()));
        }
        if self.state_dim != crate::world::FEATURE_DIM {
            return Err(Error::Config(format!(
                "world.state_dim must equal the encoder width {}",
                crate::world::FEATURE_DIM
            )));
        }
        if self.nearest_agents != crate::world::ENCODED_AGENTS {
            return Err(Error::Config(format!(
                "world.nearest_agents must equal {}",
                crate::world::ENCODED_AGENTS
            )));
        }
        if self.max_agents < self.nearest_agents {
            return Err(Error::Config("world.max_agents must be >= nearest_agents".into()));
        }
        let reach = self.v_max * self.dt;
        if reach.hypot(self.max_lateral_step) > reach + self.feasibility_margin || self.max_heading > std::f64::consts::PI {
            return Err(Error::Config(
                "world.max_lateral_step too large: boxed actions could exceed the feasibility bound".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// Weights of the averaged scorer terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerWeights {
    pub ttc: f64,
    pub comfort: f64,
    pub proximity: f64,
    pub progress: f64,
    pub speed_limit: f64,
    pub lane_following: f64,
}

impl Default for ScorerWeights {
    fn default() -> Self {
        Self {
            ttc: 5.0,
            comfort: 5.0,
            proximity: 5.0,
            progress: 2.0,
            speed_limit: 4.0,
            lane_following: 2.0,
        }
    }
}

impl ScorerWeights {
    pub fn total(&self) -> f64 {
        self.ttc + self.comfort + self.proximity + self.progress + self.speed_limit + self.lane_following
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.ttc,
            self.comfort,
            self.proximity,
            self.progress,
            self.speed_limit,
            self.lane_following,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("scorer weights must be finite and non-negative".into()));
        }
        if self.total() <= 0.0 {
            return Err(Error::Config("at least one scorer weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub weights: ScorerWeights,
    pub ttc_safe: f64,
    pub ttc_critical: f64,
    pub max_accel: f64,
    pub max_jerk: f64,
    pub max_yaw_rate: f64,
    /// Constant part of the comfortable following distance, meters.
    pub proximity_buffer: f64,
    /// Lateral offset at which lane following reaches zero, meters.
    pub lane_tolerance: f64,
    /// Total backwards travel tolerated with a half direction score, meters.
    pub direction_tolerance: f64,
    /// Acceleration of the unobstructed reference rollout used by progress.
    pub reference_accel: f64,
    /// Extra lateral clearance when deciding which agent is the lead.
    pub lead_lateral_margin: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            weights: ScorerWeights::default(),
            ttc_safe: 3.0,
            ttc_critical: 0.95,
            max_accel: 4.0,
            max_jerk: 8.0,
            max_yaw_rate: 0.8,
            proximity_buffer: 3.0,
            lane_tolerance: 1.0,
            direction_tolerance: 0.5,
            reference_accel: 2.0,
            lead_lateral_margin: 0.2,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.ttc_critical > 0.0 && self.ttc_safe > self.ttc_critical) {
            return Err(Error::Config("scorer: need 0 < ttc_critical < ttc_safe".into()));
        }
        for (name, v) in [
            ("max_accel", self.max_accel),
            ("max_jerk", self.max_jerk),
            ("max_yaw_rate", self.max_yaw_rate),
            ("lane_tolerance", self.lane_tolerance),
            ("reference_accel", self.reference_accel),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("scorer.{name} must be positive")));
            }
        }
        if !(self.proximity_buffer >= 0.0 && self.direction_tolerance >= 0.0) {
            return Err(Error::Config("scorer tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Intelligent-driver-model parameters shared by the expert and reactive agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmConfig {
    pub headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub min_gap: f64,
    pub exponent: f64,
    /// Hard braking limit.
    pub max_decel: f64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self {
            headway: 2.0,
            max_accel: 2.0,
            comfortable_decel: 3.0,
            min_gap: 2.0,
            exponent: 4.0,
            max_decel: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Scenarios generated per kind.
    pub scenarios_per_kind: usize,
    pub episode_len: usize,
    pub executed_steps: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenarios_per_kind: 60,
            episode_len: 16,
            executed_steps: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub denoiser_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            denoiser_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            value_hidden: vec![256, 256],
            policy_hidden: vec![256, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    pub n_steps: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Half-width of the normalized action box in standard deviations.
    pub action_box: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_lo: 0.02,
            t_hi: 0.98,
            n_steps: 20,
            train_steps: 4000,
            batch: 128,
            lr: 1e-3,
            action_box: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub tau: f64,
    pub gamma: f64,
    pub beta_awr: f64,
    pub awr_clip: f64,
    pub polyak: f64,
    pub lr_value: f64,
    pub lr_q: f64,
    pub lr_policy: f64,
    pub train_steps: usize,
    /// Advantage-weighted pretraining steps of the initial policy.
    pub awr_steps: usize,
    pub batch: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            gamma: 0.99,
            beta_awr: 3.0,
            awr_clip: 100.0,
            polyak: 0.005,
            lr_value: 3e-4,
            lr_q: 3e-4,
            lr_policy: 3e-4,
            train_steps: 3000,
            awr_steps: 2000,
            batch: 128,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("critic.tau must lie in (0.5, 1), got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("critic.gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.awr_clip > 0.0) || !(self.beta_awr >= 0.0) {
            return Err(Error::Config("critic.awr_clip must be > 0 and beta_awr >= 0".into()));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::Config("critic.polyak must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrpoConfig {
    /// Temperature of the score regularizer; the score term is scaled by
    /// `1 / beta`. The default keeps the score-term norm within a few times
    /// the Q-gradient norm at initialization on the default pipeline.
    pub beta: f64,
    pub lr: f64,
    pub score_samples: usize,
    pub train_steps: usize,
    pub batch: usize,
}

impl Default for SrpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            lr: 3e-4,
            score_samples: 1,
            train_steps: 2000,
            batch: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scenarios_per_kind: usize,
    /// First scenario seed of the evaluation suite; disjoint from training seeds.
    pub seed_offset: u64,
    pub episode_len: usize,
    pub replan_every: usize,
    pub reactive: bool,
    pub bench_calls: usize,
    pub bench_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenarios_per_kind: 13,
            seed_offset: 1_000_000,
            episode_len: 16,
            replan_every: 2,
            reactive: false,
            bench_calls: 200,
            bench_warmup: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub world: WorldConfig,
    pub scorer: ScorerConfig,
    pub idm: IdmConfig,
    pub dataset: DatasetConfig,
    pub networks: NetworkConfig,
    pub diffusion: DiffusionConfig,
    pub critic: CriticConfig,
    pub srpo: SrpoConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_917,
            output_dir: "runs/default".into(),
            world: WorldConfig::default(),
            scorer: ScorerConfig::default(),
            idm: IdmConfig::default(),
            dataset: DatasetConfig::default(),
            networks: NetworkConfig::default(),
            diffusion: DiffusionConfig::default(),
            critic: CriticConfig::default(),
            srpo: SrpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a `dotted.key=value` override to a scalar field.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut doc: toml::Table =
            toml::from_str(&self.to_toml_string()).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut table = &mut doc;
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
        }
        let current = table
            .get(*last)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let raw = raw.trim();
        let value = match current {
            toml::Value::String(_) => toml::Value::String(raw.to_string()),
            toml::Value::Table(_) | toml::Value::Array(_) => {
                return Err(Error::Config(format!("`{key}` is not a scalar field")))
            }
            _ => {
                let wrapped: toml::Table = toml::from_str(&format!("v = {raw}"))
                    .map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
                wrapped["v"].clone()
            }
        };
        table.insert(last.to_string(), value);
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        *self = Self::from_toml_str(&text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.scorer.validate()?;
        self.critic.validate()?;
        let d = &self.diffusion;
        if !(0.0 < d.t_lo && d.t_lo < d.t_hi && d.t_hi < 1.0) {
            return Err(Error::Config("diffusion: need 0 < t_lo < t_hi < 1".into()));
        }
        if d.n_steps == 0 || d.batch == 0 || !(d.action_box > 0.0) {
            return Err(Error::Config("diffusion: n_steps, batch, action_box must be positive".into()));
        }
        if !(self.srpo.beta > 0.0) || self.srpo.score_samples == 0 || self.srpo.batch == 0 {
            return Err(Error::Config("srpo: beta > 0, score_samples >= 1, batch >= 1 required".into()));
        }
        let ds = &self.dataset;
        if ds.scenarios_per_kind == 0 || ds.executed_steps == 0 || ds.episode_len < ds.executed_steps {
            return Err(Error::Config("dataset: need scenarios_per_kind >= 1 and episode_len >= executed_steps >= 1".into()));
        }
        let ev = &self.eval;
        if ev.scenarios_per_kind == 0 || ev.replan_every == 0 || ev.episode_len == 0 {
            return Err(Error::Config("eval: counts must be positive".into()));
        }
        if ev.replan_every > self.world.horizon {
            return Err(Error::Config("eval.replan_every must not exceed the horizon".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// SHA-256 over the canonical JSON rendering of a value.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes to json");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("seed = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
        let err = ExperimentConfig::from_toml_str("[world]\nwheelbas = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("wheelbas"));
    }

    #[test]
    fn overrides_touch_only_scalars() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("critic.tau=0.8").unwrap();
        assert_eq!(cfg.critic.tau, 0.8);
        cfg.set("output_dir=/tmp/x").unwrap();
        assert_eq!(cfg.output_dir, "/tmp/x");
        assert!(cfg.set("critic.nope=1").is_err());
        assert!(cfg.set("networks.policy_hidden=3").is_err());
        assert!(cfg.set("critic.tau=0.2").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.world.hash(), b.world.hash());
    }
}
