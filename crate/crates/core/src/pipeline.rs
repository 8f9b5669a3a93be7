//! Stage orchestration over an output directory: every stage reads the
//! artifacts of its predecessors, checks their provenance, and writes its own.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{content_hash, ExperimentConfig};
use crate::dataset::{build_buffer, Dataset};
use crate::diffusion::{train_denoiser, DenoiserNet};
use crate::error::{Error, Result};
use crate::eval::{
    bench_latency, evaluate_suite, eval_seed, write_suite_csv, ConstantVelocityPlanner, DiffusionPlanner, ExpertPlanner,
    LatencyReport, Planner, PolicyPlanner, SuiteResult, SuiteSummary,
};
use crate::iql::{train_critic as fit_critic, CriticBundle, CriticHyper};
use crate::nn::{Checkpoint, OptimizerState};
use crate::rng::{derive_seed, stream};
use crate::srpo::{extract_policy as run_srpo, normalized_bounds, PolicyNet, SrpoDiagnostics, SrpoHyper};
use crate::world::{generate_scenario, Normalizer, Scenario, ScenarioKind, SceneContext, Trajectory};

/// Version of the provenance block written into every artifact.
pub const ARTIFACT_VERSION: u32 = 1;

/// Pipeline stages, each hashing only the configuration it depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Prior,
    Critic,
    Policy,
    Eval,
}

impl Stage {
    fn sections(self) -> &'static [&'static str] {
        const DATA: &[&str] = &["seed", "world", "scorer", "idm", "dataset"];
        match self {
            Stage::Data => DATA,
            Stage::Prior => &["seed", "world", "scorer", "idm", "dataset", "diffusion", "networks.denoiser_hidden"],
            Stage::Critic => &[
                "seed",
                "world",
                "scorer",
                "idm",
                "dataset",
                "critic",
                "networks.critic_hidden",
                "networks.value_hidden",
                "networks.policy_hidden",
            ],
            Stage::Policy => &[
                "seed",
                "world",
                "scorer",
                "idm",
                "dataset",
                "diffusion",
                "critic",
                "srpo",
                "networks",
            ],
            Stage::Eval => &[
                "seed",
                "world",
                "scorer",
                "idm",
                "dataset",
                "diffusion",
                "critic",
                "srpo",
                "networks",
                "eval",
            ],
        }
    }
}

/// Hash of the configuration sections a stage depends on. The output
/// directory never enters a hash.
pub fn stage_hash(cfg: &ExperimentConfig, stage: Stage) -> String {
    let full = serde_json::to_value(cfg).expect("config serializes");
    let mut picked = serde_json::Map::new();
    for key in stage.sections() {
        let mut node = &full;
        for part in key.split('.') {
            node = &node[part];
        }
        picked.insert((*key).to_string(), node.clone());
    }
    content_hash(&Value::Object(picked))
}

/// Hash of everything but the output directory.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    stage_hash(cfg, Stage::Eval)
}

/// Provenance block attached to every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactInfo {
    pub artifact: String,
    pub command: String,
    pub config_hash: String,
    pub stage_hash: String,
    pub seed: u64,
    pub format_version: u32,
}

impl ArtifactInfo {
    fn new(cfg: &ExperimentConfig, artifact: &str, command: &str, stage: Stage) -> Self {
        Self {
            artifact: artifact.to_string(),
            command: command.to_string(),
            config_hash: config_hash(cfg),
            stage_hash: stage_hash(cfg, stage),
            seed: cfg.seed,
            format_version: ARTIFACT_VERSION,
        }
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        let m = &mut ck.meta;
        m.insert("artifact".into(), self.artifact.clone());
        m.insert("command".into(), self.command.clone());
        m.insert("config_hash".into(), self.config_hash.clone());
        m.insert("stage_hash".into(), self.stage_hash.clone());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("format_version".into(), self.format_version.to_string());
    }
}

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    pub fn dataset_meta(&self) -> PathBuf {
        self.root.join("dataset.meta.json")
    }

    pub fn prior(&self) -> PathBuf {
        self.root.join("prior.ckpt")
    }

    pub fn critic(&self) -> PathBuf {
        self.root.join("critic.ckpt")
    }

    pub fn policy_init(&self) -> PathBuf {
        self.root.join("policy_init.ckpt")
    }

    pub fn policy(&self) -> PathBuf {
        self.root.join("policy.ckpt")
    }

    pub fn critic_log(&self) -> PathBuf {
        self.root.join("critic_log.csv")
    }

    pub fn srpo_log(&self) -> PathBuf {
        self.root.join("srpo_diagnostics.csv")
    }

    pub fn eval_csv(&self, planner: PlannerKind, reactive: bool) -> PathBuf {
        self.root.join(format!("eval_{}_{}.csv", planner, mode(reactive)))
    }

    pub fn eval_json(&self, planner: PlannerKind, reactive: bool) -> PathBuf {
        self.root.join(format!("eval_{}_{}.json", planner, mode(reactive)))
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench.json")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_timing(&self) -> PathBuf {
        self.root.join("report_timing.json")
    }
}

fn mode(reactive: bool) -> &'static str {
    if reactive {
        "r"
    } else {
        "nr"
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = read(path, "artifact")?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn read(path: &Path, what: &str) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: what.to_string(),
            path: path.to_path_buf(),
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let bytes = read(path, what)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(what, e.to_string()))
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read(path, what)?)
}

fn check_stage(found: &str, what: &str, cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    let expected = stage_hash(cfg, stage);
    if found != expected {
        return Err(Error::HashMismatch {
            what: format!("{what} configuration"),
            expected,
            found: found.to_string(),
        });
    }
    Ok(())
}

fn check_checkpoint_stage(ck: &Checkpoint, what: &str, cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    check_stage(ck.meta_value("stage_hash")?, what, cfg, stage)
}

fn write_norms(ck: &mut Checkpoint, state: &Normalizer, action: &Normalizer) {
    for (name, n) in [("state_norm", state), ("action_norm", action)] {
        ck.vectors.insert(format!("{name}.mean"), n.mean.clone());
        ck.vectors.insert(format!("{name}.std"), n.std.clone());
        ck.meta.insert(name.to_string(), n.id());
    }
}

fn read_norm(ck: &Checkpoint, name: &str) -> Result<Normalizer> {
    let n = Normalizer {
        mean: ck.vector(&format!("{name}.mean"))?.to_vec(),
        std: ck.vector(&format!("{name}.std"))?.to_vec(),
    };
    if n.mean.len() != n.std.len() || n.id() != ck.meta_value(name)? {
        return Err(Error::format(name, "stored statistics do not match their identifier"));
    }
    Ok(n)
}

fn check_norms(ck: &Checkpoint, what: &str, data: &Dataset) -> Result<()> {
    for (name, n) in [("state_norm", &data.state_norm), ("action_norm", &data.action_norm)] {
        let found = ck.meta_value(name)?;
        if found != n.id() {
            return Err(Error::HashMismatch {
                what: format!("{what} {name}"),
                expected: n.id(),
                found: found.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub provenance: ArtifactInfo,
    pub records: usize,
    pub skipped: u64,
    pub sha256: String,
}

/// Builds the replay buffer.
pub fn gen_data(cfg: &ExperimentConfig, paths: &Paths) -> Result<Dataset> {
    cfg.validate()?;
    let ds = build_buffer(
        cfg,
        &ScenarioKind::ALL,
        cfg.dataset.scenarios_per_kind,
        derive_seed(cfg.seed, "dataset"),
    )?;
    let bytes = ds.to_bytes();
    write(&paths.dataset(), &bytes)?;
    let meta = DatasetMeta {
        provenance: ArtifactInfo::new(cfg, "dataset", "gen-data", Stage::Data),
        records: ds.len(),
        skipped: ds.skipped,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    write_json(&paths.dataset_meta(), &meta)?;
    Ok(ds)
}

pub fn load_dataset(cfg: &ExperimentConfig, paths: &Paths) -> Result<Dataset> {
    let bytes = read(&paths.dataset(), "dataset")?;
    let meta: DatasetMeta = read_json(&paths.dataset_meta(), "dataset metadata")?;
    check_stage(&meta.provenance.stage_hash, "dataset", cfg, Stage::Data)?;
    let found = hex::encode(Sha256::digest(&bytes));
    if found != meta.sha256 {
        return Err(Error::HashMismatch {
            what: "dataset contents".into(),
            expected: meta.sha256,
            found,
        });
    }
    Dataset::from_bytes(&bytes, &cfg.world)
}

/// Fits the diffusion prior; returns the per-step losses.
pub fn train_prior(cfg: &ExperimentConfig, paths: &Paths) -> Result<Vec<f64>> {
    let ds = load_dataset(cfg, paths)?;
    let mut rng = stream(cfg.seed, "prior");
    let mut model = DenoiserNet::new(ds.action_dim, ds.state_dim, &cfg.networks.denoiser_hidden, &mut rng, false)?;
    let losses = train_denoiser(&mut model, ds.states().view(), ds.actions().view(), &cfg.diffusion, &mut rng)?;
    let mut ck = Checkpoint::new();
    ArtifactInfo::new(cfg, "prior", "train-prior", Stage::Prior).write_meta(&mut ck);
    write_norms(&mut ck, &ds.state_norm, &ds.action_norm);
    ck.push_net("denoiser", model.net().clone(), None);
    ck.vectors.insert("loss".into(), losses.clone());
    ck.save(&paths.prior())?;
    Ok(losses)
}

pub fn load_prior(cfg: &ExperimentConfig, paths: &Paths) -> Result<(DenoiserNet, Checkpoint)> {
    let ck = load_checkpoint(&paths.prior(), "prior checkpoint (run train-prior)")?;
    check_checkpoint_stage(&ck, "prior checkpoint", cfg, Stage::Prior)?;
    let net = ck.net("denoiser")?.net.clone();
    let model = DenoiserNet::from_net(net, cfg.world.action_dim(), cfg.world.state_dim)?;
    Ok((model, ck))
}

/// Trains the critic bundle and the advantage-weighted initial policy.
pub fn train_critic(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    let ds = load_dataset(cfg, paths)?;
    let mut rng = stream(cfg.seed, "critic");
    let n = &cfg.networks;
    let mut bundle = CriticBundle::new(ds.state_dim, ds.action_dim, &n.value_hidden, &n.critic_hidden, &mut rng)?;
    let bounds = normalized_bounds(&cfg.world, &ds.action_norm)?;
    let mut policy = PolicyNet::new(ds.state_dim, &n.policy_hidden, &bounds, &mut rng)?;
    let mut opt = OptimizerState::new(policy.net().params().len(), cfg.critic.lr_policy);
    let hyper = CriticHyper::from_config(&cfg.critic);
    let c = &cfg.critic;
    let log = fit_critic(&mut bundle, &mut policy, &mut opt, &ds, &hyper, c.train_steps, c.awr_steps, c.batch, &mut rng)?;

    let info = ArtifactInfo::new(cfg, "critic", "train-critic", Stage::Critic);
    let mut ck = Checkpoint::new();
    info.write_meta(&mut ck);
    write_norms(&mut ck, &ds.state_norm, &ds.action_norm);
    bundle.write_into(&mut ck);
    ck.vectors.insert("value_loss".into(), log.value_loss.clone());
    ck.vectors.insert("q_loss".into(), log.q_loss.clone());
    ck.save(&paths.critic())?;

    let mut ck = Checkpoint::new();
    ArtifactInfo {
        artifact: "policy_init".into(),
        ..info
    }
    .write_meta(&mut ck);
    write_norms(&mut ck, &ds.state_norm, &ds.action_norm);
    ck.push_net("policy", policy.net().clone(), Some(opt));
    ck.vectors.insert("awr_loss".into(), log.awr_loss.clone());
    ck.save(&paths.policy_init())?;

    // the AWR phase may be shorter or longer than the TD phase; missing cells stay empty
    let cell = |v: &[f64], i: usize| v.get(i).map_or(String::new(), |x| x.to_string());
    let mut text = String::from("step,value_loss,q_loss,awr_loss\n");
    for i in 0..log.q_loss.len().max(log.awr_loss.len()) {
        text.push_str(&format!(
            "{i},{},{},{}\n",
            cell(&log.value_loss, i),
            cell(&log.q_loss, i),
            cell(&log.awr_loss, i)
        ));
    }
    write(&paths.critic_log(), text.as_bytes())
}

pub fn load_critic(cfg: &ExperimentConfig, paths: &Paths) -> Result<(CriticBundle, Checkpoint)> {
    let ck = load_checkpoint(&paths.critic(), "critic checkpoint (run train-critic)")?;
    check_checkpoint_stage(&ck, "critic checkpoint", cfg, Stage::Critic)?;
    Ok((CriticBundle::read_from(&ck)?, ck))
}

/// A policy checkpoint with its normalization statistics.
#[derive(Debug, Clone)]
pub struct LoadedPolicy {
    pub policy: PolicyNet,
    pub state_norm: Normalizer,
    pub action_norm: Normalizer,
    pub checkpoint: Checkpoint,
}

pub fn load_policy(cfg: &ExperimentConfig, paths: &Paths, init: bool) -> Result<LoadedPolicy> {
    let (path, what, stage) = if init {
        (paths.policy_init(), "initial policy checkpoint (run train-critic)", Stage::Critic)
    } else {
        (paths.policy(), "policy checkpoint (run extract-policy)", Stage::Policy)
    };
    let ck = load_checkpoint(&path, what)?;
    check_checkpoint_stage(&ck, what, cfg, stage)?;
    let policy = PolicyNet::from_net(ck.net("policy")?.net.clone())?;
    if policy.state_dim() != cfg.world.state_dim || policy.action_dim() != cfg.world.action_dim() {
        return Err(Error::Shape(format!("{what} does not match the world dimensions")));
    }
    Ok(LoadedPolicy {
        policy,
        state_norm: read_norm(&ck, "state_norm")?,
        action_norm: read_norm(&ck, "action_norm")?,
        checkpoint: ck,
    })
}

/// Runs score-regularized extraction from the initial policy.
pub fn extract_policy(cfg: &ExperimentConfig, paths: &Paths) -> Result<Vec<SrpoDiagnostics>> {
    let init = load_policy(cfg, paths, true)?;
    let (bundle, critic_ck) = load_critic(cfg, paths)?;
    let (prior, prior_ck) = load_prior(cfg, paths)?;
    let ds = load_dataset(cfg, paths)?;
    check_norms(&prior_ck, "prior checkpoint", &ds)?;
    check_norms(&critic_ck, "critic checkpoint", &ds)?;
    check_norms(&init.checkpoint, "initial policy checkpoint", &ds)?;

    let mut rng = stream(cfg.seed, "srpo");
    let hyper = SrpoHyper::from_config(&cfg.srpo);
    let (policy, log) = run_srpo(&init.policy, &bundle, &prior, &ds, &hyper, cfg.srpo.train_steps, cfg.srpo.batch, &mut rng)?;

    let mut ck = Checkpoint::new();
    ArtifactInfo::new(cfg, "policy", "extract-policy", Stage::Policy).write_meta(&mut ck);
    write_norms(&mut ck, &ds.state_norm, &ds.action_norm);
    for (name, path) in [("source.prior", paths.prior()), ("source.critic", paths.critic()), ("source.policy_init", paths.policy_init()), ("source.dataset", paths.dataset())] {
        ck.meta.insert(name.into(), sha256_file(&path)?);
    }
    ck.push_net("policy", policy.net().clone(), None);
    let column = |f: fn(&SrpoDiagnostics) -> f64| log.iter().map(f).collect::<Vec<f64>>();
    ck.vectors.insert("q_term_norm".into(), column(|d| d.q_term_norm));
    ck.vectors.insert("score_term_norm".into(), column(|d| d.score_term_norm));
    ck.vectors.insert("mean_q".into(), column(|d| d.mean_q));
    ck.save(&paths.policy())?;

    let mut text = String::from("step,q_term_norm,score_term_norm,mean_q,dropped\n");
    for (i, d) in log.iter().enumerate() {
        text.push_str(&format!("{i},{},{},{},{}\n", d.q_term_norm, d.score_term_norm, d.mean_q, d.dropped));
    }
    write(&paths.srpo_log(), text.as_bytes())?;
    Ok(log)
}

/// Planners available to `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlannerKind {
    Policy,
    Diffusion,
    Expert,
    AwrInit,
    ConstantVelocity,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 5] = [
        PlannerKind::Policy,
        PlannerKind::Diffusion,
        PlannerKind::Expert,
        PlannerKind::AwrInit,
        PlannerKind::ConstantVelocity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerKind::Policy => "policy",
            PlannerKind::Diffusion => "diffusion",
            PlannerKind::Expert => "expert",
            PlannerKind::AwrInit => "awr-init",
            PlannerKind::ConstantVelocity => "constant-velocity",
        }
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown planner `{s}`; expected one of policy, diffusion, expert, awr-init, constant-velocity")))
    }
}

/// Closed set of planners so suites can clone them per episode.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum AnyPlanner {
    Policy(PolicyPlanner),
    Diffusion(DiffusionPlanner),
    Expert(ExpertPlanner),
    ConstantVelocity(ConstantVelocityPlanner),
}

impl Planner for AnyPlanner {
    fn name(&self) -> &str {
        match self {
            AnyPlanner::Policy(p) => p.name(),
            AnyPlanner::Diffusion(p) => p.name(),
            AnyPlanner::Expert(p) => p.name(),
            AnyPlanner::ConstantVelocity(p) => p.name(),
        }
    }

    fn reset(&mut self, scenario: &Scenario) {
        match self {
            AnyPlanner::Policy(p) => p.reset(scenario),
            AnyPlanner::Diffusion(p) => p.reset(scenario),
            AnyPlanner::Expert(p) => p.reset(scenario),
            AnyPlanner::ConstantVelocity(p) => p.reset(scenario),
        }
    }

    fn plan(&mut self, scene: &SceneContext) -> Result<Trajectory> {
        match self {
            AnyPlanner::Policy(p) => p.plan(scene),
            AnyPlanner::Diffusion(p) => p.plan(scene),
            AnyPlanner::Expert(p) => p.plan(scene),
            AnyPlanner::ConstantVelocity(p) => p.plan(scene),
        }
    }
}

fn policy_planner(cfg: &ExperimentConfig, paths: &Paths, init: bool) -> Result<PolicyPlanner> {
    let p = load_policy(cfg, paths, init)?;
    Ok(PolicyPlanner {
        name: if init { "awr-init" } else { "policy" }.into(),
        policy: p.policy,
        world: cfg.world.clone(),
        state_norm: p.state_norm,
        action_norm: p.action_norm,
    })
}

fn diffusion_planner(cfg: &ExperimentConfig, paths: &Paths, n_steps: usize) -> Result<DiffusionPlanner> {
    let (prior, ck) = load_prior(cfg, paths)?;
    let d = &cfg.diffusion;
    DiffusionPlanner::new(
        prior,
        cfg.world.clone(),
        read_norm(&ck, "state_norm")?,
        read_norm(&ck, "action_norm")?,
        n_steps,
        d.t_lo,
        d.action_box,
        derive_seed(cfg.seed, "eval/sampler"),
    )
}

pub fn build_planner(kind: PlannerKind, cfg: &ExperimentConfig, paths: &Paths) -> Result<AnyPlanner> {
    Ok(match kind {
        PlannerKind::Policy => AnyPlanner::Policy(policy_planner(cfg, paths, false)?),
        PlannerKind::AwrInit => AnyPlanner::Policy(policy_planner(cfg, paths, true)?),
        PlannerKind::Diffusion => AnyPlanner::Diffusion(diffusion_planner(cfg, paths, cfg.diffusion.n_steps)?),
        PlannerKind::Expert => AnyPlanner::Expert(ExpertPlanner::new(cfg.world.clone(), cfg.idm.clone())),
        PlannerKind::ConstantVelocity => AnyPlanner::ConstantVelocity(ConstantVelocityPlanner { world: cfg.world.clone() }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub provenance: ArtifactInfo,
    pub planner: String,
    pub reactive: bool,
    pub summary: Value,
    pub episodes: Value,
}

/// Evaluates one planner over the configured suite.
pub fn eval(cfg: &ExperimentConfig, paths: &Paths, kind: PlannerKind, reactive: bool) -> Result<SuiteResult> {
    cfg.validate()?;
    let planner = build_planner(kind, cfg, paths)?;
    let suite = evaluate_suite(&planner, cfg, &ScenarioKind::ALL, cfg.eval.scenarios_per_kind, reactive)?;
    let mut csv = Vec::new();
    write_suite_csv(&mut csv, &suite, reactive)?;
    write(&paths.eval_csv(kind, reactive), &csv)?;
    let artifact = EvalArtifact {
        provenance: ArtifactInfo::new(cfg, &format!("eval_{kind}_{}", mode(reactive)), "eval", Stage::Eval),
        planner: kind.to_string(),
        reactive,
        summary: serde_json::to_value(&suite.summary).expect("summary serializes"),
        episodes: serde_json::to_value(&suite.episodes).expect("episodes serialize"),
    };
    write_json(&paths.eval_json(kind, reactive), &artifact)?;
    Ok(suite)
}

/// Scene used for latency measurements.
pub fn bench_fixture(cfg: &ExperimentConfig) -> Result<SceneContext> {
    Ok(generate_scenario(eval_seed(cfg.eval.seed_offset, 0), ScenarioKind::LeadStop, &cfg.world)?.scene)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchArtifact {
    pub provenance: ArtifactInfo,
    pub n_steps: usize,
    /// `diffusion / policy` mean latency.
    pub sampler_over_policy: f64,
    /// Mean latency with doubled steps over the configured steps.
    pub doubled_steps_factor: f64,
    /// Policy timed against an identical copy of itself.
    pub self_ratio: f64,
    pub report: LatencyReport,
}

/// Times the policy against the sampler at `n_steps` and `2 n_steps`.
pub fn bench(cfg: &ExperimentConfig, paths: &Paths) -> Result<BenchArtifact> {
    let scene = bench_fixture(cfg)?;
    let mut policy = policy_planner(cfg, paths, false)?;
    let mut twin = policy.clone();
    twin.name = "policy-copy".into();
    let n = cfg.diffusion.n_steps;
    let mut sampler = diffusion_planner(cfg, paths, n)?;
    let mut doubled = diffusion_planner(cfg, paths, 2 * n)?;
    let report = {
        let mut planners: [&mut dyn Planner; 4] = [&mut policy, &mut twin, &mut sampler, &mut doubled];
        bench_latency(&mut planners, &scene, cfg.eval.bench_warmup, cfg.eval.bench_calls)?
    };
    let mean = |i: usize| report.planners[i].mean_ns;
    let artifact = BenchArtifact {
        provenance: ArtifactInfo::new(cfg, "bench", "bench", Stage::Eval),
        n_steps: n,
        sampler_over_policy: mean(2) / mean(0),
        doubled_steps_factor: mean(3) / mean(2),
        self_ratio: mean(1) / mean(0),
        report,
    };
    write_json(&paths.bench(), &artifact)?;
    Ok(artifact)
}

/// Suites joined into the report.
pub const REPORT_SUITES: [(PlannerKind, bool); 7] = [
    (PlannerKind::Policy, false),
    (PlannerKind::Diffusion, false),
    (PlannerKind::Expert, false),
    (PlannerKind::AwrInit, false),
    (PlannerKind::ConstantVelocity, false),
    (PlannerKind::Policy, true),
    (PlannerKind::Diffusion, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub planner: String,
    pub reactive: bool,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub held_out_states: usize,
    pub policy_mean_q: f64,
    pub init_mean_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distillation {
    pub policy_mean_composite: f64,
    pub diffusion_mean_composite: f64,
    pub constant_velocity_mean_composite: f64,
    pub policy_collision_rate: f64,
    pub diffusion_collision_rate: f64,
    pub constant_velocity_collision_rate: f64,
    /// Policy within 0.03 of the sampler, no more collisions, and both above
    /// the constant-velocity baseline.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: ArtifactInfo,
    pub suites: Vec<SummaryRow>,
    pub distillation: Distillation,
    pub objective: Objective,
    /// SHA-256 of each upstream artifact.
    pub artifacts: std::collections::BTreeMap<String, String>,
}

fn suite_summary(cfg: &ExperimentConfig, paths: &Paths, kind: PlannerKind, reactive: bool) -> Result<SuiteSummary> {
    let what = format!("eval output for {kind} ({}; run eval)", mode(reactive));
    let a: EvalArtifact = read_json(&paths.eval_json(kind, reactive), &what)?;
    check_stage(&a.provenance.stage_hash, &what, cfg, Stage::Eval)?;
    let s = &a.summary;
    let num = |k: &str| s[k].as_f64().ok_or_else(|| Error::format("summary", format!("missing `{k}`")));
    Ok(SuiteSummary {
        planner: a.planner.clone(),
        episodes: num("episodes")? as usize,
        mean_composite: num("mean_composite")?,
        mean_breakdown: serde_json::from_value(s["mean_breakdown"].clone()).map_err(|e| Error::format("summary", e.to_string()))?,
        collision_rate: num("collision_rate")?,
        failures: num("failures")? as usize,
    })
}

/// Held-out states normalized with the training statistics.
pub fn held_out_states(cfg: &ExperimentConfig, train: &Dataset) -> Result<Array2<f64>> {
    let per_kind = (cfg.eval.scenarios_per_kind / 2).max(1);
    let held = build_buffer(cfg, &ScenarioKind::ALL, per_kind, derive_seed(cfg.seed, "heldout"))?;
    let rows: Vec<f64> = held
        .transitions
        .iter()
        .flat_map(|t| train.state_norm.normalize(&held.state_norm.denormalize(&t.state)))
        .collect();
    Array2::from_shape_vec((held.len(), held.state_dim), rows).map_err(|e| Error::Shape(e.to_string()))
}

/// Mean `min Q(s, pi(s))` of the extracted and initial policies.
pub fn objective(cfg: &ExperimentConfig, paths: &Paths) -> Result<Objective> {
    let ds = load_dataset(cfg, paths)?;
    let (bundle, _) = load_critic(cfg, paths)?;
    let states = held_out_states(cfg, &ds)?;
    let mean_q = |p: &PolicyNet| -> Result<f64> {
        let a = p.forward_batch(states.view())?.output;
        Ok(bundle.min_q(states.view(), a.view(), false)?.mean().unwrap_or(0.0))
    };
    Ok(Objective {
        held_out_states: states.nrows(),
        policy_mean_q: mean_q(&load_policy(cfg, paths, false)?.policy)?,
        init_mean_q: mean_q(&load_policy(cfg, paths, true)?.policy)?,
    })
}

/// Consolidates eval outputs into `report.json` and `report.csv`; bench
/// timings, when present, go to `report_timing.json`.
pub fn report(cfg: &ExperimentConfig, paths: &Paths) -> Result<Report> {
    let mut suites = Vec::new();
    let mut summaries = Vec::new();
    for (kind, reactive) in REPORT_SUITES {
        let s = suite_summary(cfg, paths, kind, reactive)?;
        suites.push(SummaryRow {
            planner: kind.to_string(),
            reactive,
            summary: serde_json::to_value(&s).expect("summary serializes"),
        });
        summaries.push(((kind, reactive), s));
    }
    let get = |k: PlannerKind| &summaries.iter().find(|(key, _)| *key == (k, false)).expect("listed suite").1;
    let (p, d, cv) = (get(PlannerKind::Policy), get(PlannerKind::Diffusion), get(PlannerKind::ConstantVelocity));
    let distillation = Distillation {
        policy_mean_composite: p.mean_composite,
        diffusion_mean_composite: d.mean_composite,
        constant_velocity_mean_composite: cv.mean_composite,
        policy_collision_rate: p.collision_rate,
        diffusion_collision_rate: d.collision_rate,
        constant_velocity_collision_rate: cv.collision_rate,
        holds: p.mean_composite >= d.mean_composite - 0.03
            && p.collision_rate <= d.collision_rate
            && p.mean_composite > cv.mean_composite
            && d.mean_composite > cv.mean_composite,
    };
    let mut artifacts = std::collections::BTreeMap::new();
    for (name, path) in [
        ("dataset.bin", paths.dataset()),
        ("prior.ckpt", paths.prior()),
        ("critic.ckpt", paths.critic()),
        ("policy_init.ckpt", paths.policy_init()),
        ("policy.ckpt", paths.policy()),
    ] {
        artifacts.insert(name.to_string(), sha256_file(&path)?);
    }
    let report = Report {
        provenance: ArtifactInfo::new(cfg, "report", "report", Stage::Eval),
        suites,
        distillation,
        objective: objective(cfg, paths)?,
        artifacts,
    };
    write_json(&paths.report_json(), &report)?;

    let mut csv = String::from("planner,reactive,episodes,mean_composite,collision_rate,failures\n");
    for ((kind, reactive), s) in &summaries {
        csv.push_str(&format!(
            "{kind},{},{},{},{},{}\n",
            u8::from(*reactive),
            s.episodes,
            s.mean_composite,
            s.collision_rate,
            s.failures
        ));
    }
    write(&paths.report_csv(), csv.as_bytes())?;

    if paths.bench().exists() {
        let bench: Value = read_json(&paths.bench(), "bench output")?;
        let timing = serde_json::json!({
            "provenance": ArtifactInfo::new(cfg, "report_timing", "report", Stage::Eval),
            "sampler_over_policy": bench["sampler_over_policy"],
            "doubled_steps_factor": bench["doubled_steps_factor"],
            "self_ratio": bench["self_ratio"],
            "n_steps": bench["n_steps"],
        });
        write_json(&paths.report_timing(), &timing)?;
    }
    Ok(report)
}

/// Every stage in order, including all report suites and the bench.
pub fn run_all(cfg: &ExperimentConfig, paths: &Paths) -> Result<Report> {
    gen_data(cfg, paths)?;
    train_prior(cfg, paths)?;
    train_critic(cfg, paths)?;
    extract_policy(cfg, paths)?;
    for (kind, reactive) in REPORT_SUITES {
        eval(cfg, paths, kind, reactive)?;
    }
    bench(cfg, paths)?;
    report(cfg, paths)
}
