//! Score-regularized extraction of a deterministic policy: ascend the critic
//! while the frozen diffusion prior pulls actions toward the behavior density.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{SrpoConfig, WorldConfig};
use crate::dataset::Dataset;
use crate::diffusion::{alpha, sigma, ActionBox, NoisePredictor};
use crate::error::{Error, Result};
use crate::iql::ActionCritic;
use crate::nn::{Direction, ForwardCache, Mlp, NetworkSpec, OptimizerState, OutputActivation};
use crate::world::{action_bounds, action_to_trajectory, encode_state, Normalizer, SceneContext, Trajectory};

/// Deterministic map from encoded state to normalized action, squashed into
/// the normalized action box.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    net: Mlp,
}

impl PolicyNet {
    /// Fresh policy with a zero output layer, so it starts at the action mean.
    /// The box must contain the origin strictly.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: &[usize], bounds: &ActionBox, rng: &mut R) -> Result<Self> {
        let spec = NetworkSpec::new(
            state_dim,
            hidden,
            bounds.dim(),
            OutputActivation::Bounded {
                lo: bounds.lo.clone(),
                hi: bounds.hi.clone(),
            },
        )?;
        Ok(Self {
            net: Mlp::init(spec, rng, true),
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if !matches!(net.spec().output(), OutputActivation::Bounded { .. }) {
            return Err(Error::format("policy", "policy network needs a bounded output"));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.net.spec().input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.spec().output_dim()
    }

    pub fn bounds(&self) -> ActionBox {
        match self.net.spec().output() {
            OutputActivation::Bounded { lo, hi } => ActionBox {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            OutputActivation::Identity => unreachable!("checked at construction"),
        }
    }

    pub fn forward_batch(&self, states: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.net.forward_batch(states)
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(state)
    }
}

/// Normalized image of the physical action box.
pub fn normalized_bounds(world: &WorldConfig, action_norm: &Normalizer) -> Result<ActionBox> {
    let (lo, hi) = action_bounds(world);
    if action_norm.dim() != lo.len() {
        return Err(Error::Shape(format!(
            "action normalizer has {} entries, actions have {}",
            action_norm.dim(),
            lo.len()
        )));
    }
    ActionBox::new(action_norm.normalize(&lo), action_norm.normalize(&hi))
}

/// One forward pass from scene to trajectory.
pub fn plan(
    policy: &PolicyNet,
    scene: &SceneContext,
    world: &WorldConfig,
    state_norm: &Normalizer,
    action_norm: &Normalizer,
) -> Result<Trajectory> {
    let state = encode_state(scene, world, state_norm)?;
    let z = policy.act(&state.features)?;
    let mut action = action_norm.denormalize(&z);
    // guard against rounding at the box faces
    let (lo, hi) = action_bounds(world);
    ActionBox { lo, hi }.clamp(&mut action);
    action_to_trajectory(&scene.ego().pose(), &action, world)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrpoHyper {
    /// Temperature; the score term is scaled by `1 / beta`.
    pub beta: f64,
    pub lr: f64,
    pub score_samples: usize,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl SrpoHyper {
    pub fn from_config(c: &SrpoConfig) -> Self {
        Self {
            beta: c.beta,
            lr: c.lr,
            score_samples: c.score_samples,
            t_lo: 0.02,
            t_hi: 0.98,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.score_samples == 0 || !(self.t_lo > 0.0 && self.t_lo < self.t_hi && self.t_hi < 1.0) {
            return Err(Error::InvalidInput(
                "need beta > 0, at least one score sample and 0 < t_lo < t_hi < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Time weighting of the score term.
pub fn time_weight(_t: f64) -> f64 {
    1.0
}

/// Monte-Carlo estimate of `-(1/beta) E[w(t) (eps_hat(alpha a + sigma eps) - eps)]`
/// for each row of `actions`.
pub fn score_term<R: Rng + ?Sized>(
    prior: &impl NoisePredictor,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    hyper: &SrpoHyper,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (n, d) = actions.dim();
    let mut acc = Array2::zeros((n, d));
    if hyper.beta.is_infinite() {
        return Ok(acc);
    }
    let k = hyper.score_samples;
    for _ in 0..k {
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(hyper.t_lo..hyper.t_hi)).collect();
        let eps = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut x_t = Array2::zeros((n, d));
        for i in 0..n {
            let (a, s) = (alpha(t[i]), sigma(t[i]));
            for j in 0..d {
                x_t[[i, j]] = a * actions[[i, j]] + s * eps[[i, j]];
            }
        }
        let pred = prior.predict_batch(x_t.view(), states, &t)?;
        for i in 0..n {
            let w = -time_weight(t[i]) / (hyper.beta * k as f64);
            for j in 0..d {
                acc[[i, j]] += w * (pred[[i, j]] - eps[[i, j]]);
            }
        }
    }
    Ok(acc)
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SrpoDiagnostics {
    /// Mean row norm of the critic gradient.
    pub q_term_norm: f64,
    /// Mean row norm of the score term.
    pub score_term_norm: f64,
    /// Mean `min Q(s, pi(s))` before the step.
    pub mean_q: f64,
    /// Rows dropped for non-finite upstream values.
    pub dropped: usize,
}

/// Surrogate-gradient assembly: returns the ascent direction in parameter
/// space (averaged over rows) and the diagnostics.
pub fn surrogate_gradient<R: Rng + ?Sized>(
    policy: &PolicyNet,
    critic: &impl ActionCritic,
    prior: &impl NoisePredictor,
    states: ArrayView2<'_, f64>,
    hyper: &SrpoHyper,
    rng: &mut R,
) -> Result<(Vec<f64>, SrpoDiagnostics)> {
    hyper.validate()?;
    let n = states.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("empty state batch".into()));
    }
    let d = policy.action_dim();
    if critic.action_dim() != d || prior.action_dim() != d || prior.state_dim() != policy.state_dim() {
        return Err(Error::Shape(format!(
            "policy action {d}, critic action {}, prior action {} with state {} vs policy state {}",
            critic.action_dim(),
            prior.action_dim(),
            prior.state_dim(),
            policy.state_dim()
        )));
    }
    let cache = policy.forward_batch(states)?;
    let (q, g_q) = critic.q_and_grad_batch(states, cache.output.view())?;
    let g_s = score_term(prior, states, cache.output.view(), hyper, rng)?;
    let mut upstream = &g_q + &g_s;
    let mut diag = SrpoDiagnostics::default();
    let mut kept = 0usize;
    for i in 0..n {
        let finite = upstream.row(i).iter().all(|v| v.is_finite()) && q[i].is_finite();
        if !finite {
            upstream.row_mut(i).fill(0.0);
            diag.dropped += 1;
            continue;
        }
        kept += 1;
        diag.q_term_norm += g_q.row(i).dot(&g_q.row(i)).sqrt();
        diag.score_term_norm += g_s.row(i).dot(&g_s.row(i)).sqrt();
        diag.mean_q += q[i];
    }
    if kept > 0 {
        let k = kept as f64;
        diag.q_term_norm /= k;
        diag.score_term_norm /= k;
        diag.mean_q /= k;
        upstream /= k;
    }
    let (grad, _) = policy.net.backward(&cache, upstream.view(), true)?;
    Ok((grad.expect("requested"), diag))
}

/// One ascent step of the policy. The critic and prior are only read.
pub fn srpo_step<R: Rng + ?Sized>(
    policy: &mut PolicyNet,
    opt: &mut OptimizerState,
    critic: &impl ActionCritic,
    prior: &impl NoisePredictor,
    states: ArrayView2<'_, f64>,
    hyper: &SrpoHyper,
    rng: &mut R,
) -> Result<SrpoDiagnostics> {
    let (grad, diag) = surrogate_gradient(policy, critic, prior, states, hyper, rng)?;
    if diag.dropped == states.nrows() {
        opt.skipped += 1;
        return Ok(diag);
    }
    opt.lr = hyper.lr;
    opt.step(policy.net.params_mut(), &grad, Direction::Maximize)?;
    Ok(diag)
}

/// Runs `steps` SRPO steps from `init` on batches of dataset states.
#[allow(clippy::too_many_arguments)]
pub fn extract_policy<R: Rng + ?Sized>(
    init: &PolicyNet,
    critic: &impl ActionCritic,
    prior: &impl NoisePredictor,
    data: &Dataset,
    hyper: &SrpoHyper,
    steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<(PolicyNet, Vec<SrpoDiagnostics>)> {
    if data.state_dim != init.state_dim() || data.action_dim != init.action_dim() {
        return Err(Error::Shape("dataset and policy dimensions differ".into()));
    }
    let mut policy = init.clone();
    let mut opt = OptimizerState::new(policy.net.params().len(), hyper.lr);
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let b = data.sample_batch(batch, rng)?;
        log.push(srpo_step(&mut policy, &mut opt, critic, prior, b.states.view(), hyper, rng)?);
    }
    Ok((policy, log))
}
