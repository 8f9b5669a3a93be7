//! Implicit Q-learning critic: expectile value net, twin TD Q-nets with
//! Polyak-averaged targets, and advantage-weighted policy pretraining.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::config::CriticConfig;
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Direction, Mlp, NetworkSpec, OptimizerState, OutputActivation};
use crate::srpo::PolicyNet;

/// Critic hyperparameters. Unlike [`CriticConfig`], `tau` may be any value in
/// `(0, 1)` so symmetric toys can be expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticHyper {
    pub tau: f64,
    pub gamma: f64,
    pub beta_awr: f64,
    pub awr_clip: f64,
    pub polyak: f64,
    pub lr_value: f64,
    pub lr_q: f64,
    pub lr_policy: f64,
}

impl CriticHyper {
    pub fn from_config(c: &CriticConfig) -> Self {
        Self {
            tau: c.tau,
            gamma: c.gamma,
            beta_awr: c.beta_awr,
            awr_clip: c.awr_clip,
            polyak: c.polyak,
            lr_value: c.lr_value,
            lr_q: c.lr_q,
            lr_policy: c.lr_policy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidInput(format!("expectile {} outside (0, 1)", self.tau)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidInput(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if !(self.awr_clip > 0.0 && self.beta_awr >= 0.0 && self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::InvalidInput("need awr_clip > 0, beta_awr >= 0, polyak in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `|tau - 1[u < 0]| u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// `clamp(exp(beta * advantage), 0, clip)`.
pub fn awr_weights(advantages: &[f64], beta: f64, clip: f64) -> Vec<f64> {
    advantages.iter().map(|a| (beta * a).exp().clamp(0.0, clip)).collect()
}

/// A state-action value with its action gradient.
pub trait ActionCritic {
    fn action_dim(&self) -> usize;

    /// Row-wise values and gradients with respect to the action.
    fn q_and_grad_batch(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)>;
}

/// Critic defined by a closure `(state, action) -> (q, dq/da)`.
pub struct AnalyticCritic<F> {
    pub action_dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &[f64]) -> (f64, Vec<f64>)> ActionCritic for AnalyticCritic<F> {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn q_and_grad_batch(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let n = actions.nrows();
        let mut q = Array1::zeros(n);
        let mut g = Array2::zeros((n, self.action_dim));
        for i in 0..n {
            let (v, grad) = (self.f)(&states.row(i).to_vec(), &actions.row(i).to_vec());
            q[i] = v;
            g.row_mut(i).assign(&Array1::from(grad));
        }
        Ok((q, g))
    }
}

/// Value net, twin Q-nets, their targets and optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBundle {
    pub value: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub opt_value: OptimizerState,
    pub opt_q1: OptimizerState,
    pub opt_q2: OptimizerState,
    state_dim: usize,
    action_dim: usize,
    /// Steps skipped because the loss was not finite.
    pub skipped: u64,
}

const NET_NAMES: [&str; 5] = ["value", "q1", "q2", "q1_target", "q2_target"];

impl CriticBundle {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        value_hidden: &[usize],
        critic_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let v_spec = NetworkSpec::new(state_dim, value_hidden, 1, OutputActivation::Identity)?;
        let q_spec = NetworkSpec::new(state_dim + action_dim, critic_hidden, 1, OutputActivation::Identity)?;
        let value = Mlp::init(v_spec, rng, false);
        let q1 = Mlp::init(q_spec.clone(), rng, false);
        let q2 = Mlp::init(q_spec, rng, false);
        Ok(Self {
            opt_value: OptimizerState::new(value.params().len(), 0.0),
            opt_q1: OptimizerState::new(q1.params().len(), 0.0),
            opt_q2: OptimizerState::new(q2.params().len(), 0.0),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            value,
            q1,
            q2,
            state_dim,
            action_dim,
            skipped: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn check(&self, states: &ArrayView2<'_, f64>, actions: Option<&ArrayView2<'_, f64>>) -> Result<()> {
        let bad_actions = actions.is_some_and(|a| a.ncols() != self.action_dim || a.nrows() != states.nrows());
        if states.ncols() != self.state_dim || bad_actions {
            return Err(Error::Shape(format!(
                "critic expects state {} and action {}, got states {:?}",
                self.state_dim,
                self.action_dim,
                states.dim()
            )));
        }
        Ok(())
    }

    fn joint(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
        concatenate(Axis(1), &[states, actions]).expect("row counts checked")
    }

    pub fn values(&self, states: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check(&states, None)?;
        Ok(self.value.forward_batch(states)?.output.column(0).to_owned())
    }

    /// `min(Q1, Q2)` from the online or target nets.
    pub fn min_q(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>, target: bool) -> Result<Array1<f64>> {
        self.check(&states, Some(&actions))?;
        let x = Self::joint(states, actions);
        let (a, b) = if target { (&self.q1_target, &self.q2_target) } else { (&self.q1, &self.q2) };
        let qa = a.forward_batch(x.view())?.output;
        let qb = b.forward_batch(x.view())?.output;
        Ok(qa.column(0).iter().zip(qb.column(0)).map(|(x, y)| x.min(*y)).collect())
    }

    pub fn param_hashes(&self) -> [String; 5] {
        [
            self.value.param_hash(),
            self.q1.param_hash(),
            self.q2.param_hash(),
            self.q1_target.param_hash(),
            self.q2_target.param_hash(),
        ]
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        let opts = [Some(&self.opt_value), Some(&self.opt_q1), Some(&self.opt_q2), None, None];
        let nets = [&self.value, &self.q1, &self.q2, &self.q1_target, &self.q2_target];
        for ((name, net), opt) in NET_NAMES.iter().zip(nets).zip(opts) {
            ck.push_net(name, net.clone(), opt.cloned());
        }
        ck.meta.insert("critic.skipped".into(), self.skipped.to_string());
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| ck.net(name);
        let value = get("value")?;
        let q1 = get("q1")?;
        let state_dim = value.net.spec().input_dim();
        let action_dim = q1
            .net
            .spec()
            .input_dim()
            .checked_sub(state_dim)
            .filter(|a| *a > 0)
            .ok_or_else(|| Error::format("networks", "q1 input narrower than value input"))?;
        let opt = |e: &crate::nn::NetEntry| {
            e.optimizer
                .clone()
                .ok_or_else(|| Error::format("networks", format!("`{}` lacks optimizer state", e.name)))
        };
        let q2 = get("q2")?;
        let bundle = Self {
            opt_value: opt(value)?,
            opt_q1: opt(q1)?,
            opt_q2: opt(q2)?,
            value: value.net.clone(),
            q1: q1.net.clone(),
            q2: q2.net.clone(),
            q1_target: get("q1_target")?.net.clone(),
            q2_target: get("q2_target")?.net.clone(),
            state_dim,
            action_dim,
            skipped: ck.meta.get("critic.skipped").and_then(|s| s.parse().ok()).unwrap_or(0),
        };
        let q_in = state_dim + action_dim;
        let shapes_ok = [&bundle.q2, &bundle.q1_target, &bundle.q2_target]
            .iter()
            .all(|n| n.spec().input_dim() == q_in && n.spec().output_dim() == 1)
            && bundle.value.spec().output_dim() == 1;
        if !shapes_ok {
            return Err(Error::format("networks", "critic networks disagree on dimensions"));
        }
        Ok(bundle)
    }
}

impl ActionCritic for CriticBundle {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// `min(Q1, Q2)` of the online nets; the gradient is taken through the
    /// smaller of the two for each row.
    fn q_and_grad_batch(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check(&states, Some(&actions))?;
        let x = Self::joint(states, actions);
        let n = x.nrows();
        let ones = Array2::ones((n, 1));
        let c1 = self.q1.forward_batch(x.view())?;
        let c2 = self.q2.forward_batch(x.view())?;
        let (_, g1) = self.q1.backward(&c1, ones.view(), false)?;
        let (_, g2) = self.q2.backward(&c2, ones.view(), false)?;
        let mut q = Array1::zeros(n);
        let mut g = Array2::zeros((n, self.action_dim));
        for i in 0..n {
            let (v, grad) = if c1.output[[i, 0]] <= c2.output[[i, 0]] {
                (c1.output[[i, 0]], g1.slice(s![i, self.state_dim..]))
            } else {
                (c2.output[[i, 0]], g2.slice(s![i, self.state_dim..]))
            };
            q[i] = v;
            g.row_mut(i).assign(&grad);
        }
        Ok((q, g))
    }
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.states.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// One expectile regression step of `V` toward the target-net `min Q`.
pub fn train_value_step(bundle: &mut CriticBundle, batch: &Batch, hyper: &CriticHyper) -> Result<f64> {
    check_batch(batch)?;
    hyper.validate()?;
    let q = bundle.min_q(batch.states.view(), batch.actions.view(), true)?;
    let cache = bundle.value.forward_batch(batch.states.view())?;
    let n = q.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros((q.len(), 1));
    for i in 0..q.len() {
        let u = q[i] - cache.output[[i, 0]];
        loss += expectile_loss(u, hyper.tau) / n;
        upstream[[i, 0]] = -2.0 * expectile_weight(u, hyper.tau) * u / n;
    }
    if !loss.is_finite() {
        bundle.skipped += 1;
        return Ok(loss);
    }
    let (grad, _) = bundle.value.backward(&cache, upstream.view(), true)?;
    bundle.opt_value.lr = hyper.lr_value;
    bundle.opt_value.step(bundle.value.params_mut(), &grad.expect("requested"), Direction::Minimize)?;
    Ok(loss)
}

/// One TD regression step of both Q-nets toward `r + gamma (1 - done) V(s')`,
/// followed by the Polyak update of the targets. Returns the mean of the two
/// squared-error losses.
pub fn train_q_step(bundle: &mut CriticBundle, batch: &Batch, hyper: &CriticHyper) -> Result<f64> {
    check_batch(batch)?;
    hyper.validate()?;
    let v_next = bundle.values(batch.next_states.view())?;
    let y: Array1<f64> = batch
        .rewards
        .iter()
        .zip(&batch.dones)
        .zip(&v_next)
        .map(|((r, d), v)| r + hyper.gamma * (1.0 - d) * v)
        .collect();
    bundle.check(&batch.states.view(), Some(&batch.actions.view()))?;
    let x = CriticBundle::joint(batch.states.view(), batch.actions.view());
    let n = y.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(2);
    for net in [&bundle.q1, &bundle.q2] {
        let cache = net.forward_batch(x.view())?;
        let diff: Array1<f64> = cache.output.column(0).iter().zip(&y).map(|(q, t)| q - t).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>() / n / 2.0;
        let upstream = (diff * (2.0 / n)).insert_axis(Axis(1));
        grads.push(net.backward(&cache, upstream.view(), true)?.0.expect("requested"));
    }
    if !total.is_finite() {
        bundle.skipped += 1;
        return Ok(total);
    }
    bundle.opt_q1.lr = hyper.lr_q;
    bundle.opt_q2.lr = hyper.lr_q;
    bundle.opt_q1.step(bundle.q1.params_mut(), &grads[0], Direction::Minimize)?;
    bundle.opt_q2.step(bundle.q2.params_mut(), &grads[1], Direction::Minimize)?;
    bundle.q1_target.soft_update_from(&bundle.q1, hyper.polyak)?;
    bundle.q2_target.soft_update_from(&bundle.q2, hyper.polyak)?;
    Ok(total)
}

/// One minimization step of `mean w ||a - pi(s)||^2` for fixed weights.
pub fn weighted_regression_step(
    policy: &mut PolicyNet,
    opt: &mut OptimizerState,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    weights: &[f64],
) -> Result<f64> {
    if states.nrows() == 0 || weights.len() != states.nrows() || actions.nrows() != states.nrows() {
        return Err(Error::Shape("weighted regression needs matching non-empty rows".into()));
    }
    let cache = policy.forward_batch(states)?;
    let diff = &actions - &cache.output;
    let n = weights.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros(diff.dim());
    for (i, w) in weights.iter().enumerate() {
        let row = diff.row(i);
        loss += w * row.dot(&row) / n;
        upstream.row_mut(i).assign(&(&row * (-2.0 * w / n)));
    }
    if !loss.is_finite() {
        opt.skipped += 1;
        return Ok(loss);
    }
    let (grad, _) = policy.net().backward(&cache, upstream.view(), true)?;
    opt.step(policy.net_mut().params_mut(), &grad.expect("requested"), Direction::Minimize)?;
    Ok(loss)
}

/// Advantage-weighted regression step using the bundle's `min Q - V`.
pub fn awr_pretrain_step(
    policy: &mut PolicyNet,
    opt: &mut OptimizerState,
    bundle: &CriticBundle,
    batch: &Batch,
    hyper: &CriticHyper,
) -> Result<f64> {
    check_batch(batch)?;
    hyper.validate()?;
    let q = bundle.min_q(batch.states.view(), batch.actions.view(), false)?;
    let v = bundle.values(batch.states.view())?;
    let adv: Vec<f64> = q.iter().zip(&v).map(|(q, v)| q - v).collect();
    let w = awr_weights(&adv, hyper.beta_awr, hyper.awr_clip);
    opt.lr = hyper.lr_policy;
    weighted_regression_step(policy, opt, batch.states.view(), batch.actions.view(), &w)
}

/// Per-step losses from [`train_critic`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CriticLog {
    pub value_loss: Vec<f64>,
    pub q_loss: Vec<f64>,
    pub awr_loss: Vec<f64>,
}

/// Alternating value and Q steps, then AWR pretraining of `policy` against
/// the final critic, each on freshly sampled batches.
#[allow(clippy::too_many_arguments)]
pub fn train_critic<R: Rng + ?Sized>(
    bundle: &mut CriticBundle,
    policy: &mut PolicyNet,
    policy_opt: &mut OptimizerState,
    data: &crate::dataset::Dataset,
    hyper: &CriticHyper,
    steps: usize,
    awr_steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<CriticLog> {
    let mut log = CriticLog::default();
    for _ in 0..steps {
        let b = data.sample_batch(batch, rng)?;
        log.value_loss.push(train_value_step(bundle, &b, hyper)?);
        log.q_loss.push(train_q_step(bundle, &b, hyper)?);
    }
    for _ in 0..awr_steps {
        let b = data.sample_batch(batch, rng)?;
        log.awr_loss.push(awr_pretrain_step(policy, policy_opt, bundle, &b, hyper)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ActionBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn hyper(tau: f64, gamma: f64) -> CriticHyper {
        CriticHyper {
            tau,
            gamma,
            beta_awr: 3.0,
            awr_clip: 100.0,
            polyak: 0.005,
            lr_value: 1e-2,
            lr_q: 1e-2,
            lr_policy: 1e-2,
        }
    }

    fn grid_expectile(values: &[f64], tau: f64) -> f64 {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = ((hi - lo) / 1e-4).round() as usize;
        (0..=n)
            .map(|i| lo + i as f64 * 1e-4)
            .map(|v| (v, values.iter().map(|q| expectile_loss(q - v, tau)).sum::<f64>()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0
    }

    fn batch(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>, next: Vec<Vec<f64>>, dones: Vec<bool>) -> Batch {
        let n = states.len();
        let to2 = |v: Vec<Vec<f64>>| {
            let w = v[0].len();
            Array2::from_shape_vec((n, w), v.into_iter().flatten().collect()).unwrap()
        };
        Batch {
            indices: (0..n).collect(),
            states: to2(states),
            actions: to2(actions),
            rewards: Array1::from(rewards),
            next_states: to2(next),
            dones: dones.into_iter().map(|d| if d { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Bundle on a 1-D constant state whose Q-nets (and targets) equal the action.
    fn q_equals_action(seed: u64) -> CriticBundle {
        let mut b = CriticBundle::new(1, 1, &[], &[], &mut rng(seed)).unwrap();
        let exact = Mlp::from_params(b.q1.spec().clone(), vec![0.0, 1.0, 0.0]).unwrap();
        b.q1 = exact.clone();
        b.q2 = exact.clone();
        b.q1_target = exact.clone();
        b.q2_target = exact;
        b
    }

    fn fit_value(values: &[f64], tau: f64) -> f64 {
        let mut bundle = q_equals_action(1);
        let n = values.len();
        let b = batch(vec![vec![0.0]; n], values.iter().map(|v| vec![*v]).collect(), vec![0.0; n], vec![vec![0.0]; n], vec![true; n]);
        let mut h = hyper(tau, 0.0);
        for step in 0..6000 {
            h.lr_value = if step < 3000 { 1e-2 } else { 1e-4 };
            train_value_step(&mut bundle, &b, &h).unwrap();
        }
        bundle.values(Array2::zeros((1, 1)).view()).unwrap()[0]
    }

    #[test]
    fn expectile_loss_basics() {
        for u in [-2.0, -0.3, 0.0, 0.7, 5.0] {
            assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
        }
        assert_eq!(expectile_loss(0.0, 0.9), 0.0);
        assert!((expectile_loss(-1.0, 0.9) - 0.1).abs() < 1e-15);
        assert!((expectile_loss(1.0, 0.9) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn value_matches_grid_expectile() {
        let q = [1.0, 2.0, 3.0, 4.0];
        let target = grid_expectile(&q, 0.9);
        let v = fit_value(&q, 0.9);
        assert!((v - target).abs() < 1e-3, "{v} vs {target}");
    }

    #[test]
    fn two_action_toy_expectiles() {
        let q = [0.0, 1.0];
        let v9 = fit_value(&q, 0.9);
        assert!((v9 - grid_expectile(&q, 0.9)).abs() < 1e-3, "{v9}");
        let v5 = fit_value(&q, 0.5);
        assert!((v5 - 0.5).abs() < 1e-3, "{v5}");
        let v7 = fit_value(&q, 0.7);
        assert!(v5 <= v7 && v7 <= v9);
        let v99 = fit_value(&q, 0.99);
        assert!((1.0 - v99) < 0.05, "{v99}");
        let c = fit_value(&[0.6, 0.6], 0.8);
        assert!((c - 0.6).abs() < 1e-3);
    }

    #[test]
    fn terminal_q_regresses_reward() {
        let mut r = rng(2);
        let mut bundle = CriticBundle::new(1, 1, &[8], &[16], &mut r).unwrap();
        let acts = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let b = batch(
            vec![vec![0.3]; 5],
            acts.iter().map(|a| vec![*a]).collect(),
            acts.iter().map(|a| a * a).collect(),
            vec![vec![0.0]; 5],
            vec![true; 5],
        );
        let mut h = hyper(0.9, 0.99);
        for step in 0..8000 {
            h.lr_q = if step < 6000 { 3e-3 } else { 1e-4 };
            train_q_step(&mut bundle, &b, &h).unwrap();
        }
        let q = bundle.min_q(b.states.view(), b.actions.view(), false).unwrap();
        for (qi, a) in q.iter().zip(acts) {
            assert!((qi - a * a).abs() < 0.02, "{qi} vs {}", a * a);
        }
    }

    /// Two-state chain: from s0 either action moves to s1 with reward 0.1 or
    /// 0.5; s1 ends the episode with reward 1.
    #[test]
    fn chain_mdp_matches_value_iteration() {
        let (gamma, tau) = (0.9, 0.7);
        let s0 = vec![1.0, 0.0];
        let s1 = vec![0.0, 1.0];
        let b = batch(
            vec![s0.clone(), s0.clone(), s1.clone()],
            vec![vec![-1.0], vec![1.0], vec![0.0]],
            vec![0.1, 0.5, 1.0],
            vec![s1.clone(), s1.clone(), s0.clone()],
            vec![false, false, true],
        );
        // expectile value iteration over the dataset actions
        let (mut q, mut v) = ([0.0; 3], [0.0; 2]);
        for _ in 0..200 {
            q = [0.1 + gamma * v[1], 0.5 + gamma * v[1], 1.0];
            v = [grid_expectile(&[q[0], q[1]], tau), q[2]];
        }
        let mut r = rng(3);
        let mut bundle = CriticBundle::new(2, 1, &[16], &[32], &mut r).unwrap();
        let h = CriticHyper { polyak: 0.05, lr_value: 3e-3, lr_q: 3e-3, ..hyper(tau, gamma) };
        for _ in 0..6000 {
            train_value_step(&mut bundle, &b, &h).unwrap();
            train_q_step(&mut bundle, &b, &h).unwrap();
        }
        let got = bundle.min_q(b.states.view(), b.actions.view(), false).unwrap();
        for (g, want) in got.iter().zip(q) {
            assert!((g - want).abs() < 0.02, "{got:?} vs {q:?}");
        }
        let vals = bundle.values(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).view()).unwrap();
        assert!((vals[0] - v[0]).abs() < 0.02 && (vals[1] - v[1]).abs() < 0.02, "{vals:?} vs {v:?}");
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let mut r = rng(4);
        let mut bundle = CriticBundle::new(3, 2, &[8], &[8], &mut r).unwrap();
        let n = 6;
        let b = batch(
            (0..n).map(|i| vec![i as f64 * 0.1, 0.2, -0.3]).collect(),
            (0..n).map(|i| vec![0.5 - i as f64 * 0.2, 0.1]).collect(),
            (0..n).map(|i| i as f64 / n as f64).collect(),
            (0..n).map(|i| vec![0.0, i as f64 * 0.1, 0.3]).collect(),
            (0..n).map(|i| i == n - 1).collect(),
        );
        let h = hyper(0.9, 0.99);
        let before = bundle.param_hashes();
        train_value_step(&mut bundle, &b, &h).unwrap();
        let after_v = bundle.param_hashes();
        assert_ne!(before[0], after_v[0]);
        assert_eq!(before[1..], after_v[1..]);
        train_q_step(&mut bundle, &b, &h).unwrap();
        let after_q = bundle.param_hashes();
        assert_eq!(after_v[0], after_q[0]);
        assert!((1..5).all(|i| after_v[i] != after_q[i]));
        let bounds = ActionBox::symmetric(2, 3.0).unwrap();
        let mut policy = PolicyNet::new(3, &[8], &bounds, &mut r).unwrap();
        let mut opt = OptimizerState::new(policy.net().params().len(), 1e-2);
        let p_before = policy.net().param_hash();
        awr_pretrain_step(&mut policy, &mut opt, &bundle, &b, &h).unwrap();
        assert_eq!(bundle.param_hashes(), after_q);
        assert_ne!(policy.net().param_hash(), p_before);
    }

    #[test]
    fn targets_start_equal_and_trail_online_nets() {
        let mut r = rng(5);
        let mut bundle = CriticBundle::new(1, 1, &[4], &[4], &mut r).unwrap();
        assert_eq!(bundle.q1, bundle.q1_target);
        assert_eq!(bundle.q2, bundle.q2_target);
        let old_target = bundle.q1_target.clone();
        let b = batch(vec![vec![0.0]; 2], vec![vec![1.0], vec![-1.0]], vec![1.0, 0.0], vec![vec![0.0]; 2], vec![true; 2]);
        train_q_step(&mut bundle, &b, &hyper(0.9, 0.9)).unwrap();
        for ((t, o), q) in bundle.q1_target.params().iter().zip(old_target.params()).zip(bundle.q1.params()) {
            assert!((t - (0.995 * o + 0.005 * q)).abs() < 1e-15);
        }
    }

    #[test]
    fn awr_toy_weighted_mean() {
        let mut r = rng(6);
        let bundle = q_equals_action(6);
        let bounds = ActionBox::symmetric(1, 2.0).unwrap();
        let mut policy = PolicyNet::new(1, &[8], &bounds, &mut r).unwrap();
        let mut opt = OptimizerState::new(policy.net().params().len(), 1e-2);
        let b = batch(vec![vec![0.0]; 2], vec![vec![-1.0], vec![1.0]], vec![0.0; 2], vec![vec![0.0]; 2], vec![true; 2]);
        // V = 0, so advantages equal the actions
        let mut bundle = bundle;
        bundle.value = Mlp::from_params(bundle.value.spec().clone(), vec![0.0, 0.0]).unwrap();
        let h = hyper(0.9, 0.9);
        for step in 0..4000 {
            opt.lr = if step < 2000 { 1e-2 } else { 1e-4 };
            let mut hh = h.clone();
            hh.lr_policy = opt.lr;
            awr_pretrain_step(&mut policy, &mut opt, &bundle, &b, &hh).unwrap();
        }
        let e3 = 3f64.exp();
        let want = (e3 - 1.0 / e3) / (e3 + 1.0 / e3);
        let got = policy.act(&[0.0]).unwrap()[0];
        assert!((got - want).abs() < 2e-3, "{got} vs {want}");
    }

    #[test]
    fn awr_weight_edge_cases() {
        assert_eq!(awr_weights(&[0.3, -2.0, 5.0], 0.0, 100.0), vec![1.0; 3]);
        let w = awr_weights(&[-1e6, 1e6], 3.0, 100.0);
        assert_eq!(w, vec![0.0, 100.0]);
        let mut r = rng(7);
        let bounds = ActionBox::symmetric(1, 2.0).unwrap();
        let mut policy = PolicyNet::new(1, &[4], &bounds, &mut r).unwrap();
        let mut opt = OptimizerState::new(policy.net().params().len(), 1e-2);
        let before = policy.net().params().to_vec();
        weighted_regression_step(&mut policy, &mut opt, Array2::zeros((1, 1)).view(), ndarray::arr2(&[[1.5]]).view(), &w[..1]).unwrap();
        // zero gradient: Adam leaves parameters where they were
        assert_eq!(policy.net().params(), &before[..]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(8);
        let mut bundle = CriticBundle::new(3, 2, &[5], &[6], &mut r).unwrap();
        let b = batch(vec![vec![0.1, 0.2, 0.3]; 2], vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.5, 0.1], vec![vec![0.0; 3]; 2], vec![false, true]);
        train_q_step(&mut bundle, &b, &hyper(0.9, 0.9)).unwrap();
        let mut ck = Checkpoint::new();
        bundle.write_into(&mut ck);
        let back = CriticBundle::read_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn min_q_gradient_matches_finite_differences() {
        let mut r = rng(9);
        let bundle = CriticBundle::new(2, 3, &[4], &[8, 8], &mut r).unwrap();
        let s = ndarray::arr2(&[[0.3, -0.2], [1.0, 0.5]]);
        let a = ndarray::arr2(&[[0.1, 0.2, -0.4], [-1.0, 0.0, 0.7]]);
        let (q, g) = bundle.q_and_grad_batch(s.view(), a.view()).unwrap();
        assert_eq!(q, bundle.min_q(s.view(), a.view(), false).unwrap());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut ap = a.clone();
                ap[[i, j]] += h;
                let mut am = a.clone();
                am[[i, j]] -= h;
                let fd = (bundle.min_q(s.view(), ap.view(), false).unwrap()[i] - bundle.min_q(s.view(), am.view(), false).unwrap()[i]) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-6);
            }
        }
    }
}
