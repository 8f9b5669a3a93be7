//! Variance-preserving diffusion prior over normalized action vectors.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::nn::{Direction, Mlp, NetworkSpec, OptimizerState, OutputActivation};

/// Identifier stored in checkpoints.
pub const SCHEDULE_ID: &str = "cosine-vp";

/// Width of the time embedding: `sin`/`cos` of `2 pi k t` for `k = 1..=4`, plus `t`.
pub const TIME_FEATURES: usize = 9;

/// Signal scale `cos(pi t / 2)`.
pub fn alpha(t: f64) -> f64 {
    if t == 1.0 {
        0.0
    } else {
        (0.5 * PI * t).cos()
    }
}

/// Noise scale `sin(pi t / 2)`.
pub fn sigma(t: f64) -> f64 {
    (0.5 * PI * t).sin()
}

pub fn time_embedding(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..4 {
        let w = 2.0 * PI * (k + 1) as f64 * t;
        out[2 * k] = w.sin();
        out[2 * k + 1] = w.cos();
    }
    out[8] = t;
    out
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Forward process draw `alpha(t) x0 + sigma(t) eps`.
pub fn noise_sample(x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_time(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} entries, eps has {}", x0.len(), eps.len())));
    }
    let (a, s) = (alpha(t), sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Axis-aligned box in normalized action units.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape("box bounds differ in length".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(Error::InvalidInput("box needs finite lo < hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn intersect(&self, other: &ActionBox) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Shape("box dimensions differ".into()));
        }
        Self::new(
            self.lo.iter().zip(&other.lo).map(|(a, b)| a.max(*b)).collect(),
            self.hi.iter().zip(&other.hi).map(|(a, b)| a.min(*b)).collect(),
        )
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, l), h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *v >= *l && *v <= *h)
    }
}

/// Anything that predicts the injected noise of a noisy action.
pub trait NoisePredictor {
    fn action_dim(&self) -> usize;

    fn state_dim(&self) -> usize;

    /// Row-wise predictions for noisy actions `x_t`, states and times.
    fn predict_batch(&self, x_t: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>>;

    fn predict(&self, x_t: &[f64], state: &[f64], t: f64) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x_t.len()), x_t).expect("one row");
        let s = ArrayView2::from_shape((1, state.len()), state).expect("one row");
        Ok(self.predict_batch(x, s, &[t])?.into_raw_vec_and_offset().0)
    }
}

fn check_batch(p: &impl NoisePredictor, x_t: &ArrayView2<'_, f64>, states: &ArrayView2<'_, f64>, t: &[f64]) -> Result<()> {
    let n = x_t.nrows();
    if x_t.ncols() != p.action_dim() || states.ncols() != p.state_dim() || states.nrows() != n || t.len() != n {
        return Err(Error::Shape(format!(
            "denoiser batch: x_t {:?}, states {:?}, {} times for dims ({}, {})",
            x_t.dim(),
            states.dim(),
            t.len(),
            p.action_dim(),
            p.state_dim()
        )));
    }
    t.iter().try_for_each(|t| check_time(*t))
}

/// Learned `eps_psi(x_t | s, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    net: Mlp,
    action_dim: usize,
    state_dim: usize,
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(
        action_dim: usize,
        state_dim: usize,
        hidden: &[usize],
        rng: &mut R,
        zero_output: bool,
    ) -> Result<Self> {
        let spec = NetworkSpec::new(action_dim + state_dim + TIME_FEATURES, hidden, action_dim, OutputActivation::Identity)?;
        Ok(Self {
            net: Mlp::init(spec, rng, zero_output),
            action_dim,
            state_dim,
        })
    }

    pub fn from_net(net: Mlp, action_dim: usize, state_dim: usize) -> Result<Self> {
        let spec = net.spec();
        if spec.input_dim() != action_dim + state_dim + TIME_FEATURES || spec.output_dim() != action_dim {
            return Err(Error::Shape(format!(
                "denoiser network {}->{} does not fit action {action_dim}, state {state_dim}",
                spec.input_dim(),
                spec.output_dim()
            )));
        }
        Ok(Self {
            net,
            action_dim,
            state_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn inputs(&self, x_t: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>, t: &[f64]) -> Array2<f64> {
        let (a, d) = (self.action_dim, self.state_dim);
        let mut input = Array2::zeros((x_t.nrows(), a + d + TIME_FEATURES));
        input.slice_mut(s![.., ..a]).assign(&x_t);
        input.slice_mut(s![.., a..a + d]).assign(&states);
        for (i, t) in t.iter().enumerate() {
            for (j, v) in time_embedding(*t).iter().enumerate() {
                input[[i, a + d + j]] = *v;
            }
        }
        input
    }
}

impl NoisePredictor for DenoiserNet {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn predict_batch(&self, x_t: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>> {
        check_batch(self, &x_t, &states, t)?;
        Ok(self.net.forward_batch(self.inputs(x_t, states, t).view())?.output)
    }
}

/// Exact noise predictor for an isotropic Gaussian mixture that ignores the
/// state. A zero `std` gives point masses.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std: f64,
    pub state_dim: usize,
}

impl GaussianMixturePrior {
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, std: f64, state_dim: usize) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() || means.iter().any(|m| m.len() != means[0].len()) {
            return Err(Error::Shape("mixture needs matching means and weights".into()));
        }
        if weights.iter().any(|w| *w <= 0.0) || std < 0.0 {
            return Err(Error::InvalidInput("mixture weights must be positive and std non-negative".into()));
        }
        Ok(Self {
            means,
            weights,
            std,
            state_dim,
        })
    }

    fn predict_row(&self, x: &[f64], t: f64) -> Vec<f64> {
        let (a, s) = (alpha(t), sigma(t));
        let var = a * a * self.std * self.std + s * s;
        let log_w: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d2: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
                w.ln() - 0.5 * d2 / var
            })
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let post: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = post.iter().sum();
        let mut out = vec![0.0; x.len()];
        for (m, p) in self.means.iter().zip(&post) {
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
                *o += p / z * s * (xi - a * mi) / var;
            }
        }
        out
    }
}

impl NoisePredictor for GaussianMixturePrior {
    fn action_dim(&self) -> usize {
        self.means[0].len()
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn predict_batch(&self, x_t: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>, t: &[f64]) -> Result<Array2<f64>> {
        check_batch(self, &x_t, &states, t)?;
        let mut out = Array2::zeros(x_t.dim());
        for (i, row) in x_t.rows().into_iter().enumerate() {
            let p = self.predict_row(&row.to_vec(), t[i]);
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
        }
        Ok(out)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Fits the denoiser by regressing injected noise, with `t ~ U(t_lo, t_hi)`.
/// Returns the per-step mean loss `E ||eps_hat - eps||^2`.
pub fn train_denoiser<R: Rng + ?Sized>(
    model: &mut DenoiserNet,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    cfg: &DiffusionConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = actions.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if states.nrows() != n || actions.ncols() != model.action_dim || states.ncols() != model.state_dim {
        return Err(Error::Shape(format!(
            "training data states {:?}, actions {:?}",
            states.dim(),
            actions.dim()
        )));
    }
    if !(cfg.batch >= 1 && cfg.t_lo > 0.0 && cfg.t_lo < cfg.t_hi && cfg.t_hi < 1.0) {
        return Err(Error::Config("denoiser training needs batch >= 1 and 0 < t_lo < t_hi < 1".into()));
    }
    let mut opt = OptimizerState::new(model.net.params().len(), cfg.lr);
    let a = model.action_dim;
    let mut losses = Vec::with_capacity(cfg.train_steps);
    for _ in 0..cfg.train_steps {
        let b = cfg.batch;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let t: Vec<f64> = (0..b).map(|_| rng.random_range(cfg.t_lo..cfg.t_hi)).collect();
        let eps = Array2::from_shape_fn((b, a), |_| rng.sample::<f64, _>(StandardNormal));
        let mut x_t = Array2::zeros((b, a));
        let mut s_b = Array2::zeros((b, model.state_dim));
        for (i, &k) in idx.iter().enumerate() {
            let (al, si) = (alpha(t[i]), sigma(t[i]));
            for j in 0..a {
                x_t[[i, j]] = al * actions[[k, j]] + si * eps[[i, j]];
            }
            s_b.row_mut(i).assign(&states.row(k));
        }
        let cache = model.net.forward_batch(model.inputs(x_t.view(), s_b.view(), &t).view())?;
        let diff = &cache.output - &eps;
        losses.push(diff.iter().map(|d| d * d).sum::<f64>() / b as f64);
        let upstream = diff * (2.0 / b as f64);
        let (grad, _) = model.net.backward(&cache, upstream.view(), true)?;
        opt.step(model.net.params_mut(), &grad.expect("requested"), Direction::Minimize)?;
    }
    Ok(losses)
}

/// Mean noise-regression loss over every row with the given times and noise.
pub fn denoising_loss(
    model: &impl NoisePredictor,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    t: &[f64],
    eps: ArrayView2<'_, f64>,
) -> Result<f64> {
    let mut x_t = actions.to_owned();
    for (i, mut row) in x_t.rows_mut().into_iter().enumerate() {
        let (a, s) = (alpha(t[i]), sigma(t[i]));
        for (v, e) in row.iter_mut().zip(eps.row(i)) {
            *v = a * *v + s * e;
        }
    }
    let pred = model.predict_batch(x_t.view(), states, t)?;
    Ok((&pred - &eps).iter().map(|d| d * d).sum::<f64>() / actions.nrows() as f64)
}

/// `-eps_hat(alpha a | s, t) / sigma(t)` at a small evaluation time.
pub fn score_estimate(model: &impl NoisePredictor, action: &[f64], state: &[f64], t_eval: f64) -> Result<Vec<f64>> {
    if !(t_eval > 0.0 && t_eval <= 0.1) {
        return Err(Error::InvalidInput(format!("score evaluation time {t_eval} outside (0, 0.1]")));
    }
    let a = alpha(t_eval);
    let x: Vec<f64> = action.iter().map(|v| a * v).collect();
    let s = sigma(t_eval);
    Ok(model.predict(&x, state, t_eval)?.into_iter().map(|e| -e / s).collect())
}

/// Ancestral sampling on the uniform grid `1 = t_0 > ... > t_n = t_lo`.
///
/// Each step forms the clamped data estimate `x0_hat`, moves to the mean of
/// `q(x_s | x_t, x0_hat)` and adds noise with the forward transition variance
/// `sigma_t^2 - (alpha_t / alpha_s)^2 sigma_s^2`. At `t = 1` the noisy sample
/// holds no information, so `x0_hat` is the data mean (zero in normalized units).
/// Returns the clamped `x0_hat` at `t_lo`, in normalized units.
pub fn ddpm_sample<R: Rng + ?Sized>(
    model: &impl NoisePredictor,
    state: &[f64],
    n_steps: usize,
    t_lo: f64,
    bounds: &ActionBox,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("sampler needs at least one step".into()));
    }
    if !(t_lo > 0.0 && t_lo < 1.0) {
        return Err(Error::InvalidInput(format!("t_lo {t_lo} outside (0, 1)")));
    }
    let dim = model.action_dim();
    if bounds.dim() != dim || state.len() != model.state_dim() {
        return Err(Error::Shape("sampler box or state does not match the model".into()));
    }
    let grid: Vec<f64> = (0..=n_steps)
        .map(|i| if i == n_steps { t_lo } else { 1.0 - i as f64 * (1.0 - t_lo) / n_steps as f64 })
        .collect();
    let x0_hat = |x: &[f64], t: f64| -> Result<Vec<f64>> {
        let a = alpha(t);
        let mut est = if a == 0.0 {
            vec![0.0; dim]
        } else {
            let s = sigma(t);
            let eps = model.predict(x, state, t)?;
            x.iter().zip(&eps).map(|(xi, e)| (xi - s * e) / a).collect()
        };
        bounds.clamp(&mut est);
        Ok(est)
    };
    let mut x = standard_normal(rng, dim);
    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        let x0 = x0_hat(&x, t)?;
        let (a_t, s_t, a_s, s_s) = (alpha(t), sigma(t), alpha(s), sigma(s));
        let a_ts = a_t / a_s;
        let var_ts = s_t * s_t - a_ts * a_ts * s_s * s_s;
        let c_x = a_ts * s_s * s_s / (s_t * s_t);
        let c_0 = a_s * var_ts / (s_t * s_t);
        let std = var_ts.max(0.0).sqrt();
        let noise = standard_normal(rng, dim);
        x = x
            .iter()
            .zip(&x0)
            .zip(&noise)
            .map(|((xi, x0i), z)| c_x * xi + c_0 * x0i + std * z)
            .collect();
    }
    let out = x0_hat(&x, t_lo)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampler output".into()));
    }
    Ok(out)
}
