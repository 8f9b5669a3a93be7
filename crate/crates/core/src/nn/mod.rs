//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `f64` vector; each layer contributes its weight
//! matrix (row-major, `out x in`) followed by its bias. Batched evaluation
//! goes through `ndarray` matrix products so training stays cheap on CPU.

mod adam;
mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use adam::{Direction, OptimizerState};
pub use checkpoint::{Checkpoint, NetEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
}

/// Output squashing. `Bounded` maps each coordinate smoothly into `(lo, hi)`
/// with `lo < 0 < hi`, fixing zero and with unit slope at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Bounded { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    input_dim: usize,
    hidden: Vec<usize>,
    output_dim: usize,
    activation: Activation,
    output: OutputActivation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, output: OutputActivation) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidInput("network dimensions must be at least 1".into()));
        }
        if let OutputActivation::Bounded { lo, hi } = &output {
            if lo.len() != output_dim || hi.len() != output_dim {
                return Err(Error::Shape("bounded output needs one (lo, hi) per output".into()));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && *l < 0.0 && *h > 0.0)) {
                return Err(Error::InvalidInput("bounded output needs lo < 0 < hi".into()));
            }
        }
        Ok(Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::Tanh,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output(&self) -> &OutputActivation {
        &self.output
    }

    /// (fan_in, fan_out) of each affine layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offsets of each layer's weight block and bias block in the flat vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layers()
            .iter()
            .map(|(i, o)| {
                let w = off;
                let b = off + i * o;
                off = b + o;
                (w, b)
            })
            .collect()
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Array2<f64>>,
    /// Pre-activation of the output layer.
    pre_out: Array2<f64>,
    pub output: Array2<f64>,
}

/// A network spec with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl Mlp {
    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a spec needing {}",
                params.len(),
                spec.param_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self { spec, params })
    }

    /// Weights uniform with variance `1 / fan_in`, zero biases. With
    /// `zero_output` the last layer starts at zero.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R, zero_output: bool) -> Self {
        let mut params = vec![0.0; spec.param_count()];
        let layers = spec.layers();
        let n_layers = layers.len();
        for (l, ((fan_in, fan_out), (w_off, _))) in layers.iter().zip(spec.offsets()).enumerate() {
            if zero_output && l + 1 == n_layers {
                continue;
            }
            let bound = (3.0 / *fan_in as f64).sqrt();
            for p in &mut params[w_off..w_off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Self { spec, params }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// SHA-256 of the parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (fan_in, fan_out) = self.spec.layers()[layer];
        let (w, _) = self.spec.offsets()[layer];
        ArrayView2::from_shape((fan_out, fan_in), &self.params[w..w + fan_in * fan_out]).expect("layout matches spec")
    }

    fn bias(&self, layer: usize) -> ndarray::ArrayView1<'_, f64> {
        let (_, fan_out) = self.spec.layers()[layer];
        let (_, b) = self.spec.offsets()[layer];
        ndarray::ArrayView1::from(&self.params[b..b + fan_out])
    }

    /// Batched forward pass over rows of `input`.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if input.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input width {} but network expects {}",
                input.ncols(),
                self.spec.input_dim
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let n_layers = self.spec.layers().len();
        let mut acts = vec![input.to_owned()];
        for l in 0..n_layers - 1 {
            let z = acts[l].dot(&self.weights(l).t()) + self.bias(l);
            acts.push(z.mapv(f64::tanh));
        }
        let pre_out = acts[n_layers - 1].dot(&self.weights(n_layers - 1).t()) + self.bias(n_layers - 1);
        let output = match &self.spec.output {
            OutputActivation::Identity => pre_out.clone(),
            OutputActivation::Bounded { lo, hi } => {
                let mut out = pre_out.clone();
                for mut row in out.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let b = if *v >= 0.0 { hi[j] } else { -lo[j] };
                        *v = b * (*v / b).tanh();
                    }
                }
                out
            }
        };
        Ok(ForwardCache { acts, pre_out, output })
    }

    /// Back-propagates `upstream` (d objective / d output, one row per sample).
    ///
    /// Returns the parameter gradient summed over rows (when requested) and the
    /// per-row input gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        want_params: bool,
    ) -> Result<(Option<Vec<f64>>, Array2<f64>)> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::Shape(format!(
                "upstream shape {:?} vs output shape {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let mut dz = match &self.spec.output {
            OutputActivation::Identity => upstream.to_owned(),
            OutputActivation::Bounded { lo, hi } => {
                let mut d = upstream.to_owned();
                for (mut drow, zrow) in d.rows_mut().into_iter().zip(cache.pre_out.rows()) {
                    for (j, (dv, z)) in drow.iter_mut().zip(zrow.iter()).enumerate() {
                        let b = if *z >= 0.0 { hi[j] } else { -lo[j] };
                        let t = (z / b).tanh();
                        *dv *= 1.0 - t * t;
                    }
                }
                d
            }
        };
        let n_layers = self.spec.layers().len();
        let offsets = self.spec.offsets();
        let mut grad = want_params.then(|| vec![0.0; self.params.len()]);
        for l in (0..n_layers).rev() {
            if let Some(g) = grad.as_mut() {
                let (w_off, b_off) = offsets[l];
                let gw = dz.t().dot(&cache.acts[l]);
                let gb: Array1<f64> = dz.sum_axis(Axis(0));
                let (fan_in, fan_out) = self.spec.layers()[l];
                g[w_off..w_off + fan_in * fan_out]
                    .iter_mut()
                    .zip(gw.iter())
                    .for_each(|(a, b)| *a = *b);
                g[b_off..b_off + fan_out].iter_mut().zip(gb.iter()).for_each(|(a, b)| *a = *b);
            }
            let da = dz.dot(&self.weights(l));
            if l == 0 {
                return Ok((grad, da));
            }
            let a = &cache.acts[l];
            dz = da * &a.mapv(|v| 1.0 - v * v);
        }
        unreachable!("network has at least one layer")
    }

    /// Single-sample evaluation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("one row");
        Ok(self.forward_batch(x)?.output.into_raw_vec_and_offset().0)
    }

    /// Gradient of `upstream . forward(input)` with respect to the parameters.
    pub fn grad_params(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (cache, u) = self.single(input, upstream)?;
        Ok(self.backward(&cache, u.view(), true)?.0.expect("requested"))
    }

    /// Gradient of `upstream . forward(input)` with respect to the input.
    pub fn grad_input(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (cache, u) = self.single(input, upstream)?;
        Ok(self.backward(&cache, u.view(), false)?.1.into_raw_vec_and_offset().0)
    }

    fn single(&self, input: &[f64], upstream: &[f64]) -> Result<(ForwardCache, Array2<f64>)> {
        if upstream.len() != self.spec.output_dim {
            return Err(Error::Shape(format!(
                "upstream has {} entries, output has {}",
                upstream.len(),
                self.spec.output_dim
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("one row");
        let cache = self.forward_batch(x)?;
        let u = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("one row");
        Ok((cache, u))
    }

    /// Polyak averaging: `self <- (1 - rate) * self + rate * source`.
    pub fn soft_update_from(&mut self, source: &Mlp, rate: f64) -> Result<()> {
        if source.spec != self.spec {
            return Err(Error::Shape("soft update between different specs".into()));
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = (1.0 - rate) * *t + rate * s;
        }
        Ok(())
    }
}
