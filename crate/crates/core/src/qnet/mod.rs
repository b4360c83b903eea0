//! Factored multi-head Q-network.
//!
//! A shared ReLU trunk feeds one linear head per controllable device; head
//! `h` outputs one Q-value per level of that device's action grid. The
//! network exposes parameter gradients for TD learning and input gradients
//! for attack generation, both by explicit backpropagation.

mod adam;
mod checkpoint;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, LayerRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl NetConfig {
    /// Four ReLU layers of 512 units.
    pub const FULL: Self = Self {
        hidden_layers: 4,
        hidden_width: 512,
    };
    /// Two ReLU layers of 128 units; what the desk-scale experiments use.
    pub const DESK: Self = Self {
        hidden_layers: 2,
        hidden_width: 128,
    };
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::DESK
    }
}

/// Affine layer `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit));
        Self {
            weights,
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
}

/// Parameter-shaped container, used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Vec<Dense>,
    pub heads: Vec<Dense>,
}

impl Gradients {
    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(&self.heads)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain(&mut self.heads)
    }

    pub fn global_norm(&self) -> f64 {
        self.layers()
            .map(|l| {
                l.weights.iter().map(|g| g * g).sum::<f64>() + l.bias.iter().map(|g| g * g).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for l in self.layers_mut() {
            l.weights.mapv_inplace(|g| g * k);
            l.bias.mapv_inplace(|g| g * k);
        }
    }

    /// All entries in parameter order: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Activations kept from a batched forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Post-ReLU output of each trunk layer.
    hidden: Vec<Array2<f64>>,
    /// Per-head Q-values, `batch × head_size`.
    pub q: Vec<Array2<f64>>,
}

impl QNetwork {
    /// He-uniform weights and zero biases drawn from `seed`.
    pub fn new(input_dim: usize, head_sizes: &[usize], config: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(config.hidden_layers);
        let mut width = input_dim;
        for _ in 0..config.hidden_layers {
            trunk.push(Dense::he_uniform(width, config.hidden_width, &mut rng));
            width = config.hidden_width;
        }
        let heads = head_sizes
            .iter()
            .map(|&n| Dense::he_uniform(width, n, &mut rng))
            .collect();
        Self { trunk, heads }
    }

    pub fn from_layers(trunk: Vec<Dense>, heads: Vec<Dense>) -> Result<Self> {
        let net = Self { trunk, heads };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut width = self.input_dim();
        for layer in &self.trunk {
            if layer.fan_in() != width || layer.bias.len() != layer.fan_out() {
                return Err(Error::ShapeMismatch {
                    what: "trunk layer input",
                    expected: width,
                    got: layer.fan_in(),
                });
            }
            width = layer.fan_out();
        }
        for head in &self.heads {
            if head.fan_in() != width || head.bias.len() != head.fan_out() {
                return Err(Error::ShapeMismatch {
                    what: "head input",
                    expected: width,
                    got: head.fan_in(),
                });
            }
        }
        if self.heads.is_empty() {
            return Err(Error::InvalidInput("network needs at least one head".into()));
        }
        Ok(())
    }

    pub fn trunk(&self) -> &[Dense] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Dense] {
        &self.heads
    }

    pub fn input_dim(&self) -> usize {
        self.trunk
            .first()
            .or(self.heads.first())
            .map_or(0, Dense::fan_in)
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(Dense::fan_out).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(&self.heads)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain(&mut self.heads)
    }

    /// Parameters flattened in the same order as [`Gradients::flatten`].
    pub fn flatten_params(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Overwrites parameter `index` (flattened order).
    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for layer in self.layers_mut() {
            let nw = layer.weights.len();
            if index < nw {
                let cols = layer.fan_out();
                layer.weights[(index / cols, index % cols)] = value;
                return;
            }
            index -= nw;
            if index < layer.bias.len() {
                layer.bias[index] = value;
                return;
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            trunk: self.trunk.iter().map(Dense::zeros_like).collect(),
            heads: self.heads.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Batched forward pass over rows of `states`.
    pub fn forward_batch(&self, states: ArrayView2<f64>) -> Result<ForwardCache> {
        if states.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                what: "state width",
                expected: self.input_dim(),
                got: states.ncols(),
            });
        }
        let mut hidden = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let x = hidden.last().map_or(states.view(), |h: &Array2<f64>| h.view());
            let mut h = layer.forward(&x);
            h.mapv_inplace(|v| v.max(0.0));
            hidden.push(h);
        }
        let features = hidden.last().map_or(states.view(), |h| h.view());
        let q = self.heads.iter().map(|head| head.forward(&features)).collect();
        Ok(ForwardCache {
            input: states.to_owned(),
            hidden,
            q,
        })
    }

    /// Per-head Q-values for a single state.
    pub fn forward(&self, state: &[f64]) -> Result<Vec<Vec<f64>>> {
        let x = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let cache = self.forward_batch(x)?;
        Ok(cache.q.into_iter().map(|q| q.into_raw_vec_and_offset().0).collect())
    }

    /// Backpropagates per-head output gradients `dL/dQ_h` (`batch × head_size`).
    ///
    /// Returns parameter gradients and the gradient with respect to each
    /// input row.
    pub fn backward(&self, cache: &ForwardCache, head_grads: &[Array2<f64>]) -> (Gradients, Array2<f64>) {
        let mut grads = self.zero_gradients();
        let features = cache.hidden.last().unwrap_or(&cache.input);
        let mut d_features = Array2::<f64>::zeros(features.raw_dim());
        for ((head, g_head), dq) in self.heads.iter().zip(&mut grads.heads).zip(head_grads) {
            g_head.weights = features.t().dot(dq);
            g_head.bias = dq.sum_axis(Axis(0));
            d_features += &dq.dot(&head.weights.t());
        }

        let mut upstream = d_features;
        for l in (0..self.trunk.len()).rev() {
            let out = &cache.hidden[l];
            ndarray::Zip::from(&mut upstream)
                .and(out)
                .for_each(|g, &h| {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                });
            let input = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            grads.trunk[l].weights = input.t().dot(&upstream);
            grads.trunk[l].bias = upstream.sum_axis(Axis(0));
            upstream = upstream.dot(&self.trunk[l].weights.t());
        }
        (grads, upstream)
    }

    /// Subtracts `lr * grads` (plain SGD; used by tests and toy checks).
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.layers_mut().zip(grads.layers()) {
            p.weights.scaled_add(-lr, &g.weights);
            p.bias.scaled_add(-lr, &g.bias);
        }
    }
}

/// Lowest-index argmax.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Lowest-index argmin.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Per-head greedy grid indices.
pub fn greedy_heads(net: &QNetwork, state: &[f64]) -> Result<Vec<usize>> {
    Ok(net.forward(state)?.iter().map(|q| argmax(q)).collect())
}

/// Target network `θ⁻`: an independent deep copy of the online parameters.
pub fn sync_target(net: &QNetwork) -> QNetwork {
    net.clone()
}

/// Surrogate attack objective over per-head softmax policies.
///
/// `J(s) = Σ_h log softmax(Q_h(s) / T)[target_h]`, i.e. the negative
/// cross-entropy toward the per-head target (worst) actions. Ascending `J`
/// raises the probability of those actions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub targets: Vec<usize>,
    pub temperature: f64,
}

impl LossSpec {
    pub fn new(targets: Vec<usize>) -> Self {
        Self {
            targets,
            temperature: 1.0,
        }
    }

    fn validate(&self, net: &QNetwork) -> Result<()> {
        let sizes = net.head_sizes();
        if self.targets.len() != sizes.len() {
            return Err(Error::ShapeMismatch {
                what: "loss targets",
                expected: sizes.len(),
                got: self.targets.len(),
            });
        }
        if let Some((t, n)) = self.targets.iter().zip(&sizes).find(|(t, n)| t >= n) {
            return Err(Error::InvalidInput(format!("loss target {t} outside head of size {n}")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidInput("softmax temperature must be positive".into()));
        }
        Ok(())
    }
}

fn log_softmax(q: &[f64], temperature: f64) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = q.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
    q.iter().map(|v| (v - max) / temperature - lse).collect()
}

/// Value of the surrogate objective at `state`.
pub fn surrogate_loss(net: &QNetwork, state: &[f64], spec: &LossSpec) -> Result<f64> {
    spec.validate(net)?;
    let q = net.forward(state)?;
    Ok(q.iter()
        .zip(&spec.targets)
        .map(|(qh, &t)| log_softmax(qh, spec.temperature)[t])
        .sum())
}

/// Gradient of the surrogate objective with respect to every state entry.
pub fn input_gradient(net: &QNetwork, state: &[f64], spec: &LossSpec) -> Result<Vec<f64>> {
    spec.validate(net)?;
    let x = ArrayView2::from_shape((1, state.len()), state)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let cache = net.forward_batch(x)?;
    let head_grads: Vec<Array2<f64>> = cache
        .q
        .iter()
        .zip(&spec.targets)
        .map(|(q, &t)| {
            let row = q.row(0).to_vec();
            let log_p = log_softmax(&row, spec.temperature);
            let mut g = Array2::zeros((1, row.len()));
            for (a, lp) in log_p.iter().enumerate() {
                let onehot = if a == t { 1.0 } else { 0.0 };
                g[(0, a)] = (onehot - lp.exp()) / spec.temperature;
            }
            g
        })
        .collect();
    let (_, d_input) = net.backward(&cache, &head_grads);
    Ok(d_input.into_raw_vec_and_offset().0)
}

/// One row of a TD minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSample<'a> {
    pub state: &'a [f64],
    /// Taken grid index per head.
    pub actions: &'a [usize],
    /// TD target per head.
    pub targets: &'a [f64],
}

/// Mean squared TD error (averaged over samples and heads) and its parameter gradient.
pub fn td_loss_and_gradient(net: &QNetwork, batch: &[TdSample<'_>]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty TD minibatch".into()));
    }
    let n_heads = net.heads.len();
    let dim = net.input_dim();
    let mut states = Array2::zeros((batch.len(), dim));
    for (b, sample) in batch.iter().enumerate() {
        if sample.state.len() != dim {
            return Err(Error::ShapeMismatch {
                what: "state width",
                expected: dim,
                got: sample.state.len(),
            });
        }
        if sample.actions.len() != n_heads || sample.targets.len() != n_heads {
            return Err(Error::ShapeMismatch {
                what: "per-head actions/targets",
                expected: n_heads,
                got: sample.actions.len().min(sample.targets.len()),
            });
        }
        states.row_mut(b).assign(&ndarray::ArrayView1::from(sample.state));
    }
    let cache = net.forward_batch(states.view())?;
    let scale = 1.0 / (batch.len() * n_heads) as f64;
    let mut loss = 0.0;
    let mut head_grads: Vec<Array2<f64>> = cache.q.iter().map(|q| Array2::zeros(q.raw_dim())).collect();
    for (b, sample) in batch.iter().enumerate() {
        for h in 0..n_heads {
            let a = sample.actions[h];
            let err = cache.q[h][(b, a)] - sample.targets[h];
            loss += err * err * scale;
            head_grads[h][(b, a)] = 2.0 * err * scale;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("TD loss".into()));
    }
    let (grads, _) = net.backward(&cache, &head_grads);
    Ok((loss, grads))
}

/// Computes the TD loss, clips the gradient to `clip_norm`, and applies one Adam step.
///
/// A non-finite loss or gradient leaves the network untouched.
pub fn param_gradient_and_update(
    net: &mut QNetwork,
    batch: &[TdSample<'_>],
    adam: &mut AdamState,
    clip_norm: Option<f64>,
) -> Result<f64> {
    let (loss, mut grads) = td_loss_and_gradient(net, batch)?;
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("TD gradient".into()));
    }
    if let Some(max) = clip_norm {
        if norm > max {
            grads.scale(max / norm);
        }
    }
    adam.step(net, &grads)?;
    Ok(loss)
}
