//! The student policy: a small ReLU network mapping an observation to `n_s`
//! candidate actions, trained with an assignment-weighted loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, cost_matrices, loss, Variant};
use crate::dataset::Demonstration;
use crate::error::{Error, Result};
use crate::observation::Observation;
use crate::splines::ActionTuple;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense network with ReLU hidden layers and a linear output layer.
/// Parameters are stored flat: for each layer the row-major weight matrix
/// (`out x in`) followed by the bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer activations of one forward pass, kept for backpropagation.
pub struct Activations {
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("input layer present")
    }
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; n] })
    }

    /// Uniform fan-in initialization: hidden weights in `±√(6/fan_in)`,
    /// output weights in `±√(1/fan_in)`, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = sizes.len() - 1;
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, out) = (w[0], w[1]);
            let gain = if l + 1 == n_layers { 1.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * out] {
                *p = rng.random_range(-bound..bound);
            }
            off += fan_in * out + out;
        }
        Ok(net)
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Activations> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!("network input needs {} values, got {}", self.input_len(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let n_layers = self.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let input = &layers[l];
            let mut out = b.to_vec();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
                *o += row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                if l + 1 < n_layers && *o < 0.0 {
                    *o = 0.0;
                }
            }
            layers.push(out);
            off += n_in * n_out + n_out;
        }
        Ok(Activations { layers })
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub fn backward(&self, acts: &Activations, d_out: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts.layers[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (d, row) in delta.iter().zip(w.chunks_exact(n_in)) {
                if *d == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            // ReLU derivative: the stored activation is zero where inactive.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Product of the spectral-norm upper bounds `‖W‖_F` of all layers, a
    /// Lipschitz constant of the network in the 2-norm.
    pub fn lipschitz_bound(&self) -> f64 {
        let mut off = 0;
        let mut bound = 1.0;
        for w in self.sizes.windows(2) {
            let n = w[0] * w[1];
            bound *= self.params[off..off + n].iter().map(|v| v * v).sum::<f64>().sqrt();
            off += n + w[1];
        }
        bound
    }
}

/// Affine map of every dimension from `[lo, hi]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub obs_lo: Vec<f64>,
    pub obs_hi: Vec<f64>,
    pub act_lo: Vec<f64>,
    pub act_hi: Vec<f64>,
}

pub const NORMALIZER_PADDING: f64 = 0.05;

fn padded_bounds(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range < 1e-6 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo - NORMALIZER_PADDING * range, hi + NORMALIZER_PADDING * range)
    }
}

fn to_unit(x: f64, lo: f64, hi: f64) -> f64 {
    2.0 * (x - lo) / (hi - lo) - 1.0
}

fn from_unit(y: f64, lo: f64, hi: f64) -> f64 {
    lo + (y + 1.0) * 0.5 * (hi - lo)
}

impl Normalizer {
    /// Bounds from the data with 5% padding; the time dimension is mapped
    /// from `[t_min, t_pred]`.
    pub fn fit(demos: &[Demonstration], t_min: f64, t_pred: f64) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::Empty("normalizer data"));
        }
        if !(t_min < t_pred) {
            return Err(Error::Config("need t_min < t_pred".into()));
        }
        let obs: Vec<[f64; 43]> = demos.iter().map(|d| d.observation.to_array()).collect();
        let acts: Vec<[f64; 13]> = demos.iter().flat_map(|d| d.actions.iter().map(|a| a.to_array())).collect();
        if acts.is_empty() {
            return Err(Error::Empty("expert actions"));
        }
        let mut n = Self { obs_lo: vec![0.0; 43], obs_hi: vec![0.0; 43], act_lo: vec![0.0; 13], act_hi: vec![0.0; 13] };
        for k in 0..43 {
            (n.obs_lo[k], n.obs_hi[k]) = padded_bounds(obs.iter().map(|o| o[k]));
        }
        for k in 0..12 {
            (n.act_lo[k], n.act_hi[k]) = padded_bounds(acts.iter().map(|a| a[k]));
        }
        n.act_lo[12] = t_min;
        n.act_hi[12] = t_pred;
        Ok(n)
    }

    pub fn normalize_obs(&self, obs: &Observation) -> [f64; 43] {
        let x = obs.to_array();
        std::array::from_fn(|k| to_unit(x[k], self.obs_lo[k], self.obs_hi[k]))
    }

    pub fn normalize_action(&self, a: &ActionTuple) -> [f64; 13] {
        let x = a.to_array();
        std::array::from_fn(|k| to_unit(x[k], self.act_lo[k], self.act_hi[k]))
    }

    pub fn denormalize_action(&self, y: &[f64]) -> Result<ActionTuple> {
        if y.len() != 13 {
            return Err(Error::Shape("normalized action needs 13 values".into()));
        }
        let x: Vec<f64> = (0..13).map(|k| from_unit(y[k], self.act_lo[k], self.act_hi[k])).collect();
        ActionTuple::from_slice(&x)
    }

    pub fn t_min(&self) -> f64 {
        self.act_lo[12]
    }

    pub fn t_pred(&self) -> f64 {
        self.act_hi[12]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_s: usize,
    pub hidden: Vec<usize>,
    pub variant: Variant,
    pub epsilon: f64,
    pub beta_p: f64,
    pub beta_t: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_s: 6,
            hidden: vec![64, 64],
            variant: Variant::Lsa,
            epsilon: 0.0,
            beta_p: 1.0,
            beta_t: 1.0,
            epochs: 500,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![Observation::LEN];
        s.extend(&self.hidden);
        s.push(ActionTuple::LEN * self.n_s);
        s
    }
}

/// Network, normalizer and head count, serialized as a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub version: u32,
    pub n_s: usize,
    pub net: Mlp,
    pub normalizer: Normalizer,
}

impl Policy {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Policy = serde_json::from_slice(&std::fs::read(path)?)?;
        if p.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", p.version)));
        }
        if p.net.input_len() != Observation::LEN || p.net.output_len() != ActionTuple::LEN * p.n_s {
            return Err(Error::Shape("checkpoint architecture does not match n_s".into()));
        }
        Ok(p)
    }

    /// Raw network output split into `n_s` normalized action rows.
    pub fn forward_normalized(&self, obs: &Observation) -> Result<Vec<[f64; 13]>> {
        let acts = self.net.forward(&self.normalizer.normalize_obs(obs))?;
        Ok(split_heads(acts.output()))
    }

    /// `n_s` candidate actions in frame f with `T` clamped to
    /// `[t_min, t_pred]`.
    pub fn predict(&self, obs: &Observation) -> Result<Vec<ActionTuple>> {
        let heads = self.forward_normalized(obs)?;
        let (lo, hi) = (self.normalizer.t_min(), self.normalizer.t_pred());
        heads
            .iter()
            .map(|h| {
                let mut a = self.normalizer.denormalize_action(h)?;
                a.total_time = if a.total_time.is_finite() { a.total_time.clamp(lo, hi) } else { hi };
                Ok(a)
            })
            .collect()
    }
}

fn split_heads(out: &[f64]) -> Vec<[f64; 13]> {
    out.chunks_exact(13).map(|c| std::array::from_fn(|k| c[k])).collect()
}

/// A demonstration with normalized inputs and targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: [f64; 43],
    pub targets: Vec<[f64; 13]>,
}

pub fn normalize_demos(demos: &[Demonstration], normalizer: &Normalizer) -> Vec<Sample> {
    demos
        .iter()
        .filter(|d| d.n_e() > 0)
        .map(|d| Sample {
            x: normalizer.normalize_obs(&d.observation),
            targets: d.actions.iter().map(|a| normalizer.normalize_action(a)).collect(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub variant: Variant,
    pub epsilon: f64,
    pub beta_p: f64,
    pub beta_t: f64,
}

impl From<&TrainConfig> for LossSpec {
    fn from(c: &TrainConfig) -> Self {
        Self { variant: c.variant, epsilon: c.epsilon, beta_p: c.beta_p, beta_t: c.beta_t }
    }
}

/// Loss of one sample given the network output, and `∂L/∂output` with the
/// assignment held fixed.
pub fn sample_loss(output: &[f64], targets: &[[f64; 13]], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let heads = split_heads(output);
    let d = cost_matrices(targets, &heads)?;
    let a = assign(&d.d_p, spec.variant, spec.epsilon)?;
    let terms = loss(&a.a, &d, spec.beta_p, spec.beta_t)?;
    let mut grad = vec![0.0; output.len()];
    for (i, e) in targets.iter().enumerate() {
        for (j, y) in heads.iter().enumerate() {
            let (gp, gt) = (terms.grad_d_p[(i, j)], terms.grad_d_t[(i, j)]);
            if gp == 0.0 && gt == 0.0 {
                continue;
            }
            let g = &mut grad[13 * j..13 * j + 13];
            for k in 0..12 {
                g[k] += gp * 2.0 * (y[k] - e[k]) / 12.0;
            }
            g[12] += gt * 2.0 * (y[12] - e[12]);
        }
    }
    Ok((terms.loss, grad))
}

/// Mean loss over the batch and its gradient with respect to every network
/// parameter. The assignment is recomputed for each sample and treated as a
/// constant.
pub fn loss_and_gradient(net: &Mlp, batch: &[Sample], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut grad = vec![0.0; net.params.len()];
    let mut total = 0.0;
    for s in batch {
        let acts = net.forward(&s.x)?;
        let (l, d_out) = sample_loss(acts.output(), &s.targets, spec)?;
        total += l;
        net.backward(&acts, &d_out, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("adam buffers differ in length".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

pub struct TrainResult {
    pub policy: Policy,
    /// Mean training loss of every epoch.
    pub loss_curve: Vec<f64>,
}

/// Fits the normalizer on `demos` and trains a fresh policy with minibatch
/// Adam. Deterministic for a fixed configuration.
pub fn train(demos: &[Demonstration], cfg: &TrainConfig, t_min: f64, t_pred: f64) -> Result<TrainResult> {
    let normalizer = Normalizer::fit(demos, t_min, t_pred)?;
    let net = Mlp::init(&cfg.layer_sizes(), cfg.seed)?;
    let policy = Policy { version: CHECKPOINT_VERSION, n_s: cfg.n_s, net, normalizer };
    continue_training(policy, demos, cfg)
}

/// Further epochs on `demos` keeping the policy's normalizer.
pub fn continue_training(mut policy: Policy, demos: &[Demonstration], cfg: &TrainConfig) -> Result<TrainResult> {
    if demos.iter().any(|d| d.n_e() > cfg.n_s) {
        return Err(Error::Shape("a demonstration has more expert solutions than heads".into()));
    }
    let samples = normalize_demos(demos, &policy.normalizer);
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let spec = LossSpec::from(cfg);
    let mut adam = AdamState::new(policy.net.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let batch_size = cfg.batch_size.max(1);
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let (l, g) = loss_and_gradient(&policy.net, &batch, &spec)?;
            adam_step(&mut policy.net.params, &g, &mut adam, cfg.lr)?;
            epoch_loss += l * chunk.len() as f64;
        }
        loss_curve.push(epoch_loss / samples.len() as f64);
    }
    Ok(TrainResult { policy, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_output_biases() {
        let mut net = Mlp::zeros(&[43, 64, 64, 78]).unwrap();
        let n = net.params.len();
        for (k, p) in net.params[n - 78..].iter_mut().enumerate() {
            *p = k as f64;
        }
        let out = net.forward(&[0.3; 43]).unwrap();
        assert_eq!(out.output().len(), 78);
        for (k, v) in out.output().iter().enumerate() {
            assert_eq!(*v, k as f64);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = Mlp::init(&[43, 8, 13], 0).unwrap();
        let mut x = [0.0; 43];
        x[5] = f64::NAN;
        assert!(matches!(net.forward(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.5], &mut s, 1e-3).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut s, 1e-3).is_err());
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut x: Vec<f64> = vec![5.0];
        let mut s = AdamState::new(1);
        let mut steps = 0;
        while x[0].abs() >= 1e-3 && steps < 5000 {
            let g = vec![2.0 * x[0]];
            adam_step(&mut x, &g, &mut s, 1e-2).unwrap();
            steps += 1;
        }
        assert!(x[0].abs() < 1e-3, "x = {} after {steps} steps", x[0]);
    }

    #[test]
    fn perfect_prediction_zero_loss_and_gradient() {
        let out: Vec<f64> = (0..26).map(|k| (k as f64 * 0.07).sin()).collect();
        let targets = vec![
            std::array::from_fn(|k| out[13 + k]),
            std::array::from_fn(|k| out[k]),
        ];
        let spec = LossSpec { variant: Variant::Lsa, epsilon: 0.0, beta_p: 1.0, beta_t: 1.0 };
        let (l, g) = sample_loss(&out, &targets, &spec).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalizer_round_trip() {
        let n = Normalizer {
            obs_lo: vec![-1.0; 43],
            obs_hi: vec![2.0; 43],
            act_lo: vec![-3.0; 13],
            act_hi: vec![5.0; 13],
        };
        let a = ActionTuple::from_slice(&(0..13).map(|k| -2.5 + 0.5 * k as f64).collect::<Vec<_>>()).unwrap();
        let back = n.denormalize_action(&n.normalize_action(&a)).unwrap();
        for (x, y) in back.to_array().iter().zip(a.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
