//! A small feed-forward hashing network: D-dim features in, K tanh outputs
//! in (−1,1). Provides exact reverse-mode input gradients for the attack
//! engine and parameter gradients for pairwise-similarity training.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashcore::{sign_quantize, HashCode};
use crate::scalar::{real, Real};
use crate::semantics::LabelVector;

/// Magic bytes of the `.phm` model file format.
pub const PHM_MAGIC: &[u8; 4] = b"PHM1";

/// Dense tanh network with layer dims `[D, hidden..., K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashNet<T: Real> {
    dims: Vec<usize>,
    /// Row-major `[out × in]` weight matrices, one per layer.
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
    seed: u64,
    quant_weight: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    dims: Vec<usize>,
    activation: String,
    seed: u64,
    alpha: f64,
}

impl<T: Real> HashNet<T> {
    /// Glorot-uniform initialization from `seed`.
    pub fn new_random(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("layer dimensions must be positive"));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| real(rng.gen_range(-limit..limit)))
                .collect();
            weights.push(w);
            biases.push(vec![T::zero(); fan_out]);
        }
        Ok(HashNet { dims, weights, biases, seed, quant_weight: 0.1 })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Test-only: overwrite one layer's parameters.
    #[cfg(test)]
    pub(crate) fn set_layer(&mut self, layer: usize, weights: Vec<T>, biases: Vec<T>) {
        assert_eq!(weights.len(), self.weights[layer].len());
        assert_eq!(biases.len(), self.biases[layer].len());
        self.weights[layer] = weights;
        self.biases[layer] = biases;
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension(format!(
                "input has {} components, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite component in model input"));
        }
        Ok(())
    }

    /// Forward pass; output lies strictly in (−1,1)^K.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_cached(x)?.pop().unwrap())
    }

    /// Forward pass keeping every layer's post-tanh activation
    /// (`result[0]` is the input, `result.last()` the output).
    fn forward_cached(&self, x: &[T]) -> Result<Vec<Vec<T>>> {
        self.check_input(x)?;
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.dims.len());
        acts.push(x.to_vec());
        for layer in 0..self.weights.len() {
            let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
            let prev = &acts[layer];
            let w = &self.weights[layer];
            let b = &self.biases[layer];
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(prev) {
                    z += *wi * *xi;
                }
                out.push(z.tanh());
            }
            acts.push(out);
        }
        Ok(acts)
    }

    /// Exact reverse-mode gradient of `upstreamᵀ·forward(x)` with respect
    /// to `x`.
    pub fn input_gradient(&self, x: &[T], upstream: &[T]) -> Result<Vec<T>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dimension(format!(
                "upstream has {} components, model outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let acts = self.forward_cached(x)?;
        let mut delta = tanh_backward(upstream, acts.last().unwrap());
        for layer in (0..self.weights.len()).rev() {
            let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
            let w = &self.weights[layer];
            let mut grad_prev = vec![T::zero(); n_in];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let d = delta[o];
                for (g, wi) in grad_prev.iter_mut().zip(row) {
                    *g += *wi * d;
                }
            }
            if layer > 0 {
                delta = tanh_backward(&grad_prev, &acts[layer]);
            } else {
                return Ok(grad_prev);
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Accumulates parameter gradients of `upstreamᵀ·forward(x)` into
    /// `grads`; used by the trainers.
    fn accumulate_param_gradients(&self, acts: &[Vec<T>], upstream: &[T], grads: &mut ParamGrads<T>) {
        let mut delta = tanh_backward(upstream, acts.last().unwrap());
        for layer in (0..self.weights.len()).rev() {
            let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
            let prev = &acts[layer];
            for o in 0..n_out {
                let d = delta[o];
                let grow = &mut grads.weights[layer][o * n_in..(o + 1) * n_in];
                for (g, xi) in grow.iter_mut().zip(prev) {
                    *g += d * *xi;
                }
                grads.biases[layer][o] += d;
            }
            if layer > 0 {
                let w = &self.weights[layer];
                let mut grad_prev = vec![T::zero(); n_in];
                for o in 0..n_out {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let d = delta[o];
                    for (g, wi) in grad_prev.iter_mut().zip(row) {
                        *g += *wi * d;
                    }
                }
                delta = tanh_backward(&grad_prev, &acts[layer]);
            }
        }
    }

    /// Sign-quantizes the forward output of every feature row, order
    /// preserved. `features` is row-major N×D.
    pub fn encode_dataset(&self, features: &[T]) -> Result<Vec<HashCode>> {
        let d = self.input_dim();
        if features.len() % d != 0 {
            return Err(Error::dimension(format!(
                "feature buffer length {} is not a multiple of input dim {d}",
                features.len()
            )));
        }
        features
            .chunks(d)
            .map(|row| sign_quantize(&self.forward(row)?))
            .collect()
    }

    /// Serializes to the `.phm` layout: magic | u32 LE header length | JSON
    /// header | f64 LE parameter blob (per layer: weights row-major, then
    /// bias).
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = ModelHeader {
            dims: self.dims.clone(),
            activation: "tanh".to_string(),
            seed: self.seed,
            alpha: self.quant_weight,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        w.write_all(PHM_MAGIC)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for layer in 0..self.weights.len() {
            for v in self.weights[layer].iter().chain(&self.biases[layer]) {
                let bits = v.to_f64().expect("parameter not representable as f64");
                w.write_all(&bits.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Deserializes from the `.phm` layout.
    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(0, "truncated file"))?;
        if &magic != PHM_MAGIC {
            return Err(Error::format(0, "bad magic, expected PHM1"));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)
            .map_err(|_| Error::format(4, "truncated file"))?;
        let header_len = u32::from_le_bytes(buf4) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)
            .map_err(|_| Error::format(8, "truncated header"))?;
        let header: ModelHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::format(8, format!("bad header json: {e}")))?;
        if header.activation != "tanh" {
            return Err(Error::format(8, format!("unknown activation {:?}", header.activation)));
        }
        if header.dims.len() < 2 || header.dims.iter().any(|&d| d == 0) {
            return Err(Error::format(8, "invalid layer dims"));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = (8 + header_len) as u64;
        let mut buf8 = [0u8; 8];
        for layer in 0..header.dims.len() - 1 {
            let (n_in, n_out) = (header.dims[layer], header.dims[layer + 1]);
            let mut w = Vec::with_capacity(n_in * n_out);
            for _ in 0..n_in * n_out {
                r.read_exact(&mut buf8)
                    .map_err(|_| Error::format(offset, "truncated parameter blob"))?;
                w.push(real(f64::from_le_bytes(buf8)));
                offset += 8;
            }
            let mut b = Vec::with_capacity(n_out);
            for _ in 0..n_out {
                r.read_exact(&mut buf8)
                    .map_err(|_| Error::format(offset, "truncated parameter blob"))?;
                b.push(real(f64::from_le_bytes(buf8)));
                offset += 8;
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(HashNet {
            dims: header.dims,
            weights,
            biases,
            seed: header.seed,
            quant_weight: header.alpha,
        })
    }
}

/// `upstream ∘ (1 − a²)` where `a` is a post-tanh activation.
fn tanh_backward<T: Real>(upstream: &[T], act: &[T]) -> Vec<T> {
    upstream
        .iter()
        .zip(act)
        .map(|(&u, &a)| u * (T::one() - a * a))
        .collect()
}

/// Per-layer parameter gradient buffers.
struct ParamGrads<T: Real> {
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    fn zeros_like(net: &HashNet<T>) -> Self {
        ParamGrads {
            weights: net.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    fn reset(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = T::zero());
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// SGD hyperparameters; defaults follow the attacked-model recipe
/// (lr 0.01, momentum 0.9, weight decay 5e-4).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Quantization-penalty weight α.
    pub quant_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 50,
            seed: 42,
            quant_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::config("learning rate and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0,1)"));
        }
        if self.weight_decay < 0.0 || self.quant_weight < 0.0 {
            return Err(Error::config("weight decay and quant weight must be nonnegative"));
        }
        Ok(())
    }
}

/// A training run's outcome: the net plus the recorded per-epoch loss trace.
pub struct TrainOutcome<T: Real> {
    pub net: HashNet<T>,
    pub loss_trace: Vec<f64>,
}

/// Immutable borrow of training data: row-major features and aligned labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T: Real> {
    pub features: &'a [T],
    pub labels: &'a [LabelVector],
    pub dim: usize,
}

impl<'a, T: Real> TrainData<'a, T> {
    pub fn new(features: &'a [T], labels: &'a [LabelVector], dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::dimension(format!(
                "features ({}) do not match {} labels × dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("training dataset is empty"));
        }
        Ok(TrainData { features, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Trains a fresh net with the pairwise-likelihood hashing loss
/// `Σ_pairs(log(1+exp(Θ_ij)) − s_ij·Θ_ij) + α·Σ_i ‖h_i − sign(h_i)‖²`,
/// `Θ_ij = ½ h_iᵀh_j`, s_ij = 1 iff labels intersect. Deterministic for a
/// fixed seed.
pub fn train_pairwise<T: Real>(
    data: TrainData<'_, T>,
    bits: usize,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset of {} rows smaller than batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut net = HashNet::new_random(data.dim, hidden, bits, cfg.seed)?;
    let mut trainer = Trainer::new(&net, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            epoch_loss += trainer.step_pairwise(&mut net, data, batch, None)?;
            batches += 1;
        }
        loss_trace.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(TrainOutcome { net, loss_trace })
}

/// Fisher-Yates with our own RNG so the permutation is stable across
/// platforms and rand versions.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// SGD-with-momentum state shared by the plain and adversarial trainers.
pub(crate) struct Trainer<T: Real> {
    velocity: ParamGrads<T>,
    grads: ParamGrads<T>,
    cfg: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub(crate) fn new(net: &HashNet<T>, cfg: &TrainConfig) -> Self {
        Trainer {
            velocity: ParamGrads::zeros_like(net),
            grads: ParamGrads::zeros_like(net),
            cfg: cfg.clone(),
        }
    }

    /// One SGD step on a batch. `adversarial` optionally supplies, per batch
    /// element, an adversarial input row and the upstream gradient of the
    /// extra alignment term; returns the batch loss.
    pub(crate) fn step_pairwise(
        &mut self,
        net: &mut HashNet<T>,
        data: TrainData<'_, T>,
        batch: &[usize],
        adversarial: Option<&[(Vec<T>, Vec<T>)]>,
    ) -> Result<f64> {
        self.grads.reset();
        let k = net.output_dim();
        let caches: Vec<Vec<Vec<T>>> = batch
            .iter()
            .map(|&i| net.forward_cached(data.row(i)))
            .collect::<Result<_>>()?;
        let outputs: Vec<&Vec<T>> = caches.iter().map(|c| c.last().unwrap()).collect();

        let n = batch.len();
        let n_pairs = n * (n - 1) / 2;
        let pair_norm = 1.0 / n_pairs.max(1) as f64;
        let batch_norm = 1.0 / n as f64;
        let alpha = self.cfg.quant_weight;

        let mut upstreams: Vec<Vec<T>> = vec![vec![T::zero(); k]; n];
        let mut loss = 0.0f64;

        // pairwise-likelihood term over pairs inside the batch
        for a in 0..n {
            for b in a + 1..n {
                let theta: f64 = outputs[a]
                    .iter()
                    .zip(outputs[b])
                    .map(|(&x, &y)| (x * y).to_f64().unwrap())
                    .sum::<f64>()
                    * 0.5;
                let s = if data.labels[batch[a]].shares_label(&data.labels[batch[b]])? {
                    1.0
                } else {
                    0.0
                };
                loss += pair_norm * (softplus(theta) - s * theta);
                let dtheta = pair_norm * (sigmoid(theta) - s);
                for c in 0..k {
                    upstreams[a][c] += real::<T>(dtheta * 0.5) * outputs[b][c];
                    upstreams[b][c] += real::<T>(dtheta * 0.5) * outputs[a][c];
                }
            }
        }

        // quantization pull toward the sample's own code, sign(0)=+1
        for a in 0..n {
            for c in 0..k {
                let h = outputs[a][c].to_f64().unwrap();
                let target = if h >= 0.0 { 1.0 } else { -1.0 };
                loss += batch_norm * alpha * (h - target) * (h - target);
                upstreams[a][c] += real::<T>(batch_norm * alpha * 2.0 * (h - target));
            }
        }

        for a in 0..n {
            net.accumulate_param_gradients(&caches[a], &upstreams[a], &mut self.grads);
        }

        // adversarial alignment term: −(1/K)·b★ᵀ f(x′), backpropped at x′
        if let Some(advs) = adversarial {
            for (x_adv, upstream) in advs {
                let cache = net.forward_cached(x_adv)?;
                let out = cache.last().unwrap();
                loss += batch_norm
                    * out
                        .iter()
                        .zip(upstream)
                        .map(|(&h, &u)| (h * u).to_f64().unwrap())
                        .sum::<f64>();
                let scaled: Vec<T> = upstream.iter().map(|&u| u * real::<T>(batch_norm)).collect();
                net.accumulate_param_gradients(&cache, &scaled, &mut self.grads);
            }
        }

        self.apply_sgd(net);
        Ok(loss)
    }

    fn apply_sgd(&mut self, net: &mut HashNet<T>) {
        let lr = real::<T>(self.cfg.learning_rate);
        let mom = real::<T>(self.cfg.momentum);
        let wd = real::<T>(self.cfg.weight_decay);
        for layer in 0..net.weights.len() {
            for (idx, w) in net.weights[layer].iter_mut().enumerate() {
                let g = self.grads.weights[layer][idx] + wd * *w;
                let v = mom * self.velocity.weights[layer][idx] + g;
                self.velocity.weights[layer][idx] = v;
                *w -= lr * v;
            }
            for (idx, b) in net.biases[layer].iter_mut().enumerate() {
                let g = self.grads.biases[layer][idx];
                let v = mom * self.velocity.biases[layer][idx] + g;
                self.velocity.biases[layer][idx] = v;
                *b -= lr * v;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}
