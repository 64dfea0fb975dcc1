//! Encoder from the pooled ground-truth feature to mixture parameters.
//!
//! `flatten -> fc1 -> ReLU -> fc2 -> ReLU -> {mu, sigma, pi} heads`, with
//! `mu = tanh(.)`, `sigma = softplus(.) + SIGMA_FLOOR` and `pi = sigmoid(.)`.
//! One weight set is shared by every pyramid level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Error, Result};
use crate::gridops::PooledFeature;
use crate::params::{NamedTensor, ParamSet};
use crate::qdist::{GmmParamGrad, QualityGmm, RawGmmParams, DEFAULT_COMPONENTS, SIGMA_FLOOR};
use crate::Real;

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_POOL: usize = 7;
pub const DEFAULT_SAMPLES_PER_BIN: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub pool: usize,
    pub samples_per_bin: usize,
    pub components: usize,
    pub learn_mu: bool,
    pub learn_sigma: bool,
    pub learn_pi: bool,
    pub fixed_mu: f64,
    pub fixed_sigma: f64,
    pub fixed_pi: f64,
    /// Average the pooled block over its bins before the first layer.
    pub spatial_mean: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            pool: DEFAULT_POOL,
            samples_per_bin: DEFAULT_SAMPLES_PER_BIN,
            components: DEFAULT_COMPONENTS,
            learn_mu: true,
            learn_sigma: true,
            learn_pi: true,
            fixed_mu: 0.0,
            fixed_sigma: 1.0,
            fixed_pi: 1.0,
            spatial_mean: false,
        }
    }
}

impl EncoderConfig {
    /// Every head replaced by its fixed value.
    pub fn all_fixed(self) -> Self {
        Self { learn_mu: false, learn_sigma: false, learn_pi: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.pool == 0 || self.samples_per_bin == 0 || self.components == 0 {
            return domain("encoder hidden width, pool, samples per bin and components must be >= 1");
        }
        QualityGmm::<f64>::centered(self.components, self.fixed_sigma, self.fixed_pi)?;
        if !(self.fixed_mu.abs() <= 1.0) {
            return domain("fixed mu must lie in [-1, 1]");
        }
        Ok(())
    }

    pub fn input_dim(&self, channels: usize) -> usize {
        if self.spatial_mean {
            channels
        } else {
            channels * self.pool * self.pool
        }
    }

    /// The mixture produced when every head is fixed.
    pub fn fixed_gmm<T: Real>(&self) -> Result<QualityGmm<T>> {
        QualityGmm::new(
            vec![[T::of(self.fixed_mu); 2]; self.components],
            vec![[T::of(self.fixed_sigma); 2]; self.components],
            vec![T::of(self.fixed_pi); self.components],
        )
    }
}

/// Dot product with four interleaved partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Fully-connected layer, weights stored `outputs x inputs` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| T::of(rng.random_range(-a..=a))).collect();
        Self { inputs, outputs, weight, bias: vec![T::zero(); outputs] }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        self.weight
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and, if requested,
    /// writes `d(L)/d(x)` into `dx`.
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Dense<T>, dx: Option<&mut [T]>) {
        for ((row, gb), &g) in grad.weight.chunks_mut(self.inputs).zip(grad.bias.iter_mut()).zip(dy) {
            if g.is_zero() {
                continue;
            }
            *gb += g;
            for (gw, &v) in row.iter_mut().zip(x) {
                *gw += g * v;
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = T::zero());
            for (row, &g) in self.weight.chunks(self.inputs).zip(dy) {
                if g.is_zero() {
                    continue;
                }
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub in_channels: usize,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub mu_head: Dense<T>,
    pub sigma_head: Dense<T>,
    pub pi_head: Dense<T>,
}

impl<T: Real> EncoderWeights<T> {
    pub fn zeros(in_channels: usize, config: &EncoderConfig) -> Self {
        let (h, k) = (config.hidden, config.components);
        Self {
            in_channels,
            fc1: Dense::zeros(config.input_dim(in_channels), h),
            fc2: Dense::zeros(h, h),
            mu_head: Dense::zeros(h, 2 * k),
            sigma_head: Dense::zeros(h, 2 * k),
            pi_head: Dense::zeros(h, k),
        }
    }

    fn layers(&self) -> [(&'static str, &Dense<T>); 5] {
        [
            ("fc1", &self.fc1),
            ("fc2", &self.fc2),
            ("mu_head", &self.mu_head),
            ("sigma_head", &self.sigma_head),
            ("pi_head", &self.pi_head),
        ]
    }
}

impl<T: Real> ParamSet<T> for EncoderWeights<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        self.layers()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    NamedTensor { name: format!("qde.{name}.weight"), shape: vec![d.outputs, d.inputs], data: &d.weight[..] },
                    NamedTensor { name: format!("qde.{name}.bias"), shape: vec![d.outputs], data: &d.bias[..] },
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(10);
        for d in [&mut self.fc1, &mut self.fc2, &mut self.mu_head, &mut self.sigma_head, &mut self.pi_head] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init_weights<T: Real>(seed: u64, in_channels: usize, config: &EncoderConfig) -> EncoderWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, k) = (config.hidden, config.components);
    EncoderWeights {
        in_channels,
        fc1: Dense::glorot(config.input_dim(in_channels), h, &mut rng),
        fc2: Dense::glorot(h, h, &mut rng),
        mu_head: Dense::glorot(h, 2 * k, &mut rng),
        sigma_head: Dense::glorot(h, 2 * k, &mut rng),
        pi_head: Dense::glorot(h, k, &mut rng),
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    input: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    pub raw: RawGmmParams<T>,
    pub gmm: QualityGmm<T>,
}

fn check_input<T: Real>(w: &EncoderWeights<T>, pooled: &PooledFeature<T>, config: &EncoderConfig) -> Result<()> {
    if pooled.channels != w.in_channels || pooled.pool != config.pool {
        return Err(Error::Shape(format!(
            "pooled feature {}x{}x{} does not match encoder ({} channels, pool {})",
            pooled.channels, pooled.pool, pooled.pool, w.in_channels, config.pool
        )));
    }
    if w.fc1.inputs != config.input_dim(w.in_channels)
        || w.mu_head.outputs != 2 * config.components
        || w.pi_head.outputs != config.components
        || w.fc1.outputs != config.hidden
    {
        return Err(Error::Shape("encoder weights do not match the configuration".into()));
    }
    if pooled.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("pooled feature is not finite".into()));
    }
    Ok(())
}

fn relu<T: Real>(v: Vec<T>) -> Vec<T> {
    v.into_iter().map(|x| x.max(T::zero())).collect()
}

pub fn encode_traced<T: Real>(
    weights: &EncoderWeights<T>,
    pooled: &PooledFeature<T>,
    config: &EncoderConfig,
) -> Result<EncoderTrace<T>> {
    check_input(weights, pooled, config)?;
    let input = if config.spatial_mean { pooled.spatial_mean().data } else { pooled.data.clone() };
    let h1 = relu(weights.fc1.forward(&input));
    let h2 = relu(weights.fc2.forward(&h1));
    let k = config.components;
    let rm = weights.mu_head.forward(&h2);
    let rs = weights.sigma_head.forward(&h2);
    let rp = weights.pi_head.forward(&h2);
    let raw = RawGmmParams {
        mu: (0..k).map(|c| [rm[2 * c], rm[2 * c + 1]]).collect(),
        sigma: (0..k).map(|c| [rs[2 * c], rs[2 * c + 1]]).collect(),
        pi: rp,
    };
    let floor = T::of(SIGMA_FLOOR);
    let mu = if config.learn_mu {
        raw.mu.iter().map(|m| [m[0].tanh(), m[1].tanh()]).collect()
    } else {
        vec![[T::of(config.fixed_mu); 2]; k]
    };
    let sigma = if config.learn_sigma {
        raw.sigma.iter().map(|s| [s[0].softplus() + floor, s[1].softplus() + floor]).collect()
    } else {
        vec![[T::of(config.fixed_sigma); 2]; k]
    };
    let pi = if config.learn_pi {
        raw.pi.iter().map(|p| p.sigmoid().max(T::min_positive_value())).collect()
    } else {
        vec![T::of(config.fixed_pi); k]
    };
    let gmm = QualityGmm::new(mu, sigma, pi)?;
    Ok(EncoderTrace { input, h1, h2, raw, gmm })
}

pub fn encode<T: Real>(
    weights: &EncoderWeights<T>,
    pooled: &PooledFeature<T>,
    config: &EncoderConfig,
) -> Result<QualityGmm<T>> {
    Ok(encode_traced(weights, pooled, config)?.gmm)
}

/// Backpropagates `d(L)/d(mu, sigma, pi)` through the encoder.
///
/// Parameter gradients are accumulated into `grad`; the returned vector is
/// `d(L)/d(pooled)` in the pooled block's layout. Fixed heads pass no
/// gradient.
pub fn encode_backward<T: Real>(
    weights: &EncoderWeights<T>,
    trace: &EncoderTrace<T>,
    config: &EncoderConfig,
    upstream: &GmmParamGrad<T>,
    grad: &mut EncoderWeights<T>,
) -> Vec<T> {
    backward_impl(weights, trace, config, upstream, grad, true).expect("input gradient requested")
}

/// [`encode_backward`] for a detached input: parameter gradients only.
pub fn encode_backward_params<T: Real>(
    weights: &EncoderWeights<T>,
    trace: &EncoderTrace<T>,
    config: &EncoderConfig,
    upstream: &GmmParamGrad<T>,
    grad: &mut EncoderWeights<T>,
) {
    backward_impl(weights, trace, config, upstream, grad, false);
}

fn backward_impl<T: Real>(
    weights: &EncoderWeights<T>,
    trace: &EncoderTrace<T>,
    config: &EncoderConfig,
    upstream: &GmmParamGrad<T>,
    grad: &mut EncoderWeights<T>,
    input_grad: bool,
) -> Option<Vec<T>> {
    let k = config.components;
    let h = config.hidden;
    let g = &trace.gmm;
    let mut d_mu = vec![T::zero(); 2 * k];
    let mut d_sigma = vec![T::zero(); 2 * k];
    let mut d_pi = vec![T::zero(); k];
    for c in 0..k {
        for a in 0..2 {
            if config.learn_mu {
                let m = g.mu[c][a];
                d_mu[2 * c + a] = upstream.mu[c][a] * (T::one() - m * m);
            }
            if config.learn_sigma {
                d_sigma[2 * c + a] = upstream.sigma[c][a] * trace.raw.sigma[c][a].sigmoid();
            }
        }
        if config.learn_pi {
            let p = trace.raw.pi[c].sigmoid();
            d_pi[c] = upstream.pi[c] * p * (T::one() - p);
        }
    }
    let mut dh2 = vec![T::zero(); h];
    let mut tmp = vec![T::zero(); h];
    for (layer, gl, dy) in [
        (&weights.mu_head, &mut grad.mu_head, &d_mu),
        (&weights.sigma_head, &mut grad.sigma_head, &d_sigma),
        (&weights.pi_head, &mut grad.pi_head, &d_pi),
    ] {
        if dy.iter().all(|v| v.is_zero()) {
            continue;
        }
        layer.backward(&trace.h2, dy, gl, Some(&mut tmp));
        dh2.iter_mut().zip(&tmp).for_each(|(a, b)| *a += *b);
    }
    for (d, &a) in dh2.iter_mut().zip(&trace.h2) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    let mut dh1 = vec![T::zero(); h];
    weights.fc2.backward(&trace.h1, &dh2, &mut grad.fc2, Some(&mut dh1));
    for (d, &a) in dh1.iter_mut().zip(&trace.h1) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    if !input_grad {
        weights.fc1.backward(&trace.input, &dh1, &mut grad.fc1, None);
        return None;
    }
    let mut dx = vec![T::zero(); trace.input.len()];
    weights.fc1.backward(&trace.input, &dh1, &mut grad.fc1, Some(&mut dx));
    Some(if config.spatial_mean {
        let bins = config.pool * config.pool;
        let n = T::of(bins as f64);
        dx.iter().flat_map(|&d| std::iter::repeat_n(d / n, bins)).collect()
    } else {
        dx
    })
}

/// Gradients of `L` with respect to the encoder weights and the pooled
/// feature, given `d(L)/d(mu, sigma, pi)`.
pub fn encode_grad<T: Real>(
    weights: &EncoderWeights<T>,
    pooled: &PooledFeature<T>,
    config: &EncoderConfig,
    upstream: &GmmParamGrad<T>,
) -> Result<(EncoderWeights<T>, Vec<T>)> {
    let trace = encode_traced(weights, pooled, config)?;
    let mut grad = weights.zeros_like();
    let dx = encode_backward(weights, &trace, config, upstream, &mut grad);
    Ok((grad, dx))
}
