//! Per-instance quality surface over normalized in-box offsets.
//!
//! The surface is a mixture of axis-aligned Gaussian bumps
//! `p(d) = sum_k pi_k * exp(-(d - mu_k)^2 / (2 sigma_k^2))`, taken as a
//! product over the two axes. The bumps carry no normalizing constant, so
//! `p` peaks at `pi_k` rather than integrating to one; it is clamped to
//! `[0, 1]` only where it serves as a label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::NormalizedOffset;
use crate::Real;

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const DEFAULT_COMPONENTS: usize = 2;

/// Attempts per axis before the truncated draw falls back to clamping.
const MAX_REJECTIONS: usize = 100;
const CLAMP_EPS: f64 = 1e-6;

/// Mixture parameters for one instance on one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct QualityGmm<T> {
    pub mu: Vec<[T; 2]>,
    pub sigma: Vec<[T; 2]>,
    pub pi: Vec<T>,
}

/// Unconstrained encoder outputs of the same shapes as [`QualityGmm`].
#[derive(Clone, Debug, PartialEq)]
pub struct RawGmmParams<T> {
    pub mu: Vec<[T; 2]>,
    pub sigma: Vec<[T; 2]>,
    pub pi: Vec<T>,
}

/// Partials of a scalar with respect to the mixture parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParamGrad<T> {
    pub mu: Vec<[T; 2]>,
    pub sigma: Vec<[T; 2]>,
    pub pi: Vec<T>,
}

impl<T: Real> GmmParamGrad<T> {
    pub fn zeros(components: usize) -> Self {
        Self {
            mu: vec![[T::zero(); 2]; components],
            sigma: vec![[T::zero(); 2]; components],
            pi: vec![T::zero(); components],
        }
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for k in 0..self.pi.len() {
            for a in 0..2 {
                self.mu[k][a] += scale * other.mu[k][a];
                self.sigma[k][a] += scale * other.sigma[k][a];
            }
            self.pi[k] += scale * other.pi[k];
        }
    }

    pub fn is_zero(&self) -> bool {
        self.pi.iter().all(|v| v.is_zero())
            && self.mu.iter().flatten().all(|v| v.is_zero())
            && self.sigma.iter().flatten().all(|v| v.is_zero())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrad<T> {
    pub params: GmmParamGrad<T>,
    /// d(p)/d(offset), for diagnostics.
    pub d_offset: [T; 2],
}

/// One drawn offset together with its label value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySample<T> {
    pub offset: NormalizedOffset<T>,
    pub quality: T,
}

impl<T: Real> QualityGmm<T> {
    pub fn new(mu: Vec<[T; 2]>, sigma: Vec<[T; 2]>, pi: Vec<T>) -> Result<Self> {
        let g = Self { mu, sigma, pi };
        g.validate()?;
        Ok(g)
    }

    /// `components` identical centered bumps.
    pub fn centered(components: usize, sigma: T, pi: T) -> Result<Self> {
        Self::new(
            vec![[T::zero(); 2]; components],
            vec![[sigma; 2]; components],
            vec![pi; components],
        )
    }

    /// Fixed single centered Gaussian: `mu = 0`, `sigma = 1`, `pi = 1`.
    pub fn fixed_baseline() -> Self {
        Self::centered(1, T::one(), T::one()).expect("baseline parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 {
            return domain("mixture needs at least one component");
        }
        if self.mu.len() != k || self.sigma.len() != k {
            return Err(Error::Shape(format!(
                "mixture shapes disagree: mu {}, sigma {}, pi {}",
                self.mu.len(),
                self.sigma.len(),
                k
            )));
        }
        let floor = T::of(SIGMA_FLOOR);
        for c in 0..k {
            for a in 0..2 {
                let (m, s) = (self.mu[c][a], self.sigma[c][a]);
                if !m.is_finite() || m.abs() > T::one() {
                    return domain(format!("mu[{c}][{a}] = {m} outside [-1, 1]"));
                }
                if !s.is_finite() || s < floor {
                    return domain(format!("sigma[{c}][{a}] = {s} below floor {SIGMA_FLOOR}"));
                }
            }
            let p = self.pi[c];
            if !p.is_finite() || !(p > T::zero()) || p > T::one() {
                return domain(format!("pi[{c}] = {p} outside (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    fn axis_factor(&self, k: usize, a: usize, v: T) -> T {
        let z = (v - self.mu[k][a]) / self.sigma[k][a];
        (-T::of(0.5) * z * z).exp()
    }

    /// Unweighted bump `k` at `d`; equals 1 at `d = mu_k`.
    pub fn component_value(&self, k: usize, d: NormalizedOffset<T>) -> T {
        self.axis_factor(k, 0, d.dx) * self.axis_factor(k, 1, d.dy)
    }

    /// Raw quality surface `sum_k pi_k * component_value(k, d)`.
    pub fn density(&self, d: NormalizedOffset<T>) -> T {
        (0..self.components())
            .map(|k| self.pi[k] * self.component_value(k, d))
            .sum()
    }

    /// Label value in `[0, 1]`: the surface clamped at one.
    pub fn quality_target(&self, d: NormalizedOffset<T>) -> T {
        self.density(d).min(T::one())
    }

    pub fn density_grad(&self, d: NormalizedOffset<T>) -> DensityGrad<T> {
        let k_c = self.components();
        let mut params = GmmParamGrad::zeros(k_c);
        let mut d_offset = [T::zero(); 2];
        let pt = d.as_array();
        for k in 0..k_c {
            let phi = self.component_value(k, d);
            let wphi = self.pi[k] * phi;
            params.pi[k] = phi;
            for a in 0..2 {
                let s = self.sigma[k][a];
                let diff = pt[a] - self.mu[k][a];
                // d phi / d mu = phi * diff / s^2, d phi / d sigma = phi * diff^2 / s^3
                params.mu[k][a] = wphi * diff / (s * s);
                params.sigma[k][a] = wphi * diff * diff / (s * s * s);
                d_offset[a] -= wphi * diff / (s * s);
            }
        }
        DensityGrad { params, d_offset }
    }

    /// Draws `count` offsets from the mixture truncated to `(-1, 1)^2`.
    ///
    /// A component is chosen with probability `pi_k / sum(pi)`, then each
    /// axis is drawn from its 1-D Gaussian by rejection; after
    /// `MAX_REJECTIONS` misses the last draw is clamped into
    /// `[-1 + 1e-6, 1 - 1e-6]`.
    pub fn sample_offsets<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<QualitySample<T>>> {
        if count == 0 {
            return domain("sample count must be at least 1");
        }
        self.validate()?;
        let weights: Vec<f64> = self.pi.iter().map(|p| p.to_f64_lossy()).collect();
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u = rng.random::<f64>() * total;
            let mut k = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    k = i;
                    break;
                }
                u -= w;
            }
            let dx = self.truncated_axis(k, 0, rng);
            let dy = self.truncated_axis(k, 1, rng);
            let offset = NormalizedOffset::new(dx, dy);
            out.push(QualitySample { offset, quality: self.quality_target(offset) });
        }
        Ok(out)
    }

    /// Same as [`QualityGmm::sample_offsets`] with a fresh ChaCha8 stream.
    pub fn sample_offsets_seeded(&self, count: usize, seed: u64) -> Result<Vec<QualitySample<T>>> {
        self.sample_offsets(count, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn truncated_axis<R: Rng + ?Sized>(&self, k: usize, a: usize, rng: &mut R) -> T {
        let mu = self.mu[k][a].to_f64_lossy();
        let sigma = self.sigma[k][a].to_f64_lossy();
        let mut last = mu;
        for _ in 0..MAX_REJECTIONS {
            let z: f64 = rng.sample(StandardNormal);
            last = mu + sigma * z;
            let v = T::of(last);
            if v.abs() < T::one() {
                return v;
            }
        }
        let lim = 1.0 - CLAMP_EPS;
        T::of(last.clamp(-lim, lim))
    }
}
