//! A two-level dense detector small enough for hand-written gradients.
//!
//! Each level has its own trunk: the image is mean-pooled to half the
//! level's stride, then two stride-2 3x3 convolutions with ReLU produce the
//! level feature. A 3x3 head on the feature emits class logits, four
//! log-distances and one IoU logit per cell.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::{avg_pool, relu_backward, relu_in_place, Conv3x3};
use super::scene::{IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::PyramidSpec;
use crate::gridops::FeatureGrid;
use crate::losses::{LevelPredictionGrads, LevelPredictions};
use crate::params::{NamedTensor, ParamSet};
use crate::Real;

pub const TRUNK_CHANNELS: usize = 32;
pub const LEVEL_NAMES: [&str; 2] = ["P3", "P4"];
pub const LEVEL_STRIDES: [u32; 2] = [8, 16];

/// Head bias on class logits: a 1% foreground prior.
const CLS_PRIOR_BIAS: f64 = -4.59512;
const HEAD_STD: f64 = 0.01;

pub fn toy_pyramid() -> PyramidSpec {
    PyramidSpec::from_pairs(LEVEL_NAMES.iter().copied().zip(LEVEL_STRIDES)).expect("static pyramid is valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelBranch<T> {
    pub name: String,
    /// Input mean-pooling factor.
    pub pool: usize,
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
    pub head: Conv3x3<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDetector<T> {
    pub num_classes: usize,
    pub levels: Vec<LevelBranch<T>>,
}

pub fn head_channels(num_classes: usize) -> usize {
    num_classes + 5
}

impl<T: Real> ToyDetector<T> {
    pub fn zeros(num_classes: usize) -> Self {
        let levels = LEVEL_NAMES
            .iter()
            .zip(LEVEL_STRIDES)
            .map(|(name, stride)| LevelBranch {
                name: name.to_string(),
                pool: stride as usize / 4,
                conv1: Conv3x3::zeros(1, TRUNK_CHANNELS, 2),
                conv2: Conv3x3::zeros(TRUNK_CHANNELS, TRUNK_CHANNELS, 2),
                head: Conv3x3::zeros(TRUNK_CHANNELS, head_channels(num_classes), 1),
            })
            .collect();
        Self { num_classes, levels }
    }

    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Self::zeros(NUM_CLASSES);
        for lvl in &mut d.levels {
            lvl.conv1 = Conv3x3::he(1, TRUNK_CHANNELS, 2, &mut rng);
            lvl.conv2 = Conv3x3::he(TRUNK_CHANNELS, TRUNK_CHANNELS, 2, &mut rng);
            lvl.head = Conv3x3::normal(TRUNK_CHANNELS, head_channels(d.num_classes), 1, HEAD_STD, &mut rng);
            for b in &mut lvl.head.bias[..d.num_classes] {
                *b = T::of(CLS_PRIOR_BIAS);
            }
        }
        d
    }

    pub fn pyramid(&self) -> PyramidSpec {
        toy_pyramid()
    }
}

impl<T: Real> ParamSet<T> for ToyDetector<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        for lvl in &self.levels {
            for (part, c) in [("conv1", &lvl.conv1), ("conv2", &lvl.conv2), ("head", &lvl.head)] {
                out.push(NamedTensor {
                    name: format!("det.{}.{part}.weight", lvl.name),
                    shape: vec![c.out_channels, c.in_channels, 3, 3],
                    data: &c.weight,
                });
                out.push(NamedTensor { name: format!("det.{}.{part}.bias", lvl.name), shape: vec![c.out_channels], data: &c.bias });
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for lvl in &mut self.levels {
            for c in [&mut lvl.conv1, &mut lvl.conv2, &mut lvl.head] {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
        }
        out
    }
}

/// Intermediate activations of one level, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LevelTrace<T> {
    pub input: Vec<T>,
    pub input_size: usize,
    pub a1: Vec<T>,
    pub a1_size: usize,
    /// Level feature, `TRUNK_CHANNELS x s x s`.
    pub feature: FeatureGrid<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub predictions: Vec<LevelPredictions<T>>,
    pub traces: Vec<LevelTrace<T>>,
}

/// Runs the detector on a `IMAGE_SIZE x IMAGE_SIZE` single-channel image.
pub fn forward<T: Real>(det: &ToyDetector<T>, image: &[T]) -> Result<ForwardOutput<T>> {
    if image.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::Shape(format!("image has {} pixels, expected {}", image.len(), IMAGE_SIZE * IMAGE_SIZE)));
    }
    let pyramid = det.pyramid();
    let nc = det.num_classes;
    let mut predictions = Vec::with_capacity(det.levels.len());
    let mut traces = Vec::with_capacity(det.levels.len());
    for (l, lvl) in det.levels.iter().enumerate() {
        let stride = pyramid.stride::<T>(l);
        let n0 = IMAGE_SIZE / lvl.pool;
        let input = avg_pool(image, 1, IMAGE_SIZE, IMAGE_SIZE, lvl.pool);
        let mut a1 = lvl.conv1.forward(&input, n0, n0);
        relu_in_place(&mut a1);
        let n1 = lvl.conv1.output_size(n0, n0).0;
        let mut a2 = lvl.conv2.forward(&a1, n1, n1);
        relu_in_place(&mut a2);
        let n2 = lvl.conv2.output_size(n1, n1).0;
        let out = lvl.head.forward(&a2, n2, n2);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("level {} produced non-finite predictions", lvl.name)));
        }
        let cells = n2 * n2;
        predictions.push(LevelPredictions {
            cls: FeatureGrid::new(nc, n2, n2, stride, out[..nc * cells].to_vec())?,
            reg: FeatureGrid::new(4, n2, n2, stride, out[nc * cells..(nc + 4) * cells].to_vec())?,
            aux: FeatureGrid::new(1, n2, n2, stride, out[(nc + 4) * cells..].to_vec())?,
        });
        traces.push(LevelTrace {
            input,
            input_size: n0,
            a1,
            a1_size: n1,
            feature: FeatureGrid::new(TRUNK_CHANNELS, n2, n2, stride, a2)?,
        });
    }
    Ok(ForwardOutput { predictions, traces })
}

/// Accumulates parameter gradients given gradients on the prediction maps.
pub fn backward<T: Real>(
    det: &ToyDetector<T>,
    traces: &[LevelTrace<T>],
    pred_grads: &[LevelPredictionGrads<T>],
    grad: &mut ToyDetector<T>,
) -> Result<()> {
    if traces.len() != det.levels.len() || pred_grads.len() != det.levels.len() {
        return Err(Error::Shape("level count mismatch in detector backward".into()));
    }
    for (l, lvl) in det.levels.iter().enumerate() {
        let tr = &traces[l];
        let g = &pred_grads[l];
        let dy: Vec<T> = g.cls.iter().chain(&g.reg).chain(&g.aux).copied().collect();
        let n2 = tr.feature.height();
        let mut da2 = vec![T::zero(); tr.feature.data().len()];
        let gl = &mut grad.levels[l];
        lvl.head.backward(tr.feature.data(), n2, n2, &dy, &mut gl.head, Some(&mut da2));
        relu_backward(tr.feature.data(), &mut da2);
        let mut da1 = vec![T::zero(); tr.a1.len()];
        lvl.conv2.backward(&tr.a1, tr.a1_size, tr.a1_size, &da2, &mut gl.conv2, Some(&mut da1));
        relu_backward(&tr.a1, &mut da1);
        lvl.conv1.backward(&tr.input, tr.input_size, tr.input_size, &da1, &mut gl.conv1, None);
    }
    Ok(())
}
