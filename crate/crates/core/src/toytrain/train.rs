//! SGD training of the toy detector and its quality encoder, plus held-out
//! evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::json;

use super::detector::{backward, forward, toy_pyramid, ToyDetector, TRUNK_CHANNELS};
use super::eval::{average_precision, decode_detections, Detection};
use super::scene::{generate_scene, SyntheticScene, NUM_CLASSES};
use crate::assign::{assign_image, AssignConfig, AssignmentResult, DEFAULT_RESAMPLE};
use crate::error::{Error, Result};
use crate::gridops::{GridShape, RoiAlignPlan};
use crate::io::{KvConfig, Tensor};
use crate::losses::{total_loss, LossConfig, LossReport, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::params::{NamedTensor, ParamSet};
use crate::qde::{encode_backward_params, encode_traced, init_weights, EncoderConfig, EncoderTrace, EncoderWeights};
use crate::qde::{DEFAULT_HIDDEN, DEFAULT_POOL, DEFAULT_SAMPLES_PER_BIN};
use crate::qdist::{QualityGmm, DEFAULT_COMPONENTS};
use crate::Real;

/// Held-out scene seeds have the top bit set; training seeds never do.
pub const HELDOUT_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignMode {
    /// Learned per-instance mixtures supervised by predicted IoU.
    Iqdet,
    /// Fixed centered mixture and no quality supervision.
    Center,
}

impl FromStr for AssignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iqdet" => Ok(Self::Iqdet),
            "center" => Ok(Self::Center),
            _ => Err(Error::Parse(format!("mode must be iqdet or center, got {s:?}"))),
        }
    }
}

impl fmt::Display for AssignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Iqdet => "iqdet",
            Self::Center => "center",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear learning-rate ramp from zero over this many steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub seed: u64,
    pub lambda_iq: f64,
    pub components: usize,
    pub draws_per_level: usize,
    pub top_k: usize,
    pub mode: AssignMode,
    pub learn_mu: bool,
    pub learn_sigma: bool,
    pub learn_pi: bool,
    pub hidden: usize,
    pub pool: usize,
    pub samples_per_bin: usize,
    /// Standard deviation of the fixed mixture in center mode.
    pub center_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 100,
            clip_norm: 10.0,
            seed: 0,
            lambda_iq: 1.0,
            components: DEFAULT_COMPONENTS,
            draws_per_level: DEFAULT_RESAMPLE,
            top_k: DEFAULT_RESAMPLE,
            mode: AssignMode::Iqdet,
            learn_mu: true,
            learn_sigma: true,
            learn_pi: true,
            hidden: DEFAULT_HIDDEN,
            pool: DEFAULT_POOL,
            samples_per_bin: DEFAULT_SAMPLES_PER_BIN,
            center_sigma: 0.5,
        }
    }
}

const CONFIG_KEYS: [&str; 20] = [
    "steps",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "warmup_steps",
    "clip_norm",
    "seed",
    "lambda_iq",
    "components",
    "draws_per_level",
    "top_k",
    "mode",
    "learn_mu",
    "learn_sigma",
    "learn_pi",
    "hidden",
    "pool",
    "samples_per_bin",
    "center_sigma",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("lambda_iq", self.lambda_iq),
            ("components", self.components as f64),
            ("draws_per_level", self.draws_per_level as f64),
            ("top_k", self.top_k as f64),
            ("hidden", self.hidden as f64),
            ("pool", self.pool as f64),
            ("samples_per_bin", self.samples_per_bin as f64),
            ("center_sigma", self.center_sigma),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("{k} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Domain("momentum must lie in [0, 1); weight decay and clip norm must be >= 0".into()));
        }
        self.encoder_config().validate()
    }

    /// Reads known keys over the defaults; unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.ensure_known(&CONFIG_KEYS)?;
        let d = Self::default();
        let c = Self {
            steps: kv.parsed_or("steps", d.steps)?,
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            lr: kv.parsed_or("lr", d.lr)?,
            momentum: kv.parsed_or("momentum", d.momentum)?,
            weight_decay: kv.parsed_or("weight_decay", d.weight_decay)?,
            warmup_steps: kv.parsed_or("warmup_steps", d.warmup_steps)?,
            clip_norm: kv.parsed_or("clip_norm", d.clip_norm)?,
            seed: kv.parsed_or("seed", d.seed)?,
            lambda_iq: kv.parsed_or("lambda_iq", d.lambda_iq)?,
            components: kv.parsed_or("components", d.components)?,
            draws_per_level: kv.parsed_or("draws_per_level", d.draws_per_level)?,
            top_k: kv.parsed_or("top_k", d.top_k)?,
            mode: kv.parsed_or("mode", d.mode)?,
            learn_mu: kv.parsed_or("learn_mu", d.learn_mu)?,
            learn_sigma: kv.parsed_or("learn_sigma", d.learn_sigma)?,
            learn_pi: kv.parsed_or("learn_pi", d.learn_pi)?,
            hidden: kv.parsed_or("hidden", d.hidden)?,
            pool: kv.parsed_or("pool", d.pool)?,
            samples_per_bin: kv.parsed_or("samples_per_bin", d.samples_per_bin)?,
            center_sigma: kv.parsed_or("center_sigma", d.center_sigma)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Every key, so a config can be rebuilt exactly from a checkpoint.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("clip_norm", self.clip_norm);
        kv.set("seed", self.seed);
        kv.set("lambda_iq", self.lambda_iq);
        kv.set("components", self.components);
        kv.set("draws_per_level", self.draws_per_level);
        kv.set("top_k", self.top_k);
        kv.set("mode", self.mode);
        kv.set("learn_mu", self.learn_mu);
        kv.set("learn_sigma", self.learn_sigma);
        kv.set("learn_pi", self.learn_pi);
        kv.set("hidden", self.hidden);
        kv.set("pool", self.pool);
        kv.set("samples_per_bin", self.samples_per_bin);
        kv.set("center_sigma", self.center_sigma);
        kv
    }

    /// In center mode every head is fixed to the centered mixture.
    pub fn encoder_config(&self) -> EncoderConfig {
        let base = EncoderConfig {
            hidden: self.hidden,
            pool: self.pool,
            samples_per_bin: self.samples_per_bin,
            components: self.components,
            learn_mu: self.learn_mu,
            learn_sigma: self.learn_sigma,
            learn_pi: self.learn_pi,
            ..EncoderConfig::default()
        };
        match self.mode {
            AssignMode::Iqdet => base,
            AssignMode::Center => EncoderConfig { fixed_mu: 0.0, fixed_sigma: self.center_sigma, fixed_pi: 1.0, ..base.all_fixed() },
        }
    }

    pub fn assign_config(&self) -> AssignConfig {
        AssignConfig { draws_per_level: self.draws_per_level, top_k: self.top_k }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_iq: self.lambda_iq,
            alpha: FOCAL_ALPHA,
            gamma: FOCAL_GAMMA,
            quality_supervision: self.mode == AssignMode::Iqdet,
        }
    }

    fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Detector and encoder, updated together.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub detector: ToyDetector<T>,
    pub encoder: EncoderWeights<T>,
}

impl<T: Real> ParamSet<T> for ToyModel<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut t = self.detector.tensors();
        t.extend(self.encoder.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t = self.detector.tensors_mut();
        t.extend(self.encoder.tensors_mut());
        t
    }
}

pub fn init_model<T: Real>(config: &TrainConfig) -> ToyModel<T> {
    ToyModel {
        detector: ToyDetector::init(config.seed),
        encoder: init_weights(splitmix(config.seed ^ 0x5eed_e4c0), TRUNK_CHANNELS, &config.encoder_config()),
    }
}

pub fn model_tensors<T: Real>(model: &ToyModel<T>) -> Result<Vec<Tensor>> {
    model.tensors().into_iter().map(|t| Tensor::from_real(t.name, t.shape, t.data)).collect()
}

pub fn model_from_tensors<T: Real>(config: &TrainConfig, tensors: &[Tensor]) -> Result<ToyModel<T>> {
    let mut model = ToyModel {
        detector: ToyDetector::zeros(NUM_CLASSES),
        encoder: EncoderWeights::zeros(TRUNK_CHANNELS, &config.encoder_config()),
    };
    let named: Vec<(String, Vec<T>)> = tensors.iter().map(|t| (t.name.clone(), t.to_real())).collect();
    model.load_named(&named)?;
    Ok(model)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene seed of batch element `b` at `step`; the top bit is always clear.
pub fn training_scene_seed(seed: u64, step: usize, b: usize) -> u64 {
    splitmix(splitmix(seed) ^ ((step as u64) << 16 | b as u64)) & !HELDOUT_BIT
}

pub fn heldout_scene_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| HELDOUT_BIT | i).collect()
}

fn assignment_seed(scene_seed: u64) -> u64 {
    splitmix(scene_seed ^ 0xa551_9e00)
}

/// Everything one image contributes to a step.
struct ImagePass<T> {
    detector_grad: Option<ToyDetector<T>>,
    encoder_grad: Option<EncoderWeights<T>>,
    report: LossReport<T>,
    positive_ious: Vec<T>,
    gmms: Vec<QualityGmm<T>>,
    detections: Vec<Detection<T>>,
}

/// Forward, assignment and loss on one scene; gradients only if asked.
fn image_pass<T: Real>(
    model: &ToyModel<T>,
    config: &TrainConfig,
    scene: &SyntheticScene<T>,
    with_grad: bool,
    with_detections: bool,
) -> Result<ImagePass<T>> {
    let pyramid = toy_pyramid();
    let enc_cfg = config.encoder_config();
    let out = forward(&model.detector, &scene.image)?;
    let shapes: Vec<GridShape<T>> = out.predictions.iter().map(|p| p.cls.shape()).collect();

    let mut traces: Vec<Vec<EncoderTrace<T>>> = Vec::new();
    let gmms: Vec<Vec<QualityGmm<T>>> = if config.mode == AssignMode::Center {
        let g = enc_cfg.fixed_gmm::<T>()?;
        vec![vec![g; pyramid.len()]; scene.instances.len()]
    } else {
        let mut all = Vec::with_capacity(scene.instances.len());
        for inst in &scene.instances {
            let mut per_level = Vec::with_capacity(pyramid.len());
            let mut tr = Vec::with_capacity(pyramid.len());
            for t in &out.traces {
                // the encoder reads the feature but does not train the trunk
                let plan = RoiAlignPlan::new(t.feature.shape(), &inst.bbox, enc_cfg.pool, enc_cfg.samples_per_bin)?;
                let pooled = plan.apply(&t.feature)?;
                let trace = encode_traced(&model.encoder, &pooled, &enc_cfg)?;
                per_level.push(trace.gmm.clone());
                tr.push(trace);
            }
            all.push(per_level);
            traces.push(tr);
        }
        all
    };
    let assignment: AssignmentResult<T> =
        assign_image(&scene.instances, gmms, &pyramid, &shapes, &config.assign_config(), assignment_seed(scene.seed))?;
    let loss = total_loss(&assignment, &out.predictions, &scene.instances, &config.loss_config())?;

    let (mut detector_grad, mut encoder_grad) = (None, None);
    if with_grad {
        let mut dg = model.detector.zeros_like();
        backward(&model.detector, &out.traces, &loss.pred_grads, &mut dg)?;
        detector_grad = Some(dg);
        if config.mode == AssignMode::Iqdet {
            let mut eg = model.encoder.zeros_like();
            for (i, tr) in traces.iter().enumerate() {
                for (l, trace) in tr.iter().enumerate() {
                    let up = &loss.gmm_grads[i][l];
                    if !up.is_zero() {
                        encode_backward_params(&model.encoder, trace, &enc_cfg, up, &mut eg);
                    }
                }
            }
            encoder_grad = Some(eg);
        }
    }
    let detections = if with_detections { decode_detections(&out.predictions, NUM_CLASSES)? } else { Vec::new() };
    Ok(ImagePass {
        detector_grad,
        encoder_grad,
        report: loss.report,
        positive_ious: loss.positive_ious,
        gmms: assignment.gmms.into_iter().flatten().collect(),
        detections,
    })
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Batch means of the per-image losses.
    pub report: LossReport<f64>,
    /// Mean IoU of the positives' predicted boxes over the batch.
    pub mean_positive_iou: f64,
    pub positives: usize,
    pub lr: f64,
    pub grad_norm: f64,
    /// Every `(instance, level)` mixture used in this step, image by image.
    pub gmms: Vec<QualityGmm<f64>>,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        let r = &self.report;
        json!({
            "step": self.step,
            "l_cls": r.l_cls,
            "l_reg": r.l_reg,
            "l_aux": r.l_aux,
            "l_iq": r.l_iq,
            "total": r.total,
            "mean_positive_iou": self.mean_positive_iou,
            "positives": self.positives,
            "lr": self.lr,
            "grad_norm": self.grad_norm,
        })
        .to_string()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ToyModel<T>,
    /// One JSON object per step.
    pub log: Vec<String>,
}

fn to_f64_gmm<T: Real>(g: &QualityGmm<T>) -> QualityGmm<f64> {
    QualityGmm {
        mu: g.mu.iter().map(|m| m.map(|v| v.to_f64_lossy())).collect(),
        sigma: g.sigma.iter().map(|s| s.map(|v| v.to_f64_lossy())).collect(),
        pi: g.pi.iter().map(|v| v.to_f64_lossy()).collect(),
    }
}

fn abort<T: Real>(step: usize, seeds: &[u64], reason: &str, report: Option<&LossReport<T>>) -> Error {
    let report = report.map(|r| {
        json!({
            "l_cls": r.l_cls.to_f64_lossy(),
            "l_reg": r.l_reg.to_f64_lossy(),
            "l_aux": r.l_aux.to_f64_lossy(),
            "l_iq": r.l_iq.to_f64_lossy(),
        })
    });
    Error::Numerical(json!({ "step": step, "scene_seeds": seeds, "reason": reason, "report": report }).to_string())
}

pub fn train<T: Real>(config: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(config, init_model(config), |_| {})
}

/// Trains from `model`, calling `observe` after every step.
///
/// Batch elements run in parallel; their gradients are summed in batch
/// order, so results do not depend on the thread count. A non-finite loss
/// or parameter aborts with [`Error::Numerical`] carrying a JSON dump of
/// the step.
pub fn train_with<T: Real>(
    config: &TrainConfig,
    mut model: ToyModel<T>,
    mut observe: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut velocity = model.zeros_like();
    let mut log = Vec::with_capacity(config.steps);
    let inv_batch = T::one() / T::of(config.batch_size as f64);
    for step in 0..config.steps {
        let seeds: Vec<u64> = (0..config.batch_size).map(|b| training_scene_seed(config.seed, step, b)).collect();
        let passes: Vec<Result<ImagePass<T>>> = seeds
            .par_iter()
            .map(|&s| image_pass(&model, config, &generate_scene(s), true, false))
            .collect();
        let mut grad = model.zeros_like();
        let (mut sums, mut ious, mut gmms) = ([T::zero(); 4], Vec::new(), Vec::new());
        for pass in passes {
            let pass = pass.map_err(|e| match e {
                Error::Numerical(msg) => abort::<T>(step, &seeds, &msg, None),
                other => other,
            })?;
            if let Some(g) = &pass.detector_grad {
                grad.detector.axpy(inv_batch, g);
            }
            if let Some(g) = &pass.encoder_grad {
                grad.encoder.axpy(inv_batch, g);
            }
            let r = &pass.report;
            for (s, v) in sums.iter_mut().zip([r.l_cls, r.l_reg, r.l_aux, r.l_iq]) {
                *s += v * inv_batch;
            }
            ious.extend(pass.positive_ious);
            gmms.extend(pass.gmms.iter().map(to_f64_gmm));
        }
        let report = LossReport::new(sums[0], sums[1], sums[2], sums[3], T::of(config.lambda_iq));
        if !report.is_finite() {
            return Err(abort(step, &seeds, "non-finite loss", Some(&report)));
        }
        let norm = grad
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| (*v * *v).to_f64_lossy())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(abort(step, &seeds, "non-finite gradient", Some(&report)));
        }
        let lr = config.learning_rate(step);
        let clip = if config.clip_norm > 0.0 && norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
        let (lr_t, clip_t, mom, wd) = (T::of(lr), T::of(clip), T::of(config.momentum), T::of(config.weight_decay));
        let grads: Vec<Vec<T>> = grad.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        // a center-mode encoder takes no part in the loss and is left as initialized
        let trained = match config.mode {
            AssignMode::Iqdet => grads.len(),
            AssignMode::Center => model.detector.tensors().len(),
        };
        for ((w, v), g) in model.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads).take(trained) {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mom * *v + g * clip_t + wd * *w;
                *w -= lr_t * *v;
            }
        }
        if !model.all_finite() {
            return Err(abort(step, &seeds, "non-finite parameters after update", Some(&report)));
        }
        let mean_iou = if ious.is_empty() {
            0.0
        } else {
            ious.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / ious.len() as f64
        };
        let record = StepRecord {
            step,
            report: LossReport::new(
                sums[0].to_f64_lossy(),
                sums[1].to_f64_lossy(),
                sums[2].to_f64_lossy(),
                sums[3].to_f64_lossy(),
                config.lambda_iq,
            ),
            mean_positive_iou: mean_iou,
            positives: ious.len(),
            lr,
            grad_norm: norm,
            gmms,
        };
        log.push(record.to_json_line());
        observe(&record);
    }
    Ok(TrainOutcome { model, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean predicted-box IoU of the positives the configured assignment
    /// picks on the evaluation scenes.
    pub mean_positive_iou: f64,
    pub scenes: usize,
    pub detections: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        json!({
            "ap50": self.ap50,
            "ap75": self.ap75,
            "mean_positive_iou": self.mean_positive_iou,
            "scenes": self.scenes,
            "detections": self.detections,
        })
        .to_string()
    }
}

pub fn evaluate<T: Real>(model: &ToyModel<T>, config: &TrainConfig, scene_seeds: &[u64]) -> Result<EvalReport> {
    let passes: Vec<Result<(ImagePass<T>, SyntheticScene<T>)>> = scene_seeds
        .par_iter()
        .map(|&s| {
            let scene = generate_scene(s);
            Ok((image_pass(model, config, &scene, false, true)?, scene))
        })
        .collect();
    let (mut dets, mut gts, mut ious) = (Vec::new(), Vec::new(), Vec::new());
    for p in passes {
        let (pass, scene) = p?;
        dets.push(pass.detections);
        gts.push(scene.instances);
        ious.extend(pass.positive_ious.iter().map(|v| v.to_f64_lossy()));
    }
    Ok(EvalReport {
        ap50: average_precision(&dets, &gts, NUM_CLASSES, 0.5),
        ap75: average_precision(&dets, &gts, NUM_CLASSES, 0.75),
        mean_positive_iou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        scenes: scene_seeds.len(),
        detections: dets.iter().map(Vec::len).sum(),
    })
}

/// Checkpoint metadata: the full config plus the number of steps run.
pub fn checkpoint_meta(config: &TrainConfig) -> BTreeMap<String, String> {
    config.to_kv().entries().clone()
}

pub fn config_from_meta(meta: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let mut kv = KvConfig::default();
    for (k, v) in meta {
        kv.set(k, v);
    }
    TrainConfig::from_kv(&kv)
}
