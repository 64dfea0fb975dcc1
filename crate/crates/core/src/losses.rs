//! Training losses with hand-written gradients.
//!
//! `total = l_cls + l_reg + l_aux + lambda_iq * l_iq`, where
//! - `l_cls` is a soft-target focal loss on interpolated class logits at the
//!   positives plus every grid cell,
//! - `l_reg` is the IoU loss on interpolated distances at the positives,
//! - `l_aux` is BCE between the interpolated IoU logit and the positive's
//!   predicted-box IoU,
//! - `l_iq` is BCE between the quality surface and predicted-box IoUs at
//!   in-box grid cells; it is the only term with a gradient on the mixture.

use serde::{Deserialize, Serialize};

use crate::assign::{iq_supervision_pairs, AssignmentResult, Instance, DISTANCE_FLOOR};
use crate::error::{domain, Error, Result};
use crate::geometry::Ltrb;
use crate::gridops::FeatureGrid;
use crate::qdist::GmmParamGrad;
use crate::Real;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Probability clamp for BCE on probabilities.
pub const PROB_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: T,
}

fn check_unit<T: Real>(v: T, what: &str) -> Result<()> {
    if !(v >= T::zero() && v <= T::one()) {
        return domain(format!("{what} {v} outside [0, 1]"));
    }
    Ok(())
}

/// `softplus(x) - t x`, the logit-space form of `BCE(sigmoid(x), t)`.
fn bce_from_logit<T: Real>(x: T, t: T) -> T {
    x.softplus() - t * x
}

/// Focal loss for a soft target `q`:
/// `w(q) * |q - p|^gamma * BCE(p, q)` with `p = sigmoid(logit)` and
/// `w(q) = alpha q + (1 - alpha)(1 - q)`.
pub fn focal_soft<T: Real>(logit: T, q: T, alpha: T, gamma: T) -> Result<LossGrad<T>> {
    check_unit(q, "focal target")?;
    let p = logit.sigmoid();
    let w = alpha * q + (T::one() - alpha) * (T::one() - q);
    let bce = bce_from_logit(logit, q);
    let diff = p - q;
    let m = diff.abs().powf(gamma);
    let dm = if diff.is_zero() {
        T::zero()
    } else {
        gamma * diff.abs().powf(gamma - T::one()) * diff.signum() * p * (T::one() - p)
    };
    Ok(LossGrad { loss: w * m * bce, grad: w * (dm * bce + m * diff) })
}

/// Binary cross-entropy against a logit, stable for large `|logit|`.
pub fn bce<T: Real>(logit: T, target: T) -> Result<LossGrad<T>> {
    check_unit(target, "bce target")?;
    Ok(LossGrad { loss: bce_from_logit(logit, target), grad: logit.sigmoid() - target })
}

/// Binary cross-entropy of a probability `p` against `target`.
///
/// `p` is clamped into `[PROB_EPS, 1 - PROB_EPS]`; the returned gradient is
/// the derivative at the clamped point, passed straight through the clamp.
pub fn bce_prob<T: Real>(p: T, target: T) -> Result<LossGrad<T>> {
    check_unit(target, "bce target")?;
    if !p.is_finite() {
        return Err(Error::Numerical(format!("bce probability {p} is not finite")));
    }
    if p < T::zero() {
        return domain(format!("bce probability {p} must be non-negative"));
    }
    let eps = T::of(PROB_EPS);
    let pc = p.max(eps).min(T::one() - eps);
    let loss = -(target * pc.ln() + (T::one() - target) * (T::one() - pc).ln());
    let grad = (pc - target) / (pc * (T::one() - pc));
    Ok(LossGrad { loss, grad })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouLoss<T> {
    pub loss: T,
    pub iou: T,
    pub grad: [T; 4],
}

/// `-ln IoU` of the boxes decoded from two distance sets around a shared
/// point. Predictions are floored at `DISTANCE_FLOOR`; floored components
/// get zero gradient.
pub fn iou_loss<T: Real>(pred: Ltrb<T>, target: Ltrb<T>) -> Result<IouLoss<T>> {
    let floor = T::of(DISTANCE_FLOOR);
    if target.as_array().iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
        return domain(format!("regression target {target:?} must be positive"));
    }
    if pred.as_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite prediction {pred:?}")));
    }
    let raw = pred.as_array();
    let p = pred.map(|v| v.max(floor));
    let t = target;
    let area_p = (p.l + p.r) * (p.t + p.b);
    let area_t = (t.l + t.r) * (t.t + t.b);
    let wi = p.l.min(t.l) + p.r.min(t.r);
    let hi = p.t.min(t.t) + p.b.min(t.b);
    let inter = wi * hi;
    let union = area_p + area_t - inter;
    let iou = inter / union;
    // d(inter)/d(pred) per component: the min() picks the prediction on ties.
    let di = [
        if p.l <= t.l { hi } else { T::zero() },
        if p.t <= t.t { wi } else { T::zero() },
        if p.r <= t.r { hi } else { T::zero() },
        if p.b <= t.b { wi } else { T::zero() },
    ];
    let da = [p.t + p.b, p.l + p.r, p.t + p.b, p.l + p.r];
    let mut grad = [T::zero(); 4];
    for k in 0..4 {
        if raw[k] < floor {
            continue;
        }
        grad[k] = (da[k] - di[k]) / union - di[k] / inter;
    }
    Ok(IouLoss { loss: -iou.ln(), iou, grad })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub l_cls: T,
    pub l_reg: T,
    pub l_aux: T,
    pub l_iq: T,
    pub total: T,
    pub lambda_iq: T,
}

impl<T: Real> LossReport<T> {
    pub fn new(l_cls: T, l_reg: T, l_aux: T, l_iq: T, lambda_iq: T) -> Self {
        Self { l_cls, l_reg, l_aux, l_iq, total: l_cls + l_reg + l_aux + lambda_iq * l_iq, lambda_iq }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_reg, self.l_aux, self.l_iq, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_iq: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// When false, `l_iq` is reported as zero and no mixture gradient flows.
    pub quality_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_iq: 1.0, alpha: FOCAL_ALPHA, gamma: FOCAL_GAMMA, quality_supervision: true }
    }
}

/// Dense head outputs on one pyramid level.
///
/// `cls` holds one logit per class, `reg` four log-distances (stride units,
/// decoded with `exp`), `aux` one IoU logit. At floating-point locations the
/// logits are interpolated directly while distances are decoded per cell
/// and then interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPredictions<T> {
    pub cls: FeatureGrid<T>,
    pub reg: FeatureGrid<T>,
    pub aux: FeatureGrid<T>,
}

impl<T: Real> LevelPredictions<T> {
    /// Decoded distances of every cell, row-major.
    pub fn cell_distances(&self) -> Vec<Ltrb<T>> {
        let n = self.reg.shape().cells();
        (0..n)
            .map(|c| {
                Ltrb::new(
                    self.reg.channel(0)[c].exp(),
                    self.reg.channel(1)[c].exp(),
                    self.reg.channel(2)[c].exp(),
                    self.reg.channel(3)[c].exp(),
                )
            })
            .collect()
    }
}

/// Gradients with the same flat layouts as [`LevelPredictions`].
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPredictionGrads<T> {
    pub cls: Vec<T>,
    pub reg: Vec<T>,
    pub aux: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub report: LossReport<T>,
    pub pred_grads: Vec<LevelPredictionGrads<T>>,
    /// `d(total)/d(mixture)` per `[instance][level]`.
    pub gmm_grads: Vec<Vec<GmmParamGrad<T>>>,
    /// Predicted-box IoU of every positive, in assignment order.
    pub positive_ious: Vec<T>,
}

/// All four loss terms and their gradients for one image.
///
/// Soft targets and sample positions are constants here; the mixture only
/// receives gradient from `l_iq`, whose IoU targets are detached.
pub fn total_loss<T: Real>(
    assignment: &AssignmentResult<T>,
    predictions: &[LevelPredictions<T>],
    instances: &[Instance<T>],
    config: &LossConfig,
) -> Result<LossOutput<T>> {
    if predictions.len() != assignment.negatives.len() {
        return Err(Error::Shape(format!(
            "{} prediction levels for {} assignment levels",
            predictions.len(),
            assignment.negatives.len()
        )));
    }
    if assignment.gmms.len() != instances.len() {
        return Err(Error::Shape("mixtures and instances disagree".into()));
    }
    let alpha = T::of(config.alpha);
    let gamma = T::of(config.gamma);
    let lambda = T::of(config.lambda_iq);
    let floor = T::of(DISTANCE_FLOOR);
    let num_pos = assignment.positives.len();
    let norm = T::one() / T::of(num_pos.max(1) as f64);

    let mut grads: Vec<LevelPredictionGrads<T>> = predictions
        .iter()
        .map(|p| LevelPredictionGrads {
            cls: vec![T::zero(); p.cls.data().len()],
            reg: vec![T::zero(); p.reg.data().len()],
            aux: vec![T::zero(); p.aux.data().len()],
        })
        .collect();
    // Per-cell classification targets; positives raise their stencil cells.
    let mut cell_targets: Vec<Vec<T>> = predictions.iter().map(|p| vec![T::zero(); p.cls.data().len()]).collect();

    let (mut cls_sum, mut reg_sum, mut aux_sum) = (T::zero(), T::zero(), T::zero());
    let mut positive_ious = Vec::with_capacity(num_pos);
    for pos in &assignment.positives {
        let lvl = pos.sample.level;
        let pred = predictions.get(lvl).ok_or_else(|| Error::Shape(format!("positive on missing level {lvl}")))?;
        if pos.class >= pred.cls.channels() {
            return Err(Error::Shape(format!("class {} beyond {} logits", pos.class, pred.cls.channels())));
        }
        let st = &pos.sample.stencil;
        let cells = pred.cls.shape().cells();
        let g = &mut grads[lvl];

        let logit = st.apply(pred.cls.channel(pos.class));
        let f = focal_soft(logit, pos.target.cls, alpha, gamma)?;
        cls_sum += f.loss;
        st.scatter(&mut g.cls[pos.class * cells..(pos.class + 1) * cells], f.grad * norm);
        let mask = &assignment.negatives[lvl];
        for &(idx, w) in &st.cells {
            if w > T::zero() && !mask[idx] {
                let t = &mut cell_targets[lvl][pos.class * cells + idx];
                *t = t.max(pos.target.cls);
            }
        }

        // distances are decoded per cell, then interpolated
        let mut dist_arr = [T::zero(); 4];
        for (a, d) in dist_arr.iter_mut().enumerate() {
            let plane = pred.reg.channel(a);
            *d = st.cells.iter().map(|&(idx, w)| w * plane[idx].exp()).sum();
        }
        let il = iou_loss(Ltrb::from_array(dist_arr), pos.target.reg)?;
        reg_sum += il.loss;
        for a in 0..4 {
            if dist_arr[a] < floor {
                continue;
            }
            let plane = pred.reg.channel(a);
            let g_reg = &mut g.reg[a * cells..(a + 1) * cells];
            for &(idx, w) in &st.cells {
                g_reg[idx] += w * plane[idx].exp() * il.grad[a] * norm;
            }
        }

        let aux_logit = st.apply(pred.aux.channel(0));
        let b = bce(aux_logit, il.iou.min(T::one()).max(T::zero()))?;
        aux_sum += b.loss;
        st.scatter(&mut g.aux[..cells], b.grad * norm);
        positive_ious.push(il.iou);
    }

    for (lvl, pred) in predictions.iter().enumerate() {
        let logits = pred.cls.data();
        for (i, (&x, &t)) in logits.iter().zip(&cell_targets[lvl]).enumerate() {
            let f = focal_soft(x, t, alpha, gamma)?;
            cls_sum += f.loss;
            grads[lvl].cls[i] += f.grad * norm;
        }
    }

    let k_of = |inst: usize| assignment.gmms[inst].first().map(|g| g.components()).unwrap_or(0);
    let mut gmm_grads: Vec<Vec<GmmParamGrad<T>>> = (0..instances.len())
        .map(|i| vec![GmmParamGrad::zeros(k_of(i)); predictions.len()])
        .collect();
    let mut iq_sum = T::zero();
    if config.quality_supervision {
        let mut pair_count = 0usize;
        let distances: Vec<Vec<Ltrb<T>>> = predictions.iter().map(|p| p.cell_distances()).collect();
        for (i, inst) in instances.iter().enumerate() {
            for (lvl, pred) in predictions.iter().enumerate() {
                let gmm = &assignment.gmms[i][lvl];
                let pairs = iq_supervision_pairs(&inst.bbox, gmm, &pred.reg.shape(), &distances[lvl])?;
                for pair in pairs {
                    let l = bce_prob(gmm.density(pair.offset), pair.p_iou)?;
                    iq_sum += l.loss;
                    pair_count += 1;
                    gmm_grads[i][lvl].add_scaled(&gmm.density_grad(pair.offset).params, l.grad);
                }
            }
        }
        if pair_count > 0 {
            let scale = T::one() / T::of(pair_count as f64);
            iq_sum *= scale;
            for g in gmm_grads.iter_mut().flatten() {
                let z = g.clone();
                *g = GmmParamGrad::zeros(z.components());
                g.add_scaled(&z, scale * lambda);
            }
        }
    }

    let report = LossReport::new(cls_sum * norm, reg_sum * norm, aux_sum * norm, iq_sum, lambda);
    if !report.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {report:?}")));
    }
    Ok(LossOutput { report, pred_grads: grads, gmm_grads, positive_ious })
}
