//! Inference decoding, non-maximum suppression and 11-point AP.

use crate::assign::Instance;
use crate::error::Result;
use crate::geometry::{decode_box, iou, BBox, Ltrb};
use crate::losses::LevelPredictions;
use crate::Real;

pub const NMS_IOU: f64 = 0.6;
pub const MAX_DETECTIONS: usize = 100;
/// Scores below this are dropped before NMS.
pub const SCORE_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub class: usize,
    pub score: T,
}

/// Greedy suppression in descending score order; equal scores keep the
/// lower index first. Returns at most `topk` indices in keep order.
pub fn nms<T: Real>(boxes: &[BBox<T>], scores: &[T], iou_thresh: T, topk: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must pair up");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (n, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() == topk {
            break;
        }
        for &j in &order[n + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]).map_or(false, |v| v > iou_thresh) {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Every cell of every level becomes one candidate per class with score
/// `sigmoid(cls) * sigmoid(aux)`; per-class NMS, then the global top
/// `MAX_DETECTIONS` by score.
pub fn decode_detections<T: Real>(predictions: &[LevelPredictions<T>], num_classes: usize) -> Result<Vec<Detection<T>>> {
    let threshold = T::of(SCORE_THRESHOLD);
    let mut per_class: Vec<Vec<Detection<T>>> = vec![Vec::new(); num_classes];
    for p in predictions {
        let shape = p.cls.shape();
        let dist = p.cell_distances();
        let aux = p.aux.channel(0);
        for i in 0..shape.height {
            for j in 0..shape.width {
                let cell = i * shape.width + j;
                let center = shape.cell_center(i, j);
                let d: Ltrb<T> = dist[cell];
                if !d.as_array().iter().all(|v| v.is_finite() && *v > T::zero()) {
                    continue;
                }
                let bbox = decode_box(center, d, shape.stride)?;
                let quality = aux[cell].sigmoid();
                for (c, dets) in per_class.iter_mut().enumerate() {
                    let score = p.cls.channel(c)[cell].sigmoid() * quality;
                    if score >= threshold {
                        dets.push(Detection { bbox, class: c, score });
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for dets in per_class {
        let boxes: Vec<BBox<T>> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<T> = dets.iter().map(|d| d.score).collect();
        out.extend(nms(&boxes, &scores, T::of(NMS_IOU), MAX_DETECTIONS).into_iter().map(|k| dets[k]));
    }
    // stable sort keeps class order among equal scores
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    out.truncate(MAX_DETECTIONS);
    Ok(out)
}

/// 11-point interpolated AP averaged over classes that have ground truth.
///
/// Detections are matched greedily in descending score order to the
/// unmatched ground truth of the same class with the highest IoU at or
/// above `iou_thresh`. Classes without ground truth are skipped; with no
/// ground truth at all the result is 0.
pub fn average_precision<T: Real>(
    detections: &[Vec<Detection<T>>],
    ground_truth: &[Vec<Instance<T>>],
    num_classes: usize,
    iou_thresh: f64,
) -> f64 {
    assert_eq!(detections.len(), ground_truth.len(), "one detection list per scene");
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let total_gt: usize = ground_truth.iter().map(|g| g.iter().filter(|i| i.class == c).count()).sum();
        if total_gt == 0 {
            continue;
        }
        // (score, scene, index) sorted by score, ties by scene then index
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (s, ds) in detections.iter().enumerate() {
            for (k, d) in ds.iter().enumerate() {
                if d.class == c {
                    dets.push((d.score.to_f64_lossy(), s, k));
                }
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(dets.len());
        for (n, &(_, s, k)) in dets.iter().enumerate() {
            let d = &detections[s][k];
            let mut best: Option<(usize, f64)> = None;
            for (g, inst) in ground_truth[s].iter().enumerate() {
                if inst.class != c || matched[s][g] {
                    continue;
                }
                let v = iou(&d.bbox, &inst.bbox).map_or(0.0, |v| v.to_f64_lossy());
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                matched[s][g] = true;
                tp += 1;
            }
            curve.push((tp as f64 / total_gt as f64, tp as f64 / (n + 1) as f64));
        }
        let ap = (0..=10)
            .map(|r| {
                let r = r as f64 / 10.0;
                curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 11.0;
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}
