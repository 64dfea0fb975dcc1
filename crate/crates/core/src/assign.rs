//! Quality-distribution sampling and soft label assignment.
//!
//! For every instance and pyramid level a fixed number of offsets is drawn
//! from that level's quality mixture and mapped into the ground-truth box.
//! The best `top_k` draws across all levels (by quality value) become the
//! instance's positives; their quality is the classification target.
//! Grid cells whose centers lie outside every box are negatives.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{decode_box, denormalize_offset, iou, normalize_offset, regression_target, BBox, Ltrb, NormalizedOffset, Point, PyramidSpec};
use crate::gridops::{stencil_at, GridShape, InterpStencil};
use crate::qdist::QualityGmm;
use crate::Real;

/// Resample count per level and the number of positives kept per instance.
pub const DEFAULT_RESAMPLE: usize = 12;

/// Floor on predicted distances (stride units) before decoding boxes.
pub const DISTANCE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance<T> {
    pub bbox: BBox<T>,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub draws_per_level: usize,
    pub top_k: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { draws_per_level: DEFAULT_RESAMPLE, top_k: DEFAULT_RESAMPLE }
    }
}

/// One resampled floating-point location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate<T> {
    pub instance: usize,
    pub level: usize,
    pub draw: usize,
    pub point: Point<T>,
    pub offset: NormalizedOffset<T>,
    pub quality: T,
    pub stencil: InterpStencil<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet<T> {
    pub samples: Vec<Candidate<T>>,
}

impl<T> SampleSet<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftTarget<T> {
    pub cls: T,
    pub reg: Ltrb<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive<T> {
    pub sample: Candidate<T>,
    pub class: usize,
    pub target: SoftTarget<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult<T> {
    pub positives: Vec<Positive<T>>,
    /// Per level, `H x W` row-major; `true` marks a negative cell.
    pub negatives: Vec<Vec<bool>>,
    /// `gmms[instance][level]`.
    pub gmms: Vec<Vec<QualityGmm<T>>>,
}

/// Nudges a point that rounding pushed onto the box edge back inside.
fn pull_inside<T: Real>(p: Point<T>, gt: &BBox<T>) -> Point<T> {
    let fix = |v: T, lo: T, hi: T| {
        let margin = ((hi - lo) * T::of(1e-6)).max(T::epsilon() * T::of(4.0) * lo.abs().max(hi.abs()).max(T::one()));
        if v <= lo {
            lo + margin
        } else if v >= hi {
            hi - margin
        } else {
            v
        }
    };
    Point::new(fix(p.x, gt.x1, gt.x2), fix(p.y, gt.y1, gt.y2))
}

fn check_levels<T>(gmms: &[QualityGmm<T>], pyramid: &PyramidSpec, shapes: &[GridShape<T>]) -> Result<()> {
    if gmms.len() != pyramid.len() || shapes.len() != pyramid.len() {
        return Err(Error::Shape(format!(
            "{} levels in the pyramid but {} mixtures and {} grids",
            pyramid.len(),
            gmms.len(),
            shapes.len()
        )));
    }
    Ok(())
}

/// Draws `draws_per_level` candidates on every level for one instance.
///
/// Boxes smaller than a cell are fine: the locations are continuous.
pub fn build_candidates<T: Real, R: Rng + ?Sized>(
    instance: usize,
    gt: &BBox<T>,
    gmms: &[QualityGmm<T>],
    pyramid: &PyramidSpec,
    shapes: &[GridShape<T>],
    draws_per_level: usize,
    rng: &mut R,
) -> Result<SampleSet<T>> {
    gt.validate()?;
    check_levels(gmms, pyramid, shapes)?;
    let mut samples = Vec::with_capacity(draws_per_level * pyramid.len());
    for (level, (gmm, shape)) in gmms.iter().zip(shapes).enumerate() {
        for (draw, s) in gmm.sample_offsets(draws_per_level, rng)?.into_iter().enumerate() {
            let point = pull_inside(denormalize_offset(s.offset, gt), gt);
            let stencil = stencil_at(shape, shape.clamp(point))?;
            samples.push(Candidate { instance, level, draw, point, offset: s.offset, quality: s.quality, stencil });
        }
    }
    Ok(SampleSet { samples })
}

/// Keeps the `k` highest-quality candidates; ties go to the lower
/// `(level, draw)`.
pub fn select_topk<T: Real>(candidates: &SampleSet<T>, k: usize) -> Result<SampleSet<T>> {
    if k == 0 {
        return domain("top-k must be at least 1");
    }
    let mut order: Vec<&Candidate<T>> = candidates.samples.iter().collect();
    order.sort_by(|a, b| {
        b.quality
            .partial_cmp(&a.quality)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.level.cmp(&b.level))
            .then(a.draw.cmp(&b.draw))
    });
    Ok(SampleSet { samples: order.into_iter().take(k).copied().collect() })
}

/// Classification and regression targets for selected samples.
pub fn soft_targets<T: Real>(selected: &SampleSet<T>, gt: &BBox<T>, pyramid: &PyramidSpec) -> Result<Vec<SoftTarget<T>>> {
    if selected.is_empty() {
        return domain("no samples selected");
    }
    selected
        .samples
        .iter()
        .map(|s| {
            Ok(SoftTarget {
                cls: s.quality,
                reg: regression_target(s.point, gt, pyramid.stride(s.level))?,
            })
        })
        .collect()
}

/// `true` for cells whose centers lie outside every box.
pub fn negative_mask<T: Real>(gts: &[BBox<T>], shape: &GridShape<T>) -> Vec<bool> {
    let mut mask = Vec::with_capacity(shape.cells());
    for i in 0..shape.height {
        for j in 0..shape.width {
            let c = shape.cell_center(i, j);
            mask.push(!gts.iter().any(|g| g.contains(c)));
        }
    }
    mask
}

/// One `(quality, IoU)` supervision pair for the encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IqPair<T> {
    pub cell: usize,
    pub offset: NormalizedOffset<T>,
    /// Clamped quality value at the cell center.
    pub p_qua: T,
    /// IoU of the cell's predicted box with the ground truth.
    pub p_iou: T,
}

/// Pairs for every cell center inside `gt`. `pred` holds the predicted
/// stride-unit distances of every cell, row-major.
pub fn iq_supervision_pairs<T: Real>(
    gt: &BBox<T>,
    gmm: &QualityGmm<T>,
    shape: &GridShape<T>,
    pred: &[Ltrb<T>],
) -> Result<Vec<IqPair<T>>> {
    gt.validate()?;
    if pred.len() != shape.cells() {
        return Err(Error::Shape(format!("{} predictions for {} cells", pred.len(), shape.cells())));
    }
    let floor = T::of(DISTANCE_FLOOR);
    let mut pairs = Vec::new();
    for i in 0..shape.height {
        for j in 0..shape.width {
            let center = shape.cell_center(i, j);
            if !gt.contains(center) {
                continue;
            }
            let cell = i * shape.width + j;
            let offset = normalize_offset(center, gt)?;
            let dist = pred[cell].map(|d| d.max(floor));
            let boxed = decode_box(center, dist, shape.stride)?;
            pairs.push(IqPair { cell, offset, p_qua: gmm.quality_target(offset), p_iou: iou(&boxed, gt)? });
        }
    }
    Ok(pairs)
}

/// Full assignment for one image. Each instance draws from its own
/// ChaCha8 stream (`seed`, stream = instance index), so the result does not
/// depend on processing order.
pub fn assign_image<T: Real>(
    instances: &[Instance<T>],
    gmms: Vec<Vec<QualityGmm<T>>>,
    pyramid: &PyramidSpec,
    shapes: &[GridShape<T>],
    config: &AssignConfig,
    seed: u64,
) -> Result<AssignmentResult<T>> {
    if gmms.len() != instances.len() {
        return Err(Error::Shape(format!("{} instances but {} mixture sets", instances.len(), gmms.len())));
    }
    if config.draws_per_level == 0 || config.top_k == 0 {
        return domain("draws per level and top-k must be at least 1");
    }
    let mut positives = Vec::new();
    for (idx, (inst, level_gmms)) in instances.iter().zip(&gmms).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let bag = build_candidates(idx, &inst.bbox, level_gmms, pyramid, shapes, config.draws_per_level, &mut rng)?;
        let selected = select_topk(&bag, config.top_k)?;
        let targets = soft_targets(&selected, &inst.bbox, pyramid)?;
        positives.extend(
            selected
                .samples
                .into_iter()
                .zip(targets)
                .map(|(sample, target)| Positive { sample, class: inst.class, target }),
        );
    }
    let boxes: Vec<BBox<T>> = instances.iter().map(|i| i.bbox).collect();
    let negatives = shapes.iter().map(|s| negative_mask(&boxes, s)).collect();
    Ok(AssignmentResult { positives, negatives, gmms })
}
