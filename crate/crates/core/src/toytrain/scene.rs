//! Synthetic 64x64 detection scenes.
//!
//! Class 0 is a filled rectangle shaded left to right, class 1 an elliptical
//! ring inscribed in its box. Box corners sit on pixel boundaries, so the
//! annotation is exactly the bounding box of the rendered shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::Instance;
use crate::geometry::BBox;
use crate::Real;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 2;
pub const MIN_SIDE: u32 = 12;
pub const MAX_SIDE: u32 = 40;
pub const MAX_OBJECTS: usize = 4;

const SUPERSAMPLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 30;
const BACKGROUND_NOISE: f64 = 0.08;
/// Inner ellipse of a ring, as a fraction of the outer semi-axes.
const RING_INNER: f64 = 0.55;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene<T> {
    /// `IMAGE_SIZE x IMAGE_SIZE`, row-major, values in `[0, 1]`.
    pub image: Vec<T>,
    pub instances: Vec<Instance<T>>,
    pub seed: u64,
}

fn overlaps(a: &[u32; 4], b: &[u32; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Fraction of the pixel's sub-samples covered by the shape, and the shape's
/// intensity at the pixel center.
fn coverage(class: usize, b: &[u32; 4], px: usize, py: usize) -> (f64, f64) {
    let [x1, y1, x2, y2] = b.map(|v| v as f64);
    let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
    let (ax, ay) = ((x2 - x1) / 2.0, (y2 - y1) / 2.0);
    let mut hit = 0usize;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            let inside = if class == 0 {
                x >= x1 && x < x2 && y >= y1 && y < y2
            } else {
                let r = ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2);
                r <= 1.0 && r >= RING_INNER * RING_INNER
            };
            hit += inside as usize;
        }
    }
    let cov = hit as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let shade = if class == 0 { 0.45 + 0.5 * ((px as f64 + 0.5 - x1) / (x2 - x1)).clamp(0.0, 1.0) } else { 0.9 };
    (cov, shade)
}

/// Deterministic in `seed`. Boxes never overlap; a box that cannot be
/// placed after a bounded number of attempts is dropped, and the first
/// always fits.
pub fn generate_scene<T: Real>(seed: u64) -> SyntheticScene<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.random_range(1..=MAX_OBJECTS);
    let mut boxes: Vec<([u32; 4], usize)> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
            let x = rng.random_range(0..=IMAGE_SIZE as u32 - w);
            let y = rng.random_range(0..=IMAGE_SIZE as u32 - h);
            let class = rng.random_range(0..NUM_CLASSES);
            let b = [x, y, x + w, y + h];
            if boxes.iter().all(|(o, _)| !overlaps(o, &b)) {
                boxes.push((b, class));
                break;
            }
        }
    }
    let mut image = vec![0.0f64; IMAGE_SIZE * IMAGE_SIZE];
    for v in image.iter_mut() {
        *v = rng.random_range(0.0..BACKGROUND_NOISE);
    }
    for (b, class) in &boxes {
        for py in b[1] as usize..b[3] as usize {
            for px in b[0] as usize..b[2] as usize {
                let (cov, shade) = coverage(*class, b, px, py);
                let v = &mut image[py * IMAGE_SIZE + px];
                *v = *v * (1.0 - cov) + shade * cov;
            }
        }
    }
    let instances = boxes
        .iter()
        .map(|(b, class)| {
            let [x1, y1, x2, y2] = b.map(|v| T::of(v as f64));
            Instance { bbox: BBox::from_corners_unchecked(x1, y1, x2, y2), class: *class }
        })
        .collect();
    SyntheticScene { image: image.into_iter().map(T::of).collect(), instances, seed }
}
