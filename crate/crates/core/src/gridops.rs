//! Feature grids, bilinear readout, RoIAlign and RoIPool.
//!
//! Cell `(i, j)` of a grid with stride `s` has its center at
//! `((j + 0.5) s, (i + 0.5) s)` in image pixels. Bilinear readout is defined
//! on the closed image extent `[0, W s] x [0, H s]`; inside the half-cell
//! border the nearest row/column of centers is replicated.

use crate::error::{domain, Error, Result};
use crate::geometry::{BBox, Point};
use crate::Real;

/// Spatial layout of a grid, without values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridShape<T> {
    pub height: usize,
    pub width: usize,
    pub stride: T,
}

impl<T: Real> GridShape<T> {
    pub fn new(height: usize, width: usize, stride: T) -> Result<Self> {
        if height == 0 || width == 0 {
            return domain("grid dimensions must be at least 1");
        }
        if !(stride > T::zero()) || !stride.is_finite() {
            return domain("grid stride must be positive and finite");
        }
        Ok(Self { height, width, stride })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point<T> {
        let half = T::of(0.5);
        Point::new(
            (T::of(j as f64) + half) * self.stride,
            (T::of(i as f64) + half) * self.stride,
        )
    }

    /// Image-space extent `(x_max, y_max)`; the minimum corner is the origin.
    pub fn extent(&self) -> (T, T) {
        (
            T::of(self.width as f64) * self.stride,
            T::of(self.height as f64) * self.stride,
        )
    }

    pub fn contains(&self, p: Point<T>) -> bool {
        let (xm, ym) = self.extent();
        p.x >= T::zero() && p.x <= xm && p.y >= T::zero() && p.y <= ym
    }

    pub fn clamp(&self, p: Point<T>) -> Point<T> {
        let (xm, ym) = self.extent();
        Point::new(p.x.max(T::zero()).min(xm), p.y.max(T::zero()).min(ym))
    }
}

/// `C x H x W` values with an image-space stride, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    channels: usize,
    shape: GridShape<T>,
    data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(channels: usize, height: usize, width: usize, stride: T, data: Vec<T>) -> Result<Self> {
        let shape = GridShape::new(height, width, stride)?;
        if channels == 0 {
            return domain("grid needs at least one channel");
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return domain("grid values must be finite");
        }
        Ok(Self { channels, shape, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: T) -> Result<Self> {
        Self::new(channels, height, width, stride, vec![T::zero(); channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        stride: T,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self::new(channels, height, width, stride, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn stride(&self) -> T {
        self.shape.stride
    }

    pub fn shape(&self) -> GridShape<T> {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw values. Callers keep them finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.shape.height + i) * self.shape.width + j]
    }
}

/// Four `(flat cell index, weight)` pairs of a bilinear readout. The flat
/// index is `i * W + j` within one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpStencil<T> {
    pub cells: [(usize, T); 4],
}

impl<T: Real> InterpStencil<T> {
    /// Interpolates one channel plane.
    pub fn apply(&self, plane: &[T]) -> T {
        self.cells.iter().map(|&(idx, w)| w * plane[idx]).sum()
    }

    /// Adds `upstream * weight` into each stencil cell of a gradient plane.
    pub fn scatter(&self, plane_grad: &mut [T], upstream: T) {
        for &(idx, w) in &self.cells {
            plane_grad[idx] += w * upstream;
        }
    }

    pub fn weight_sum(&self) -> T {
        self.cells.iter().map(|c| c.1).sum()
    }
}

/// Interpolation geometry at one point, shared by value and gradient code.
#[derive(Clone, Copy, Debug)]
struct Lerp<T> {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fx: T,
    fy: T,
    // d(continuous column)/dx; zero inside the replicated border.
    dudx: T,
    dvdy: T,
}

fn axis<T: Real>(coord: T, stride: T, n: usize) -> (usize, usize, T, T) {
    let u = coord / stride - T::of(0.5);
    let last = T::of((n - 1) as f64);
    let clamped = u < T::zero() || u > last;
    let u = u.max(T::zero()).min(last);
    if n == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    let mut k0 = u.floor().to_usize().unwrap_or(0);
    if k0 >= n - 1 {
        k0 = n - 2;
    }
    let f = u - T::of(k0 as f64);
    let d = if clamped { T::zero() } else { T::one() / stride };
    (k0, k0 + 1, f, d)
}

fn lerp_at<T: Real>(shape: &GridShape<T>, p: Point<T>) -> Result<Lerp<T>> {
    if !p.x.is_finite() || !p.y.is_finite() || !shape.contains(p) {
        return domain(format!("point {p:?} lies outside the grid extent {:?}", shape.extent()));
    }
    let (j0, j1, fx, dudx) = axis(p.x, shape.stride, shape.width);
    let (i0, i1, fy, dvdy) = axis(p.y, shape.stride, shape.height);
    Ok(Lerp { i0, i1, j0, j1, fx, fy, dudx, dvdy })
}

impl<T: Real> Lerp<T> {
    fn stencil(&self, width: usize) -> InterpStencil<T> {
        let one = T::one();
        InterpStencil {
            cells: [
                (self.i0 * width + self.j0, (one - self.fy) * (one - self.fx)),
                (self.i0 * width + self.j1, (one - self.fy) * self.fx),
                (self.i1 * width + self.j0, self.fy * (one - self.fx)),
                (self.i1 * width + self.j1, self.fy * self.fx),
            ],
        }
    }
}

/// Bilinear stencil at an image-space point.
pub fn stencil_at<T: Real>(shape: &GridShape<T>, p: Point<T>) -> Result<InterpStencil<T>> {
    Ok(lerp_at(shape, p)?.stencil(shape.width))
}

/// Bilinear readout of every channel at `p`, with the stencil used.
pub fn bilinear<T: Real>(grid: &FeatureGrid<T>, p: Point<T>) -> Result<(Vec<T>, InterpStencil<T>)> {
    let st = stencil_at(&grid.shape, p)?;
    let values = (0..grid.channels).map(|c| st.apply(grid.channel(c))).collect();
    Ok((values, st))
}

#[derive(Clone, Debug)]
pub struct BilinearGrad<T> {
    /// d(value)/d(cell) for every channel; identical across channels.
    pub stencil: InterpStencil<T>,
    /// d(value_c)/d(x, y) per channel.
    pub d_point: Vec<[T; 2]>,
}

/// Gradients of [`bilinear`] with respect to cell values and the point.
///
/// On a line through cell centers the interval starting at the lower cell
/// is used; in the replicated border the point gradient along that axis is
/// zero.
pub fn bilinear_grad<T: Real>(grid: &FeatureGrid<T>, p: Point<T>) -> Result<BilinearGrad<T>> {
    let lp = lerp_at(&grid.shape, p)?;
    let w = grid.shape.width;
    let one = T::one();
    let d_point = (0..grid.channels)
        .map(|c| {
            let plane = grid.channel(c);
            let v00 = plane[lp.i0 * w + lp.j0];
            let v01 = plane[lp.i0 * w + lp.j1];
            let v10 = plane[lp.i1 * w + lp.j0];
            let v11 = plane[lp.i1 * w + lp.j1];
            let dx = ((one - lp.fy) * (v01 - v00) + lp.fy * (v11 - v10)) * lp.dudx;
            let dy = ((one - lp.fx) * (v10 - v00) + lp.fx * (v11 - v01)) * lp.dvdy;
            [dx, dy]
        })
        .collect();
    Ok(BilinearGrad { stencil: lp.stencil(w), d_point })
}

/// `C x pool x pool` output of region pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature<T> {
    pub channels: usize,
    pub pool: usize,
    pub data: Vec<T>,
}

impl<T: Real> PooledFeature<T> {
    pub fn get(&self, c: usize, py: usize, px: usize) -> T {
        self.data[(c * self.pool + py) * self.pool + px]
    }

    /// Per-channel mean over the bins, as a `C x 1 x 1` block.
    pub fn spatial_mean(&self) -> PooledFeature<T> {
        let bins = self.pool * self.pool;
        let n = T::of(bins as f64);
        let data = self
            .data
            .chunks(bins)
            .map(|ch| ch.iter().copied().sum::<T>() / n)
            .collect();
        PooledFeature { channels: self.channels, pool: 1, data }
    }
}

fn check_roi<T: Real>(shape: &GridShape<T>, roi: &BBox<T>, pool: usize, samples: usize) -> Result<()> {
    roi.validate()?;
    if pool == 0 || samples == 0 {
        return domain("pool size and samples per bin must be at least 1");
    }
    let (xm, ym) = shape.extent();
    let iw = roi.x2.min(xm) - roi.x1.max(T::zero());
    let ih = roi.y2.min(ym) - roi.y1.max(T::zero());
    if !(iw > T::zero() && ih > T::zero()) {
        return domain(format!("roi {roi:?} does not intersect the grid extent"));
    }
    Ok(())
}

/// Precomputed sampling weights of one RoIAlign call. RoIAlign is linear in
/// the grid values, so the same plan gives the forward pass and the
/// transpose for the backward pass.
#[derive(Clone, Debug)]
pub struct RoiAlignPlan<T> {
    pool: usize,
    shape: GridShape<T>,
    bins: Vec<Vec<(usize, T)>>,
}

impl<T: Real> RoiAlignPlan<T> {
    pub fn new(shape: GridShape<T>, roi: &BBox<T>, pool: usize, samples_per_bin: usize) -> Result<Self> {
        check_roi(&shape, roi, pool, samples_per_bin)?;
        let bw = roi.width() / T::of(pool as f64);
        let bh = roi.height() / T::of(pool as f64);
        let spb = T::of(samples_per_bin as f64);
        let norm = T::one() / (spb * spb);
        let half = T::of(0.5);
        let mut bins = Vec::with_capacity(pool * pool);
        for py in 0..pool {
            for px in 0..pool {
                let mut weights = Vec::with_capacity(4 * samples_per_bin * samples_per_bin);
                for sy in 0..samples_per_bin {
                    let y = roi.y1 + bh * (T::of(py as f64) + (T::of(sy as f64) + half) / spb);
                    for sx in 0..samples_per_bin {
                        let x = roi.x1 + bw * (T::of(px as f64) + (T::of(sx as f64) + half) / spb);
                        let st = stencil_at(&shape, shape.clamp(Point::new(x, y)))?;
                        weights.extend(st.cells.iter().map(|&(idx, w)| (idx, w * norm)));
                    }
                }
                bins.push(weights);
            }
        }
        Ok(Self { pool, shape, bins })
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    /// Sparse weights of output bin `py * pool + px` over flat cell indices.
    pub fn bin_weights(&self, bin: usize) -> &[(usize, T)] {
        &self.bins[bin]
    }

    pub fn apply(&self, grid: &FeatureGrid<T>) -> Result<PooledFeature<T>> {
        if grid.shape != self.shape {
            return Err(Error::Shape("grid does not match the RoIAlign plan".into()));
        }
        let mut data = Vec::with_capacity(grid.channels * self.bins.len());
        for c in 0..grid.channels {
            let plane = grid.channel(c);
            data.extend(
                self.bins
                    .iter()
                    .map(|ws| ws.iter().map(|&(idx, w)| w * plane[idx]).sum::<T>()),
            );
        }
        Ok(PooledFeature { channels: grid.channels, pool: self.pool, data })
    }

    /// Accumulates `d(L)/d(pooled)` into `d(L)/d(grid)` (same layout as the
    /// grid data).
    pub fn backward_into(&self, upstream: &[T], grid_grad: &mut [T]) -> Result<()> {
        let bins = self.bins.len();
        let cells = self.shape.cells();
        if upstream.len() % bins != 0 || grid_grad.len() != (upstream.len() / bins) * cells {
            return Err(Error::Shape("RoIAlign backward buffers have inconsistent sizes".into()));
        }
        for (c, up) in upstream.chunks(bins).enumerate() {
            let plane = &mut grid_grad[c * cells..(c + 1) * cells];
            for (ws, &g) in self.bins.iter().zip(up) {
                for &(idx, w) in ws {
                    plane[idx] += w * g;
                }
            }
        }
        Ok(())
    }
}

/// RoIAlign: each bin is the mean of a `samples_per_bin^2` lattice of
/// bilinear samples; sample points outside the extent are clamped onto it.
pub fn roialign<T: Real>(
    grid: &FeatureGrid<T>,
    roi: &BBox<T>,
    pool: usize,
    samples_per_bin: usize,
) -> Result<PooledFeature<T>> {
    RoiAlignPlan::new(grid.shape, roi, pool, samples_per_bin)?.apply(grid)
}

/// Jacobian of [`roialign`] with respect to the grid, as a plan whose
/// [`RoiAlignPlan::backward_into`] applies the transpose.
pub fn roialign_grad<T: Real>(
    grid: &FeatureGrid<T>,
    roi: &BBox<T>,
    pool: usize,
    samples_per_bin: usize,
) -> Result<RoiAlignPlan<T>> {
    RoiAlignPlan::new(grid.shape, roi, pool, samples_per_bin)
}

/// Range of whole cells covered by `[lo, hi]` along one axis, clamped.
fn covered_cells<T: Real>(lo: T, hi: T, stride: T, n: usize) -> (usize, usize) {
    let start = (lo / stride).floor().max(T::zero()).to_usize().unwrap_or(0).min(n - 1);
    let end = (hi / stride).ceil().to_usize().unwrap_or(n).min(n).max(start + 1);
    (start, end)
}

/// Quantized RoI max pooling over whole cells.
pub fn roipool<T: Real>(grid: &FeatureGrid<T>, roi: &BBox<T>, pool: usize) -> Result<PooledFeature<T>> {
    check_roi(&grid.shape, roi, pool, 1)?;
    let s = grid.stride();
    let (j_start, j_end) = covered_cells(roi.x1, roi.x2, s, grid.width());
    let (i_start, i_end) = covered_cells(roi.y1, roi.y2, s, grid.height());
    let (rw, rh) = (j_end - j_start, i_end - i_start);
    let mut data = Vec::with_capacity(grid.channels * pool * pool);
    for c in 0..grid.channels {
        for py in 0..pool {
            let i0 = i_start + py * rh / pool;
            let i1 = i_start + ((py + 1) * rh).div_ceil(pool);
            for px in 0..pool {
                let j0 = j_start + px * rw / pool;
                let j1 = j_start + ((px + 1) * rw).div_ceil(pool);
                let mut m = T::neg_infinity();
                for i in i0..i1 {
                    for j in j0..j1 {
                        m = m.max(grid.get(c, i, j));
                    }
                }
                data.push(m);
            }
        }
    }
    Ok(PooledFeature { channels: grid.channels, pool, data })
}
