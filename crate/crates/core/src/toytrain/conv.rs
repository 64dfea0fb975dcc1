//! 3x3 convolution with zero padding 1, and average pooling.
//!
//! Tensors are `C x H x W`, row-major.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out x in x 3 x 3`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3x3<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        assert!(stride >= 1, "stride must be at least 1");
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![T::zero(); out_channels * in_channels * 9],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Zero-mean normal weights with standard deviation `std`, zero bias.
    pub fn normal<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, std: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, stride);
        let dist = Normal::new(0.0, std).expect("finite positive std");
        for w in c.weight.iter_mut() {
            *w = T::of(dist.sample(rng));
        }
        c
    }

    /// He initialization for a ReLU that follows.
    pub fn he<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        Self::normal(in_channels, out_channels, stride, (2.0 / (9 * in_channels) as f64).sqrt(), rng)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Outputs `o` in `[lo, hi)` whose tap `k` reads input `o * stride + k - 1`
    /// inside `[0, n)`.
    fn valid(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= 1 { 0 } else { 1 };
        let hi = if n + 1 > k { ((n - k) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Column matrix `(in * 9) x (oh * ow)`: row `c*9 + ky*3 + kx` holds the
    /// input value read by that tap at every output position.
    fn im2col(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.output_size(h, w);
        let s = self.stride;
        let n = oh * ow;
        let mut cols = vec![T::zero(); self.in_channels * 9 * n];
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                let (ylo, yhi) = self.valid(ky, h, oh);
                for kx in 0..3 {
                    let (xlo, xhi) = self.valid(kx, w, ow);
                    let col = &mut cols[(c * 9 + ky * 3 + kx) * n..][..n];
                    for oy in ylo..yhi {
                        let row = &plane[(oy * s + ky - 1) * w..][..w];
                        for ox in xlo..xhi {
                            col[oy * ow + ox] = row[ox * s + kx - 1];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`], accumulating into `dx`.
    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (oh, ow) = self.output_size(h, w);
        let s = self.stride;
        let n = oh * ow;
        for c in 0..self.in_channels {
            let dplane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                let (ylo, yhi) = self.valid(ky, h, oh);
                for kx in 0..3 {
                    let (xlo, xhi) = self.valid(kx, w, ow);
                    let col = &cols[(c * 9 + ky * 3 + kx) * n..][..n];
                    for oy in ylo..yhi {
                        let drow = &mut dplane[(oy * s + ky - 1) * w..][..w];
                        for ox in xlo..xhi {
                            drow[ox * s + kx - 1] += col[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        assert_eq!(x.len(), self.in_channels * h * w, "conv input size");
        let (oh, ow) = self.output_size(h, w);
        let n = oh * ow;
        let taps = self.in_channels * 9;
        let cols = self.im2col(x, h, w);
        let mut y = vec![T::zero(); self.out_channels * n];
        for o in 0..self.out_channels {
            let out = &mut y[o * n..(o + 1) * n];
            out.iter_mut().for_each(|v| *v = self.bias[o]);
            for (&k, col) in self.weight[o * taps..(o + 1) * taps].iter().zip(cols.chunks_exact(n)) {
                for (v, &c) in out.iter_mut().zip(col) {
                    *v += k * c;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and, if requested, the
    /// input gradient into `dx`.
    pub fn backward(&self, x: &[T], h: usize, w: usize, dy: &[T], grad: &mut Self, dx: Option<&mut [T]>) {
        let (oh, ow) = self.output_size(h, w);
        let n = oh * ow;
        assert_eq!(dy.len(), self.out_channels * n, "conv output gradient size");
        let taps = self.in_channels * 9;
        let cols = self.im2col(x, h, w);
        for (o, g) in dy.chunks_exact(n).enumerate() {
            grad.bias[o] += g.iter().copied().sum::<T>();
            for (gw, col) in grad.weight[o * taps..(o + 1) * taps].iter_mut().zip(cols.chunks_exact(n)) {
                *gw += dot(g, col);
            }
        }
        if let Some(d) = dx {
            let mut dcols = vec![T::zero(); taps * n];
            for (o, g) in dy.chunks_exact(n).enumerate() {
                for (&k, dcol) in self.weight[o * taps..(o + 1) * taps].iter().zip(dcols.chunks_exact_mut(n)) {
                    for (v, &gv) in dcol.iter_mut().zip(g) {
                        *v += k * gv;
                    }
                }
            }
            self.col2im(&dcols, h, w, d);
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn relu_in_place<T: Real>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = x.max(T::zero()));
}

/// Zeroes gradient entries whose activation was clipped by a ReLU.
pub fn relu_backward<T: Real>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Non-overlapping `factor x factor` mean pooling; `h` and `w` must divide.
pub fn avg_pool<T: Real>(x: &[T], channels: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    assert!(h % factor == 0 && w % factor == 0, "pool factor must divide the input");
    let (oh, ow) = (h / factor, w / factor);
    let scale = T::one() / T::of((factor * factor) as f64);
    let mut y = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        for iy in 0..h {
            for ix in 0..w {
                y[c * oh * ow + (iy / factor) * ow + ix / factor] += x[c * h * w + iy * w + ix] * scale;
            }
        }
    }
    y
}
