//! Orthonormal type-II DCT along the frame, height and width axes.

use ndarray::{Array3, Array4, Axis};

use crate::tensor::Mat;

/// `n x n` orthonormal DCT-II matrix; its transpose is the inverse.
pub fn dct_matrix(n: usize) -> Mat {
    let nf = n as f64;
    Mat::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

fn apply_axis(x: &Array3<f64>, axis: usize, m: &Mat) -> Array3<f64> {
    let mut out = Array3::zeros(x.dim());
    for (src, mut dst) in x.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        dst.assign(&m.dot(&src));
    }
    out
}

fn transform(x: &Array3<f64>, inverse: bool) -> Array3<f64> {
    let (f, h, w) = x.dim();
    let mut y = x.clone();
    for (axis, n) in [(0, f), (1, h), (2, w)] {
        let m = dct_matrix(n);
        let m = if inverse { m.t().to_owned() } else { m };
        y = apply_axis(&y, axis, &m);
    }
    y
}

pub fn dct3(x: &Array3<f64>) -> Array3<f64> {
    transform(x, false)
}

pub fn idct3(coefficients: &Array3<f64>) -> Array3<f64> {
    transform(coefficients, true)
}

fn per_channel(x: &Array4<f64>, inverse: bool) -> Array4<f64> {
    let mut out = Array4::zeros(x.dim());
    for c in 0..x.dim().1 {
        let ch = x.index_axis(Axis(1), c).to_owned();
        out.index_axis_mut(Axis(1), c).assign(&transform(&ch, inverse));
    }
    out
}

/// [`dct3`] of every channel of an `F x C x H x W` video.
pub fn dct3_video(x: &Array4<f64>) -> Array4<f64> {
    per_channel(x, false)
}

pub fn idct3_video(x: &Array4<f64>) -> Array4<f64> {
    per_channel(x, true)
}

/// Separable box low-pass: 1 on the lowest `ceil(ratio * n)` indices of
/// every axis.
pub fn box_lowpass(dims: (usize, usize, usize), ratio: f64) -> Array3<f64> {
    let keep = |n: usize| ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let (kf, kh, kw) = (keep(dims.0), keep(dims.1), keep(dims.2));
    Array3::from_shape_fn(dims, |(f, y, x)| if f < kf && y < kh && x < kw { 1.0 } else { 0.0 })
}
