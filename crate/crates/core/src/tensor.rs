//! Array aliases and the latent-video container shared by every module.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, MivaError, Result};

/// Dense row-major matrix; the unit every kernel and tape node works on.
pub type Mat = Array2<f64>;

/// An `F x C x H x W` stack of latent frames.
///
/// Frame 0 is the conditioning frame (the encoded input image during
/// inference); the model generates frames `1..F`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    data: Array4<f64>,
}

impl LatentVideo {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[0] < 2 {
            return Err(dim_err(
                "LatentVideo",
                format!("need at least 2 frames, got {}", data.shape()[0]),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MivaError::NonFinite("LatentVideo"));
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((frames, channels, height, width)),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    pub fn frame(&self, i: usize) -> Array3<f64> {
        self.data.index_axis(Axis(0), i).to_owned()
    }

    pub fn set_frame(&mut self, i: usize, frame: &Array3<f64>) {
        self.data.index_axis_mut(Axis(0), i).assign(frame);
    }

    /// Token view: one row per `(frame, y, x)` in frame-major order, one
    /// column per channel.
    pub fn to_tokens(&self) -> Mat {
        video_to_tokens(&self.data)
    }

    pub fn from_tokens(tokens: &Mat, dims: (usize, usize, usize, usize)) -> Result<Self> {
        Ok(Self {
            data: tokens_to_video(tokens, dims)?,
        })
    }
}

pub fn video_to_tokens(data: &Array4<f64>) -> Mat {
    let (f, c, h, w) = data.dim();
    let mut out = Mat::zeros((f * h * w, c));
    for fi in 0..f {
        for ci in 0..c {
            let plane = data.slice(s![fi, ci, .., ..]);
            for ((y, x), v) in plane.indexed_iter() {
                out[[fi * h * w + y * w + x, ci]] = *v;
            }
        }
    }
    out
}

pub fn tokens_to_video(tokens: &Mat, dims: (usize, usize, usize, usize)) -> Result<Array4<f64>> {
    let (f, c, h, w) = dims;
    if tokens.dim() != (f * h * w, c) {
        return Err(dim_err(
            "tokens_to_video",
            format!("tokens {:?} vs video dims {:?}", tokens.dim(), dims),
        ));
    }
    let mut out = Array4::zeros(dims);
    for ((fi, ci, y, x), v) in out.indexed_iter_mut() {
        *v = tokens[[fi * h * w + y * w + x, ci]];
    }
    Ok(out)
}

pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), scale: f64) -> Mat {
    Mat::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn randn4<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

pub fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Round every entry to the nearest `f32`, the precision of the on-disk
/// containers.
pub fn round_f32<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

pub(crate) fn ensure_finite(m: &Mat, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MivaError::NonFinite(context))
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Numerically stable in-place softmax over each row.
pub(crate) fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}
