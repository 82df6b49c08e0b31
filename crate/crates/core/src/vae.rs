//! Fixed linear patch autoencoder standing in for a learned VAE.
//!
//! Each `p x p` pixel patch (all pixel channels, centered at 0.5) is mapped
//! to `C` latent channels by a matrix with orthonormal rows; the decoder is
//! its transpose, which is also its pseudo-inverse. The first rows are the
//! per-pixel-channel patch means so flat colors survive a round trip
//! exactly; the remaining rows are seeded random directions made orthogonal
//! by Gram-Schmidt.
//!
//! Latent channels are scaled by fixed gains (see [`MEAN_GAIN`] and
//! [`DETAIL_GAIN`]) so that channel-mean and detail channels have comparable
//! spread on typical clips; decoding divides the gains back out.

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, MivaError, Result};
use crate::tensor::{randn, Mat};

pub const PIXEL_OFFSET: f64 = 0.5;
/// Gain of the per-pixel-channel patch-mean latents.
pub const MEAN_GAIN: f64 = 2.0;
/// Gain of the remaining detail latents, which are near zero on flat regions.
pub const DETAIL_GAIN: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchAutoencoder {
    encode_matrix: Mat,
    gains: Vec<f64>,
    patch_size: usize,
    pixel_channels: usize,
}

impl PatchAutoencoder {
    pub fn new(patch_size: usize, pixel_channels: usize, latent_channels: usize, seed: u64) -> Result<Self> {
        let patch_dim = pixel_channels * patch_size * patch_size;
        if patch_size == 0 || latent_channels < pixel_channels || latent_channels > patch_dim {
            return Err(MivaError::InvalidArgument(format!(
                "latent channels {latent_channels} must lie in [{pixel_channels}, {patch_dim}]"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(latent_channels);
        let pp = patch_size * patch_size;
        for ch in 0..pixel_channels {
            let mut r = vec![0.0; patch_dim];
            for v in &mut r[ch * pp..(ch + 1) * pp] {
                *v = 1.0 / patch_size as f64;
            }
            rows.push(r);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while rows.len() < latent_channels {
            let cand = randn(&mut rng, (1, patch_dim), 1.0);
            let mut v: Vec<f64> = cand.iter().cloned().collect();
            for _ in 0..2 {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                rows.push(v);
            }
        }
        let encode_matrix = Mat::from_shape_fn((latent_channels, patch_dim), |(i, j)| rows[i][j]);
        let gains = (0..latent_channels)
            .map(|i| if i < pixel_channels { MEAN_GAIN } else { DETAIL_GAIN })
            .collect();
        Ok(Self {
            encode_matrix,
            gains,
            patch_size,
            pixel_channels,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn latent_channels(&self) -> usize {
        self.encode_matrix.nrows()
    }

    pub fn pixel_channels(&self) -> usize {
        self.pixel_channels
    }

    /// Orthonormal patch basis, before the channel gains.
    pub fn encode_matrix(&self) -> &Mat {
        &self.encode_matrix
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// `pixel_channels x H x W` image to `C x H/p x W/p` latent.
    pub fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let (ch, h, w) = image.dim();
        let p = self.patch_size;
        if ch != self.pixel_channels {
            return Err(dim_err(
                "vae_encode",
                format!("expected {} channels, got {ch}", self.pixel_channels),
            ));
        }
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(dim_err(
                "vae_encode",
                format!("image {h}x{w} not divisible by patch size {p}"),
            ));
        }
        let (lh, lw) = (h / p, w / p);
        let patches = Mat::from_shape_fn((ch * p * p, lh * lw), |(k, cell)| {
            let (c, rem) = (k / (p * p), k % (p * p));
            let (dy, dx) = (rem / p, rem % p);
            let (by, bx) = (cell / lw, cell % lw);
            image[[c, by * p + dy, bx * p + dx]] - PIXEL_OFFSET
        });
        let mut lat = self.encode_matrix.dot(&patches);
        for (mut row, g) in lat.rows_mut().into_iter().zip(&self.gains) {
            row *= *g;
        }
        Ok(lat
            .into_shape_with_order((self.latent_channels(), lh, lw))
            .expect("contiguous latent"))
    }

    /// `C x h x w` latent to `pixel_channels x hp x wp` image.
    pub fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, lh, lw) = latent.dim();
        if c != self.latent_channels() {
            return Err(dim_err(
                "vae_decode",
                format!("expected {} latent channels, got {c}", self.latent_channels()),
            ));
        }
        let p = self.patch_size;
        let mut flat = latent
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, lh * lw))
            .expect("contiguous latent");
        for (mut row, g) in flat.rows_mut().into_iter().zip(&self.gains) {
            row /= *g;
        }
        let patches = self.encode_matrix.t().dot(&flat);
        let mut out = Array3::zeros((self.pixel_channels, lh * p, lw * p));
        for ((ch, y, x), v) in out.indexed_iter_mut() {
            let k = ch * p * p + (y % p) * p + (x % p);
            let cell = (y / p) * lw + x / p;
            *v = patches[[k, cell]] + PIXEL_OFFSET;
        }
        Ok(out)
    }

    pub fn encode_video(&self, frames: &Array4<f64>) -> Result<Array4<f64>> {
        let encoded = frames
            .axis_iter(Axis(0))
            .map(|f| self.encode(&f.to_owned()))
            .collect::<Result<Vec<_>>>()?;
        stack(&encoded)
    }

    pub fn decode_video(&self, latents: &Array4<f64>) -> Result<Array4<f64>> {
        let decoded = latents
            .axis_iter(Axis(0))
            .map(|f| self.decode(&f.to_owned()))
            .collect::<Result<Vec<_>>>()?;
        stack(&decoded)
    }

    /// Single-channel mask replicated across the pixel channels, then encoded.
    pub fn encode_mask(&self, mask: &Array3<f64>) -> Result<Array3<f64>> {
        if mask.dim().0 != 1 {
            return Err(dim_err("encode_mask", "mask must have one channel"));
        }
        let (_, h, w) = mask.dim();
        let rgb = Array3::from_shape_fn((self.pixel_channels, h, w), |(_, y, x)| mask[[0, y, x]]);
        self.encode(&rgb)
    }

    /// Decoded mask as the mean over pixel channels (unclamped).
    pub fn decode_mask(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        let rgb = self.decode(latent)?;
        Ok(rgb.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0)))
    }

    pub fn encode_mask_video(&self, masks: &Array4<f64>) -> Result<Array4<f64>> {
        let encoded = masks
            .axis_iter(Axis(0))
            .map(|f| self.encode_mask(&f.to_owned()))
            .collect::<Result<Vec<_>>>()?;
        stack(&encoded)
    }

    pub fn decode_mask_video(&self, latents: &Array4<f64>) -> Result<Array4<f64>> {
        let decoded = latents
            .axis_iter(Axis(0))
            .map(|f| self.decode_mask(&f.to_owned()))
            .collect::<Result<Vec<_>>>()?;
        stack(&decoded)
    }
}

pub(crate) fn stack(frames: &[Array3<f64>]) -> Result<Array4<f64>> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| dim_err("stack", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::Rng;

    fn vae() -> PatchAutoencoder {
        PatchAutoencoder::new(4, 3, 8, 7).unwrap()
    }

    #[test]
    fn rows_are_orthonormal() {
        let e = vae().encode_matrix().clone();
        let gram = e.dot(&e.t());
        assert!(max_abs_diff(&gram, &Mat::eye(8)) < 1e-12);
    }

    #[test]
    fn constant_image_round_trips_exactly() {
        let v = vae();
        let mut img = Array3::zeros((3, 8, 12));
        for (c, val) in [0.2, 0.9, 0.4].iter().enumerate() {
            img.index_axis_mut(Axis(0), c).fill(*val);
        }
        let rec = v.decode(&v.encode(&img).unwrap()).unwrap();
        assert!(max_abs_diff(&rec, &img) < 1e-12);
    }

    #[test]
    fn encode_after_decode_is_identity() {
        let v = vae();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array3::from_shape_simple_fn((8, 3, 5), || rng.random_range(-2.0..2.0));
        let back = v.encode(&v.decode(&z).unwrap()).unwrap();
        assert!(max_abs_diff(&back, &z) <= 1e-6);
    }

    #[test]
    fn reconstruction_error_equals_least_squares_residual() {
        let v = vae();
        let frame = crate::synth::render_pattern(
            &crate::synth::MotionPattern::preset(crate::synth::PatternKind::TranslateRight),
            3,
            4,
            64,
            64,
        )
        .unwrap()
        .0
        .index_axis(Axis(0), 2)
        .to_owned();
        let rec = v.decode(&v.encode(&frame).unwrap()).unwrap();
        let err: f64 = (&rec - &frame).iter().map(|d| d * d).sum();

        // Independent oracle: solve the normal equations E E^T z = E x per
        // patch by Gaussian elimination and measure the residual.
        let e = v.encode_matrix();
        let gram = e.dot(&e.t());
        let mut oracle = 0.0;
        for by in 0..16 {
            for bx in 0..16 {
                let x: Vec<f64> = (0..48)
                    .map(|k| {
                        let (c, rem) = (k / 16, k % 16);
                        frame[[c, by * 4 + rem / 4, bx * 4 + rem % 4]] - PIXEL_OFFSET
                    })
                    .collect();
                let rhs: Vec<f64> = (0..8).map(|i| (0..48).map(|k| e[[i, k]] * x[k]).sum()).collect();
                let z = solve(gram.clone(), rhs);
                for k in 0..48 {
                    let proj: f64 = (0..8).map(|i| e[[i, k]] * z[i]).sum();
                    oracle += (x[k] - proj).powi(2);
                }
            }
        }
        assert!((err - oracle).abs() <= 1e-9 * oracle.max(1.0), "{err} vs {oracle}");
    }

    fn solve(mut a: Mat, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
                .unwrap();
            for k in 0..n {
                a.swap([col, k], [piv, k]);
            }
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[[row, col]] / a[[col, col]];
                for k in col..n {
                    a[[row, k]] -= f * a[[col, k]];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[[row, k]] * x[k]).sum();
            x[row] = (b[row] - s) / a[[row, row]];
        }
        x
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let v = vae();
        assert!(matches!(
            v.encode(&Array3::zeros((3, 6, 8))),
            Err(MivaError::Dimension { .. })
        ));
    }

    #[test]
    fn binary_mask_round_trip_keeps_full_patches() {
        let v = vae();
        let mut m = Array3::zeros((1, 8, 8));
        m.slice_mut(ndarray::s![0, 0..4, 0..4]).fill(1.0);
        let rec = v.decode_mask(&v.encode_mask(&m).unwrap()).unwrap();
        assert!(max_abs_diff(&rec, &m) < 1e-12);
    }
}
