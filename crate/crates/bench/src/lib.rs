//! Seeded inputs shared by the kernel benchmarks.

use miva_core::model::{BaseModel, ModelConfig};
use miva_core::tensor::{randn, randn4, LatentVideo, Mat};
use miva_core::Miva;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Query, key and value matrices of `n` tokens by `d` features.
pub fn qkv(n: usize, d: usize, seed: u64) -> (Mat, Mat, Mat) {
    let mut r = rng(seed);
    (
        randn(&mut r, (n, d), 1.0),
        randn(&mut r, (n, d), 1.0),
        randn(&mut r, (n, d), 1.0),
    )
}

pub fn cube(dims: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_simple_fn(dims, || r.random_range(-1.0..1.0))
}

/// Default-sized base, a freshly initialized masked adapter and a noisy latent.
pub fn model_fixture(seed: u64) -> (BaseModel, Miva, LatentVideo) {
    let config = ModelConfig::default();
    let base = BaseModel::new(config.clone(), vec!["a".into()], seed).expect("default config");
    let miva = Miva::new(&base, "bench", true, seed + 1).expect("adapter");
    let s = config.latent_size();
    let x = randn4(&mut rng(seed + 2), (config.frames, config.channels, s, s));
    (base, miva, LatentVideo::new(x).expect("latent"))
}
