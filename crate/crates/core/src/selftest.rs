//! Quick invariant suite behind the `selftest` command. Runs on small
//! shapes in a few seconds.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{implicit_ca, ImplicitPromptCa, Miva};
use crate::attention::{cross_attention, AttentionParams};
use crate::dct::{dct3, idct3};
use crate::error::Result;
use crate::masked::{attention_mask_entry, dropout_prob};
use crate::model::{predict_noise, AdapterUse, Attachment, BaseModel, Conditioning, ModelConfig, Ranks};
use crate::pipeline::shared_noise;
use crate::tensor::{max_abs_diff, randn, randn4, LatentVideo};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, bound: f64) -> Check {
    Check {
        name,
        passed: value <= bound,
        detail: format!("max deviation {value:.3e} (bound {bound:.0e})"),
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        frames: 4,
        image_size: 16,
        patch_size: 4,
        channels: 4,
        token_dim: 16,
        ffn_hidden: 32,
        time_dim: 8,
        time_hidden: 16,
        prompt_len: 2,
        ranks: Ranks { cfa: 2, ca: 2, tsa: 2 },
        ..ModelConfig::default()
    }
}

fn transparency(base: &BaseModel, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = &base.config;
    let dims = (cfg.frames, cfg.channels, cfg.latent_size(), cfg.latent_size());
    let mut worst = 0.0f64;
    for i in 0..10 {
        let plain = Miva::new(base, "p", false, i)?;
        let masked = Miva::new(base, "m", true, 100 + i)?;
        let x = LatentVideo::new(randn4(rng, dims))?;
        let t = rng.random_range(0..cfg.timesteps);
        let cond = Conditioning::new(t, base.null_prompt());
        let reference = predict_noise(base, &x, cond, &Attachment::Base)?;
        for m in [&plain, &masked] {
            let out = predict_noise(base, &x, cond, &Attachment::Direct(AdapterUse::new(m, 1.0)))?;
            worst = worst.max(max_abs_diff(&out, &reference));
        }
    }
    Ok(worst)
}

fn ca_factorization(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = 8;
        let p = AttentionParams::new(
            randn(rng, (d, d), 0.5),
            randn(rng, (d, d), 0.5),
            randn(rng, (d, d), 0.5),
            randn(rng, (d, d), 0.5),
        )?;
        let c = randn(rng, (3, d), 1.0);
        let f = randn(rng, (5, d), 1.0);
        let layer = ImplicitPromptCa::from_prompt(&p, &c);
        let got = implicit_ca(&f, &p, &layer)?;
        worst = worst.max(max_abs_diff(&got, &cross_attention(&f, &c, &p)?));
    }
    Ok(worst)
}

fn formulas() -> Result<f64> {
    let eps: f64 = 1e-6;
    let expected = [
        ((1.0, 1.0), (1.0 + eps).ln()),
        ((1.0, 0.0), eps.ln()),
        ((0.5, 0.5), (0.5f64 + eps).ln()),
    ];
    let mut worst = 0.0f64;
    for ((a, b), want) in expected {
        worst = worst.max((attention_mask_entry(a, b, eps)? - want).abs());
    }
    for (t, want) in [(0usize, 1.0), (1000, 0.0), (500, 0.5)] {
        worst = worst.max((dropout_prob(t, 1000)? - want).abs());
    }
    Ok(worst)
}

fn dct_round_trip(rng: &mut ChaCha8Rng) -> f64 {
    let x = Array3::from_shape_simple_fn((4, 6, 5), || rng.random_range(-1.0..1.0));
    max_abs_diff(&idct3(&dct3(&x)), &x)
}

fn shared_noise_cases(rng: &mut ChaCha8Rng) -> Result<f64> {
    let eps = randn4(rng, (4, 2, 3, 3));
    let zero = max_abs_diff(&shared_noise(&eps, 0.0)?, &eps);
    let ones = shared_noise(&eps, 1.0)?;
    let first = eps.index_axis(ndarray::Axis(0), 0).to_owned();
    let expected = Array4::from_shape_fn(eps.dim(), |(_, c, y, x)| first[[c, y, x]]);
    Ok(zero.max(max_abs_diff(&ones, &expected)))
}

fn composition(base: &BaseModel, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let cfg = &base.config;
    let dims = (cfg.frames, cfg.channels, cfg.latent_size(), cfg.latent_size());
    let mut a = Miva::new(base, "a", false, 7)?;
    let mut b = Miva::new(base, "b", false, 8)?;
    crate::gradcheck::randomize_adapter(&mut a, 9, 0.2);
    crate::gradcheck::randomize_adapter(&mut b, 10, 0.2);
    let x = LatentVideo::new(randn4(rng, dims))?;
    let cond = Conditioning::new(321, base.null_prompt());
    let direct = predict_noise(base, &x, cond, &Attachment::Direct(AdapterUse::new(&a, 1.0)))?;
    let single = predict_noise(base, &x, cond, &Attachment::Composed(vec![AdapterUse::new(&a, 1.0)]))?;
    let reference = predict_noise(base, &x, cond, &Attachment::Base)?;
    let zero = predict_noise(
        base,
        &x,
        cond,
        &Attachment::Composed(vec![AdapterUse::new(&a, 0.0), AdapterUse::new(&b, 0.0)]),
    )?;
    Ok((max_abs_diff(&single, &direct), max_abs_diff(&zero, &reference)))
}

/// Run every check; never fails early.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let base = BaseModel::new(small_config(), vec!["a".into(), "b".into()], 11);
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: Result<f64>, bound: f64| {
        out.push(match r {
            Ok(v) => check(name, v, bound),
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
    };
    match &base {
        Ok(base) => {
            push("init_transparency", transparency(base, &mut rng), 1e-5);
            let comp = composition(base, &mut rng);
            push(
                "compose_single_equals_direct",
                comp.as_ref().map(|c| c.0).map_err(clone_err),
                1e-6,
            );
            push("compose_zero_weights_equals_base", comp.map(|c| c.1), 1e-5);
        }
        Err(e) => push("base_model", Err(clone_err(e)), 0.0),
    }
    push("ca_factorization", ca_factorization(&mut rng), 1e-5);
    push("mask_bias_and_dropout_formulas", formulas(), 1e-4);
    push("dct3_round_trip", Ok(dct_round_trip(&mut rng)), 1e-6);
    push("shared_noise_degenerate_cases", shared_noise_cases(&mut rng), 0.0);
    out
}

fn clone_err(e: &crate::error::MivaError) -> crate::error::MivaError {
    crate::error::MivaError::InvalidArgument(e.to_string())
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        let checks = super::run();
        assert_eq!(checks.len(), 7);
        for c in checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
