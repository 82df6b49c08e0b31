//! Adapter training and base pretraining.
//!
//! Minibatch size is 1: every iteration draws one clip window, one
//! diffusion step uniformly from `[1, T)` and fresh noise. Frame 1 stays
//! clean in adapter training and is excluded from the loss. The error is
//! weighted per step according to [`LossWeighting`].

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::Miva;
use crate::autograd::{Graph, Var};
use crate::error::{dim_err, MivaError, Result};
use crate::masked::{build_attention_bias, dropout_prob, one_step_predict_mask, MaskSequence, DEFAULT_EPSILON};
use crate::model::{forward, predict_noise, AdapterUse, Attachment, BaseModel, Conditioning, ModelConfig, SlotKind};
use crate::optim::{Adam, AdamConfig};
use crate::schedule::{forward_diffuse_array, NoiseSchedule};
use crate::synth::MotionPatternDataset;
use crate::tensor::{randn4, video_to_tokens, LatentVideo, Mat};

/// Per-step weighting of the noise-prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    /// Plain `|eps - eps_hat|^2`.
    Epsilon,
    /// `|eps - eps_hat|^2 / alpha_t^2`, the velocity error of the trunk.
    /// Keeps high-noise steps, where layout and motion are decided, from
    /// vanishing out of the objective.
    Velocity,
}

impl LossWeighting {
    pub fn name(self) -> &'static str {
        match self {
            LossWeighting::Epsilon => "epsilon",
            LossWeighting::Velocity => "velocity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "epsilon" => Ok(LossWeighting::Epsilon),
            "velocity" => Ok(LossWeighting::Velocity),
            other => Err(MivaError::InvalidArgument(format!("unknown loss weighting `{other}`"))),
        }
    }

    fn factor(self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        Ok(match self {
            LossWeighting::Epsilon => 1.0,
            LossWeighting::Velocity => {
                let a = schedule.alpha(t)?;
                1.0 / (a * a)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Probability of training on the null prompt during base pretraining.
    pub prompt_dropout: f64,
    /// Probability that a pretraining iteration keeps frame 1 clean and
    /// drops it from the loss, as in adapter training and sampling.
    pub clean_first_prob: f64,
    pub epsilon_mask: f64,
    pub weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            iterations: 2000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            prompt_dropout: 0.1,
            clean_first_prob: 0.5,
            epsilon_mask: DEFAULT_EPSILON,
            weighting: LossWeighting::Velocity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MivaError::InvalidArgument(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(MivaError::InvalidArgument("prompt_dropout outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.clean_first_prob) {
            return Err(MivaError::InvalidArgument("clean_first_prob outside [0, 1]".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Flat key/value view stored in checkpoint metadata.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("lr".into(), format!("{}", self.learning_rate));
        m.insert("iters".into(), self.iterations.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("epsilon_mask".into(), format!("{}", self.epsilon_mask));
        m.insert("weighting".into(), self.weighting.name().into());
        m
    }
}

/// Mean squared error, optionally over frames `2..F` only.
pub fn denoise_loss(eps_hat: &Array4<f64>, eps_true: &Array4<f64>, exclude_first_frame: bool) -> Result<f64> {
    if eps_hat.dim() != eps_true.dim() {
        return Err(dim_err(
            "denoise_loss",
            format!("{:?} vs {:?}", eps_hat.dim(), eps_true.dim()),
        ));
    }
    let frames = eps_hat.dim().0;
    if frames < 2 {
        return Err(dim_err("denoise_loss", "need at least two frames"));
    }
    let skip = usize::from(exclude_first_frame);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in eps_hat.axis_iter(Axis(0)).zip(eps_true.axis_iter(Axis(0))).skip(skip) {
        sum += a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        count += a.len();
    }
    Ok(sum / count as f64)
}

/// Row weights for `(F*N) x C` token rows: zero on frame 1 when excluded.
fn row_weights(frames: usize, per_frame: usize, exclude_first: bool) -> Arc<Vec<f64>> {
    Arc::new(
        (0..frames * per_frame)
            .map(|r| if exclude_first && r < per_frame { 0.0 } else { 1.0 })
            .collect(),
    )
}

/// Noised input with frame 1 left clean, plus the noise used.
fn noisy_sample(
    x0: &Array4<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    keep_first: bool,
) -> Result<(LatentVideo, Array4<f64>)> {
    let eps = randn4(rng, x0.dim());
    let mut x_t = forward_diffuse_array(x0, t, &eps, schedule)?;
    if keep_first {
        x_t.index_axis_mut(Axis(0), 0).assign(&x0.index_axis(Axis(0), 0));
    }
    Ok((LatentVideo::new(x_t)?, eps))
}

fn loss_node(g: &mut Graph<'_>, out: Var, eps: &Array4<f64>, n: usize, exclude_first: bool, denom: f64) -> Var {
    let f = eps.dim().0;
    g.weighted_mse(out, video_to_tokens(eps), row_weights(f, n, exclude_first), denom)
}

fn check_loss(loss: f64, iteration: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        log::error!("loss {loss} at iteration {iteration}; aborting");
        Err(MivaError::Diverged { iteration, loss })
    }
}

fn progress(label: &str, it: usize, total: usize, losses: &[f64]) {
    if total >= 10 && (it + 1).is_multiple_of((total / 10).max(1)) {
        let window = &losses[losses.len().saturating_sub(50)..];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        log::info!("{label}: iteration {}/{total}, recent loss {mean:.5}", it + 1);
    }
}

/// Train a plain adapter on `dataset`. The base is left untouched.
pub fn train_miva(dataset: &MotionPatternDataset, base: &BaseModel, config: &TrainConfig) -> Result<Miva> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(MivaError::InvalidArgument("empty dataset".into()));
    }
    let cfg = &base.config;
    let pattern = dataset.pattern_names().join("+");
    let mut miva = Miva::new(base, &pattern, false, config.seed)?;
    miva.meta.config = config.to_map();
    let vae = base.autoencoder()?;
    let schedule = NoiseSchedule::linear(cfg.timesteps, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam(), miva.named_params().into_iter().map(|(_, m)| m));
    let n = cfg.tokens_per_frame();
    let denom = ((cfg.frames - 1) * n * cfg.channels) as f64;
    let mut losses = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let (_, video, _) = dataset.sample_window(&mut rng, cfg.frames)?;
        let x0 = vae.encode_video(&video)?;
        let t = rng.random_range(1..cfg.timesteps);
        let (x_t, eps) = noisy_sample(&x0, t, &schedule, &mut rng, true)?;

        let (loss, grads) = {
            let mut g = Graph::new();
            g.train_all(miva.named_params().into_iter().map(|(_, m)| m));
            let cond = Conditioning::new(t, base.null_prompt());
            let out = forward(
                &mut g,
                base,
                &x_t,
                cond,
                &Attachment::Direct(AdapterUse::new(&miva, 1.0)),
            )?;
            let l = loss_node(
                &mut g,
                out,
                &eps,
                n,
                true,
                denom / config.weighting.factor(&schedule, t)?,
            );
            let grads = g.backward(l);
            let collected: Vec<Option<Mat>> = miva
                .named_params()
                .into_iter()
                .map(|(_, m)| grads.wrt(m).cloned())
                .collect();
            (g.value(l)[[0, 0]], collected)
        };
        check_loss(loss, it)?;
        losses.push(loss);
        adam.update(miva.named_params_mut().into_iter().map(|(_, m)| m).collect(), &grads)?;
        progress("train-miva", it, config.iterations, &losses);
    }
    miva.round_to_f32();
    miva.meta.iterations = config.iterations;
    miva.meta.loss_curve = losses;
    Ok(miva)
}

/// Outcome of masked-adapter training, with the per-iteration branch log
/// (`true` where ground-truth masks built the biases).
#[derive(Debug, Clone)]
pub struct MaskedTraining {
    pub miva: Miva,
    pub ground_truth_used: Vec<bool>,
}

/// Train a masked adapter on video + analytic mask pairs.
pub fn train_mmiva(dataset: &MotionPatternDataset, base: &BaseModel, config: &TrainConfig) -> Result<MaskedTraining> {
    config.validate()?;
    if !dataset.has_masks() {
        return Err(MivaError::InvalidArgument(
            "masked training needs ground-truth masks".into(),
        ));
    }
    let cfg = &base.config;
    let pattern = dataset.pattern_names().join("+");
    let mut miva = Miva::new(base, &pattern, true, config.seed)?;
    miva.meta.config = config.to_map();
    let vae = base.autoencoder()?;
    let schedule = NoiseSchedule::linear(cfg.timesteps, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam(), miva.named_params().into_iter().map(|(_, m)| m));
    let n = cfg.tokens_per_frame();
    let side = cfg.latent_size();
    let denom = (2 * (cfg.frames - 1) * n * cfg.channels) as f64;
    let mut losses = Vec::with_capacity(config.iterations);
    let mut branches = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let (_, video, masks) = dataset.sample_window(&mut rng, cfg.frames)?;
        let masks = masks.ok_or_else(|| MivaError::InvalidArgument("clip without masks".into()))?;
        let x0 = vae.encode_video(&video)?;
        let s0 = vae.encode_mask_video(&masks)?;
        let t = rng.random_range(1..cfg.timesteps);
        let (x_t, eps_x) = noisy_sample(&x0, t, &schedule, &mut rng, true)?;
        let (s_t, eps_s) = noisy_sample(&s0, t, &schedule, &mut rng, true)?;

        let p = dropout_prob(it, config.iterations.max(1))?;
        let use_truth = rng.random::<f64>() < p;
        let source = if use_truth {
            MaskSequence::new(masks)?
        } else {
            let cond = Conditioning {
                t,
                prompt: base.null_prompt(),
                sa_bias: None,
                slot: SlotKind::Mask,
            };
            let eps_hat = predict_noise(base, &s_t, cond, &Attachment::Direct(AdapterUse::new(&miva, 1.0)))?;
            one_step_predict_mask(s_t.data(), t, &eps_hat, &schedule, &vae)?
        };
        let bias = build_attention_bias(&source, side, side, config.epsilon_mask)?;
        branches.push(use_truth);

        let (loss, grads) = {
            let mut g = Graph::new();
            g.train_all(miva.named_params().into_iter().map(|(_, m)| m));
            let video_cond = Conditioning {
                t,
                prompt: base.null_prompt(),
                sa_bias: Some(&bias),
                slot: SlotKind::Video,
            };
            let video_use = AdapterUse {
                miva: &miva,
                weight: 1.0,
                cfa_bias: Some(&bias),
            };
            let out_x = forward(&mut g, base, &x_t, video_cond, &Attachment::Direct(video_use))?;
            let mask_cond = Conditioning {
                slot: SlotKind::Mask,
                sa_bias: None,
                ..video_cond
            };
            let out_s = forward(
                &mut g,
                base,
                &s_t,
                mask_cond,
                &Attachment::Direct(AdapterUse::new(&miva, 1.0)),
            )?;
            let d = denom / config.weighting.factor(&schedule, t)?;
            let lx = loss_node(&mut g, out_x, &eps_x, n, true, d);
            let ls = loss_node(&mut g, out_s, &eps_s, n, true, d);
            let l = g.add(lx, ls);
            let grads = g.backward(l);
            let collected: Vec<Option<Mat>> = miva
                .named_params()
                .into_iter()
                .map(|(_, m)| grads.wrt(m).cloned())
                .collect();
            (g.value(l)[[0, 0]], collected)
        };
        check_loss(loss, it)?;
        losses.push(loss);
        adam.update(miva.named_params_mut().into_iter().map(|(_, m)| m).collect(), &grads)?;
        progress("train-mmiva", it, config.iterations, &losses);
    }
    miva.round_to_f32();
    miva.meta.iterations = config.iterations;
    miva.meta.loss_curve = losses;
    Ok(MaskedTraining {
        miva,
        ground_truth_used: branches,
    })
}

/// Base model trained from scratch. Each iteration either noises every
/// frame or, with probability `clean_first_prob`, keeps frame 1 clean and
/// excludes it from the loss. The learning rate follows a cosine decay to
/// a tenth of its initial value. Returns the model and its loss curve.
pub fn pretrain_base(
    dataset: &MotionPatternDataset,
    model: ModelConfig,
    config: &TrainConfig,
) -> Result<(BaseModel, Vec<f64>)> {
    config.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(MivaError::InvalidArgument("empty dataset".into()));
    }
    let names = dataset.pattern_names();
    if names.len() < 2 {
        log::warn!("pretraining on a single pattern; motion priors will be narrow");
    }
    let mut base = BaseModel::new(model, names, config.seed)?;
    let cfg = base.config.clone();
    let vae = base.autoencoder()?;
    let schedule = NoiseSchedule::linear(cfg.timesteps, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(config.adam(), base.named_params().into_iter().map(|(_, m)| m));
    let n = cfg.tokens_per_frame();
    let mut losses = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let progress_frac = it as f64 / config.iterations.max(1) as f64;
        let decay = 0.55 + 0.45 * (std::f64::consts::PI * progress_frac).cos();
        adam.set_lr(config.learning_rate * decay);
        let (idx, video, _) = dataset.sample_window(&mut rng, cfg.frames)?;
        let x0 = vae.encode_video(&video)?;
        let t = rng.random_range(1..cfg.timesteps);
        let clean_first = rng.random::<f64>() < config.clean_first_prob;
        let (x_t, eps) = noisy_sample(&x0, t, &schedule, &mut rng, clean_first)?;
        let counted = if clean_first { cfg.frames - 1 } else { cfg.frames };
        let denom = (counted.max(1) * n * cfg.channels) as f64;
        let drop_prompt = rng.random::<f64>() < config.prompt_dropout;

        let (loss, grads) = {
            let prompt = if drop_prompt {
                base.null_prompt()
            } else {
                base.prompt_for(&dataset.clips[idx].pattern)
                    .unwrap_or(base.null_prompt())
            };
            let mut g = Graph::new();
            g.train_all(base.named_params().into_iter().map(|(_, m)| m));
            let out = forward(&mut g, &base, &x_t, Conditioning::new(t, prompt), &Attachment::Base)?;
            let l = loss_node(
                &mut g,
                out,
                &eps,
                n,
                clean_first,
                denom / config.weighting.factor(&schedule, t)?,
            );
            let grads = g.backward(l);
            let collected: Vec<Option<Mat>> = base
                .named_params()
                .into_iter()
                .map(|(_, m)| grads.wrt(m).cloned())
                .collect();
            (g.value(l)[[0, 0]], collected)
        };
        check_loss(loss, it)?;
        losses.push(loss);
        adam.update(base.named_params_mut().into_iter().map(|(_, m)| m).collect(), &grads)?;
        progress("pretrain-base", it, config.iterations, &losses);
    }
    base.round_to_f32();
    Ok((base, losses))
}

/// Median of a slice; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
