//! End-to-end animation: noise initialization, DDIM sampling with attached
//! adapters (and the mask stream when any masked adapter is present),
//! final-step AdaIN, decode.

use std::sync::Arc;

use ndarray::{s, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::Miva;
use crate::dct::{box_lowpass, dct3_video, idct3_video};
use crate::error::{dim_err, MivaError, Result};
use crate::masked::{
    background_mask_for_plain_miva, build_attention_bias, one_step_predict_mask, unified_attention_bias,
    unified_subject_mask, BiasSet, CachedMasks, MaskCache, MaskSequence, MaskStepSet, DEFAULT_EPSILON,
};
use crate::model::{predict_noise, AdapterUse, Attachment, BaseModel, Conditioning, SlotKind};
use crate::schedule::{ddim_step_array, NoiseSchedule, DEFAULT_DDIM_STEPS};
use crate::tensor::{randn4, LatentVideo, Mat};
use crate::vae::PatchAutoencoder;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub alpha_shared: f64,
    pub lowpass_ratio: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            alpha_shared: 0.2,
            lowpass_ratio: 0.25,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_shared) {
            return Err(MivaError::InvalidArgument(format!(
                "alpha_shared {} outside [0, 1]",
                self.alpha_shared
            )));
        }
        if !(self.lowpass_ratio > 0.0 && self.lowpass_ratio <= 1.0) {
            return Err(MivaError::InvalidArgument(format!(
                "lowpass_ratio {} outside (0, 1]",
                self.lowpass_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub steps: usize,
    /// Classifier-free guidance is disabled; only 1 is accepted.
    pub cfg_scale: f64,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    /// DDIM indices at which masks are regenerated, e.g. `0:40:5`.
    pub mask_steps: String,
    pub epsilon_mask: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_DDIM_STEPS,
            cfg_scale: 1.0,
            seed: 0,
            preprocess: PreprocessConfig::default(),
            mask_steps: "0:40:5".into(),
            epsilon_mask: DEFAULT_EPSILON,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(MivaError::InvalidArgument("step count must be >= 1".into()));
        }
        if self.cfg_scale != 1.0 {
            return Err(MivaError::InvalidArgument("guidance scale is fixed to 1".into()));
        }
        if self.epsilon_mask.is_nan() || self.epsilon_mask <= 0.0 {
            return Err(MivaError::InvalidArgument("epsilon_mask must be positive".into()));
        }
        self.preprocess.validate()
    }
}

/// `eps~1 = eps1`, `eps~i = alpha eps1 + (1 - alpha) eps_i`.
pub fn shared_noise(eps: &Array4<f64>, alpha: f64) -> Result<Array4<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MivaError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if eps.dim().0 < 2 {
        return Err(dim_err("shared_noise", "need at least two frames"));
    }
    let first = eps.index_axis(Axis(0), 0).to_owned();
    let mut out = eps.clone();
    for mut f in out.axis_iter_mut(Axis(0)).skip(1) {
        f.zip_mut_with(&first, |e, &e1| *e = alpha * e1 + (1.0 - alpha) * *e);
    }
    Ok(out)
}

/// Initial latents at the terminal step from pre-drawn per-frame noise.
///
/// The diffused image `alpha_T x^I + sigma_T eps^1`, repeated over all
/// frames, supplies the low 3-D frequencies and the shared noise the rest;
/// frame 1 is the clean input latent.
pub fn preprocess_with_noise(
    x_image: &Array3<f64>,
    eps: &Array4<f64>,
    config: &PreprocessConfig,
    schedule: &NoiseSchedule,
) -> Result<LatentVideo> {
    config.validate()?;
    let (f, c, h, w) = eps.dim();
    if x_image.dim() != (c, h, w) {
        return Err(dim_err(
            "preprocess",
            format!("image latent {:?} vs noise frame {:?}", x_image.dim(), (c, h, w)),
        ));
    }
    let t = schedule.terminal_step();
    let (a, sg) = (schedule.alpha(t)?, schedule.sigma(t)?);
    let shared = shared_noise(eps, config.alpha_shared)?;
    let eps1 = eps.index_axis(Axis(0), 0);
    let x_t_frame = x_image * a + &(&eps1 * sg);
    let mut x_t = Array4::zeros((f, c, h, w));
    for mut fr in x_t.axis_iter_mut(Axis(0)) {
        fr.assign(&x_t_frame);
    }
    let big_x = dct3_video(&x_t);
    let big_e = dct3_video(&shared);
    let l = box_lowpass((f, h, w), config.lowpass_ratio);
    let mixed = Array4::from_shape_fn((f, c, h, w), |(i, ch, y, x)| {
        let m = l[[i, y, x]];
        big_x[[i, ch, y, x]] * m + big_e[[i, ch, y, x]] * (1.0 - m)
    });
    let mut out = idct3_video(&mixed);
    out.index_axis_mut(Axis(0), 0).assign(x_image);
    LatentVideo::new(out)
}

pub fn preprocess(
    x_image: &Array3<f64>,
    frames: usize,
    config: &PreprocessConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentVideo> {
    let (c, h, w) = x_image.dim();
    let eps = randn4(rng, (frames, c, h, w));
    preprocess_with_noise(x_image, &eps, config, schedule)
}

fn channel_stats(x: ndarray::ArrayView2<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per frame and channel: standardize over space, then impose the
/// reference channel's mean and standard deviation.
pub fn adain_final(frames: &Array4<f64>, reference: &Array3<f64>) -> Result<Array4<f64>> {
    let (_, c, _, _) = frames.dim();
    if reference.dim().0 != c {
        return Err(dim_err("adain_final", "channel counts differ"));
    }
    let refs: Vec<(f64, f64)> = reference.axis_iter(Axis(0)).map(channel_stats).collect();
    let mut out = frames.clone();
    for (fi, mut frame) in out.axis_iter_mut(Axis(0)).enumerate() {
        for (ch, mut plane) in frame.axis_iter_mut(Axis(0)).enumerate() {
            let (m, sd) = channel_stats(plane.view());
            if sd < 1e-12 {
                log::warn!("frame {fi} channel {ch} has zero variance; AdaIN skipped");
                continue;
            }
            let (rm, rsd) = refs[ch];
            plane.mapv_inplace(|v| (v - m) / sd * rsd + rm);
        }
    }
    Ok(out)
}

/// Video latents plus one mask-latent stream per masked adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTensor {
    pub video: LatentVideo,
    pub masks: Vec<Option<Array4<f64>>>,
}

/// Everything fixed for the duration of one sampling run.
pub struct SamplingContext<'a> {
    pub base: &'a BaseModel,
    pub vae: &'a PatchAutoencoder,
    pub schedule: &'a NoiseSchedule,
    pub adapters: Vec<(&'a Miva, f64)>,
    pub prompt: &'a Mat,
    pub mask_steps: MaskStepSet,
    pub epsilon: f64,
    /// Encoded input image, pinned as frame 1 of the video stream.
    pub x_first: Array3<f64>,
    /// Encoded subject mask, pinned as frame 1 of every mask stream.
    pub s_first: Option<Array3<f64>>,
}

impl<'a> SamplingContext<'a> {
    fn attachment<'b>(&'b self, biases: Option<&'b CachedMasks>) -> Attachment<'b> {
        let uses: Vec<AdapterUse<'b>> = self
            .adapters
            .iter()
            .enumerate()
            .map(|(j, (m, w))| AdapterUse {
                miva: m,
                weight: *w,
                cfa_bias: biases.and_then(|b| b.adapters[j].as_deref()),
            })
            .collect();
        match uses.len() {
            0 => Attachment::Base,
            1 => Attachment::Direct(uses[0]),
            _ => Attachment::Composed(uses),
        }
    }

    /// Runs every mask stream once and derives all site biases.
    fn compute_masks(&self, joint: &JointTensor, k: usize, t: usize) -> Result<CachedMasks> {
        let cfg = &self.base.config;
        let side = cfg.latent_size();
        let mut masks = Vec::with_capacity(self.adapters.len());
        let mut mask_eps = Vec::with_capacity(self.adapters.len());
        for (j, (m, _)) in self.adapters.iter().enumerate() {
            match &joint.masks[j] {
                Some(s_t) if m.is_masked() => {
                    let lat = LatentVideo::new(s_t.clone())?;
                    let cond = Conditioning {
                        t,
                        prompt: self.prompt,
                        sa_bias: None,
                        slot: SlotKind::Mask,
                    };
                    let eps = predict_noise(self.base, &lat, cond, &Attachment::Direct(AdapterUse::new(m, 1.0)))?;
                    let pred = one_step_predict_mask(s_t, t, &eps, self.schedule, self.vae)?;
                    masks.push(Some(pred.resized(side, side)?));
                    mask_eps.push(Some(eps));
                }
                _ => {
                    masks.push(None);
                    mask_eps.push(None);
                }
            }
        }
        let predicted: Vec<&MaskSequence> = masks.iter().flatten().collect();
        let star = unified_subject_mask(&predicted, 0.5)?;
        let sa = if predicted.len() == 1 {
            build_attention_bias(predicted[0], side, side, self.epsilon)?
        } else {
            unified_attention_bias(&star, self.epsilon)
        };
        let background = background_mask_for_plain_miva(&star);
        let plain_bias: Arc<BiasSet> = Arc::new(build_attention_bias(&background, side, side, self.epsilon)?);
        let adapters = masks
            .iter()
            .map(|m| match m {
                Some(s) => build_attention_bias(s, side, side, self.epsilon).map(|b| Some(Arc::new(b))),
                None => Ok(Some(plain_bias.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CachedMasks {
            step: k,
            sa: Arc::new(sa),
            adapters,
            masks,
            mask_eps,
        })
    }

    fn pin(&self, video: &mut LatentVideo) {
        video.set_frame(0, &self.x_first);
    }
}

/// One DDIM step of the joint video/mask process.
///
/// At indices in the mask-step set the mask streams are evaluated, masks
/// predicted in one step and all biases rebuilt into the cache; otherwise
/// the cached biases are reused and each mask stream advances with its
/// cached noise estimate, which keeps its clean estimate fixed.
pub fn masked_denoise_step(
    ctx: &SamplingContext<'_>,
    joint: &JointTensor,
    k: usize,
    t: usize,
    t_prev: usize,
    cache: &mut MaskCache,
) -> Result<JointTensor> {
    if ctx.mask_steps.contains(k) {
        let entry = ctx.compute_masks(joint, k, t)?;
        cache.store(entry);
    }
    let biases = cache.read(k)?;
    let cond = Conditioning {
        t,
        prompt: ctx.prompt,
        sa_bias: Some(&biases.sa),
        slot: SlotKind::Video,
    };
    let eps = predict_noise(ctx.base, &joint.video, cond, &ctx.attachment(Some(biases)))?;
    let mut video = LatentVideo::new(ddim_step_array(joint.video.data(), t, t_prev, &eps, ctx.schedule)?)?;
    ctx.pin(&mut video);
    let mut masks = Vec::with_capacity(joint.masks.len());
    for (j, s) in joint.masks.iter().enumerate() {
        masks.push(match (s, &biases.mask_eps[j]) {
            (Some(s_t), Some(e)) => {
                let mut next = ddim_step_array(s_t, t, t_prev, e, ctx.schedule)?;
                if let Some(s1) = &ctx.s_first {
                    next.index_axis_mut(Axis(0), 0).assign(s1);
                }
                Some(next)
            }
            (other, _) => other.clone(),
        });
    }
    Ok(JointTensor { video, masks })
}

/// Output of one animation run.
#[derive(Debug, Clone)]
pub struct Animation {
    /// Pixel frames, `F x 3 x H x W`.
    pub video: Array4<f64>,
    pub latents: LatentVideo,
    /// Final decoded mask of each masked adapter, in adapter order.
    pub masks: Vec<MaskSequence>,
    /// DDIM indices at which masks were computed.
    pub mask_computations: Vec<usize>,
}

/// Animate `image` (`3 x H x W`, values in `[0, 1]`) with the given adapters.
/// `subject_mask` (`1 x H x W`) is required when any adapter is masked.
pub fn animate(
    base: &BaseModel,
    image: &Array3<f64>,
    subject_mask: Option<&Array3<f64>>,
    adapters: &[(&Miva, f64)],
    config: &GenerationConfig,
) -> Result<Animation> {
    config.validate()?;
    let cfg = &base.config;
    if image.dim() != (cfg.pixel_channels, cfg.image_size, cfg.image_size) {
        return Err(dim_err(
            "animate",
            format!(
                "image {:?} does not match model {:?}",
                image.dim(),
                (cfg.pixel_channels, cfg.image_size, cfg.image_size)
            ),
        ));
    }
    for (m, w) in adapters {
        m.check_compatible(base)?;
        if !w.is_finite() {
            return Err(MivaError::NonFinite("adapter weight"));
        }
    }
    let any_masked = adapters.iter().any(|(m, _)| m.is_masked());
    if any_masked && subject_mask.is_none() {
        return Err(MivaError::InvalidArgument(
            "a subject mask is required when a masked adapter is attached".into(),
        ));
    }
    let vae = base.autoencoder()?;
    let schedule = NoiseSchedule::linear(cfg.timesteps, config.steps)?;
    let x_first = vae.encode(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut video = preprocess(&x_first, cfg.frames, &config.preprocess, &schedule, &mut rng)?;

    let s_first = match (any_masked, subject_mask) {
        (true, Some(m)) => Some(vae.encode_mask(m)?),
        _ => None,
    };
    let masks: Vec<Option<Array4<f64>>> = adapters
        .iter()
        .map(|(m, _)| {
            m.is_masked().then(|| {
                let s1 = s_first.as_ref().expect("mask present");
                let mut s = randn4(&mut rng, video.dims());
                s.index_axis_mut(Axis(0), 0).assign(s1);
                s
            })
        })
        .collect();

    let ctx = SamplingContext {
        base,
        vae: &vae,
        schedule: &schedule,
        adapters: adapters.to_vec(),
        prompt: base.null_prompt(),
        mask_steps: MaskStepSet::parse(&config.mask_steps, schedule.sampling_len())?,
        epsilon: config.epsilon_mask,
        x_first: x_first.clone(),
        s_first,
    };
    let mut cache = MaskCache::new();
    let mut joint = JointTensor {
        video: video.clone(),
        masks,
    };
    for (k, (t, t_prev)) in schedule.sampling_pairs().into_iter().enumerate() {
        if any_masked {
            joint = masked_denoise_step(&ctx, &joint, k, t, t_prev, &mut cache)?;
        } else {
            let eps = predict_noise(base, &video, Conditioning::new(t, ctx.prompt), &ctx.attachment(None))?;
            video = LatentVideo::new(ddim_step_array(video.data(), t, t_prev, &eps, &schedule)?)?;
            ctx.pin(&mut video);
        }
    }
    if any_masked {
        video = joint.video.clone();
    }

    let decoded = vae.decode_video(video.data())?;
    let mut pixels = decoded.clone();
    let rest = adain_final(&decoded.slice(s![1.., .., .., ..]).to_owned(), image)?;
    pixels.slice_mut(s![1.., .., .., ..]).assign(&rest);

    let final_masks = joint
        .masks
        .iter()
        .flatten()
        .map(|s| MaskSequence::new(vae.decode_mask_video(s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Animation {
        video: pixels,
        latents: video,
        masks: final_masks,
        mask_computations: cache.computed_at().to_vec(),
    })
}
