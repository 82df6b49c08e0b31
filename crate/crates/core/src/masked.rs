//! Mask-guided attention: subject-confidence maps, the attention bias they
//! induce, one-step mask prediction from the mask stream, the cosine
//! ground-truth dropout schedule, and cached sparse mask generation.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{Array2, Array4, Axis};

use crate::error::{dim_err, MivaError, Result};
use crate::schedule::{predict_x0, NoiseSchedule};
use crate::tensor::Mat;
use crate::vae::PatchAutoencoder;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Per-frame subject confidence maps, `F x 1 x H x W`, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    maps: Array4<f64>,
}

impl MaskSequence {
    /// Clamps out-of-range entries into `[0, 1]`, logging how many moved.
    pub fn new(mut maps: Array4<f64>) -> Result<Self> {
        if maps.dim().1 != 1 {
            return Err(dim_err("MaskSequence", "expected a single channel"));
        }
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(MivaError::NonFinite("mask sequence"));
        }
        let mut clamped = 0usize;
        maps.mapv_inplace(|v| {
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            v.clamp(0.0, 1.0)
        });
        if clamped > 0 {
            log::debug!("clamped {clamped} mask confidences into [0, 1]");
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Array4<f64> {
        &self.maps
    }

    pub fn frames(&self) -> usize {
        self.maps.dim().0
    }

    pub fn height(&self) -> usize {
        self.maps.dim().2
    }

    pub fn width(&self) -> usize {
        self.maps.dim().3
    }

    pub fn frame(&self, i: usize) -> Array2<f64> {
        self.maps.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned()
    }

    /// Every frame bilinearly resized to `rows x cols`.
    pub fn resized(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(dim_err("resize mask", "zero-area target"));
        }
        let mut out = Array4::zeros((self.frames(), 1, rows, cols));
        for f in 0..self.frames() {
            let r = resize_bilinear(&self.frame(f), rows, cols)?;
            out.index_axis_mut(Axis(0), f).index_axis_mut(Axis(0), 0).assign(&r);
        }
        Ok(Self { maps: out })
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let (h, w) = src.dim();
    if h == 0 || w == 0 || rows == 0 || cols == 0 {
        return Err(dim_err("resize_bilinear", "zero-area source or target"));
    }
    let coord = |o: usize, out_len: usize, in_len: usize| {
        let c = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
        let c = c.clamp(0.0, (in_len - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, c - lo as f64)
    };
    Ok(Array2::from_shape_fn((rows, cols), |(y, x)| {
        let (y0, y1, fy) = coord(y, rows, h);
        let (x0, x1, fx) = coord(x, cols, w);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

fn entry(sp: f64, sq: f64, eps: f64) -> f64 {
    (sp * sq + (1.0 - sp) * (1.0 - sq) + eps).ln()
}

/// `log(s_p s_q + (1 - s_p)(1 - s_q) + eps)`; confidences are clamped.
pub fn attention_mask_entry(s_p: f64, s_q: f64, eps: f64) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 || !eps.is_finite() {
        return Err(MivaError::InvalidArgument(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    if !s_p.is_finite() || !s_q.is_finite() {
        return Err(MivaError::NonFinite("mask confidence"));
    }
    if !(0.0..=1.0).contains(&s_p) || !(0.0..=1.0).contains(&s_q) {
        log::warn!("mask confidences ({s_p}, {s_q}) outside [0, 1]; clamping");
    }
    Ok(entry(s_p.clamp(0.0, 1.0), s_q.clamp(0.0, 1.0), eps))
}

/// Bias block between the tokens of two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskBias {
    pub bias: Mat,
}

impl AttentionMaskBias {
    /// Rows index query positions (row-major over the frame grid), columns
    /// index key positions.
    pub fn between(query: &Array2<f64>, key: &Array2<f64>, eps: f64) -> Self {
        let q: Vec<f64> = query.iter().cloned().collect();
        let k: Vec<f64> = key.iter().cloned().collect();
        Self {
            bias: Mat::from_shape_fn((q.len(), k.len()), |(i, j)| entry(q[i], k[j], eps)),
        }
    }

    fn from_labels(query: &Array2<u8>, key: &Array2<u8>, eps: f64) -> Self {
        let q: Vec<u8> = query.iter().cloned().collect();
        let k: Vec<u8> = key.iter().cloned().collect();
        let (same, diff) = ((1.0 + eps).ln(), eps.ln());
        Self {
            bias: Mat::from_shape_fn((q.len(), k.len()), |(i, j)| if q[i] == k[j] { same } else { diff }),
        }
    }
}

type Blocks = Arc<Vec<Arc<Mat>>>;

/// Biases for every spatial attention site of one stream: per query frame
/// `i`, the block against frame `i` (self-attention), frame 1, and frame
/// `i - 1` (frame 1 references itself).
#[derive(Debug, Clone)]
pub struct BiasSet {
    pub sa: Blocks,
    pub first: Blocks,
    pub prev: Blocks,
}

impl BiasSet {
    fn from_frames<F: Fn(usize, usize) -> Mat>(frames: usize, block: F) -> Self {
        let sa: Vec<Arc<Mat>> = (0..frames).map(|i| Arc::new(block(i, i))).collect();
        let first: Vec<Arc<Mat>> = (0..frames)
            .map(|i| if i == 0 { sa[0].clone() } else { Arc::new(block(i, 0)) })
            .collect();
        let prev: Vec<Arc<Mat>> = (0..frames)
            .map(|i| {
                if i == 0 {
                    sa[0].clone()
                } else {
                    Arc::new(block(i, i - 1))
                }
            })
            .collect();
        Self {
            sa: Arc::new(sa),
            first: Arc::new(first),
            prev: Arc::new(prev),
        }
    }

    pub fn frames(&self) -> usize {
        self.sa.len()
    }
}

/// Resize `s` to the site grid, then evaluate the entry for all token pairs
/// of every frame pair used by the spatial sites.
pub fn build_attention_bias(s: &MaskSequence, target_rows: usize, target_cols: usize, eps: f64) -> Result<BiasSet> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(MivaError::InvalidArgument(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let r = if (s.height(), s.width()) == (target_rows, target_cols) {
        s.clone()
    } else {
        s.resized(target_rows, target_cols)?
    };
    let frames: Vec<Array2<f64>> = (0..r.frames()).map(|f| r.frame(f)).collect();
    Ok(BiasSet::from_frames(r.frames(), |i, j| {
        AttentionMaskBias::between(&frames[i], &frames[j], eps).bias
    }))
}

/// One-step clean estimate of the mask latents, decoded and clamped.
pub fn one_step_predict_mask(
    s_t: &Array4<f64>,
    t: usize,
    eps_hat: &Array4<f64>,
    schedule: &NoiseSchedule,
    vae: &PatchAutoencoder,
) -> Result<MaskSequence> {
    let s0 = predict_x0(s_t, t, eps_hat, schedule)?;
    MaskSequence::new(vae.decode_mask_video(&s0)?)
}

/// Probability of substituting ground-truth masks: `(1 + cos(pi t/t_max))/2`.
pub fn dropout_prob(t_train: usize, t_max: usize) -> Result<f64> {
    if t_max == 0 {
        return Err(MivaError::InvalidArgument("t_max must be positive".into()));
    }
    if t_train > t_max {
        return Err(MivaError::InvalidArgument(format!(
            "iteration {t_train} beyond t_max {t_max}"
        )));
    }
    if t_train == t_max {
        return Ok(0.0);
    }
    if 2 * t_train == t_max {
        return Ok(0.5);
    }
    Ok(0.5 * (1.0 + (std::f64::consts::PI * t_train as f64 / t_max as f64).cos()))
}

/// Per-cell labels in `{0, 1, ..., n}`, 0 being background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedMask {
    pub labels: ndarray::Array3<u8>,
}

/// DDIM indices at which the mask stream is evaluated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStepSet {
    steps: BTreeSet<usize>,
}

impl MaskStepSet {
    pub fn all(count: usize) -> Self {
        Self {
            steps: (0..count).collect(),
        }
    }

    pub fn from_steps<I: IntoIterator<Item = usize>>(steps: I) -> Self {
        Self {
            steps: steps.into_iter().collect(),
        }
    }

    /// `start:end:step` (end exclusive), `all`, or a comma list.
    pub fn parse(spec: &str, count: usize) -> Result<Self> {
        let bad = |m: String| MivaError::Config {
            key: "mask_steps".into(),
            message: m,
        };
        let spec = spec.trim();
        if spec == "all" {
            return Ok(Self::all(count));
        }
        let steps: BTreeSet<usize> = if spec.contains(':') {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 3 {
                return Err(bad(format!("expected start:end:step, got `{spec}`")));
            }
            let nums = parts
                .iter()
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("`{spec}`: {e}")))?;
            if nums[2] == 0 {
                return Err(bad("step must be positive".into()));
            }
            (nums[0]..nums[1]).step_by(nums[2]).collect()
        } else {
            spec.split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("`{spec}`: {e}")))?
        };
        if steps.is_empty() {
            return Err(bad("empty step set".into()));
        }
        if let Some(&s) = steps.iter().find(|&&s| s >= count) {
            return Err(bad(format!("step {s} beyond {count} sampling steps")));
        }
        Ok(Self { steps })
    }

    pub fn contains(&self, k: usize) -> bool {
        self.steps.contains(&k)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().cloned()
    }
}

/// Biases and mask-stream state computed at the latest mask-generation step.
#[derive(Debug, Clone)]
pub struct CachedMasks {
    pub step: usize,
    /// Bias for the base self-attention of the video stream.
    pub sa: Arc<BiasSet>,
    /// Bias for each adapter's CFA sites, in adapter order.
    pub adapters: Vec<Option<Arc<BiasSet>>>,
    /// Predicted subject masks, one per masked adapter (`None` for plain).
    pub masks: Vec<Option<MaskSequence>>,
    /// Mask-stream noise predictions, reused to advance the mask latents.
    pub mask_eps: Vec<Option<Array4<f64>>>,
}

#[derive(Debug, Clone, Default)]
pub struct MaskCache {
    current: Option<CachedMasks>,
    computed_at: Vec<usize>,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, entry: CachedMasks) {
        self.computed_at.push(entry.step);
        self.current = Some(entry);
    }

    /// Cached entry for a non-generation step.
    pub fn read(&self, k: usize) -> Result<&CachedMasks> {
        self.current.as_ref().ok_or(MivaError::EmptyMaskCache(k))
    }

    /// DDIM indices at which masks were (re)computed.
    pub fn computed_at(&self) -> &[usize] {
        &self.computed_at
    }
}

/// Cell label 0 unless the best confidence exceeds `threshold`; ties go to
/// the largest index.
pub fn unified_subject_mask(masks: &[&MaskSequence], threshold: f64) -> Result<UnifiedMask> {
    let Some(first) = masks.first() else {
        return Err(MivaError::InvalidArgument("no masks to unify".into()));
    };
    let dim = first.maps().dim();
    if masks.iter().any(|m| m.maps().dim() != dim) {
        return Err(dim_err("unified_subject_mask", "mask sequences differ in shape"));
    }
    if masks.len() > u8::MAX as usize {
        return Err(MivaError::InvalidArgument("too many adapters".into()));
    }
    let (f, _, h, w) = dim;
    let labels = ndarray::Array3::from_shape_fn((f, h, w), |(i, y, x)| {
        let mut best = threshold;
        let mut label = 0u8;
        for (j, m) in masks.iter().enumerate() {
            let v = m.maps()[[i, 0, y, x]];
            if v > threshold && v >= best {
                best = v;
                label = j as u8 + 1;
            }
        }
        label
    });
    Ok(UnifiedMask { labels })
}

/// `log(1[S*_p = S*_q] + eps)` for every frame pair used by the sites.
pub fn unified_attention_bias(s_star: &UnifiedMask, eps: f64) -> BiasSet {
    let frames: Vec<Array2<u8>> = s_star.labels.axis_iter(Axis(0)).map(|v| v.to_owned()).collect();
    BiasSet::from_frames(frames.len(), |i, j| {
        AttentionMaskBias::from_labels(&frames[i], &frames[j], eps).bias
    })
}

/// `1(S* = 0)` as a confidence map for plain adapters.
pub fn background_mask_for_plain_miva(s_star: &UnifiedMask) -> MaskSequence {
    let (f, h, w) = s_star.labels.dim();
    let maps = Array4::from_shape_fn(
        (f, 1, h, w),
        |(i, _, y, x)| {
            if s_star.labels[[i, y, x]] == 0 {
                1.0
            } else {
                0.0
            }
        },
    );
    MaskSequence { maps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn entry_reference_values() {
        let e = 1e-6;
        assert!((attention_mask_entry(1.0, 1.0, e).unwrap() - 9.999995e-7).abs() < 1e-12);
        assert!((attention_mask_entry(1.0, 0.0, e).unwrap() + 13.815510557964274).abs() < 1e-9);
        assert!((attention_mask_entry(0.5, 0.5, e).unwrap() + 0.6931451805).abs() < 1e-8);
        assert!(attention_mask_entry(0.5, 0.5, 0.0).is_err());
        // Out-of-range inputs are clamped rather than rejected.
        assert_eq!(
            attention_mask_entry(1.3, -0.2, e).unwrap(),
            attention_mask_entry(1.0, 0.0, e).unwrap()
        );
    }

    proptest! {
        #[test]
        fn entry_symmetric_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let e = 1e-6;
            let x = attention_mask_entry(a, b, e).unwrap();
            prop_assert_eq!(x, attention_mask_entry(b, a, e).unwrap());
            prop_assert!(x >= e.ln() - 1e-12 && x <= (1.0 + e).ln() + 1e-12);
        }

        #[test]
        fn entry_monotone_above_half(q in 0.51f64..=1.0, a in 0.5f64..=1.0, b in 0.5f64..=1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(attention_mask_entry(lo, q, 1e-6).unwrap() <= attention_mask_entry(hi, q, 1e-6).unwrap());
        }
    }

    fn seq(frames: Vec<Array2<f64>>) -> MaskSequence {
        let (h, w) = frames[0].dim();
        let mut m = Array4::zeros((frames.len(), 1, h, w));
        for (i, f) in frames.iter().enumerate() {
            m.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(f);
        }
        MaskSequence::new(m).unwrap()
    }

    #[test]
    fn binary_mask_bias_partitions_pairs() {
        let e = 1e-6;
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let b = build_attention_bias(&seq(vec![f.clone(), f.clone()]), 2, 2, e).unwrap();
        let flat: Vec<f64> = f.iter().cloned().collect();
        for i in 0..4 {
            for j in 0..4 {
                let want = if flat[i] == flat[j] { (1.0 + e).ln() } else { e.ln() };
                assert_eq!(b.sa[1][[i, j]], want);
            }
        }
        let ones = build_attention_bias(&seq(vec![Array2::ones((3, 3)); 2]), 3, 3, e).unwrap();
        assert!(ones.prev[1].iter().all(|v| *v == (1.0 + e).ln()));
    }

    #[test]
    fn downsampled_half_plane_boundary() {
        // Rows 0..5 set; 2x downsampling puts output row 2 at source 4.5,
        // halfway across the edge.
        let mut m = Array2::zeros((8, 8));
        m.slice_mut(ndarray::s![0..5, ..]).fill(1.0);
        let r = resize_bilinear(&m, 4, 4).unwrap();
        assert_eq!(r.row(0).to_vec(), vec![1.0; 4]);
        assert_eq!(r.row(2).to_vec(), vec![0.5; 4]);
        assert_eq!(r.row(3).to_vec(), vec![0.0; 4]);
        let b = build_attention_bias(&seq(vec![m.clone(), m]), 4, 4, 1e-6).unwrap();
        assert!((b.sa[0][[8, 8]] - 0.500001f64.ln()).abs() < 1e-12);
        assert!(resize_bilinear(&Array2::zeros((2, 2)), 0, 3).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = array![[0.1, 0.7], [0.3, 0.9]];
        assert_eq!(resize_bilinear(&m, 2, 2).unwrap(), m);
        let c = Array2::from_elem((5, 7), 0.4);
        let r = resize_bilinear(&c, 3, 11).unwrap();
        assert!(r.iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn sa_blocks_symmetric() {
        let m = array![[0.2, 0.9, 0.4], [0.0, 0.6, 1.0]];
        let b = build_attention_bias(&seq(vec![m.clone(), m]), 2, 3, 1e-6).unwrap();
        let s = b.sa[0].as_ref();
        assert!(max_abs_diff(s, &s.t().to_owned()) == 0.0);
    }

    #[test]
    fn one_step_prediction_cases() {
        let vae = PatchAutoencoder::new(2, 3, 4, 1).unwrap();
        let sched = NoiseSchedule::linear(1000, 50).unwrap();
        let mut mask = Array3::zeros((1, 4, 4));
        mask.slice_mut(ndarray::s![0, 0..2, ..]).fill(1.0);
        let lat = vae.encode_mask(&mask).unwrap();
        let s0 = crate::vae::stack(&[lat.clone(), lat]).unwrap();
        let eps = Array4::from_shape_fn(s0.dim(), |(a, b, c, d)| ((a + 2 * b + 3 * c + d) as f64).sin());
        let st = crate::schedule::forward_diffuse_array(&s0, 600, &eps, &sched).unwrap();
        let got = one_step_predict_mask(&st, 600, &eps, &sched, &vae).unwrap();
        let want = vae.decode_mask_video(&s0).unwrap();
        assert!(max_abs_diff(got.maps(), &want) <= 1e-5);

        let direct = one_step_predict_mask(&s0, 0, &eps, &sched, &vae).unwrap();
        assert!(max_abs_diff(direct.maps(), &want) <= 1e-12);
    }

    #[test]
    fn one_step_scalar_case() {
        let sched = NoiseSchedule::from_alphas(vec![1.0, 0.8], vec![0, 1]).unwrap();
        let st = Array4::from_elem((2, 1, 1, 1), 1.1);
        let eps = Array4::from_elem((2, 1, 1, 1), 0.5);
        let x0 = predict_x0(&st, 1, &eps, &sched).unwrap();
        assert!((x0[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_schedule() {
        assert_eq!(dropout_prob(0, 2000).unwrap(), 1.0);
        assert_eq!(dropout_prob(2000, 2000).unwrap(), 0.0);
        assert_eq!(dropout_prob(1000, 2000).unwrap(), 0.5);
        assert!(dropout_prob(0, 0).is_err());
        let mut last = 1.0;
        for t in 0..=100 {
            let p = dropout_prob(t, 100).unwrap();
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn mask_step_parsing() {
        let s = MaskStepSet::parse("0:40:5", 50).unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 5, 10, 15, 20, 25, 30, 35]);
        assert_eq!(MaskStepSet::parse("all", 50).unwrap().len(), 50);
        assert_eq!(MaskStepSet::parse("0, 3", 50).unwrap().len(), 2);
        assert!(MaskStepSet::parse("0:40", 50).is_err());
        assert!(MaskStepSet::parse("0:60:5", 50).is_err());
        assert!(MaskStepSet::parse("x", 50).is_err());
    }

    #[test]
    fn cache_protocol() {
        let mut c = MaskCache::new();
        assert!(matches!(c.read(3), Err(MivaError::EmptyMaskCache(3))));
        let b = Arc::new(unified_attention_bias(
            &UnifiedMask {
                labels: ndarray::Array3::zeros((2, 1, 1)),
            },
            1e-6,
        ));
        c.store(CachedMasks {
            step: 0,
            sa: b,
            adapters: vec![],
            masks: vec![],
            mask_eps: vec![],
        });
        assert_eq!(c.read(4).unwrap().step, 0);
        assert_eq!(c.computed_at(), &[0]);
    }

    fn single(v: f64) -> MaskSequence {
        MaskSequence::new(Array4::from_elem((1, 1, 1, 1), v)).unwrap()
    }

    #[test]
    fn unified_labels() {
        let (a, b) = (single(0.9), single(0.2));
        assert_eq!(unified_subject_mask(&[&a, &b], 0.5).unwrap().labels[[0, 0, 0]], 1);
        let (a, b) = (single(0.8), single(0.8));
        assert_eq!(unified_subject_mask(&[&a, &b], 0.5).unwrap().labels[[0, 0, 0]], 2);
        let z = single(0.0);
        assert_eq!(unified_subject_mask(&[&z, &z], 0.5).unwrap().labels[[0, 0, 0]], 0);
        let half = single(0.5);
        assert_eq!(unified_subject_mask(&[&half], 0.5).unwrap().labels[[0, 0, 0]], 0);
        assert!(unified_subject_mask(&[], 0.5).is_err());
    }

    #[test]
    fn unified_bias_matches_binarized_single_mask() {
        let m = array![[0.9, 0.1, 0.7], [0.2, 0.6, 0.0]];
        let s = seq(vec![m.clone(), m.mapv(|v| 1.0 - v)]);
        let star = unified_subject_mask(&[&s], 0.5).unwrap();
        let got = unified_attention_bias(&star, 1e-6);
        let bin = MaskSequence::new(s.maps().mapv(|v| if v > 0.5 { 1.0 } else { 0.0 })).unwrap();
        let want = build_attention_bias(&bin, 2, 3, 1e-6).unwrap();
        for k in 0..2 {
            assert_eq!(*got.sa[k], *want.sa[k]);
            assert_eq!(*got.first[k], *want.first[k]);
            assert_eq!(*got.prev[k], *want.prev[k]);
        }
        assert_eq!(got.sa[0][[0, 1]], 1e-6f64.ln());
    }

    #[test]
    fn background_mask_inverts_labels() {
        let labels = ndarray::Array3::from_shape_fn((1, 2, 2), |(_, y, x)| ((y + x) % 2) as u8);
        let bg = background_mask_for_plain_miva(&UnifiedMask { labels });
        assert_eq!(bg.frame(0), array![[1.0, 0.0], [0.0, 1.0]]);
        let all_bg = background_mask_for_plain_miva(&UnifiedMask {
            labels: ndarray::Array3::zeros((1, 2, 2)),
        });
        assert!(all_bg.maps().iter().all(|v| *v == 1.0));
        let all_fg = background_mask_for_plain_miva(&UnifiedMask {
            labels: ndarray::Array3::from_elem((1, 2, 2), 2),
        });
        assert!(all_fg.maps().iter().all(|v| *v == 0.0));
    }
}
