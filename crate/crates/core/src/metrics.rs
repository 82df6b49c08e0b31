//! Video quality and motion proxies over pixel frames (`F x C x H x W`,
//! values in `[0, 1]` where stated).

use ndarray::{s, Array1, Array2, Array4, Axis};
use serde::Serialize;

use crate::error::{dim_err, MivaError, Result};
use crate::synth::{segment_generated, SEGMENT_THRESHOLD};

fn require_pairs(frames: &Array4<f64>, context: &'static str) -> Result<()> {
    if frames.dim().0 < 2 {
        return Err(dim_err(context, "need at least two frames"));
    }
    Ok(())
}

fn mean_abs_consecutive(frames: &Array4<f64>) -> f64 {
    let f = frames.dim().0;
    let mut total = 0.0;
    for i in 0..f - 1 {
        let a = frames.index_axis(Axis(0), i);
        let b = frames.index_axis(Axis(0), i + 1);
        total += a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
    }
    total / (f - 1) as f64
}

/// `100 (1 - mean |frame_{i+1} - frame_i|)`.
pub fn temporal_flickering(frames: &Array4<f64>) -> Result<f64> {
    require_pairs(frames, "temporal_flickering")?;
    if frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(MivaError::InvalidArgument(
            "flickering expects pixel values in [0, 1]".into(),
        ));
    }
    Ok(100.0 * (1.0 - mean_abs_consecutive(frames)))
}

/// Mean absolute consecutive-frame difference.
pub fn motion_intensity(frames: &Array4<f64>) -> Result<f64> {
    require_pairs(frames, "motion_intensity")?;
    Ok(mean_abs_consecutive(frames))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Track {
    /// `(x, y)` pixel-center centroid per frame, `None` where the mask is empty.
    pub centroids: Vec<Option<(f64, f64)>>,
    /// Last tracked centroid minus the first.
    pub displacement: (f64, f64),
}

fn centroid(mask: &Array2<f64>) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for ((y, x), &v) in mask.indexed_iter() {
        if v > 0.0 {
            sx += v * (x as f64 + 0.5);
            sy += v * (y as f64 + 0.5);
            n += v;
        }
    }
    (n > 0.0).then(|| (sx / n, sy / n))
}

/// Track centroids of per-frame binary masks (`F x H x W`).
pub fn track_masks(masks: &[Array2<f64>]) -> Result<Track> {
    let centroids: Vec<Option<(f64, f64)>> = masks.iter().map(centroid).collect();
    let found: Vec<(f64, f64)> = centroids.iter().flatten().copied().collect();
    if found.is_empty() || 2 * found.len() < masks.len() {
        return Err(MivaError::UndefinedTrack);
    }
    let (first, last) = (found[0], found[found.len() - 1]);
    Ok(Track {
        centroids,
        displacement: (last.0 - first.0, last.1 - first.1),
    })
}

/// Segment every frame by subject color signature and track the result.
/// `rows` restricts the tracked area to a horizontal band.
pub fn centroid_track(frames: &Array4<f64>, rows: Option<(usize, usize)>) -> Result<Track> {
    let (_, _, h, _) = frames.dim();
    let (lo, hi) = rows.unwrap_or((0, h));
    if lo >= hi || hi > h {
        return Err(MivaError::InvalidArgument(format!(
            "row band {lo}..{hi} outside 0..{h}"
        )));
    }
    let masks = frames
        .axis_iter(Axis(0))
        .map(|f| {
            let mut m = segment_generated(&f.to_owned(), SEGMENT_THRESHOLD)?;
            m.slice_mut(s![..lo, ..]).fill(0.0);
            m.slice_mut(s![hi.., ..]).fill(0.0);
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    track_masks(&masks)
}

fn patch_features(frame: ndarray::ArrayView3<f64>, patch: usize) -> Array1<f64> {
    let (c, h, w) = frame.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array1::zeros(c * gh * gw);
    let area = (patch * patch) as f64;
    for ch in 0..c {
        for gy in 0..gh {
            for gx in 0..gw {
                let cell = frame.slice(s![ch, gy * patch..(gy + 1) * patch, gx * patch..(gx + 1) * patch]);
                out[(ch * gh + gy) * gw + gx] = cell.sum() / area;
            }
        }
    }
    out
}

/// `100 x` mean cosine similarity of patch-averaged features of
/// consecutive frames. Pairs with a zero-norm feature are skipped.
pub fn consistency_score(frames: &Array4<f64>, patch: usize) -> Result<f64> {
    require_pairs(frames, "consistency_score")?;
    let (_, _, h, w) = frames.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(dim_err(
            "consistency_score",
            format!("{h}x{w} not divisible by patch {patch}"),
        ));
    }
    let feats: Vec<Array1<f64>> = frames.axis_iter(Axis(0)).map(|f| patch_features(f, patch)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for pair in feats.windows(2) {
        let (na, nb) = (pair[0].dot(&pair[0]).sqrt(), pair[1].dot(&pair[1]).sqrt());
        if na == 0.0 || nb == 0.0 {
            log::warn!("zero-norm patch feature; pair skipped");
            continue;
        }
        total += pair[0].dot(&pair[1]) / (na * nb);
        pairs += 1;
    }
    if pairs == 0 {
        return Err(MivaError::InvalidArgument(
            "every frame pair had a zero-norm feature".into(),
        ));
    }
    Ok(100.0 * total / pairs as f64)
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub temporal_flickering: f64,
    pub motion_intensity: f64,
    pub consistency: f64,
    pub displacement_x: Option<f64>,
    pub displacement_y: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(frames: &Array4<f64>) -> Result<Self> {
        let clamped = frames.mapv(|v| v.clamp(0.0, 1.0));
        let track = centroid_track(&clamped, None).ok();
        Ok(Self {
            temporal_flickering: temporal_flickering(&clamped)?,
            motion_intensity: motion_intensity(frames)?,
            consistency: consistency_score(frames, 8)?,
            displacement_x: track.as_ref().map(|t| t.displacement.0),
            displacement_y: track.as_ref().map(|t| t.displacement.1),
        })
    }

    pub const CSV_HEADER: &'static str =
        "temporal_flickering,motion_intensity,consistency,displacement_x,displacement_y";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{:.6},{:.6},{:.6},{},{}",
            self.temporal_flickering,
            self.motion_intensity,
            self.consistency,
            opt(self.displacement_x),
            opt(self.displacement_y)
        )
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_pattern, MotionPattern, PatternKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flickering_examples() {
        let same = Array4::from_elem((3, 3, 4, 4), 0.3);
        assert_eq!(temporal_flickering(&same).unwrap(), 100.0);
        let alt = Array4::from_shape_fn((4, 1, 2, 2), |(f, ..)| (f % 2) as f64);
        assert_eq!(temporal_flickering(&alt).unwrap(), 0.0);
        let ramp = Array4::from_shape_fn((5, 1, 2, 2), |(f, ..)| 0.1 * f as f64);
        assert!((temporal_flickering(&ramp).unwrap() - 90.0).abs() < 1e-12);
        assert!(temporal_flickering(&Array4::from_elem((2, 1, 1, 1), 1.5)).is_err());
        assert!(temporal_flickering(&Array4::zeros((1, 1, 1, 1))).is_err());
    }

    #[test]
    fn intensity_examples() {
        assert_eq!(motion_intensity(&Array4::zeros((3, 1, 4, 4))).unwrap(), 0.0);
        let mut toggle = Array4::zeros((4, 1, 3, 5));
        for f in (1..4).step_by(2) {
            toggle[[f, 0, 1, 2]] = 1.0;
        }
        assert!((motion_intensity(&toggle).unwrap() - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn intensity_grows_with_speed() {
        let mut prev = 0.0;
        for speed in [1.0, 2.0, 3.0] {
            let p = MotionPattern::preset(PatternKind::TranslateRight)
                .with_speed(speed)
                .with_origin(4, 20);
            let (video, _) = render_pattern(&p, 1, 8, 64, 64).unwrap();
            let m = motion_intensity(&video).unwrap();
            assert!(m > prev);
            prev = m;
        }
    }

    #[test]
    fn centroid_examples() {
        let p = MotionPattern::preset(PatternKind::TranslateRight).with_origin(10, 20);
        let (video, _) = render_pattern(&p, 1, 8, 64, 64).unwrap();
        let tr = centroid_track(&video, None).unwrap();
        assert_eq!(tr.displacement, (14.0, 0.0));

        let still = MotionPattern::preset(PatternKind::TranslateRight).with_speed(0.0);
        let (video, _) = render_pattern(&still, 2, 8, 64, 64).unwrap();
        assert_eq!(centroid_track(&video, None).unwrap().displacement, (0.0, 0.0));

        let rain = MotionPattern::preset(PatternKind::FallDots);
        let (video, _) = render_pattern(&rain, 3, 8, 64, 64).unwrap();
        assert!(centroid_track(&video, None).unwrap().displacement.1 > 0.0);

        let empty = Array4::from_elem((4, 3, 8, 8), 0.2);
        assert!(matches!(centroid_track(&empty, None), Err(MivaError::UndefinedTrack)));
        let mut sparse = vec![Array2::zeros((4, 4)); 5];
        sparse[0][[1, 1]] = 1.0;
        sparse[4][[1, 2]] = 1.0;
        assert!(matches!(track_masks(&sparse), Err(MivaError::UndefinedTrack)));
        sparse[2][[1, 1]] = 1.0;
        assert_eq!(track_masks(&sparse).unwrap().displacement, (1.0, 0.0));
    }

    #[test]
    fn consistency_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let f = Array4::from_shape_simple_fn((1, 3, 16, 16), || r.random_range(0.0..1.0));
        let same = ndarray::concatenate(Axis(0), &[f.view(), f.view()]).unwrap();
        assert!((consistency_score(&same, 8).unwrap() - 100.0).abs() < 1e-9);
        let neg = ndarray::concatenate(Axis(0), &[f.view(), (-&f).view()]).unwrap();
        assert!((consistency_score(&neg, 8).unwrap() + 100.0).abs() < 1e-9);

        // Patch-constant frames: average pooling is a scaled isometry on
        // them, so Gram-Schmidt in pixel space yields orthogonal features.
        let cells = |r: &mut ChaCha8Rng| {
            let g = Array4::from_shape_simple_fn((1, 3, 2, 2), || r.random_range(-1.0..1.0));
            Array4::from_shape_fn((1, 3, 16, 16), |(_, c, y, x)| g[[0, c, y / 8, x / 8]])
        };
        let a = cells(&mut r);
        let b = cells(&mut r);
        let proj = (&a * &b).sum() / (&a * &a).sum();
        let b_orth = &b - &(&a * proj);
        let pair = ndarray::concatenate(Axis(0), &[a.view(), b_orth.view()]).unwrap();
        assert!(consistency_score(&pair, 8).unwrap().abs() < 1e-6);

        assert!(consistency_score(&Array4::zeros((2, 1, 10, 10)), 8).is_err());
    }

    proptest! {
        #[test]
        fn reversal_keeps_pairwise_metrics(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let v = Array4::from_shape_simple_fn((4, 1, 3, 3), || r.random_range(0.0..1.0));
            let rev = v.slice(s![..;-1, .., .., ..]).to_owned();
            prop_assert!((motion_intensity(&v).unwrap() - motion_intensity(&rev).unwrap()).abs() < 1e-12);
            prop_assert!((temporal_flickering(&v).unwrap() - temporal_flickering(&rev).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn shuffling_changes_intensity(seed in 0u64..1000) {
            // Frames 0, 0.1, 0.2, 0.3 reordered to 0, 0.2, 0.1, 0.3 raise
            // the mean step regardless of spatial content.
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let base = r.random_range(0.0..0.5);
            let v = Array4::from_shape_fn((4, 1, 2, 2), |(f, ..)| base + 0.1 * f as f64);
            let mut shuffled = v.clone();
            shuffled.index_axis_mut(Axis(0), 1).assign(&v.index_axis(Axis(0), 2));
            shuffled.index_axis_mut(Axis(0), 2).assign(&v.index_axis(Axis(0), 1));
            prop_assert!(motion_intensity(&shuffled).unwrap() > motion_intensity(&v).unwrap());
        }
    }

    #[test]
    fn mean_std_basic() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
