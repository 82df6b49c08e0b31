//! Synthetic motion-pattern clips with exact subject masks, and the
//! camera-motion clip synthesizer.
//!
//! Subjects are drawn in a reserved color signature (channel 0 exceeds the
//! other two by at least 0.5) over smooth backgrounds whose channel 0 stays
//! below the others, so a fixed threshold on `c0 - max(c1, c2)` segments any
//! frame.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MivaError, Result};
use crate::masked::resize_bilinear;

pub const SUBJECT_COLOR: [f64; 3] = [0.9, 0.15, 0.15];
pub const SEGMENT_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    TranslateRight,
    TranslateUp,
    Bounce,
    Expand,
    FallDots,
    RotateBar,
}

impl PatternKind {
    pub const ALL: [PatternKind; 6] = [
        PatternKind::TranslateRight,
        PatternKind::TranslateUp,
        PatternKind::Bounce,
        PatternKind::Expand,
        PatternKind::FallDots,
        PatternKind::RotateBar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::TranslateRight => "translate_right",
            PatternKind::TranslateUp => "translate_up",
            PatternKind::Bounce => "bounce",
            PatternKind::Expand => "expand",
            PatternKind::FallDots => "fall_dots",
            PatternKind::RotateBar => "rotate_bar",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| MivaError::InvalidArgument(format!("unknown motion pattern `{name}`")))
    }
}

/// Where the subject may be placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Full,
    UpperHalf,
    LowerHalf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionPattern {
    pub kind: PatternKind,
    /// Pixels per frame (radians per frame for `RotateBar`).
    pub speed: f64,
    /// Side length of squares and dots, radius of the expanding disc,
    /// length of the rotating bar.
    pub size: usize,
    pub dots: usize,
    pub color: [f64; 3],
    pub region: Region,
    /// Fixed top-left start `(x, y)` instead of a seeded one.
    pub origin: Option<(usize, usize)>,
}

impl MotionPattern {
    pub fn preset(kind: PatternKind) -> Self {
        let (speed, size) = match kind {
            PatternKind::TranslateRight | PatternKind::TranslateUp => (2.0, 12),
            PatternKind::Bounce => (4.0, 10),
            PatternKind::Expand => (2.0, 5),
            PatternKind::FallDots => (3.0, 4),
            PatternKind::RotateBar => (0.25, 28),
        };
        Self {
            kind,
            speed,
            size,
            dots: if kind == PatternKind::FallDots { 4 } else { 1 },
            color: SUBJECT_COLOR,
            region: Region::Full,
            origin: None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = region;
        self
    }

    pub fn with_origin(mut self, x: usize, y: usize) -> Self {
        self.origin = Some((x, y));
        self
    }

    pub fn with_speed(mut self, speed: f64) -> Self {
        self.speed = speed;
        self
    }

    /// Presets are sized for 64 px frames; rescale subject size and speed
    /// to another frame size. Identity at 64.
    pub fn scaled_to(mut self, image_size: usize) -> Self {
        let k = image_size as f64 / PRESET_SIZE as f64;
        self.size = ((self.size as f64 * k).round() as usize).max(1);
        self.speed *= k;
        self
    }
}

const PRESET_SIZE: usize = 64;

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
    let g0 = rng.random_range(0.35..0.55);
    let b0 = rng.random_range(0.35..0.55);
    let gx = rng.random_range(-0.2..0.2);
    let gy = rng.random_range(-0.2..0.2);
    let bx = rng.random_range(-0.2..0.2);
    let by = rng.random_range(-0.2..0.2);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
        match c {
            0 => 0.1,
            1 => g0 + gx * u + gy * v,
            _ => b0 + bx * u + by * v,
        }
    })
}

fn span(region: Region, h: usize) -> (usize, usize) {
    match region {
        Region::Full => (0, h),
        Region::UpperHalf => (0, h / 2),
        Region::LowerHalf => (h / 2, h),
    }
}

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Result<usize> {
    if hi < lo {
        return Err(MivaError::InvalidArgument("subject does not fit in the frame".into()));
    }
    Ok(rng.random_range(lo..=hi))
}

/// Per-frame subject support of one pattern.
fn trajectory(p: &MotionPattern, rng: &mut ChaCha8Rng, frames: usize, h: usize, w: usize) -> Result<Vec<Array2<bool>>> {
    let n = frames.saturating_sub(1) as f64;
    let size = p.size;
    if size == 0 || size > h || size > w {
        return Err(MivaError::InvalidArgument(format!(
            "subject size {size} larger than {h}x{w} frame"
        )));
    }
    let (y_lo, y_hi) = span(p.region, h);
    let travel = (p.speed * n).ceil() as usize;
    let square = |x: i64, y: i64| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (r, c) = (r as i64, c as i64);
            c >= x && c < x + size as i64 && r >= y && r < y + size as i64
        })
    };
    let mut out = Vec::with_capacity(frames);
    match p.kind {
        PatternKind::TranslateRight | PatternKind::TranslateUp => {
            let right = p.kind == PatternKind::TranslateRight;
            let (x0, y0) = match p.origin {
                Some(o) => o,
                None if right => (
                    pick(rng, 2, w.saturating_sub(size + travel + 2))?,
                    pick(rng, y_lo, y_hi.saturating_sub(size))?,
                ),
                None => (
                    pick(rng, 2, w.saturating_sub(size + 2))?,
                    pick(rng, y_lo + travel, y_hi.saturating_sub(size))?,
                ),
            };
            for k in 0..frames {
                let d = (p.speed * k as f64).round() as i64;
                let (x, y) = if right {
                    (x0 as i64 + d, y0 as i64)
                } else {
                    (x0 as i64, y0 as i64 - d)
                };
                if x < 0 || y < 0 || x as usize + size > w || (y as usize) + size > h {
                    return Err(MivaError::InvalidArgument("subject leaves the frame".into()));
                }
                out.push(square(x, y));
            }
        }
        PatternKind::Bounce => {
            let (mut x, mut y) = match p.origin {
                Some((x, y)) => (x as f64, y as f64),
                None => (
                    pick(rng, 0, w - size)? as f64,
                    pick(rng, y_lo, y_hi.saturating_sub(size))? as f64,
                ),
            };
            let mut vx = if rng.random_bool(0.5) { p.speed } else { -p.speed };
            let mut vy = 0.75 * if rng.random_bool(0.5) { p.speed } else { -p.speed };
            let (xmax, ymin, ymax) = ((w - size) as f64, y_lo as f64, (y_hi.saturating_sub(size)) as f64);
            for _ in 0..frames {
                out.push(square(x.round() as i64, y.round() as i64));
                x += vx;
                y += vy;
                if x < 0.0 || x > xmax {
                    vx = -vx;
                    x = x.clamp(0.0, xmax);
                }
                if y < ymin || y > ymax {
                    vy = -vy;
                    y = y.clamp(ymin, ymax);
                }
            }
        }
        PatternKind::Expand => {
            let r_max = size as f64 + p.speed * n;
            let margin = r_max.ceil() as usize + 1;
            let (cx, cy) = match p.origin {
                Some(o) => o,
                None => (
                    pick(rng, margin, w.saturating_sub(margin))?,
                    pick(rng, y_lo + margin, y_hi.saturating_sub(margin))?,
                ),
            };
            for k in 0..frames {
                let r = size as f64 + p.speed * k as f64;
                out.push(Array2::from_shape_fn((h, w), |(y, x)| {
                    let (dx, dy) = (x as f64 + 0.5 - cx as f64, y as f64 + 0.5 - cy as f64);
                    dx * dx + dy * dy <= r * r
                }));
            }
        }
        PatternKind::FallDots => {
            let mut dots = Vec::with_capacity(p.dots);
            for _ in 0..p.dots {
                let x = pick(rng, 0, w - size)?;
                let y = pick(rng, y_lo, y_hi.saturating_sub(size + travel))?;
                dots.push((x as i64, y as i64));
            }
            if let Some((ox, oy)) = p.origin {
                dots[0] = (ox as i64, oy as i64);
            }
            for k in 0..frames {
                let d = (p.speed * k as f64).round() as i64;
                let mut m = Array2::from_elem((h, w), false);
                for &(x, y) in &dots {
                    m.zip_mut_with(&square(x, y + d), |a, b| *a |= *b);
                }
                out.push(m);
            }
        }
        PatternKind::RotateBar => {
            let half = size as f64 / 2.0;
            let margin = half.ceil() as usize + 1;
            let (cx, cy) = match p.origin {
                Some(o) => o,
                None => (
                    pick(rng, margin, w.saturating_sub(margin))?,
                    pick(rng, y_lo + margin, y_hi.saturating_sub(margin))?,
                ),
            };
            let theta0 = rng.random_range(0.0..std::f64::consts::PI);
            for k in 0..frames {
                let th = theta0 + p.speed * k as f64;
                let (c, sn) = (th.cos(), th.sin());
                out.push(Array2::from_shape_fn((h, w), |(y, x)| {
                    let (dx, dy) = (x as f64 + 0.5 - cx as f64, y as f64 + 0.5 - cy as f64);
                    let along = dx * c + dy * sn;
                    let perp = -dx * sn + dy * c;
                    along.abs() <= half && perp.abs() <= 2.0
                }));
            }
        }
    }
    Ok(out)
}

/// Several subjects over one seeded background. Returns the video
/// (`F x 3 x H x W`) and one mask sequence (`F x 1 x H x W`) per pattern;
/// later patterns paint over earlier ones and their masks are exact.
pub fn render_scene(
    patterns: &[MotionPattern],
    seed: u64,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<(Array4<f64>, Vec<Array4<f64>>)> {
    if frames == 0 || h == 0 || w == 0 {
        return Err(MivaError::InvalidArgument("empty clip requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, h, w);
    let supports = patterns
        .iter()
        .map(|p| trajectory(p, &mut rng, frames, h, w))
        .collect::<Result<Vec<_>>>()?;
    let mut video = Array4::zeros((frames, 3, h, w));
    for k in 0..frames {
        video.index_axis_mut(Axis(0), k).assign(&bg);
    }
    for (p, sup) in patterns.iter().zip(&supports) {
        for (k, m) in sup.iter().enumerate() {
            for ((y, x), &on) in m.indexed_iter() {
                if on {
                    for c in 0..3 {
                        video[[k, c, y, x]] = p.color[c];
                    }
                }
            }
        }
    }
    // A later subject occludes earlier ones, so each mask is its visible part.
    let mut masks: Vec<Array4<f64>> = Vec::with_capacity(patterns.len());
    for (i, sup) in supports.iter().enumerate() {
        let m = Array4::from_shape_fn((frames, 1, h, w), |(k, _, y, x)| {
            let covered = supports[i + 1..].iter().any(|s| s[k][[y, x]]);
            if sup[k][[y, x]] && !covered {
                1.0
            } else {
                0.0
            }
        });
        masks.push(m);
    }
    Ok((video, masks))
}

/// One subject: video and its exact mask sequence.
pub fn render_pattern(
    pattern: &MotionPattern,
    seed: u64,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let (video, mut masks) = render_scene(std::slice::from_ref(pattern), seed, frames, h, w)?;
    Ok((video, masks.remove(0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video: Array4<f64>,
    pub masks: Option<Array4<f64>>,
    pub pattern: String,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.video.dim().0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MotionPatternDataset {
    pub clips: Vec<Clip>,
}

impl MotionPatternDataset {
    /// `count` clips of `frames` frames each, seeds `seed, seed+1, ...`.
    pub fn generate(pattern: &MotionPattern, count: usize, frames: usize, size: usize, seed: u64) -> Result<Self> {
        let clips = (0..count as u64)
            .map(|i| {
                let (video, masks) = render_pattern(pattern, seed + i, frames, size, size)?;
                Ok(Clip {
                    video,
                    masks: Some(masks),
                    pattern: pattern.name().to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn extend(&mut self, other: MotionPatternDataset) {
        self.clips.extend(other.clips);
    }

    pub fn has_masks(&self) -> bool {
        !self.clips.is_empty() && self.clips.iter().all(|c| c.masks.is_some())
    }

    pub fn pattern_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.clips.iter().map(|c| c.pattern.clone()).collect();
        names.dedup();
        let mut seen = std::collections::BTreeSet::new();
        names.retain(|n| seen.insert(n.clone()));
        names
    }

    /// A random contiguous `frames`-long window of a random clip.
    pub fn sample_window<R: Rng>(
        &self,
        rng: &mut R,
        frames: usize,
    ) -> Result<(usize, Array4<f64>, Option<Array4<f64>>)> {
        if self.clips.is_empty() {
            return Err(MivaError::InvalidArgument("empty dataset".into()));
        }
        let idx = rng.random_range(0..self.clips.len());
        let clip = &self.clips[idx];
        if clip.frames() < frames {
            return Err(MivaError::InvalidArgument(format!(
                "clip has {} frames, window needs {frames}",
                clip.frames()
            )));
        }
        let start = rng.random_range(0..=clip.frames() - frames);
        let video = clip.video.slice(s![start..start + frames, .., .., ..]).to_owned();
        let masks = clip
            .masks
            .as_ref()
            .map(|m| m.slice(s![start..start + frames, .., .., ..]).to_owned());
        Ok((idx, video, masks))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraMotion {
    ZoomIn,
    ZoomOut,
    PanLeft,
    PanRight,
}

impl CameraMotion {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "zoom_in" => Ok(Self::ZoomIn),
            "zoom_out" => Ok(Self::ZoomOut),
            "pan_left" => Ok(Self::PanLeft),
            "pan_right" => Ok(Self::PanRight),
            other => Err(MivaError::InvalidArgument(format!("unknown camera motion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraClipConfig {
    pub frames: usize,
    pub out_size: usize,
    /// Pan stride in source pixels per frame.
    pub stride: usize,
    /// Crop side at the tight end of a zoom, as a fraction of the wide end.
    pub zoom_ratio: f64,
}

impl Default for CameraClipConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            out_size: 64,
            stride: 2,
            zoom_ratio: 0.6,
        }
    }
}

fn crop_resize(image: &Array3<f64>, y0: usize, x0: usize, side: usize, out: usize) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if y0 + side > h || x0 + side > w || side == 0 {
        return Err(MivaError::InvalidArgument(format!(
            "crop {side}px at ({x0}, {y0}) exceeds {w}x{h} image"
        )));
    }
    let mut res = Array3::zeros((c, out, out));
    for ch in 0..c {
        let crop = image.slice(s![ch, y0..y0 + side, x0..x0 + side]).to_owned();
        let r = if side == out {
            crop
        } else {
            resize_bilinear(&crop, out, out)?
        };
        res.index_axis_mut(Axis(0), ch).assign(&r);
    }
    Ok(res)
}

/// `count` camera-motion clips cut from one still image.
pub fn make_camera_clips(
    image: &Array3<f64>,
    motion: CameraMotion,
    count: usize,
    config: &CameraClipConfig,
    seed: u64,
) -> Result<Vec<Array4<f64>>> {
    let (_, h, w) = image.dim();
    let side = config.out_size;
    let f = config.frames;
    if side > h || side > w {
        return Err(MivaError::InvalidArgument(format!(
            "image {w}x{h} smaller than {side}px crop"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(count);
    for _ in 0..count {
        let mut frames = Vec::with_capacity(f);
        match motion {
            CameraMotion::PanLeft | CameraMotion::PanRight => {
                let travel = config.stride * f.saturating_sub(1);
                if side + travel > w {
                    return Err(MivaError::InvalidArgument("pan exceeds image width".into()));
                }
                let y0 = rng.random_range(0..=h - side);
                let base = rng.random_range(0..=w - side - travel);
                for k in 0..f {
                    let x0 = if motion == CameraMotion::PanRight {
                        base + k * config.stride
                    } else {
                        base + travel - k * config.stride
                    };
                    frames.push(crop_resize(image, y0, x0, side, side)?);
                }
            }
            CameraMotion::ZoomIn | CameraMotion::ZoomOut => {
                let wide = h.min(w);
                let tight = ((wide as f64 * config.zoom_ratio).round() as usize).max(1);
                let cy = wide / 2 + rng.random_range(0..=h - wide);
                let cx = wide / 2 + rng.random_range(0..=w - wide);
                for k in 0..f {
                    let t = if f > 1 { k as f64 / (f - 1) as f64 } else { 0.0 };
                    let t = if motion == CameraMotion::ZoomIn { t } else { 1.0 - t };
                    let crop = (wide as f64 + (tight as f64 - wide as f64) * t).round() as usize;
                    let y0 = cy.saturating_sub(crop / 2).min(h - crop);
                    let x0 = cx.saturating_sub(crop / 2).min(w - crop);
                    frames.push(crop_resize(image, y0, x0, crop, side)?);
                }
            }
        }
        clips.push(crate::vae::stack(&frames)?);
    }
    Ok(clips)
}

/// Threshold `c0 - max(c1, c2)` of a `3 x H x W` frame into a 0/1 mask.
pub fn segment_generated(frame: &Array3<f64>, threshold: f64) -> Result<Array2<f64>> {
    if frame.dim().0 < 3 {
        return Err(MivaError::InvalidArgument("segmentation expects 3 channels".into()));
    }
    let (_, h, w) = frame.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let excess = frame[[0, y, x]] - frame[[1, y, x]].max(frame[[2, y, x]]);
        if excess > threshold {
            1.0
        } else {
            0.0
        }
    }))
}
