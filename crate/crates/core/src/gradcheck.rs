//! Central finite-difference checks of the analytic adapter gradients.

use std::sync::Arc;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::Miva;
use crate::autograd::Graph;
use crate::error::Result;
use crate::masked::BiasSet;
use crate::model::{forward, AdapterUse, Attachment, BaseModel, Conditioning, SlotKind};
use crate::tensor::{video_to_tokens, LatentVideo, Mat};

/// Central-difference step. Smaller steps let f64 roundoff dominate on the
/// tiny gradients of the mask-stream up-factors.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Error summary of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    /// `max |analytic - numeric|` over the checked entries divided by
    /// `max |analytic|` over the same entries.
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Central difference of `f` at every listed entry of `x`.
pub fn numeric_gradient<F: FnMut(&Mat) -> f64>(x: &Mat, entries: &[(usize, usize)], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.clone();
    entries
        .iter()
        .map(|&(r, c)| {
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + h;
            let up = f(&probe);
            probe[[r, c]] = orig - h;
            let down = f(&probe);
            probe[[r, c]] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn summarize(name: String, analytic: &[f64], numeric: &[f64]) -> GroupError {
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let max_abs_err = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let rel_err = if scale == 0.0 {
        if max_abs_err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        max_abs_err / scale
    };
    GroupError {
        name,
        checked: analytic.len(),
        max_abs_err,
        rel_err,
    }
}

/// Inputs of one check: a video and a mask latent, a step, a fixed
/// regression target and, for masked adapters, the video-stream biases.
pub struct CheckCase {
    pub video: LatentVideo,
    pub mask: Option<LatentVideo>,
    pub t: usize,
    pub target: Array4<f64>,
    pub bias: Option<BiasSet>,
}

fn case_loss<'a>(
    g: &mut Graph<'a>,
    base: &'a BaseModel,
    miva: &'a Miva,
    case: &'a CheckCase,
) -> Result<crate::autograd::Var> {
    let cond = Conditioning {
        t: case.t,
        prompt: base.null_prompt(),
        sa_bias: case.bias.as_ref(),
        slot: SlotKind::Video,
    };
    let use_v = AdapterUse {
        miva,
        weight: 1.0,
        cfa_bias: case.bias.as_ref(),
    };
    let out = forward(g, base, &case.video, cond, &Attachment::Direct(use_v))?;
    let rows = g.value(out).nrows();
    let target = video_to_tokens(&case.target);
    let ones = Arc::new(vec![1.0; rows]);
    let mut loss = g.weighted_mse(out, target.clone(), ones.clone(), rows as f64);
    if let (Some(m), true) = (&case.mask, miva.is_masked()) {
        let mcond = Conditioning {
            slot: SlotKind::Mask,
            sa_bias: None,
            ..cond
        };
        let out_m = forward(g, base, m, mcond, &Attachment::Direct(AdapterUse::new(miva, 1.0)))?;
        let lm = g.weighted_mse(out_m, target, ones, rows as f64);
        loss = g.add(loss, lm);
    }
    Ok(loss)
}

fn loss_value(base: &BaseModel, miva: &Miva, case: &CheckCase) -> Result<f64> {
    let mut g = Graph::new();
    let l = case_loss(&mut g, base, miva, case)?;
    Ok(g.value(l)[[0, 0]])
}

/// Give every adapter array small random values so that no gradient path
/// is blocked by a zero-initialized factor.
pub fn randomize_adapter(miva: &mut Miva, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, m) in miva.named_params_mut() {
        m.mapv_inplace(|_| rng.random_range(-scale..scale));
    }
}

/// Check up to `per_group` entries of every adapter array.
pub fn gradient_check(
    base: &BaseModel,
    miva: &Miva,
    case: &CheckCase,
    h: f64,
    per_group: usize,
    seed: u64,
) -> Result<GradReport> {
    let analytic: Vec<Option<Mat>> = {
        let mut g = Graph::new();
        g.train_all(miva.named_params().into_iter().map(|(_, m)| m));
        let l = case_loss(&mut g, base, miva, case)?;
        let grads = g.backward(l);
        miva.named_params()
            .into_iter()
            .map(|(_, m)| grads.wrt(m).cloned())
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, (usize, usize))> = miva.named_params().into_iter().map(|(n, m)| (n, m.dim())).collect();
    let mut report = GradReport::default();
    for (gi, (name, (rows, cols))) in names.into_iter().enumerate() {
        let total = rows * cols;
        let entries: Vec<(usize, usize)> = if total <= per_group {
            (0..total).map(|i| (i / cols, i % cols)).collect()
        } else {
            rand::seq::index::sample(&mut rng, total, per_group)
                .into_iter()
                .map(|i| (i / cols, i % cols))
                .collect()
        };
        let mut work = miva.clone();
        let x = miva.named_params()[gi].1.clone();
        let mut err = None;
        let numeric = numeric_gradient(&x, &entries, h, |p| {
            *work.named_params_mut()[gi].1 = p.clone();
            match loss_value(base, &work, case) {
                Ok(v) => v,
                Err(e) => {
                    err = Some(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let a: Vec<f64> = entries
            .iter()
            .map(|&(r, c)| analytic[gi].as_ref().map_or(0.0, |g| g[[r, c]]))
            .collect();
        report.groups.push(summarize(name, &a, &numeric));
    }
    Ok(report)
}
