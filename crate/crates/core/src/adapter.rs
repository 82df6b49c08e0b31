//! Modular image-to-video adapters: the learnable parameters that sit on top
//! of a frozen base model.
//!
//! Every spatial self-attention slot gains two cross-frame attention (CFA)
//! layers, one attending to the first frame and one to the previous frame,
//! mixed by an adaptive weighting module driven by the timestep embedding.
//! Each cross-attention slot gains an implicit-prompt branch
//! `softmax(f W_Q A) B`, and each temporal self-attention slot gets LoRA
//! updates on all four projections. Output-side factors start at zero, so a
//! fresh adapter leaves the base prediction unchanged.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention, self_attention, AttentionParams};
use crate::error::{dim_err, MivaError, Result};
use crate::model::{predict_noise, AdapterUse, Attachment, BaseModel, Conditioning, Ranks};
use crate::tensor::{randn, silu, softmax_rows_inplace, LatentVideo, Mat};

/// Low-rank update `down . up` with `up` zero at creation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRA {
    pub down: Mat,
    pub up: Mat,
}

impl LoRA {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, rank: usize, d_out: usize) -> Self {
        Self {
            down: randn(rng, (d_in, rank), 1.0 / (d_in as f64).sqrt()),
            up: Mat::zeros((rank, d_out)),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.ncols()
    }

    pub fn delta(&self) -> Mat {
        self.down.dot(&self.up)
    }

    fn validate(&self, d_in: usize, d_out: usize, what: &'static str) -> Result<()> {
        let r = self.down.ncols();
        if self.down.nrows() != d_in || self.up.dim() != (r, d_out) {
            return Err(dim_err(
                what,
                format!(
                    "LoRA factors {:?}/{:?} incompatible with {d_in}x{d_out}",
                    self.down.dim(),
                    self.up.dim()
                ),
            ));
        }
        if r > d_in.min(d_out) {
            return Err(dim_err(what, format!("rank {r} exceeds min({d_in}, {d_out})")));
        }
        Ok(())
    }
}

/// One cross-frame attention layer: `W_Q = W_Q_base + q.down q.up` and
/// `W_O = o.down o.up`; keys and values reuse the frozen base projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CfaWeights {
    pub q: LoRA,
    pub o: LoRA,
}

impl CfaWeights {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> Self {
        Self {
            q: LoRA::new(rng, d, rank, d),
            o: LoRA::new(rng, d, rank, d),
        }
    }

    pub fn output_projection(&self) -> Mat {
        self.o.delta()
    }
}

/// `(lambda_2, lambda_3) = softmax(SiLU(c_t) W_phi)`; `lambda_1` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeightModule {
    pub w_phi: Mat,
}

pub const LAMBDA_SA: f64 = 1.0;

/// The adapter content of one spatial self-attention slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotAdapter {
    pub first: CfaWeights,
    pub prev: CfaWeights,
    pub phi: AdaptiveWeightModule,
}

/// Implicit-prompt cross-attention branch `softmax(f W_Q A) B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitPromptCa {
    pub a: Mat,
    pub b: Mat,
}

impl ImplicitPromptCa {
    /// Factorization of an explicit prompt: `A = W_K^T c^T / sqrt(d)`,
    /// `B = c W_V W_O`.
    pub fn from_prompt(base_ca: &AttentionParams, prompt: &Mat) -> Self {
        let scale = 1.0 / (base_ca.d_k() as f64).sqrt();
        Self {
            a: base_ca.w_k.t().dot(&prompt.t()) * scale,
            b: prompt.dot(&base_ca.w_v).dot(&base_ca.w_o),
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.a.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsaLora {
    pub q: LoRA,
    pub k: LoRA,
    pub v: LoRA,
    pub o: LoRA,
}

impl TsaLora {
    pub fn adapted(&self, base: &AttentionParams) -> AttentionParams {
        AttentionParams {
            w_q: &base.w_q + &self.q.delta(),
            w_k: &base.w_k + &self.k.delta(),
            w_v: &base.w_v + &self.v.delta(),
            w_o: &base.w_o + &self.o.delta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapter {
    pub video: SlotAdapter,
    /// Present for masked adapters: the independently parameterized
    /// mask-modality CFA pair and its weighting module.
    pub mask: Option<SlotAdapter>,
    pub ca: ImplicitPromptCa,
    pub tsa: TsaLora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MivaMeta {
    pub pattern: String,
    pub ranks: Ranks,
    pub base_hash: String,
    pub masked: bool,
    pub seed: u64,
    pub iterations: usize,
    /// Creation config, echoed verbatim.
    pub config: BTreeMap<String, String>,
    pub loss_curve: Vec<f64>,
}

/// A complete adapter: the shareable unit attached to one base model.
#[derive(Debug, Clone, PartialEq)]
pub struct Miva {
    pub meta: MivaMeta,
    pub blocks: Vec<BlockAdapter>,
}

/// Alias matching the on-disk name of the adapter unit.
pub type MivaCheckpoint = Miva;

impl Miva {
    /// Fresh adapter whose residual paths are all zero.
    pub fn new(base: &BaseModel, pattern: &str, masked: bool, seed: u64) -> Result<Self> {
        let cfg = &base.config;
        let d = cfg.token_dim;
        let ranks = cfg.ranks;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = base.null_prompt();
        let blocks = base
            .blocks
            .iter()
            .map(|b| {
                let video = SlotAdapter {
                    first: CfaWeights::new(&mut rng, d, ranks.cfa),
                    prev: CfaWeights::new(&mut rng, d, ranks.cfa),
                    phi: AdaptiveWeightModule {
                        w_phi: Mat::zeros((cfg.time_dim, 2)),
                    },
                };
                let mask = masked.then(|| SlotAdapter {
                    first: CfaWeights::new(&mut rng, d, ranks.mask_cfa()),
                    prev: CfaWeights::new(&mut rng, d, ranks.mask_cfa()),
                    phi: AdaptiveWeightModule {
                        w_phi: Mat::zeros((cfg.time_dim, 2)),
                    },
                });
                let cycled = Mat::from_shape_fn((ranks.ca, d), |(i, j)| prompt[[i % prompt.nrows(), j]]);
                let mut ca = ImplicitPromptCa::from_prompt(&b.ca, &cycled);
                ca.b.fill(0.0);
                BlockAdapter {
                    video,
                    mask,
                    ca,
                    tsa: TsaLora {
                        q: LoRA::new(&mut rng, d, ranks.tsa, d),
                        k: LoRA::new(&mut rng, d, ranks.tsa, d),
                        v: LoRA::new(&mut rng, d, ranks.tsa, d),
                        o: LoRA::new(&mut rng, d, ranks.tsa, d),
                    },
                }
            })
            .collect();
        Ok(Self {
            meta: MivaMeta {
                pattern: pattern.to_string(),
                ranks,
                base_hash: base.hash(),
                masked,
                seed,
                iterations: 0,
                config: BTreeMap::new(),
                loss_curve: Vec::new(),
            },
            blocks,
        })
    }

    pub fn is_masked(&self) -> bool {
        self.meta.masked
    }

    /// Parameters in canonical order, grouped by name prefix.
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            push_slot(&mut out, &format!("blocks.{i}.video"), &b.video);
            if let Some(m) = &b.mask {
                push_slot(&mut out, &format!("blocks.{i}.mask"), m);
            }
            out.push((format!("blocks.{i}.ca.a"), &b.ca.a));
            out.push((format!("blocks.{i}.ca.b"), &b.ca.b));
            for (n, l) in [("q", &b.tsa.q), ("k", &b.tsa.k), ("v", &b.tsa.v), ("o", &b.tsa.o)] {
                out.push((format!("blocks.{i}.tsa.{n}.down"), &l.down));
                out.push((format!("blocks.{i}.tsa.{n}.up"), &l.up));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_slot_mut(&mut out, &format!("blocks.{i}.video"), &mut b.video);
            if let Some(m) = &mut b.mask {
                push_slot_mut(&mut out, &format!("blocks.{i}.mask"), m);
            }
            out.push((format!("blocks.{i}.ca.a"), &mut b.ca.a));
            out.push((format!("blocks.{i}.ca.b"), &mut b.ca.b));
            let t = &mut b.tsa;
            for (n, l) in [("q", &mut t.q), ("k", &mut t.k), ("v", &mut t.v), ("o", &mut t.o)] {
                out.push((format!("blocks.{i}.tsa.{n}.down"), &mut l.down));
                out.push((format!("blocks.{i}.tsa.{n}.up"), &mut l.up));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    /// Parameters of the mask-modality stream only.
    pub fn mask_param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(n, _)| n.contains(".mask."))
            .map(|(_, m)| m.len())
            .sum()
    }

    pub fn round_to_f32(&mut self) {
        for (_, m) in self.named_params_mut() {
            crate::tensor::round_f32(m);
        }
    }

    /// Structural and identity check against a base model.
    pub fn check_compatible(&self, base: &BaseModel) -> Result<()> {
        let mut problems = Vec::new();
        if !self.meta.base_hash.is_empty() && self.meta.base_hash != base.hash() {
            problems.push(format!(
                "base hash {} != {}",
                short(&self.meta.base_hash),
                short(&base.hash())
            ));
        }
        if self.blocks.len() != base.blocks.len() {
            problems.push(format!(
                "{} adapter blocks for {} base blocks",
                self.blocks.len(),
                base.blocks.len()
            ));
        }
        let d = base.config.token_dim;
        let dt = base.config.time_dim;
        for (i, (b, bb)) in self.blocks.iter().zip(&base.blocks).enumerate() {
            let slots = std::iter::once(&b.video).chain(b.mask.iter());
            for s in slots {
                for (name, cfa) in [("first", &s.first), ("prev", &s.prev)] {
                    if let Err(e) = cfa.q.validate(d, d, "cfa.q").and(cfa.o.validate(d, d, "cfa.o")) {
                        problems.push(format!("block {i} cfa {name}: {e}"));
                    }
                }
                if s.phi.w_phi.dim() != (dt, 2) {
                    problems.push(format!("block {i} w_phi {:?} != {:?}", s.phi.w_phi.dim(), (dt, 2)));
                }
            }
            if b.ca.a.nrows() != bb.ca.w_q.ncols() || b.ca.b.dim() != (b.ca.a.ncols(), bb.ca.w_o.ncols()) {
                problems.push(format!(
                    "block {i} implicit CA A {:?} / B {:?} vs W_Q {:?}",
                    b.ca.a.dim(),
                    b.ca.b.dim(),
                    bb.ca.w_q.dim()
                ));
            }
            for (n, l) in [("q", &b.tsa.q), ("k", &b.tsa.k), ("v", &b.tsa.v), ("o", &b.tsa.o)] {
                if let Err(e) = l.validate(d, d, "tsa") {
                    problems.push(format!("block {i} tsa.{n}: {e}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MivaError::Incompatible(problems.join("; ")))
        }
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn push_slot<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: &str, s: &'a SlotAdapter) {
    for (n, c) in [("first", &s.first), ("prev", &s.prev)] {
        out.push((format!("{prefix}.cfa_{n}.q.down"), &c.q.down));
        out.push((format!("{prefix}.cfa_{n}.q.up"), &c.q.up));
        out.push((format!("{prefix}.cfa_{n}.o.down"), &c.o.down));
        out.push((format!("{prefix}.cfa_{n}.o.up"), &c.o.up));
    }
    out.push((format!("{prefix}.phi"), &s.phi.w_phi));
}

fn push_slot_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, prefix: &str, s: &'a mut SlotAdapter) {
    for (n, c) in [("first", &mut s.first), ("prev", &mut s.prev)] {
        out.push((format!("{prefix}.cfa_{n}.q.down"), &mut c.q.down));
        out.push((format!("{prefix}.cfa_{n}.q.up"), &mut c.q.up));
        out.push((format!("{prefix}.cfa_{n}.o.down"), &mut c.o.down));
        out.push((format!("{prefix}.cfa_{n}.o.up"), &mut c.o.up));
    }
    out.push((format!("{prefix}.phi"), &mut s.phi.w_phi));
}

/// Adapter-to-base parameter ratio.
pub fn parameter_ratio(miva: &Miva, base: &BaseModel) -> f64 {
    miva.param_count() as f64 / base.param_count() as f64
}

pub fn adaptive_weights(c_t: &Mat, module: &AdaptiveWeightModule) -> Result<(f64, f64)> {
    if c_t.dim() != (1, module.w_phi.nrows()) {
        return Err(dim_err(
            "adaptive_weights",
            format!("c_t {:?} vs W_phi {:?}", c_t.dim(), module.w_phi.dim()),
        ));
    }
    let mut logits = c_t.mapv(silu).dot(&module.w_phi);
    softmax_rows_inplace(&mut logits);
    Ok((logits[[0, 0]], logits[[0, 1]]))
}

/// `Att(f_i W_Q, f_ref W_K, f_ref W_V) W_O` with the adapted query and
/// low-rank output projections.
pub fn cfa(f_i: &Mat, f_ref: &Mat, base: &AttentionParams, w: &CfaWeights) -> Result<Mat> {
    if f_i.ncols() != base.w_q.nrows() || f_ref.ncols() != base.w_k.nrows() {
        return Err(dim_err("cfa", "token dimension does not match base projections"));
    }
    let w_q = &base.w_q + &w.q.delta();
    let q = f_i.dot(&w_q);
    let k = f_ref.dot(&base.w_k);
    let v = f_ref.dot(&base.w_v);
    Ok(attention(&q, &k, &v, None)?.dot(&w.output_projection()))
}

/// `SA(f_i) + lambda_2 CFA(i, 1) + lambda_3 CFA(i, i-1)`.
#[allow(clippy::too_many_arguments)]
pub fn augmented_sa(
    f_i: &Mat,
    f_1: &Mat,
    f_prev: &Mat,
    base: &AttentionParams,
    w_first: &CfaWeights,
    w_prev: &CfaWeights,
    lambda: (f64, f64),
) -> Result<Mat> {
    if f_1.dim() != f_i.dim() || f_prev.dim() != f_i.dim() {
        return Err(dim_err("augmented_sa", "frame token arrays differ in shape"));
    }
    let sa = self_attention(f_i, base)?;
    let c1 = cfa(f_i, f_1, base, w_first)?;
    let c2 = cfa(f_i, f_prev, base, w_prev)?;
    Ok(sa * LAMBDA_SA + c1 * lambda.0 + c2 * lambda.1)
}

/// `softmax(f W_Q A) B` with the frozen base query projection.
pub fn implicit_ca(f: &Mat, base_ca: &AttentionParams, layer: &ImplicitPromptCa) -> Result<Mat> {
    if f.ncols() != base_ca.w_q.nrows() || base_ca.w_q.ncols() != layer.a.nrows() {
        return Err(dim_err("implicit_ca", "f / W_Q / A dimensions disagree"));
    }
    if layer.b.nrows() != layer.a.ncols() {
        return Err(dim_err("implicit_ca", "A columns != B rows"));
    }
    let mut logits = f.dot(&base_ca.w_q).dot(&layer.a);
    softmax_rows_inplace(&mut logits);
    Ok(logits.dot(&layer.b))
}

/// Temporal self-attention with every projection replaced by `W + down up`.
pub fn apply_tsa_lora(x: &Mat, base: &AttentionParams, lora: &TsaLora) -> Result<Mat> {
    let d_in = base.w_q.nrows();
    for (l, (r, c)) in [
        (&lora.q, base.w_q.dim()),
        (&lora.k, base.w_k.dim()),
        (&lora.v, base.w_v.dim()),
        (&lora.o, base.w_o.dim()),
    ] {
        l.validate(r, c, "apply_tsa_lora")?;
    }
    if x.ncols() != d_in {
        return Err(dim_err("apply_tsa_lora", "token dim != W_Q rows"));
    }
    self_attention(x, &lora.adapted(base))
}

/// A base model with one adapter attached. Holds references only; the base
/// parameters are never copied or written.
pub struct AdaptedModel<'a> {
    base: &'a BaseModel,
    miva: &'a Miva,
}

pub fn attach<'a>(base: &'a BaseModel, checkpoint: &'a Miva) -> Result<AdaptedModel<'a>> {
    checkpoint.check_compatible(base)?;
    Ok(AdaptedModel { base, miva: checkpoint })
}

pub fn detach<'a>(handle: AdaptedModel<'a>) -> &'a BaseModel {
    handle.base
}

impl<'a> AdaptedModel<'a> {
    pub fn base(&self) -> &'a BaseModel {
        self.base
    }

    pub fn adapter(&self) -> &'a Miva {
        self.miva
    }

    pub fn attachment(&self) -> Attachment<'a> {
        Attachment::Direct(AdapterUse::new(self.miva, 1.0))
    }

    pub fn predict_noise(&self, latents: &LatentVideo, cond: Conditioning<'_>) -> Result<ndarray::Array4<f64>> {
        predict_noise(self.base, latents, cond, &self.attachment())
    }
}
