//! The frozen base denoiser: a small spatio-temporal transformer over latent
//! video tokens with one spatial self-attention, one cross-attention and
//! one temporal self-attention slot per block.

use std::sync::Arc;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{Miva, SlotAdapter};
use crate::attention::{AttentionParams, AttnLayout};
use crate::autograd::{Graph, Var};
use crate::error::{dim_err, MivaError, Result};
use crate::masked::BiasSet;
use crate::schedule::{timestep_features, NoiseSchedule};
use crate::tensor::{randn, tokens_to_video, video_to_tokens, LatentVideo, Mat};
use crate::vae::PatchAutoencoder;

/// Adapter ranks: CFA LoRA rank, implicit-prompt length, t-SA LoRA rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranks {
    pub cfa: usize,
    pub ca: usize,
    pub tsa: usize,
}

impl Default for Ranks {
    fn default() -> Self {
        Self { cfa: 4, ca: 4, tsa: 2 }
    }
}

impl Ranks {
    /// CFA rank of the mask stream of a masked adapter, half the video
    /// stream's (rounded up) so the masked adapter also fits the budget.
    pub fn mask_cfa(&self) -> usize {
        self.cfa.div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub image_size: usize,
    pub pixel_channels: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub prompt_len: usize,
    pub timesteps: usize,
    pub ranks: Ranks,
    pub vae_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            image_size: 64,
            pixel_channels: 3,
            patch_size: 4,
            channels: 8,
            token_dim: 32,
            blocks: 2,
            ffn_hidden: 512,
            time_dim: 32,
            time_hidden: 128,
            prompt_len: 4,
            timesteps: 1000,
            ranks: Ranks::default(),
            vae_seed: 0x5eed,
        }
    }
}

impl ModelConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.latent_size() * self.latent_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MivaError::InvalidArgument(m.to_string()));
        if self.frames < 2 {
            return bad("frames must be >= 2");
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.token_dim < 8 || !self.token_dim.is_multiple_of(8) {
            return bad("token_dim must be a positive multiple of 8");
        }
        if !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even");
        }
        let r = self.ranks;
        if r.cfa == 0 || r.ca == 0 || r.tsa == 0 {
            return bad("ranks must be positive");
        }
        if r.cfa > self.token_dim || r.tsa > self.token_dim {
            return bad("LoRA rank exceeds token_dim");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseBlock {
    pub sa: AttentionParams,
    pub ca: AttentionParams,
    pub tsa: AttentionParams,
    pub ff_w1: Mat,
    pub ff_b1: Mat,
    pub ff_w2: Mat,
    pub ff_b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub w_in: Mat,
    pub b_in: Mat,
    pub time_w1: Mat,
    pub time_b1: Mat,
    pub time_w2: Mat,
    pub time_b2: Mat,
    pub w_temb: Mat,
    pub blocks: Vec<BaseBlock>,
    pub w_out: Mat,
    pub b_out: Mat,
    /// Prompt table; entry 0 is the null prompt, entry `k` belongs to
    /// `pattern_names[k - 1]`.
    pub prompts: Vec<Mat>,
    pub pattern_names: Vec<String>,
    positions: Mat,
}

fn attn(rng: &mut ChaCha8Rng, d_in: usize, d_ctx: usize, d: usize) -> AttentionParams {
    AttentionParams {
        w_q: randn(rng, (d_in, d), 1.0 / (d_in as f64).sqrt()),
        w_k: randn(rng, (d_ctx, d), 1.0 / (d_ctx as f64).sqrt()),
        w_v: randn(rng, (d_ctx, d), 1.0 / (d_ctx as f64).sqrt()),
        w_o: randn(rng, (d, d_in), 0.5 / (d as f64).sqrt()),
    }
}

impl BaseModel {
    pub fn new(config: ModelConfig, pattern_names: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.token_dim;
        let c = config.channels;
        let dt = config.time_dim;
        let blocks = (0..config.blocks)
            .map(|_| BaseBlock {
                sa: attn(&mut rng, d, d, d),
                ca: attn(&mut rng, d, d, d),
                tsa: attn(&mut rng, d, d, d),
                ff_w1: randn(&mut rng, (d, config.ffn_hidden), 1.0 / (d as f64).sqrt()),
                ff_b1: Mat::zeros((1, config.ffn_hidden)),
                ff_w2: randn(
                    &mut rng,
                    (config.ffn_hidden, d),
                    0.5 / (config.ffn_hidden as f64).sqrt(),
                ),
                ff_b2: Mat::zeros((1, d)),
            })
            .collect();
        let prompts = (0..=pattern_names.len())
            .map(|_| randn(&mut rng, (config.prompt_len, d), 1.0))
            .collect();
        let positions = positional_encoding(&config);
        Ok(Self {
            w_in: randn(&mut rng, (c, d), 1.0 / (c as f64).sqrt()),
            b_in: Mat::zeros((1, d)),
            time_w1: randn(&mut rng, (dt, config.time_hidden), 1.0 / (dt as f64).sqrt()),
            time_b1: Mat::zeros((1, config.time_hidden)),
            time_w2: randn(
                &mut rng,
                (config.time_hidden, dt),
                1.0 / (config.time_hidden as f64).sqrt(),
            ),
            time_b2: Mat::zeros((1, dt)),
            w_temb: randn(&mut rng, (dt, d), 1.0 / (dt as f64).sqrt()),
            blocks,
            w_out: randn(&mut rng, (d, c), 0.1 / (d as f64).sqrt()),
            b_out: Mat::zeros((1, c)),
            prompts,
            pattern_names,
            positions,
            config,
        })
    }

    /// Rebuild from named parameters (checkpoint loading).
    pub fn from_named(
        config: ModelConfig,
        pattern_names: Vec<String>,
        mut named: std::collections::HashMap<String, Mat>,
    ) -> Result<Self> {
        let mut model = Self::new(config, pattern_names, 0)?;
        for (name, slot) in model.named_params_mut() {
            let value = named
                .remove(&name)
                .ok_or_else(|| MivaError::Format(format!("missing base array `{name}`")))?;
            if value.dim() != slot.dim() {
                return Err(MivaError::Incompatible(format!(
                    "base array `{name}`: expected {:?}, found {:?}",
                    slot.dim(),
                    value.dim()
                )));
            }
            *slot = value;
        }
        if let Some(extra) = named.keys().next() {
            return Err(MivaError::Format(format!("unexpected base array `{extra}`")));
        }
        Ok(model)
    }

    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("w_in".into(), &self.w_in),
            ("b_in".into(), &self.b_in),
            ("time_w1".into(), &self.time_w1),
            ("time_b1".into(), &self.time_b1),
            ("time_w2".into(), &self.time_w2),
            ("time_b2".into(), &self.time_b2),
            ("w_temb".into(), &self.w_temb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (slot, p) in [("sa", &b.sa), ("ca", &b.ca), ("tsa", &b.tsa)] {
                out.push((format!("blocks.{i}.{slot}.w_q"), &p.w_q));
                out.push((format!("blocks.{i}.{slot}.w_k"), &p.w_k));
                out.push((format!("blocks.{i}.{slot}.w_v"), &p.w_v));
                out.push((format!("blocks.{i}.{slot}.w_o"), &p.w_o));
            }
            out.push((format!("blocks.{i}.ff_w1"), &b.ff_w1));
            out.push((format!("blocks.{i}.ff_b1"), &b.ff_b1));
            out.push((format!("blocks.{i}.ff_w2"), &b.ff_w2));
            out.push((format!("blocks.{i}.ff_b2"), &b.ff_b2));
        }
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        for (k, p) in self.prompts.iter().enumerate() {
            out.push((format!("prompts.{k}"), p));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("w_in".into(), &mut self.w_in),
            ("b_in".into(), &mut self.b_in),
            ("time_w1".into(), &mut self.time_w1),
            ("time_b1".into(), &mut self.time_b1),
            ("time_w2".into(), &mut self.time_w2),
            ("time_b2".into(), &mut self.time_b2),
            ("w_temb".into(), &mut self.w_temb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (slot, p) in [("sa", &mut b.sa), ("ca", &mut b.ca), ("tsa", &mut b.tsa)] {
                out.push((format!("blocks.{i}.{slot}.w_q"), &mut p.w_q));
                out.push((format!("blocks.{i}.{slot}.w_k"), &mut p.w_k));
                out.push((format!("blocks.{i}.{slot}.w_v"), &mut p.w_v));
                out.push((format!("blocks.{i}.{slot}.w_o"), &mut p.w_o));
            }
            out.push((format!("blocks.{i}.ff_w1"), &mut b.ff_w1));
            out.push((format!("blocks.{i}.ff_b1"), &mut b.ff_b1));
            out.push((format!("blocks.{i}.ff_w2"), &mut b.ff_w2));
            out.push((format!("blocks.{i}.ff_b2"), &mut b.ff_b2));
        }
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        for (k, p) in self.prompts.iter_mut().enumerate() {
            out.push((format!("prompts.{k}"), p));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    /// SHA-256 over parameter names and their `f32` little-endian bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_params() {
            h.update(name.as_bytes());
            for v in m.iter() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn round_to_f32(&mut self) {
        for (_, m) in self.named_params_mut() {
            crate::tensor::round_f32(m);
        }
    }

    pub fn null_prompt(&self) -> &Mat {
        &self.prompts[0]
    }

    pub fn prompt_for(&self, pattern: &str) -> Option<&Mat> {
        self.pattern_names
            .iter()
            .position(|p| p == pattern)
            .map(|i| &self.prompts[i + 1])
    }

    pub fn positions(&self) -> &Mat {
        &self.positions
    }

    /// The fixed patch autoencoder paired with this configuration.
    pub fn autoencoder(&self) -> Result<PatchAutoencoder> {
        let c = &self.config;
        PatchAutoencoder::new(c.patch_size, c.pixel_channels, c.channels, c.vae_seed)
    }

    /// `c_t`: sinusoidal step features through the learned time MLP.
    pub fn timestep_embedding(&self, t: usize) -> Result<Mat> {
        if t >= self.config.timesteps {
            return Err(MivaError::StepOutOfRange {
                t,
                total: self.config.timesteps,
            });
        }
        let f = timestep_features(t, self.config.time_dim);
        let h = (f.dot(&self.time_w1) + &self.time_b1).mapv(crate::tensor::silu);
        Ok(h.dot(&self.time_w2) + &self.time_b2)
    }
}

/// Fixed sinusoidal code of `(frame, y, x)`: a quarter of the token
/// dimension each for x, y and frame index, the last quarter zero.
pub fn positional_encoding(config: &ModelConfig) -> Mat {
    let d = config.token_dim;
    let q = d / 4;
    let freqs = q / 2;
    let side = config.latent_size();
    let n = config.tokens_per_frame();
    let mut out = Mat::zeros((config.frames * n, d));
    for f in 0..config.frames {
        for y in 0..side {
            for x in 0..side {
                let row = f * n + y * side + x;
                for (slot, pos) in [(0usize, x), (1, y), (2, f)] {
                    for k in 0..freqs {
                        let omega = std::f64::consts::PI / 2f64.powi(k as i32 + 1);
                        out[[row, slot * q + 2 * k]] = (omega * pos as f64).sin();
                        out[[row, slot * q + 2 * k + 1]] = (omega * pos as f64).cos();
                    }
                }
            }
        }
    }
    out
}

/// Which per-slot CFA pair of an adapter drives the spatial slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Video,
    Mask,
}

/// One adapter taking part in a forward pass.
#[derive(Clone, Copy)]
pub struct AdapterUse<'a> {
    pub miva: &'a Miva,
    pub weight: f64,
    /// Biases for this adapter's CFA sites.
    pub cfa_bias: Option<&'a BiasSet>,
}

impl<'a> AdapterUse<'a> {
    pub fn new(miva: &'a Miva, weight: f64) -> Self {
        Self {
            miva,
            weight,
            cfa_bias: None,
        }
    }
}

/// How adapters join the base network.
///
/// `Direct` is plain attachment of one adapter (temporal LoRAs folded into
/// the projections). `Composed` sums weighted residuals of any number of
/// adapters around one shared base evaluation.
#[derive(Clone)]
pub enum Attachment<'a> {
    Base,
    Direct(AdapterUse<'a>),
    Composed(Vec<AdapterUse<'a>>),
}

impl<'a> Attachment<'a> {
    fn uses(&self) -> Vec<AdapterUse<'a>> {
        match self {
            Attachment::Base => Vec::new(),
            Attachment::Direct(u) => vec![*u],
            Attachment::Composed(v) => v.clone(),
        }
    }
}

/// Per-call conditioning of the denoiser.
#[derive(Clone, Copy)]
pub struct Conditioning<'a> {
    pub t: usize,
    pub prompt: &'a Mat,
    /// Bias for the base spatial self-attention of the video stream.
    pub sa_bias: Option<&'a BiasSet>,
    pub slot: SlotKind,
}

impl<'a> Conditioning<'a> {
    pub fn new(t: usize, prompt: &'a Mat) -> Self {
        Self {
            t,
            prompt,
            sa_bias: None,
            slot: SlotKind::Video,
        }
    }
}

struct Layouts {
    spatial: AttnLayout,
    first: AttnLayout,
    prev: AttnLayout,
    temporal: AttnLayout,
    to_loc: Arc<Vec<usize>>,
    to_frame: Arc<Vec<usize>>,
}

fn layouts(config: &ModelConfig) -> Layouts {
    let f = config.frames;
    let n = config.tokens_per_frame();
    let scale = 1.0 / (config.token_dim as f64).sqrt();
    let make = |key_group: Vec<usize>| AttnLayout {
        q_len: n,
        k_len: n,
        key_group: Arc::new(key_group),
        bias: None,
        scale,
    };
    let to_loc: Vec<usize> = (0..f * n).map(|r| (r % f) * n + r / f).collect();
    let mut to_frame = vec![0; f * n];
    for (i, &src) in to_loc.iter().enumerate() {
        to_frame[src] = i;
    }
    Layouts {
        spatial: make((0..f).collect()),
        first: make(vec![0; f]),
        prev: make((0..f).map(|i| i.saturating_sub(1)).collect()),
        temporal: AttnLayout {
            q_len: f,
            k_len: f,
            key_group: Arc::new((0..n).collect()),
            bias: None,
            scale,
        },
        to_loc: Arc::new(to_loc),
        to_frame: Arc::new(to_frame),
    }
}

fn check_adapter(base: &BaseModel, miva: &Miva, slot: SlotKind) -> Result<()> {
    miva.check_compatible(base)?;
    if slot == SlotKind::Mask && !miva.is_masked() {
        return Err(MivaError::Incompatible(format!(
            "adapter `{}` has no mask stream",
            miva.meta.pattern
        )));
    }
    Ok(())
}

fn slot_of(miva: &Miva, block: usize, slot: SlotKind) -> &SlotAdapter {
    match slot {
        SlotKind::Video => &miva.blocks[block].video,
        SlotKind::Mask => miva.blocks[block].mask.as_ref().expect("checked mask stream"),
    }
}

/// Builds the noise prediction for a latent video on the tape and returns
/// the `(F*N) x C` token node.
pub fn forward<'a>(
    g: &mut Graph<'a>,
    base: &'a BaseModel,
    latents: &LatentVideo,
    cond: Conditioning<'a>,
    attach: &Attachment<'a>,
) -> Result<Var> {
    let cfg = &base.config;
    let expected = (cfg.frames, cfg.channels, cfg.latent_size(), cfg.latent_size());
    if latents.dims() != expected {
        return Err(dim_err(
            "denoiser input",
            format!("expected {:?}, got {:?}", expected, latents.dims()),
        ));
    }
    if cond.t >= cfg.timesteps {
        return Err(MivaError::StepOutOfRange {
            t: cond.t,
            total: cfg.timesteps,
        });
    }
    if cond.prompt.ncols() != cfg.token_dim {
        return Err(dim_err("prompt", "prompt width must equal token_dim"));
    }
    let uses = attach.uses();
    for u in &uses {
        check_adapter(base, u.miva, cond.slot)?;
    }
    let lay = layouts(cfg);

    let x = g.input(latents.to_tokens());
    let w_in = g.weight(&base.w_in);
    let b_in = g.weight(&base.b_in);
    let h = g.matmul(x, w_in);
    let h = g.add_row(h, b_in);
    let pos = g.input(base.positions.clone());
    let mut h = g.add(h, pos);

    let tf = g.input(timestep_features(cond.t, cfg.time_dim));
    let (tw1, tb1, tw2, tb2) = (
        g.weight(&base.time_w1),
        g.weight(&base.time_b1),
        g.weight(&base.time_w2),
        g.weight(&base.time_b2),
    );
    let c1 = g.matmul(tf, tw1);
    let c1 = g.add_row(c1, tb1);
    let c1 = g.silu(c1);
    let ct = g.matmul(c1, tw2);
    let ct = g.add_row(ct, tb2);
    let silu_ct = g.silu(ct);
    let w_temb = g.weight(&base.w_temb);
    let temb = g.matmul(silu_ct, w_temb);
    h = g.add_row(h, temb);

    let prompt = g.weight(cond.prompt);

    for (bi, block) in base.blocks.iter().enumerate() {
        // Spatial self-attention with cross-frame attention adapters.
        let n1 = g.layer_norm(h);
        let sa_out = spatial_slot(g, block, bi, n1, silu_ct, &lay, &uses, cond)?;
        h = g.add(h, sa_out);

        // Cross-attention plus implicit-prompt branches.
        let n2 = g.layer_norm(h);
        let ca_out = cross_slot(g, block, bi, n2, prompt, &uses);
        h = g.add(h, ca_out);

        // Temporal self-attention with LoRA adapters.
        let n3 = g.layer_norm(h);
        let tsa_out = temporal_slot(g, block, bi, n3, &lay, attach);
        h = g.add(h, tsa_out);

        let n4 = g.layer_norm(h);
        let (w1, b1, w2, b2) = (
            g.weight(&block.ff_w1),
            g.weight(&block.ff_b1),
            g.weight(&block.ff_w2),
            g.weight(&block.ff_b2),
        );
        let f1 = g.matmul(n4, w1);
        let f1 = g.add_row(f1, b1);
        let f1 = g.silu(f1);
        let f2 = g.matmul(f1, w2);
        let f2 = g.add_row(f2, b2);
        h = g.add(h, f2);
    }

    let nf = g.layer_norm(h);
    let w_out = g.weight(&base.w_out);
    let b_out = g.weight(&base.b_out);
    let out = g.matmul(nf, w_out);
    let v = g.add_row(out, b_out);

    // The trunk predicts v = alpha eps - sigma x0; convert to
    // eps = alpha v + sigma x_t so near-pure-noise steps stay exact.
    let sched = NoiseSchedule::linear(cfg.timesteps, 1)?;
    let (a, s) = (sched.alpha(cond.t)?, sched.sigma(cond.t)?);
    let v = g.scale(v, a);
    let skip = g.input(latents.to_tokens() * s);
    Ok(g.add(v, skip))
}

#[allow(clippy::too_many_arguments)]
fn spatial_slot<'a>(
    g: &mut Graph<'a>,
    block: &'a BaseBlock,
    bi: usize,
    n1: Var,
    silu_ct: Var,
    lay: &Layouts,
    uses: &[AdapterUse<'a>],
    cond: Conditioning<'a>,
) -> Result<Var> {
    let p = &block.sa;
    let (wq, wk, wv, wo) = (g.weight(&p.w_q), g.weight(&p.w_k), g.weight(&p.w_v), g.weight(&p.w_o));
    let q = g.matmul(n1, wq);
    let k = g.matmul(n1, wk);
    let v = g.matmul(n1, wv);
    let sa_layout = lay.spatial.clone().with_bias(cond.sa_bias.map(|b| b.sa.clone()));
    let att = g.attention(q, k, v, sa_layout);
    let mut out = g.matmul(att, wo);

    for u in uses {
        let slot = slot_of(u.miva, bi, cond.slot);
        let w_phi = g.weight(&slot.phi.w_phi);
        let logits = g.matmul(silu_ct, w_phi);
        let lambda = g.softmax_rows(logits);
        let biases = u.cfa_bias.map(|b| (b.first.clone(), b.prev.clone()));
        let refs = [
            (&slot.first, &lay.first, biases.as_ref().map(|b| b.0.clone()), 0),
            (&slot.prev, &lay.prev, biases.as_ref().map(|b| b.1.clone()), 1),
        ];
        for (cfa, layout, bias, idx) in refs {
            let (qd, qu) = (g.weight(&cfa.q.down), g.weight(&cfa.q.up));
            let (od, ou) = (g.weight(&cfa.o.down), g.weight(&cfa.o.up));
            let low = g.matmul(n1, qd);
            let dq = g.matmul(low, qu);
            let q_cfa = g.add(q, dq);
            let a = g.attention(q_cfa, k, v, layout.clone().with_bias(bias));
            let o = g.matmul(a, od);
            let o = g.matmul(o, ou);
            let mut o = g.scale_by(o, lambda, idx);
            if u.weight != 1.0 {
                o = g.scale(o, u.weight);
            }
            out = g.add(out, o);
        }
    }
    Ok(out)
}

fn cross_slot<'a>(
    g: &mut Graph<'a>,
    block: &'a BaseBlock,
    bi: usize,
    n2: Var,
    prompt: Var,
    uses: &[AdapterUse<'a>],
) -> Var {
    let p = &block.ca;
    let (wq, wk, wv, wo) = (g.weight(&p.w_q), g.weight(&p.w_k), g.weight(&p.w_v), g.weight(&p.w_o));
    let q = g.matmul(n2, wq);
    let k = g.matmul(prompt, wk);
    let v = g.matmul(prompt, wv);
    let rows = g.value(q).nrows();
    let kl = g.value(k).nrows();
    let layout = AttnLayout::dense(rows, kl, p.d_k());
    let att = g.attention(q, k, v, layout);
    let mut out = g.matmul(att, wo);
    for u in uses {
        let ca = &u.miva.blocks[bi].ca;
        let (a, b) = (g.weight(&ca.a), g.weight(&ca.b));
        let logits = g.matmul(q, a);
        let s = g.softmax_rows(logits);
        let mut r = g.matmul(s, b);
        if u.weight != 1.0 {
            r = g.scale(r, u.weight);
        }
        out = g.add(out, r);
    }
    out
}

fn temporal_attention<'a>(g: &mut Graph<'a>, nt: Var, proj: [Var; 4], lay: &Layouts) -> Var {
    let q = g.matmul(nt, proj[0]);
    let k = g.matmul(nt, proj[1]);
    let v = g.matmul(nt, proj[2]);
    let a = g.attention(q, k, v, lay.temporal.clone());
    let o = g.matmul(a, proj[3]);
    g.permute_rows(o, lay.to_frame.clone())
}

fn adapted_projections<'a>(g: &mut Graph<'a>, p: &'a AttentionParams, miva: &'a Miva, bi: usize) -> [Var; 4] {
    let t = &miva.blocks[bi].tsa;
    let mut out = [g.weight(&p.w_q); 4];
    for (i, (w, lora)) in [(&p.w_q, &t.q), (&p.w_k, &t.k), (&p.w_v, &t.v), (&p.w_o, &t.o)]
        .into_iter()
        .enumerate()
    {
        let wv = g.weight(w);
        let (d, u) = (g.weight(&lora.down), g.weight(&lora.up));
        let delta = g.matmul(d, u);
        out[i] = g.add(wv, delta);
    }
    out
}

fn temporal_slot<'a>(
    g: &mut Graph<'a>,
    block: &'a BaseBlock,
    bi: usize,
    n3: Var,
    lay: &Layouts,
    attach: &Attachment<'a>,
) -> Var {
    let p = &block.tsa;
    let nt = g.permute_rows(n3, lay.to_loc.clone());
    match attach {
        Attachment::Direct(u) => {
            let proj = adapted_projections(g, p, u.miva, bi);
            temporal_attention(g, nt, proj, lay)
        }
        Attachment::Base => {
            let proj = [g.weight(&p.w_q), g.weight(&p.w_k), g.weight(&p.w_v), g.weight(&p.w_o)];
            temporal_attention(g, nt, proj, lay)
        }
        Attachment::Composed(uses) => {
            let proj = [g.weight(&p.w_q), g.weight(&p.w_k), g.weight(&p.w_v), g.weight(&p.w_o)];
            let base_out = temporal_attention(g, nt, proj, lay);
            let mut out = base_out;
            for u in uses {
                let proj = adapted_projections(g, p, u.miva, bi);
                let adapted = temporal_attention(g, nt, proj, lay);
                let resid = g.sub(adapted, base_out);
                let resid = g.scale(resid, u.weight);
                out = g.add(out, resid);
            }
            out
        }
    }
}

/// Gradient-free noise prediction.
pub fn predict_noise(
    base: &BaseModel,
    latents: &LatentVideo,
    cond: Conditioning<'_>,
    attach: &Attachment<'_>,
) -> Result<Array4<f64>> {
    let mut g = Graph::new();
    let out = forward(&mut g, base, latents, cond, attach)?;
    tokens_to_video(g.value(out), latents.dims())
}

/// Token view helper re-exported for callers that assemble inputs manually.
pub fn latent_tokens(latents: &Array4<f64>) -> Mat {
    video_to_tokens(latents)
}
