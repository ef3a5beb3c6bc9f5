//! Toy causal diffusion transformer.
//!
//! Each block runs three stages on the video tokens:
//! AdaLN-modulated self-attention (keys = retained history, the chunk itself,
//! reference tokens), cross-attention to text plus one audio stream chosen by
//! layer parity, and an AdaLN-modulated FFN. The cross-attention output uses a
//! split projection, `W_o^txt · A_text + W_o^aud · A_audio`.
//!
//! Reference tokens only attend to each other, run at timestep 0 and skip the
//! cross-attention stage, so their K/V is a per-session constant.

mod weights;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use weights::{AudioBranch, BlockWeights, ModelWeights, TimeMlp};

use crate::checkpoint::Checkpoint;
use crate::denoise::TimestepSchedule;
use crate::error::{shape_err, LpmError, Result};
use crate::kvcache::{chunk_positions, KvEntry, KvVariant, LayerWindow, RetentionPolicy, WindowKv};
use crate::latcore::{matmul, rmsnorm_rows, softmax_rows, BoolMask, LatentChunk, Tensor2D, TokenKind};
use crate::maskgen::{audio_window_mask_at, windowed_context_mask, AudioWindow, AudioWindowSpec};
use crate::ropekit::{apply_rope, ref_position, Position3, RefType, RopeParams, SegmentOffsets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub tokens_per_chunk: usize,
    pub d_cond: usize,
    /// Width of the sinusoidal timestep features.
    pub d_freq: usize,
    pub ffn_mult: usize,
    pub audio: AudioWindowSpec,
    pub audio_fps: f64,
    pub rope_base: f64,
    pub offsets: SegmentOffsets,
    /// Temporal length used as `t` when placing reference tokens.
    pub ref_t_len: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            tokens_per_chunk: 8,
            d_cond: 32,
            d_freq: 32,
            ffn_mult: 2,
            audio: AudioWindowSpec::default(),
            audio_fps: 16.0,
            rope_base: 10_000.0,
            offsets: SegmentOffsets::default(),
            ref_t_len: (RetentionPolicy::default().capacity() * 8) as u64,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fuzzing and property sweeps.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            tokens_per_chunk: 4,
            d_cond: 8,
            d_freq: 8,
            ref_t_len: 20,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn rope(&self) -> Result<RopeParams> {
        RopeParams::new(self.head_dim(), self.rope_base, (self.head_dim(), 0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || !self.n_layers.is_multiple_of(2) {
            return Err(LpmError::Config(format!("n_layers {} must be even and > 0", self.n_layers)));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LpmError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.tokens_per_chunk == 0 || self.d_cond == 0 || self.d_freq < 2 || !self.d_freq.is_multiple_of(2) {
            return Err(LpmError::Config("tokens_per_chunk, d_cond must be > 0 and d_freq even".into()));
        }
        self.audio.validate()?;
        self.offsets.validate()?;
        if self.ref_t_len > self.offsets.max_video_t_len {
            return Err(LpmError::Config("ref_t_len exceeds the offset table's video bound".into()));
        }
        self.rope()?;
        Ok(())
    }
}

/// Audio features on an absolute timeline: frame `f` sits at `t0 + f / fps` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub frames: Tensor2D,
    pub t0: f64,
}

impl AudioFeatures {
    pub fn empty(d_cond: usize) -> Self {
        Self {
            frames: Tensor2D::zeros(0, d_cond),
            t0: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondBundle {
    pub text_tokens: Tensor2D,
    pub speak_audio: AudioFeatures,
    pub listen_audio: AudioFeatures,
    pub ref_tokens: Tensor2D,
    /// Reference type and sub-index of each reference token.
    pub ref_slots: Vec<(RefType, u64)>,
    pub speak_muted: bool,
    pub listen_muted: bool,
}

impl CondBundle {
    /// No text, muted audio, no references.
    pub fn empty(cfg: &ModelConfig) -> Self {
        Self {
            text_tokens: Tensor2D::zeros(0, cfg.d_cond),
            speak_audio: AudioFeatures::empty(cfg.d_cond),
            listen_audio: AudioFeatures::empty(cfg.d_cond),
            ref_tokens: Tensor2D::zeros(0, cfg.d_model),
            ref_slots: Vec::new(),
            speak_muted: true,
            listen_muted: true,
        }
    }

    pub fn audio(&self, branch: AudioBranch) -> (&AudioFeatures, bool) {
        match branch {
            AudioBranch::Speak => (&self.speak_audio, self.speak_muted),
            AudioBranch::Listen => (&self.listen_audio, self.listen_muted),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.text_tokens.cols() != cfg.d_cond && self.text_tokens.rows() > 0 {
            return shape_err("text tokens width != d_cond");
        }
        for a in [&self.speak_audio, &self.listen_audio] {
            if a.frames.rows() > 0 && a.frames.cols() != cfg.d_cond {
                return shape_err("audio frame width != d_cond");
            }
        }
        if self.ref_tokens.rows() != self.ref_slots.len() {
            return shape_err(format!(
                "{} reference tokens but {} reference slots",
                self.ref_tokens.rows(),
                self.ref_slots.len()
            ));
        }
        if self.ref_tokens.rows() > 0 && self.ref_tokens.cols() != cfg.d_model {
            return shape_err("reference token width != d_model");
        }
        Ok(())
    }
}

/// One chunk of queries fed to [`ToyDit::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ChunkInput<'a> {
    pub chunk_index: usize,
    pub tokens: &'a Tensor2D,
    pub timestep: f32,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Keep each layer's normalized self-attention input (what W_k/W_v see).
    pub capture_layer_inputs: bool,
    /// Keep each layer's cross-attention stage outputs.
    pub capture_cross: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossOutput {
    pub a_text: Tensor2D,
    pub a_audio: Tensor2D,
    /// `W_o^txt·A_text + W_o^aud·A_audio`, the residual update.
    pub out: Tensor2D,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Clean-latent prediction, one row per query token.
    pub output: Tensor2D,
    /// Pre-RoPE (K, V) per layer, rows aligned with the queries.
    pub layer_kv: Vec<(Tensor2D, Tensor2D)>,
    pub layer_inputs: Vec<Tensor2D>,
    pub cross: Vec<CrossOutput>,
    /// Residual stream entering each layer's cross-attention stage.
    pub cross_inputs: Vec<Tensor2D>,
}

/// Per-row inputs shared by every block of one forward pass.
pub struct BlockContext<'a> {
    /// rows × 6·d_model AdaLN parameters.
    pub modulation: &'a Tensor2D,
    pub positions: &'a [Position3],
    /// rows × (history + rows + refs) additive attention bias.
    pub bias: &'a Tensor2D,
    pub history: &'a LayerWindow,
    pub cond: &'a CondBundle,
    pub speak_mask: &'a BoolMask,
    pub listen_mask: &'a BoolMask,
}

pub struct BlockOut {
    pub h: Tensor2D,
    pub k_pre: Tensor2D,
    pub v_pre: Tensor2D,
    pub normed_input: Tensor2D,
    pub cross_input: Tensor2D,
    pub cross: CrossOutput,
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_row_bias(m: &mut Tensor2D, b: &Tensor2D) {
    for r in 0..m.rows() {
        for (x, y) in m.row_mut(r).iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Multi-head scaled dot-product attention with an optional additive bias.
pub fn multi_head_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    n_heads: usize,
    bias: Option<&Tensor2D>,
) -> Result<Tensor2D> {
    if q.cols() != k.cols() || k.rows() != v.rows() || !q.cols().is_multiple_of(n_heads) {
        return shape_err(format!(
            "attention q {:?} k {:?} v {:?} heads {n_heads}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let hd = q.cols() / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Tensor2D::zeros(q.rows(), v.cols());
    let vd = v.cols() / n_heads;
    for head in 0..n_heads {
        let qh = q.slice_cols(head * hd, hd);
        let kh = k.slice_cols(head * hd, hd);
        let vh = v.slice_cols(head * vd, vd);
        let mut logits = matmul(&qh, &kh.transpose())?.scale(scale);
        if let Some(b) = bias {
            logits.add_assign(b)?;
        }
        let p = softmax_rows(&logits, None)?;
        out.write_cols(head * vd, &matmul(&p, &vh)?);
    }
    Ok(out)
}

fn sinusoid(t: f32, dim: usize) -> Tensor2D {
    let half = dim / 2;
    let mut v = Tensor2D::zeros(1, dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * 1000.0 * freq;
        v.set(0, i, arg.cos() as f32);
        v.set(0, half + i, arg.sin() as f32);
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDit {
    cfg: ModelConfig,
    weights: ModelWeights,
    rope: RopeParams,
}

impl ToyDit {
    pub fn new(cfg: ModelConfig, weights: ModelWeights) -> Result<Self> {
        cfg.validate()?;
        weights.check_shapes(&cfg)?;
        let rope = cfg.rope()?;
        Ok(Self { cfg, weights, rope })
    }

    pub fn random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let w = ModelWeights::random(&cfg, seed);
        Self::new(cfg, w)
    }

    /// Pass-through harness: x̂0 equals the input latents.
    pub fn passthrough(cfg: ModelConfig) -> Result<Self> {
        let w = ModelWeights::zeros(&cfg);
        Self::new(cfg, w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        self.weights.to_checkpoint(&self.cfg)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (cfg, w) = ModelWeights::from_checkpoint(ck)?;
        Self::new(cfg, w)
    }

    /// Timestep embedding row (1 × d_model).
    pub fn time_embedding(&self, t: f32) -> Result<Tensor2D> {
        let tm = &self.weights.time;
        let mut h = matmul(&sinusoid(t, self.cfg.d_freq), &tm.w1)?;
        add_row_bias(&mut h, &tm.b1);
        h.data_mut().iter_mut().for_each(|x| *x = silu(*x));
        let mut e = matmul(&h, &tm.w2)?;
        add_row_bias(&mut e, &tm.b2);
        Ok(e)
    }

    fn modulation(&self, layer: usize, t_embed: &Tensor2D) -> Result<Tensor2D> {
        let b = &self.weights.blocks[layer];
        let act = Tensor2D::from_vec(
            1,
            t_embed.cols(),
            t_embed.data().iter().map(|x| silu(*x)).collect(),
        )?;
        let mut m = matmul(&act, &b.ada_w)?;
        add_row_bias(&mut m, &b.ada_b);
        Ok(m)
    }

    fn modulate(&self, x: &Tensor2D, gain: &[f32], modulation: &Tensor2D, which: usize) -> Result<Tensor2D> {
        let d = self.cfg.d_model;
        let mut u = rmsnorm_rows(x, gain)?;
        for r in 0..u.rows() {
            let m = modulation.row(r);
            let (shift, scale) = (&m[which * 3 * d..][..d], &m[(which * 3 + 1) * d..][..d]);
            for ((x, sh), sc) in u.row_mut(r).iter_mut().zip(shift).zip(scale) {
                *x = *x * (1.0 + sc) + sh;
            }
        }
        Ok(u)
    }

    fn gated_residual(&self, h: &mut Tensor2D, update: &Tensor2D, modulation: &Tensor2D, which: usize) {
        let d = self.cfg.d_model;
        for r in 0..h.rows() {
            let gate = &modulation.row(r)[(which * 3 + 2) * d..][..d];
            for ((x, u), g) in h.row_mut(r).iter_mut().zip(update.row(r)).zip(gate) {
                *x += g * u;
            }
        }
    }

    /// Cross-attention stage for one layer. The audio branch is fixed by the
    /// layer's parity; a muted stream or one without frames yields `A_audio = 0`.
    pub fn cross_attention(
        &self,
        layer: usize,
        h: &Tensor2D,
        cond: &CondBundle,
        speak_mask: &BoolMask,
        listen_mask: &BoolMask,
    ) -> Result<CrossOutput> {
        let b = &self.weights.blocks[layer];
        let d = self.cfg.d_model;
        let q = rmsnorm_rows(&matmul(h, &b.cross_wq)?, &b.cross_q_gain)?;
        let a_text = if cond.text_tokens.rows() > 0 {
            let k = matmul(&cond.text_tokens, &b.wk_txt)?;
            let v = matmul(&cond.text_tokens, &b.wv_txt)?;
            multi_head_attention(&q, &k, &v, self.cfg.n_heads, None)?
        } else {
            Tensor2D::zeros(h.rows(), d)
        };
        let (audio, muted) = cond.audio(b.branch);
        let mask = match b.branch {
            AudioBranch::Speak => speak_mask,
            AudioBranch::Listen => listen_mask,
        };
        let a_audio = if muted || audio.frames.rows() == 0 {
            Tensor2D::zeros(h.rows(), d)
        } else {
            if mask.shape() != (h.rows(), audio.frames.rows()) {
                return shape_err(format!(
                    "audio mask {:?} for {} queries and {} frames",
                    mask.shape(),
                    h.rows(),
                    audio.frames.rows()
                ));
            }
            let k = matmul(&audio.frames, &b.wk_aud)?;
            let v = matmul(&audio.frames, &b.wv_aud)?;
            multi_head_attention(&q, &k, &v, self.cfg.n_heads, Some(&mask.to_bias()))?
        };
        let out = split_projection(&a_text, &a_audio, &b.wo_txt, &b.wo_aud)?;
        Ok(CrossOutput { a_text, a_audio, out })
    }

    /// One transformer block over the query rows `h`.
    pub fn forward_block(&self, layer: usize, h: &Tensor2D, ctx: &BlockContext<'_>) -> Result<BlockOut> {
        let b = self
            .weights
            .blocks
            .get(layer)
            .ok_or_else(|| LpmError::Shape(format!("layer {layer} out of range")))?;
        if h.cols() != self.cfg.d_model || ctx.positions.len() != h.rows() || ctx.modulation.rows() != h.rows() {
            return shape_err(format!("block input {:?}", h.shape()));
        }
        let mut h = h.clone();

        let u = self.modulate(&h, &b.norm1, ctx.modulation, 0)?;
        let q = matmul(&u, &b.wq)?;
        let k_pre = matmul(&u, &b.wk)?;
        let v_pre = matmul(&u, &b.wv)?;
        let q_rot = apply_rope(&q, ctx.positions, &self.rope)?;
        let k_rot = apply_rope(&k_pre, ctx.positions, &self.rope)?;
        let keys = Tensor2D::vstack(&[&ctx.history.video_k, &k_rot, &ctx.history.ref_k])?;
        let values = Tensor2D::vstack(&[&ctx.history.video_v, &v_pre, &ctx.history.ref_v])?;
        let attn = multi_head_attention(&q_rot, &keys, &values, self.cfg.n_heads, Some(ctx.bias))?;
        let attn = matmul(&attn, &b.wo)?;
        self.gated_residual(&mut h, &attn, ctx.modulation, 0);

        let cross_input = h.clone();
        let cross = self.cross_attention(layer, &h, ctx.cond, ctx.speak_mask, ctx.listen_mask)?;
        h.add_assign(&cross.out)?;

        let u2 = self.modulate(&h, &b.norm2, ctx.modulation, 1)?;
        let mut f = matmul(&u2, &b.ffn_w1)?;
        add_row_bias(&mut f, &b.ffn_b1);
        f.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        let mut f = matmul(&f, &b.ffn_w2)?;
        add_row_bias(&mut f, &b.ffn_b2);
        self.gated_residual(&mut h, &f, ctx.modulation, 1);

        if !h.all_finite() {
            return Err(LpmError::NonFinite("forward_block"));
        }
        Ok(BlockOut {
            h,
            k_pre,
            v_pre,
            normed_input: u,
            cross_input,
            cross,
        })
    }

    /// Reference-token positions for `cond`.
    pub fn reference_positions(&self, cond: &CondBundle) -> Result<Vec<Position3>> {
        cond.ref_slots
            .iter()
            .map(|&(ty, j)| ref_position(self.cfg.ref_t_len, ty, j, &self.cfg.offsets, 0, 0))
            .collect()
    }

    /// Pre-RoPE reference K/V for every layer. References attend only among
    /// themselves at timestep 0, so this is constant for a session.
    pub fn reference_kv(&self, cond: &CondBundle) -> Result<Vec<(Tensor2D, Tensor2D)>> {
        cond.validate(&self.cfg)?;
        let d = self.cfg.d_model;
        let n = cond.ref_tokens.rows();
        let positions = self.reference_positions(cond)?;
        let t_embed = self.time_embedding(0.0)?;
        let mut h = if n == 0 { Tensor2D::zeros(0, d) } else { cond.ref_tokens.clone() };
        let mut out = Vec::with_capacity(self.cfg.n_layers);
        for (layer, b) in self.weights.blocks.iter().enumerate() {
            let m = self.modulation(layer, &t_embed)?;
            let modulation = Tensor2D::vstack(&vec![&m; n])?;
            if n == 0 {
                out.push((Tensor2D::zeros(0, d), Tensor2D::zeros(0, d)));
                continue;
            }
            let u = self.modulate(&h, &b.norm1, &modulation, 0)?;
            let q = matmul(&u, &b.wq)?;
            let k = matmul(&u, &b.wk)?;
            let v = matmul(&u, &b.wv)?;
            let q_rot = apply_rope(&q, &positions, &self.rope)?;
            let k_rot = apply_rope(&k, &positions, &self.rope)?;
            let attn = multi_head_attention(&q_rot, &k_rot, &v, self.cfg.n_heads, None)?;
            let attn = matmul(&attn, &b.wo)?;
            self.gated_residual(&mut h, &attn, &modulation, 0);
            let u2 = self.modulate(&h, &b.norm2, &modulation, 1)?;
            let mut f = matmul(&u2, &b.ffn_w1)?;
            add_row_bias(&mut f, &b.ffn_b1);
            f.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
            let mut f = matmul(&f, &b.ffn_w2)?;
            add_row_bias(&mut f, &b.ffn_b2);
            self.gated_residual(&mut h, &f, &modulation, 1);
            out.push((k, v));
        }
        Ok(out)
    }

    /// Window with references only, for uncached forwards.
    pub fn reference_window(&self, cond: &CondBundle) -> Result<WindowKv> {
        let refs = self.reference_kv(cond)?;
        WindowKv::references_only(
            self.cfg.tokens_per_chunk,
            self.cfg.d_model,
            &refs,
            &self.reference_positions(cond)?,
            &self.rope,
        )
    }

    /// Speak and listen cross-attention masks for the query rows of `inputs`.
    pub fn audio_masks(&self, inputs: &[ChunkInput<'_>], cond: &CondBundle) -> Result<(BoolMask, BoolMask)> {
        Ok((
            self.audio_mask(inputs, &cond.speak_audio, self.cfg.audio.speak_window)?,
            self.audio_mask(inputs, &cond.listen_audio, self.cfg.audio.listen_window)?,
        ))
    }

    fn audio_mask(&self, inputs: &[ChunkInput<'_>], audio: &AudioFeatures, window: usize) -> Result<BoolMask> {
        let tpc = self.cfg.tokens_per_chunk;
        let n_frames = audio.frames.rows();
        let mut mask = BoolMask::new(inputs.len() * tpc, n_frames, false);
        for (i, input) in inputs.iter().enumerate() {
            let m = audio_window_mask_at(
                input.chunk_index as f64,
                tpc,
                tpc as f64,
                audio.t0,
                n_frames,
                self.cfg.audio_fps,
                AudioWindow::Frames(window),
            )?;
            for r in 0..tpc {
                for c in 0..n_frames {
                    mask.set(i * tpc + r, c, m.get(r, c));
                }
            }
        }
        Ok(mask)
    }

    /// Runs the stack over `inputs` (ascending chunk indices, all after the
    /// history chunks). Input `i` sits at window slot `history.chunk_ids.len() + i`.
    pub fn forward(
        &self,
        inputs: &[ChunkInput<'_>],
        cond: &CondBundle,
        history: &WindowKv,
        opts: ForwardOptions,
    ) -> Result<ForwardOut> {
        let tpc = self.cfg.tokens_per_chunk;
        let d = self.cfg.d_model;
        cond.validate(&self.cfg)?;
        if inputs.is_empty() {
            return Err(LpmError::Contract("forward needs at least one chunk".into()));
        }
        if history.layers.len() != self.cfg.n_layers || history.tokens_per_chunk != tpc {
            return shape_err("history window does not match the model");
        }
        let mut ids = history.chunk_ids.clone();
        for input in inputs {
            if input.tokens.shape() != (tpc, d) {
                return shape_err(format!(
                    "chunk {} tokens {:?}, expected ({tpc}, {d})",
                    input.chunk_index,
                    input.tokens.shape()
                ));
            }
            if ids.last().is_some_and(|&last| last >= input.chunk_index) {
                return Err(LpmError::Contract(format!(
                    "chunk {} does not follow {:?}",
                    input.chunk_index, ids
                )));
            }
            ids.push(input.chunk_index);
        }
        let n_hist = history.n_video_tokens();
        let n_q = inputs.len() * tpc;
        let full = windowed_context_mask(&ids, tpc, history.n_ref_tokens())?;
        let bias = full.slice_rows(n_hist, n_q).to_bias();

        let first_slot = history.chunk_ids.len();
        let positions: Vec<Position3> = (0..inputs.len())
            .flat_map(|i| chunk_positions(first_slot + i, tpc))
            .collect();
        let (speak_mask, listen_mask) = self.audio_masks(inputs, cond)?;

        let tokens: Vec<&Tensor2D> = inputs.iter().map(|c| c.tokens).collect();
        let mut h = Tensor2D::vstack(&tokens)?;
        let t_embeds = inputs
            .iter()
            .map(|c| self.time_embedding(c.timestep))
            .collect::<Result<Vec<_>>>()?;

        let mut layer_kv = Vec::with_capacity(self.cfg.n_layers);
        let mut layer_inputs = Vec::new();
        let mut cross = Vec::new();
        let mut cross_inputs = Vec::new();
        for layer in 0..self.cfg.n_layers {
            let per_chunk = t_embeds
                .iter()
                .map(|e| self.modulation(layer, e))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<&Tensor2D> = per_chunk.iter().flat_map(|m| std::iter::repeat_n(m, tpc)).collect();
            let modulation = Tensor2D::vstack(&rows)?;
            let ctx = BlockContext {
                modulation: &modulation,
                positions: &positions,
                bias: &bias,
                history: &history.layers[layer],
                cond,
                speak_mask: &speak_mask,
                listen_mask: &listen_mask,
            };
            let out = self.forward_block(layer, &h, &ctx)?;
            h = out.h;
            layer_kv.push((out.k_pre, out.v_pre));
            if opts.capture_layer_inputs {
                layer_inputs.push(out.normed_input);
            }
            if opts.capture_cross {
                cross.push(out.cross);
                cross_inputs.push(out.cross_input);
            }
        }
        let mut output = matmul(&h, &self.weights.w_out)?;
        output.add_assign(&h)?;
        Ok(ForwardOut {
            output,
            layer_kv,
            layer_inputs,
            cross,
            cross_inputs,
        })
    }

    /// Uncached forward over consecutive chunks starting the window at slot 0.
    pub fn full_forward(&self, chunks: &[LatentChunk], cond: &CondBundle, opts: ForwardOptions) -> Result<ForwardOut> {
        let inputs: Vec<ChunkInput<'_>> = chunks
            .iter()
            .map(|c| ChunkInput {
                chunk_index: c.chunk_index,
                tokens: &c.tokens,
                timestep: c.timestep,
            })
            .collect();
        self.forward(&inputs, cond, &self.reference_window(cond)?, opts)
    }
}

/// `W_o^txt·A_text + W_o^aud·A_audio`.
pub fn split_projection(a_text: &Tensor2D, a_audio: &Tensor2D, wo_txt: &Tensor2D, wo_aud: &Tensor2D) -> Result<Tensor2D> {
    matmul(a_text, wo_txt)?.add(&matmul(a_audio, wo_aud)?)
}

/// Pre-RoPE K/V of one processed chunk, all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkKv {
    pub chunk_index: usize,
    pub layers: Vec<(Tensor2D, Tensor2D)>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub x0: Vec<LatentChunk>,
    pub kv: Vec<ChunkKv>,
}

fn split_prediction(inputs: &[ChunkInput<'_>], out: ForwardOut, tpc: usize) -> Prediction {
    let mut x0 = Vec::with_capacity(inputs.len());
    let mut kv = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        x0.push(LatentChunk::new(input.chunk_index, out.output.slice_rows(i * tpc, tpc), 0.0));
        kv.push(ChunkKv {
            chunk_index: input.chunk_index,
            layers: out
                .layer_kv
                .iter()
                .map(|(k, v)| (k.slice_rows(i * tpc, tpc), v.slice_rows(i * tpc, tpc)))
                .collect(),
        });
    }
    Prediction { x0, kv }
}

/// Captured K/V as cache entries, tagged with the variant that produced them.
pub fn export_kv(pred: &Prediction, variant: KvVariant, policy: &RetentionPolicy) -> Vec<KvEntry> {
    pred.kv
        .iter()
        .flat_map(|c| {
            let kind = if c.chunk_index < policy.sink_chunks {
                TokenKind::Sink
            } else {
                TokenKind::Video
            };
            c.layers.iter().enumerate().map(move |(layer, (k, v))| {
                KvEntry::new(c.chunk_index, layer, variant, kind, k.clone(), v.clone())
            })
        })
        .collect()
}

fn inputs_of(chunks: &[LatentChunk]) -> Vec<ChunkInput<'_>> {
    chunks
        .iter()
        .map(|c| ChunkInput {
            chunk_index: c.chunk_index,
            tokens: &c.tokens,
            timestep: c.timestep,
        })
        .collect()
}

/// Two-step causal generator. Reads noisy-history K/V.
#[derive(Debug)]
pub struct Backbone {
    model: ToyDit,
    evals: AtomicUsize,
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        Self::new(self.model.clone())
    }
}

impl Backbone {
    pub fn new(model: ToyDit) -> Self {
        Self {
            model,
            evals: AtomicUsize::new(0),
        }
    }

    pub fn model(&self) -> &ToyDit {
        &self.model
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::SeqCst)
    }

    /// Predicts clean latents for `x_t`. Timesteps must come from `{T0, T1}`
    /// and be non-decreasing over the history-then-input chunk order.
    pub fn predict(
        &self,
        x_t: &[LatentChunk],
        cond: &CondBundle,
        history: &WindowKv,
        sched: &TimestepSchedule,
    ) -> Result<Prediction> {
        for c in x_t {
            if c.timestep != sched.t0 && c.timestep != sched.t1 {
                return Err(LpmError::Contract(format!(
                    "backbone input chunk {} at t={} outside {{T0, T1}}",
                    c.chunk_index, c.timestep
                )));
            }
        }
        if x_t.windows(2).any(|w| w[1].timestep < w[0].timestep) {
            return Err(LpmError::Contract("backbone timesteps decrease across chunks".into()));
        }
        self.evals.fetch_add(1, Ordering::SeqCst);
        let inputs = inputs_of(x_t);
        let out = self.model.forward(&inputs, cond, history, ForwardOptions::default())?;
        Ok(split_prediction(&inputs, out, self.model.cfg.tokens_per_chunk))
    }
}

/// One-step causal refiner. Reads clean-history K/V; inputs sit at `T2`.
#[derive(Debug)]
pub struct Refiner {
    model: ToyDit,
    evals: AtomicUsize,
}

impl Clone for Refiner {
    fn clone(&self) -> Self {
        Self::new(self.model.clone())
    }
}

impl Refiner {
    pub fn new(model: ToyDit) -> Self {
        Self {
            model,
            evals: AtomicUsize::new(0),
        }
    }

    /// Refiner initialized as an exact copy of a backbone.
    pub fn from_backbone(backbone: &Backbone) -> Self {
        Self::new(backbone.model.clone())
    }

    pub fn model(&self) -> &ToyDit {
        &self.model
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::SeqCst)
    }

    pub fn predict(
        &self,
        x_t2: &[LatentChunk],
        cond: &CondBundle,
        history: &WindowKv,
        sched: &TimestepSchedule,
    ) -> Result<Prediction> {
        if let Some(c) = x_t2.iter().find(|c| c.timestep != sched.t2) {
            return Err(LpmError::Contract(format!(
                "refiner input chunk {} at t={}, expected T2={}",
                c.chunk_index, c.timestep, sched.t2
            )));
        }
        self.evals.fetch_add(1, Ordering::SeqCst);
        let inputs = inputs_of(x_t2);
        let out = self.model.forward(&inputs, cond, history, ForwardOptions::default())?;
        Ok(split_prediction(&inputs, out, self.model.cfg.tokens_per_chunk))
    }
}

#[cfg(test)]
mod tests;
