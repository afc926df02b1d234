//! Token-conditioned short-clip denoiser.
//!
//! A small transformer backbone (pretrained unconditionally, then frozen)
//! predicts the noise in a clip latent from text and timestep. A trainable
//! cross-attention branch injects condensed clip tokens: the combined
//! text-video stream attends to the token stream additively, and the token
//! stream attends back to everything. All branch outputs are gated by
//! zero-initialized parameters so conditioning starts as a no-op.

use rand::Rng;

use crate::config::RunConfig;
use crate::diffusion::{sample_timesteps_explicit_uniform, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{
    adaln_modulate, apply_gate, multi_head_attend, FeedForward, LayerNorm, Linear, Modulation,
    MultiHeadAttention, TimestepEmbedder,
};
use crate::optim::Adam;
use crate::rope::{Rope3dTable, RopeTables};
use crate::tensor::Tensor;
use crate::tokenizer::Resampler;

/// Fixed-length text conditioning rows for one prompt.
#[derive(Clone)]
pub struct TextEmbedding {
    /// `(l_text, d)`.
    pub tokens: Tensor,
    pub prompt_id: usize,
}

/// Learned embedding table over the synthetic prompt vocabulary; each prompt
/// owns `l_text` consecutive rows.
#[derive(Clone)]
pub struct TextVocab {
    pub table: Tensor, // (vocab_size * l_text, d)
    pub l_text: usize,
    pub vocab_size: usize,
}

impl TextVocab {
    pub fn new<R: Rng>(vocab_size: usize, l_text: usize, d: usize, rng: &mut R) -> TextVocab {
        TextVocab {
            table: Tensor::randn(&[vocab_size * l_text, d], 0.02, rng).trainable(),
            l_text,
            vocab_size,
        }
    }

    pub fn embed(&self, prompt_id: usize) -> Result<TextEmbedding> {
        if prompt_id >= self.vocab_size {
            return Err(Error::msg(format!(
                "prompt id {} outside vocabulary of {}",
                prompt_id, self.vocab_size
            )));
        }
        let idx: Vec<usize> = (prompt_id * self.l_text..(prompt_id + 1) * self.l_text).collect();
        Ok(TextEmbedding {
            tokens: self.table.gather_rows(&idx)?,
            prompt_id,
        })
    }
}

/// Semantic conditioning for one clip in backbone channel width `c_s`,
/// plus its token grid for rotary positions.
#[derive(Clone)]
pub struct SemCondition {
    /// `(l_sem, c_s)`.
    pub z: Tensor,
    pub grid: (usize, usize, usize),
}

/// Attention outputs of one joint pass, before gating.
pub struct JointAttentionOut {
    /// Base path over the combined text-video rows, output-projected.
    pub tv_base: Tensor,
    /// Additive cross-branch term over the same rows (absent without tokens).
    pub tv_cross: Option<Tensor>,
    /// Updated token stream (absent without tokens).
    pub sem: Option<Tensor>,
}

/// One denoiser block: frozen backbone attention and feed-forward plus the
/// trainable cross-attention branch.
pub struct To2vBlock {
    // backbone (frozen after base pretraining)
    pub ln_tv: LayerNorm,
    pub text_mod: Modulation,
    pub vision_mod: Modulation,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    // cross-attention branch (trainable)
    pub wq_c: Linear,
    pub wk_c: Linear,
    pub wv_c: Linear,
    pub wo_c: Linear,
    pub sem_ln: LayerNorm,
    pub sem_mod: Modulation,
    pub sem_ffn_ln: LayerNorm,
    pub sem_ffn: FeedForward,
    /// Per-channel gate on the cross term, zero at init.
    pub cross_gate: Tensor,
    pub n_heads: usize,
}

impl To2vBlock {
    pub fn new<R: Rng>(d: usize, n_heads: usize, ffn_mult: usize, rng: &mut R) -> To2vBlock {
        To2vBlock {
            ln_tv: LayerNorm::new(d),
            text_mod: Modulation::new_passthrough(d, rng),
            vision_mod: Modulation::new_passthrough(d, rng),
            attn: MultiHeadAttention::new(d, n_heads, rng),
            ln_ffn: LayerNorm::new(d),
            ffn: FeedForward::new(d, ffn_mult, rng),
            wq_c: Linear::new(d, d, rng),
            wk_c: Linear::new(d, d, rng),
            // zero value projection: a fresh branch is an exact no-op on the
            // pretrained path, yet still receives gradients through V
            wv_c: Linear::zeros(d, d),
            wo_c: Linear::new(d, d, rng),
            sem_ln: LayerNorm::new(d),
            sem_mod: Modulation::zero_init(d),
            sem_ffn_ln: LayerNorm::new(d),
            sem_ffn: FeedForward::new(d, ffn_mult, rng),
            cross_gate: Tensor::from_vec(&[d], vec![1.0; d]).unwrap().trainable(),
            n_heads,
        }
    }

    pub fn base_params(&self) -> Vec<Tensor> {
        let mut p = self.ln_tv.params();
        p.extend(self.text_mod.params());
        p.extend(self.vision_mod.params());
        p.extend(self.attn.params());
        p.extend(self.ln_ffn.params());
        p.extend(self.ffn.params());
        p
    }

    pub fn branch_params(&self) -> Vec<Tensor> {
        let mut p = Vec::new();
        for l in [&self.wq_c, &self.wk_c, &self.wv_c, &self.wo_c] {
            p.extend(l.params());
        }
        p.extend(self.sem_ln.params());
        p.extend(self.sem_mod.params());
        p.extend(self.sem_ffn_ln.params());
        p.extend(self.sem_ffn.params());
        p.push(self.cross_gate.clone());
        p
    }
}

/// Combined attention of the text-video stream and the token stream.
///
/// With tokens present:
///   tv_base  = Wo(Attn(Q, K, V))              with Q,K,V from z_tv (base)
///   tv_cross = Attn(Q_tv, K_s, V_s)           with branch projections
///   sem      = Wo_c(Attn(Q_s, [K;K_s], [V;V_s]))
/// Rotary tables rotate video rows (text rows pass through) and token rows.
pub fn joint_attention(
    z_text: &Tensor,
    z_video: &Tensor,
    z_sem: Option<&Tensor>,
    w: &To2vBlock,
    rope_tv: Option<&RopeTables>,
    rope_sem: Option<&RopeTables>,
) -> Result<JointAttentionOut> {
    let z_tv = Tensor::concat_rows(&[z_text.clone(), z_video.clone()])?;
    let q = w.attn.wq.forward(&z_tv)?;
    let k = w.attn.wk.forward(&z_tv)?;
    let v = w.attn.wv.forward(&z_tv)?;
    let base_ctx = multi_head_attend(&q, &k, &v, w.n_heads, rope_tv, rope_tv, None)?;
    let tv_base = w.attn.wo.forward(&base_ctx)?;
    let (tv_cross, sem) = match z_sem {
        None => (None, None),
        Some(zs) => {
            let q_tv = w.wq_c.forward(&z_tv)?;
            let k_s = w.wk_c.forward(zs)?;
            let v_s = w.wv_c.forward(zs)?;
            let cross =
                multi_head_attend(&q_tv, &k_s, &v_s, w.n_heads, rope_tv, rope_sem, None)?;
            let q_s = w.wq_c.forward(zs)?;
            let k_cat = Tensor::concat_rows(&[k.clone(), k_s])?;
            let v_cat = Tensor::concat_rows(&[v.clone(), v_s])?;
            let rope_cat = match (rope_tv, rope_sem) {
                (Some(a), Some(b)) => Some(concat_ropes(a, b)),
                (None, None) => None,
                _ => {
                    return Err(Error::msg(
                        "rotary tables must cover both streams or neither",
                    ))
                }
            };
            let sem_ctx = multi_head_attend(
                &q_s,
                &k_cat,
                &v_cat,
                w.n_heads,
                rope_sem,
                rope_cat.as_ref(),
                None,
            )?;
            (Some(cross), Some(w.wo_c.forward(&sem_ctx)?))
        }
    };
    Ok(JointAttentionOut {
        tv_base,
        tv_cross,
        sem,
    })
}

fn concat_ropes(a: &RopeTables, b: &RopeTables) -> RopeTables {
    let mut cos = a.cos.clone();
    cos.extend_from_slice(&b.cos);
    let mut sin = a.sin.clone();
    sin.extend_from_slice(&b.sin);
    RopeTables { cos, sin }
}

/// Identity rotation rows for unrotated (text) positions, prepended to a
/// positional table.
fn prepend_identity(rope: &RopeTables, rows: usize, head_dim: usize) -> RopeTables {
    let mut cos = vec![1.0f32; rows * head_dim];
    let mut sin = vec![0.0f32; rows * head_dim];
    cos.extend_from_slice(&rope.cos);
    sin.extend_from_slice(&rope.sin);
    RopeTables { cos, sin }
}

/// The full clip denoiser.
pub struct To2v {
    pub d: usize,
    pub n_heads: usize,
    pub l_text: usize,
    pub f_s: usize,
    pub spatial: usize, // h_s * w_s
    pub c_s: usize,
    pub patch_in: Linear, // c_s -> d (backbone)
    pub t_embedder: TimestepEmbedder,
    pub text_vocab: TextVocab,
    pub blocks: Vec<To2vBlock>,
    pub head_ln: LayerNorm,
    pub head: Linear, // d -> c_s, zero at init so eps starts at 0
    /// Branch-side embed of condition channels into model width.
    pub sem_embed: Linear, // c_s -> d
    rope: Rope3dTable,
    grid: (usize, usize, usize), // (f_s, h_s, w_s)
}

impl To2v {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<To2v> {
        let s = &cfg.shapes;
        let m = &cfg.model;
        let d = m.d_model;
        let head_dim = d / m.n_heads;
        let (fr, hr, wr) = m.rope_fracs;
        let rope = Rope3dTable::build(head_dim, fr, hr, wr, (s.f_s(), s.h_s(), s.w_s()))?;
        Ok(To2v {
            d,
            n_heads: m.n_heads,
            l_text: m.l_text,
            f_s: s.f_s(),
            spatial: s.h_s() * s.w_s(),
            c_s: s.c_s,
            patch_in: Linear::new(s.c_s, d, rng),
            t_embedder: TimestepEmbedder::new(d, rng),
            text_vocab: TextVocab::new(m.vocab_size, m.l_text, d, rng),
            blocks: (0..m.n_blocks)
                .map(|_| To2vBlock::new(d, m.n_heads, m.ffn_mult, rng))
                .collect(),
            head_ln: LayerNorm::new(d),
            head: Linear::zeros(d, s.c_s),
            sem_embed: Linear::new(s.c_s, d, rng),
            rope,
            grid: (s.f_s(), s.h_s(), s.w_s()),
        })
    }

    pub fn base_params(&self) -> Vec<Tensor> {
        let mut p = self.patch_in.params();
        p.extend(self.t_embedder.params());
        p.push(self.text_vocab.table.clone());
        for b in &self.blocks {
            p.extend(b.base_params());
        }
        p.extend(self.head_ln.params());
        p.extend(self.head.params());
        p
    }

    pub fn branch_params(&self) -> Vec<Tensor> {
        let mut p = self.sem_embed.params();
        for b in &self.blocks {
            p.extend(b.branch_params());
        }
        p
    }

    pub fn embed_text(&self, prompt_id: usize) -> Result<TextEmbedding> {
        self.text_vocab.embed(prompt_id)
    }

    fn video_rope(&self, frames: usize) -> Result<RopeTables> {
        let (_, h, w) = self.grid;
        self.rope.expand(&Rope3dTable::grid_positions(frames, h, w))
    }

    /// Rotary positions for the token grid, scaled so each token sits at
    /// the start of the video region it summarizes; shared coordinates make
    /// cross-attention routing position-consistent between the streams.
    fn sem_rope(&self, grid: (usize, usize, usize)) -> Result<RopeTables> {
        let (f, h, w) = self.grid;
        let stride = |vid: usize, tok: usize| if tok == 0 { 1 } else { (vid / tok).max(1) };
        let (st, sh, sw) = (
            stride(f, grid.0),
            stride(h, grid.1),
            stride(w, grid.2),
        );
        let mut positions = Vec::with_capacity(grid.0 * grid.1 * grid.2);
        for t in 0..grid.0 {
            for y in 0..grid.1 {
                for x in 0..grid.2 {
                    positions.push((t * st, y * sh, x * sw));
                }
            }
        }
        self.rope.expand(&positions)
    }

    /// Predict the noise in `noisy` (`(frames * spatial, c_s)` rows,
    /// temporal-major) at per-frame timesteps `ts` (one per latent frame,
    /// at most `f_s` frames: short windows occur at the stitching queue's
    /// start-up and drain). `cond` carries the clip tokens in backbone
    /// width; `None` runs the unconditional path.
    pub fn forward(
        &self,
        noisy: &Tensor,
        ts: &[usize],
        text: &TextEmbedding,
        cond: Option<&SemCondition>,
    ) -> Result<Tensor> {
        let frames = ts.len();
        if frames == 0 || frames > self.f_s {
            return Err(Error::msg(format!(
                "window of {} frames outside 1..={}",
                frames, self.f_s
            )));
        }
        let l_video = frames * self.spatial;
        if noisy.shape() != [l_video, self.c_s] {
            return Err(Error::shape("to2v input", noisy.shape(), &[l_video, self.c_s]));
        }
        let t_frames = self.t_embedder.forward(ts)?;
        // mean timestep row conditions the frame-agnostic streams
        let t_mean = Tensor::full(&[1, frames], 1.0 / frames as f32).matmul(&t_frames)?;
        let head_dim = self.d / self.n_heads;
        let rope_video = self.video_rope(frames)?;
        let rope_tv = prepend_identity(&rope_video, self.l_text, head_dim);
        let mut z_text = text.tokens.clone();
        let mut x = self.patch_in.forward(noisy)?;
        let mut z_sem = match cond {
            Some(c) => Some(self.sem_embed.forward(&c.z)?),
            None => None,
        };
        let rope_sem = match cond {
            Some(c) => Some(self.sem_rope(c.grid)?),
            None => None,
        };
        for b in &self.blocks {
            let (s_t, sh_t, g_t) = b.text_mod.forward(&t_mean)?;
            let (s_v, sh_v, g_v) = b.vision_mod.forward(&t_frames)?;
            let x_t = adaln_modulate(&z_text, &b.ln_tv, &s_t, &sh_t, self.l_text)?;
            let x_v = adaln_modulate(&x, &b.ln_tv, &s_v, &sh_v, self.spatial)?;
            let x_s = match &z_sem {
                Some(zs) => {
                    let (s_s, sh_s, _) = b.sem_mod.forward(&t_mean)?;
                    Some(adaln_modulate(zs, &b.sem_ln, &s_s, &sh_s, zs.shape()[0])?)
                }
                None => None,
            };
            let out = joint_attention(
                &x_t,
                &x_v,
                x_s.as_ref(),
                b,
                Some(&rope_tv),
                rope_sem.as_ref(),
            )?;
            let mut tv = out.tv_base;
            if let Some(cross) = out.tv_cross {
                tv = tv.add(&cross.mul_rowvec(&b.cross_gate)?)?;
            }
            let a_text = tv.slice_rows(0, self.l_text)?;
            let a_vid = tv.slice_rows(self.l_text, self.l_text + l_video)?;
            z_text = z_text.add(&apply_gate(&a_text, &g_t, self.l_text)?)?;
            x = x.add(&apply_gate(&a_vid, &g_v, self.spatial)?)?;
            let h = Tensor::concat_rows(&[z_text.clone(), x.clone()])?;
            let h = h.add(&b.ffn.forward(&b.ln_ffn.forward(&h)?)?)?;
            z_text = h.slice_rows(0, self.l_text)?;
            x = h.slice_rows(self.l_text, self.l_text + l_video)?;
            if let (Some(zs), Some(sem_out)) = (&z_sem, out.sem) {
                let (_, _, g_s) = b.sem_mod.forward(&t_mean)?;
                let zs = zs.add(&apply_gate(&sem_out, &g_s, zs.shape()[0])?)?;
                let zs = zs.add(&b.sem_ffn.forward(&b.sem_ffn_ln.forward(&zs)?)?)?;
                z_sem = Some(zs);
            }
        }
        self.head.forward(&self.head_ln.forward(&x)?)
    }

    /// Classifier-free guided prediction; `scale` 1.0 is plain conditional.
    pub fn forward_guided(
        &self,
        noisy: &Tensor,
        ts: &[usize],
        text: &TextEmbedding,
        cond: Option<&SemCondition>,
        scale: f32,
    ) -> Result<Tensor> {
        if cond.is_none() || (scale - 1.0).abs() < 1e-6 {
            return self.forward(noisy, ts, text, cond);
        }
        let eps_c = self.forward(noisy, ts, text, cond)?;
        let eps_u = self.forward(noisy, ts, text, None)?;
        eps_u.add(&eps_c.sub(&eps_u)?.scale(scale))
    }
}

/// One clip of training data: its encoded latent and prompt.
#[derive(Clone)]
pub struct ClipExample {
    /// `(l_video, c_s)`, detached.
    pub latent: Tensor,
    pub prompt_id: usize,
}

/// One optimizer step of noise-prediction training.
///
/// With `resampler` present the condition is computed from the clean latent
/// and gradients flow into it; `None` trains the unconditional path (used
/// for backbone pretraining). `params` decides what actually updates, so
/// freeze discipline is the caller picking the right set.
#[allow(clippy::too_many_arguments)]
pub fn to2v_train_step<R: Rng>(
    model: &To2v,
    resampler: Option<&Resampler>,
    batch: &[ClipExample],
    schedule: &NoiseSchedule,
    params: &[Tensor],
    opt: &mut Adam,
    cond_dropout: f32,
    step: usize,
    rng: &mut R,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::msg("empty training batch"));
    }
    let ts = sample_timesteps_explicit_uniform(batch.len(), schedule.t_max(), rng)?;
    let mut losses = Vec::with_capacity(batch.len());
    for (item, &t) in batch.iter().zip(&ts) {
        let cond = match resampler {
            Some(rs) if rng.gen::<f32>() >= cond_dropout => Some(SemCondition {
                z: rs.forward(&item.latent)?,
                grid: rs.latent_grid,
            }),
            _ => None,
        };
        let eps = Tensor::randn(item.latent.shape(), 1.0, rng);
        let noisy = schedule.q_sample(&item.latent, t, &eps)?;
        let ts_frames = vec![t; model.f_s];
        let text = model.embed_text(item.prompt_id)?;
        let pred = model.forward(&noisy, &ts_frames, &text, cond.as_ref())?;
        losses.push(pred.mse(&eps)?);
    }
    let loss = Tensor::concat_rows(&losses.iter().map(|l| l.reshape(&[1, 1])).collect::<Result<Vec<_>>>()?)?
        .mean_all();
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, value });
    }
    opt.zero_grads(params);
    loss.backward()?;
    opt.step(params)?;
    Ok(value)
}

/// Sum of parameter bytes, for freeze-discipline checks.
pub fn param_fingerprint(params: &[Tensor]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in params {
        for v in p.to_vec() {
            h.update(v.to_le_bytes());
        }
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}
