//! Long-range token transformer.
//!
//! Denoises the concatenated per-clip token sequence of a whole video from a
//! text prompt. Rotary position channels lean heavily on the temporal axis,
//! and videos of different length pack into one batch with attention and
//! loss masks over the padded tail.

use rand::Rng;

use crate::config::RunConfig;
use crate::diffusion::{sample_timesteps_explicit_uniform, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{
    adaln_modulate, apply_gate, FeedForward, LayerNorm, Linear, Modulation, MultiHeadAttention,
    TimestepEmbedder,
};
use crate::optim::Adam;
use crate::rope::{Rope3dTable, RopeTables};
use crate::tensor::Tensor;
use crate::to2v::{TextEmbedding, TextVocab};
use crate::tokenizer::SemanticTokens;

/// Token sequence for a whole long video: `n_chunks * f_r` token frames of
/// `h_r x w_r x c_r`, with everything past `valid_frames` being padding.
#[derive(Clone)]
pub struct LongTokenGrid {
    /// `(total_frames, h_r, w_r, c_r)`.
    pub tokens: Tensor,
    /// Valid token frames; the rest is padding.
    pub valid_frames: usize,
}

impl LongTokenGrid {
    pub fn from_clips(clips: &[SemanticTokens]) -> Result<LongTokenGrid> {
        if clips.is_empty() {
            return Err(Error::msg("no clips to concatenate"));
        }
        let s = clips[0].tokens.shape().to_vec();
        let mut data = Vec::new();
        for c in clips {
            if c.tokens.shape() != s {
                return Err(Error::shape("token grid concat", c.tokens.shape(), &s));
            }
            data.extend(c.tokens.to_vec());
        }
        let f_total = s[0] * clips.len();
        Ok(LongTokenGrid {
            tokens: Tensor::from_vec(&[f_total, s[1], s[2], s[3]], data)?,
            valid_frames: f_total,
        })
    }

    pub fn total_frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.tokens.shape();
        (s[1], s[2])
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[3]
    }

    /// Flat `(frames * h_r * w_r, c_r)` view.
    pub fn flat(&self) -> Result<Tensor> {
        let s = self.tokens.shape();
        self.tokens.reshape(&[s[0] * s[1] * s[2], s[3]])
    }

    /// Per-token-row validity, row-major over (frame, h, w).
    pub fn valid_rows(&self) -> Vec<bool> {
        let s = self.tokens.shape();
        let spatial = s[1] * s[2];
        (0..s[0] * spatial)
            .map(|i| i / spatial < self.valid_frames)
            .collect()
    }
}

/// A batch padded to a common length, with masks.
pub struct PackedBatch {
    pub grids: Vec<LongTokenGrid>,
    /// Per item, per token row: true where the row is real data.
    pub loss_mask: Vec<Vec<bool>>,
}

/// Right-pad every grid to the longest frame count in the batch. Padding
/// rows are zeros; the masks mark them invalid for attention and loss.
pub fn pack_frames(grids: &[LongTokenGrid]) -> Result<PackedBatch> {
    if grids.is_empty() {
        return Err(Error::msg("empty batch"));
    }
    let (h, w) = grids[0].spatial();
    let c = grids[0].channels();
    for g in grids {
        if g.spatial() != (h, w) || g.channels() != c {
            return Err(Error::msg(format!(
                "inconsistent token shapes in batch: {:?} vs ({}, {}, {})",
                g.tokens.shape(),
                h,
                w,
                c
            )));
        }
    }
    let max_frames = grids.iter().map(|g| g.total_frames()).max().unwrap();
    let mut out = Vec::with_capacity(grids.len());
    let mut masks = Vec::with_capacity(grids.len());
    for g in grids {
        let frames = g.total_frames();
        let mut data = g.tokens.to_vec();
        data.resize(max_frames * h * w * c, 0.0);
        let padded = LongTokenGrid {
            tokens: Tensor::from_vec(&[max_frames, h, w, c], data)?,
            valid_frames: g.valid_frames.min(frames),
        };
        masks.push(padded.valid_rows());
        out.push(padded);
    }
    Ok(PackedBatch {
        grids: out,
        loss_mask: masks,
    })
}

struct T2toBlock {
    ln: LayerNorm,
    modulation: Modulation,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn_mod: Modulation,
    ffn: FeedForward,
}

impl T2toBlock {
    fn new<R: Rng>(d: usize, n_heads: usize, ffn_mult: usize, rng: &mut R) -> T2toBlock {
        T2toBlock {
            ln: LayerNorm::new(d),
            modulation: Modulation::new_passthrough(d, rng),
            attn: MultiHeadAttention::new(d, n_heads, rng),
            ln_ffn: LayerNorm::new(d),
            ffn_mod: Modulation::new_passthrough(d, rng),
            ffn: FeedForward::new(d, ffn_mult, rng),
        }
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.ln.params();
        p.extend(self.modulation.params());
        p.extend(self.attn.params());
        p.extend(self.ln_ffn.params());
        p.extend(self.ffn_mod.params());
        p.extend(self.ffn.params());
        p
    }
}

/// The token-sequence denoiser.
pub struct T2to {
    pub d: usize,
    pub n_heads: usize,
    pub l_text: usize,
    pub c_r: usize,
    pub f_r: usize,
    pub h_r: usize,
    pub w_r: usize,
    pub n_max: usize,
    pub token_in: Linear, // c_r -> d
    pub t_embedder: TimestepEmbedder,
    pub text_vocab: TextVocab,
    blocks: Vec<T2toBlock>,
    pub head_ln: LayerNorm,
    pub head: Linear, // d -> c_r, zero at init
    rope: Rope3dTable,
}

impl T2to {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<T2to> {
        let s = &cfg.shapes;
        let m = &cfg.model;
        let d = m.t2to_d_model;
        let head_dim = d / m.t2to_n_heads;
        let (hf, wf, tf) = m.t2to_rope_fracs;
        let rope = Rope3dTable::build(
            head_dim,
            hf,
            wf,
            tf,
            (s.n_max * s.f_r, s.h_r, s.w_r),
        )?;
        Ok(T2to {
            d,
            n_heads: m.t2to_n_heads,
            l_text: m.l_text,
            c_r: s.c_r,
            f_r: s.f_r,
            h_r: s.h_r,
            w_r: s.w_r,
            n_max: s.n_max,
            token_in: Linear::new(s.c_r, d, rng),
            t_embedder: TimestepEmbedder::new(d, rng),
            text_vocab: TextVocab::new(m.vocab_size, m.l_text, d, rng),
            blocks: (0..m.t2to_n_blocks)
                .map(|_| T2toBlock::new(d, m.t2to_n_heads, m.ffn_mult, rng))
                .collect(),
            head_ln: LayerNorm::new(d),
            head: Linear::zeros(d, s.c_r),
            rope,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.token_in.params();
        p.extend(self.t_embedder.params());
        p.push(self.text_vocab.table.clone());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.head_ln.params());
        p.extend(self.head.params());
        p
    }

    /// Warm start: copy the timestep embedder and text table from a sibling
    /// model when widths agree (the clip denoiser's backbone).
    pub fn init_from(&mut self, t_embedder: &TimestepEmbedder, text_vocab: &TextVocab) {
        if t_embedder.dim == self.d && text_vocab.table.shape() == self.text_vocab.table.shape() {
            self.t_embedder = TimestepEmbedder {
                l1: Linear {
                    weight: t_embedder.l1.weight.trainable(),
                    bias: t_embedder.l1.bias.trainable(),
                },
                l2: Linear {
                    weight: t_embedder.l2.weight.trainable(),
                    bias: t_embedder.l2.bias.trainable(),
                },
                dim: t_embedder.dim,
            };
            self.text_vocab.table = text_vocab.table.trainable();
        }
    }

    pub fn embed_text(&self, prompt_id: usize) -> Result<TextEmbedding> {
        self.text_vocab.embed(prompt_id)
    }

    fn rope_for(&self, frames: usize) -> Result<RopeTables> {
        let grid = self
            .rope
            .expand(&Rope3dTable::grid_positions(frames, self.h_r, self.w_r))?;
        let head_dim = self.d / self.n_heads;
        let mut cos = vec![1.0f32; self.l_text * head_dim];
        let mut sin = vec![0.0f32; self.l_text * head_dim];
        cos.extend_from_slice(&grid.cos);
        sin.extend_from_slice(&grid.sin);
        Ok(RopeTables { cos, sin })
    }

    /// Predict the noise in a flat `(frames * h_r * w_r, c_r)` token
    /// sequence at one shared timestep. `valid` marks real token rows;
    /// padding is isolated on both sides of every attention.
    pub fn forward(
        &self,
        noisy: &Tensor,
        t: usize,
        text: &TextEmbedding,
        valid: &[bool],
    ) -> Result<Tensor> {
        let l_tok = noisy.shape()[0];
        if noisy.rank() != 2 || noisy.shape()[1] != self.c_r {
            return Err(Error::shape("t2to input", noisy.shape(), &[l_tok, self.c_r]));
        }
        if valid.len() != l_tok {
            return Err(Error::msg(format!(
                "validity mask of {} rows does not cover {} tokens",
                valid.len(),
                l_tok
            )));
        }
        let spatial = self.h_r * self.w_r;
        if l_tok % spatial != 0 {
            return Err(Error::msg(format!(
                "token count {} not a multiple of the {}x{} spatial grid",
                l_tok, self.h_r, self.w_r
            )));
        }
        let frames = l_tok / spatial;
        let rope = self.rope_for(frames)?;
        let l_all = self.l_text + l_tok;
        // blocked where either endpoint is padding; text rows always valid
        let mut blocked = vec![false; l_all * l_all];
        for qi in 0..l_all {
            for ki in 0..l_all {
                let q_pad = qi >= self.l_text && !valid[qi - self.l_text];
                let k_pad = ki >= self.l_text && !valid[ki - self.l_text];
                blocked[qi * l_all + ki] = q_pad || k_pad;
            }
        }
        let t_emb = self.t_embedder.forward(&[t])?;
        let mut h = Tensor::concat_rows(&[
            text.tokens.clone(),
            self.token_in.forward(noisy)?,
        ])?;
        for b in &self.blocks {
            let (sc, sh, g) = b.modulation.forward(&t_emb)?;
            let x = adaln_modulate(&h, &b.ln, &sc, &sh, l_all)?;
            let q = b.attn.wq.forward(&x)?;
            let k = b.attn.wk.forward(&x)?;
            let v = b.attn.wv.forward(&x)?;
            let ctx = crate::nn::multi_head_attend(
                &q,
                &k,
                &v,
                self.n_heads,
                Some(&rope),
                Some(&rope),
                Some(&blocked),
            )?;
            h = h.add(&apply_gate(&b.attn.wo.forward(&ctx)?, &g, l_all)?)?;
            let (sc2, sh2, g2) = b.ffn_mod.forward(&t_emb)?;
            let y = adaln_modulate(&h, &b.ln_ffn, &sc2, &sh2, l_all)?;
            h = h.add(&apply_gate(&b.ffn.forward(&y)?, &g2, l_all)?)?;
        }
        let tokens = h.slice_rows(self.l_text, l_all)?;
        self.head.forward(&self.head_ln.forward(&tokens)?)
    }
}

/// One optimizer step of masked noise-prediction training over a packed
/// batch. Padded rows contribute nothing to the loss.
pub fn t2to_train_step<R: Rng>(
    model: &T2to,
    batch: &[(LongTokenGrid, usize)],
    schedule: &NoiseSchedule,
    params: &[Tensor],
    opt: &mut Adam,
    step: usize,
    rng: &mut R,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::msg("empty training batch"));
    }
    let grids: Vec<LongTokenGrid> = batch.iter().map(|(g, _)| g.clone()).collect();
    let packed = pack_frames(&grids)?;
    let ts = sample_timesteps_explicit_uniform(batch.len(), schedule.t_max(), rng)?;
    let mut losses = Vec::with_capacity(batch.len());
    for ((g, (_, prompt)), (&t, mask)) in packed
        .grids
        .iter()
        .zip(batch)
        .zip(ts.iter().zip(&packed.loss_mask))
    {
        let x0 = g.flat()?;
        let eps = Tensor::randn(x0.shape(), 1.0, rng);
        let noisy = schedule.q_sample(&x0, t, &eps)?;
        let text = model.embed_text(*prompt)?;
        let pred = model.forward(&noisy, t, &text, mask)?;
        losses.push(masked_mse(&pred, &eps, mask)?);
    }
    let loss = Tensor::concat_rows(
        &losses
            .iter()
            .map(|l| l.reshape(&[1, 1]))
            .collect::<Result<Vec<_>>>()?,
    )?
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

/// Mean squared error over valid rows only, normalized by the valid count.
pub fn masked_mse(pred: &Tensor, target: &Tensor, valid: &[bool]) -> Result<Tensor> {
    let (rows, cols) = (pred.shape()[0], pred.shape()[1]);
    if valid.len() != rows {
        return Err(Error::msg("mask length mismatch"));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::msg("mask leaves no valid rows"));
    }
    let mask: Vec<f32> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat(if v { 1.0 } else { 0.0 }).take(cols))
        .collect();
    let mask = Tensor::from_vec(&[rows, cols], mask)?;
    let d = pred.sub(target)?.mul(&mask)?;
    Ok(d.mul(&d)?
        .sum_all()
        .scale(1.0 / (n_valid * cols) as f32))
}

/// Full deterministic denoising rollout from pure noise, sliced into
/// per-clip tokens.
pub fn sample_long_tokens<R: Rng>(
    model: &T2to,
    prompt_id: usize,
    n_chunks: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<SemanticTokens>> {
    if n_chunks == 0 || n_chunks > model.n_max {
        return Err(Error::msg(format!(
            "chunk count {} outside 1..={}",
            n_chunks, model.n_max
        )));
    }
    let frames = n_chunks * model.f_r;
    let l_tok = frames * model.h_r * model.w_r;
    let valid = vec![true; l_tok];
    let text = model.embed_text(prompt_id)?;
    let mut x = Tensor::randn(&[l_tok, model.c_r], 1.0, rng);
    let tau = schedule.tau().to_vec();
    for win in tau.windows(2).rev() {
        let (t_prev, t) = (win[0], win[1]);
        let eps = model.forward(&x, t, &text, &valid)?;
        x = schedule.denoise_step(&x, &eps, t, t_prev)?.detach();
    }
    let spatial = model.h_r * model.w_r;
    let data = x.to_vec();
    let clip_len = model.f_r * spatial * model.c_r;
    (0..n_chunks)
        .map(|i| {
            Ok(SemanticTokens {
                tokens: Tensor::from_vec(
                    &[model.f_r, model.h_r, model.w_r, model.c_r],
                    data[i * clip_len..(i + 1) * clip_len].to_vec(),
                )?,
                clip_index: i,
            })
        })
        .collect()
}
