//! Small neural-network building blocks shared by the resampler, the clip
//! denoiser and the long-range token transformer.

use rand::Rng;

use crate::error::Result;
use crate::rope::RopeTables;
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor, // in x out
    pub bias: Tensor,   // out
}

impl Linear {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Linear {
        let std = 1.0 / (d_in as f32).sqrt();
        Linear {
            weight: Tensor::randn(&[d_in, d_out], std, rng).trainable(),
            bias: Tensor::zeros(&[d_out]).trainable(),
        }
    }

    /// All-zero weights and bias: the adapter-style identity start.
    pub fn zeros(d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: Tensor::zeros(&[d_in, d_out]).trainable(),
            bias: Tensor::zeros(&[d_out]).trainable(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_rowvec(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::full(&[dim], 1.0).trainable(),
            beta: Tensor::zeros(&[dim]).trainable(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

#[derive(Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(dim: usize, mult: usize, rng: &mut R) -> FeedForward {
        FeedForward {
            up: Linear::new(dim, dim * mult, rng),
            down: Linear::new(dim * mult, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.silu())
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.up.params();
        p.extend(self.down.params());
        p
    }
}

/// Timestep-conditioned scale/shift/gate for adaptive layer normalization.
/// A zero-initialized net makes the modulated branch start as plain
/// layer norm with a zero gate.
#[derive(Clone)]
pub struct Modulation {
    pub net: Linear, // d -> 3d
}

impl Modulation {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Modulation {
        Modulation {
            net: Linear::new(dim, 3 * dim, rng),
        }
    }

    pub fn zero_init(dim: usize) -> Modulation {
        Modulation {
            net: Linear::zeros(dim, 3 * dim),
        }
    }

    /// Gate bias fixed at 1 so the branch passes through at init
    /// (used by the backbone's own text/vision modulation).
    pub fn new_passthrough<R: Rng>(dim: usize, rng: &mut R) -> Modulation {
        let m = Modulation::new(dim, rng);
        {
            let mut b = m.net.bias.data_mut();
            for v in b[2 * dim..].iter_mut() {
                *v = 1.0;
            }
        }
        m
    }

    /// (scale, shift, gate), each one row per input row of `t_emb`.
    pub fn forward(&self, t_emb: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let rows = t_emb.shape()[0];
        let dim = self.net.bias.numel() / 3;
        let out = self.net.forward(t_emb)?;
        debug_assert_eq!(out.shape(), &[rows, 3 * dim]);
        Ok((
            out.slice_cols(0, dim)?,
            out.slice_cols(dim, 2 * dim)?,
            out.slice_cols(2 * dim, 3 * dim)?,
        ))
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.net.params()
    }
}

/// `ln(x) * (1 + scale) + shift`, with per-row modulation rows repeated
/// `repeat` times to cover `x`'s rows.
pub fn adaln_modulate(
    x: &Tensor,
    ln: &LayerNorm,
    scale: &Tensor,
    shift: &Tensor,
    repeat: usize,
) -> Result<Tensor> {
    let normed = ln.forward(x)?;
    let scale = scale.repeat_rows(repeat)?;
    let shift = shift.repeat_rows(repeat)?;
    normed.mul(&scale.add_scalar(1.0))?.add(&shift)
}

/// Apply a per-row gate (repeated like the modulation) to a branch output.
pub fn apply_gate(branch: &Tensor, gate: &Tensor, repeat: usize) -> Result<Tensor> {
    branch.mul(&gate.repeat_rows(repeat)?)
}

/// Standard multi-head attention over flat (L, d) sequences with optional
/// per-head rotary tables and an optional invalid-position mask
/// (`Lq * Lk`, row-major, `true` = blocked).
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(dim: usize, n_heads: usize, rng: &mut R) -> MultiHeadAttention {
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            n_heads,
        }
    }

    pub fn forward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        rope_q: Option<&RopeTables>,
        rope_k: Option<&RopeTables>,
        invalid: Option<&[bool]>,
    ) -> Result<Tensor> {
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv_in)?;
        let v = self.wv.forward(kv_in)?;
        let ctx = multi_head_attend(&q, &k, &v, self.n_heads, rope_q, rope_k, invalid)?;
        self.wo.forward(&ctx)
    }

    pub fn params(&self) -> Vec<Tensor> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Scaled dot-product attention on already-projected q/k/v, split into
/// `n_heads` channel groups. Rotary tables are per head (`L * head_dim`).
pub fn multi_head_attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    rope_q: Option<&RopeTables>,
    rope_k: Option<&RopeTables>,
    invalid: Option<&[bool]>,
) -> Result<Tensor> {
    let d = q.shape()[1];
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let mut qh = q.slice_cols(c0, c1)?;
        let mut kh = k.slice_cols(c0, c1)?;
        let vh = v.slice_cols(c0, c1)?;
        if let Some(r) = rope_q {
            qh = qh.rope_apply(&r.cos, &r.sin)?;
        }
        if let Some(r) = rope_k {
            kh = kh.rope_apply(&r.cos, &r.sin)?;
        }
        let mut scores = qh.matmul(&kh.transpose2()?)?.scale(scale);
        if let Some(mask) = invalid {
            scores = scores.mask_fill_neg_inf(mask)?;
        }
        let probs = scores.softmax_lastdim()?;
        heads.push(probs.matmul(&vh)?);
    }
    Tensor::concat_cols(&heads)
}

/// Sinusoidal embedding of a diffusion timestep, shape (1, dim).
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = 10_000f32.powf(-(i as f32) / half.max(1) as f32);
        let angle = t as f32 * freq;
        data[i] = angle.sin();
        data[half + i] = angle.cos();
    }
    Tensor::from_vec(&[1, dim], data).expect("timestep embedding shape")
}

/// Two-layer MLP over the sinusoidal timestep embedding.
#[derive(Clone)]
pub struct TimestepEmbedder {
    pub l1: Linear,
    pub l2: Linear,
    pub dim: usize,
}

impl TimestepEmbedder {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> TimestepEmbedder {
        TimestepEmbedder {
            l1: Linear::new(dim, dim, rng),
            l2: Linear::new(dim, dim, rng),
            dim,
        }
    }

    /// One embedding row per timestep in `ts`.
    pub fn forward(&self, ts: &[usize]) -> Result<Tensor> {
        let rows: Vec<Tensor> = ts.iter().map(|&t| timestep_embedding(t, self.dim)).collect();
        let stacked = Tensor::concat_rows(&rows)?;
        self.l2.forward(&self.l1.forward(&stacked)?.silu())
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p
    }
}
