//! Clip tokenizer: a fixed patchify + linear embed stands in for the frozen
//! video autoencoder, a learnable-latent cross-attention resampler condenses
//! the clip grid, and a PCA projector reduces the channel width.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Shapes;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::tensor::Tensor;

/// Number of cross-attention blocks in the resampler (fixed).
pub const RESAMPLER_BLOCKS: usize = 4;

/// Encoded clip grid of shape `f_s x h_s x w_s x c_s`.
#[derive(Clone)]
pub struct ClipLatent {
    pub grid: Tensor,
}

impl ClipLatent {
    pub fn frames(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Flat `(f_s * h_s * w_s, c_s)` view.
    pub fn flat(&self) -> Result<Tensor> {
        let s = self.grid.shape();
        self.grid
            .reshape(&[s[0] * s[1] * s[2], s[3]])
    }
}

/// Condensed per-clip representation plus its position in the long video.
#[derive(Clone)]
pub struct SemanticTokens {
    /// `f_r x h_r x w_r x c` grid; `c` is `c_r` once projected.
    pub tokens: Tensor,
    pub clip_index: usize,
}

impl SemanticTokens {
    pub fn channels(&self) -> usize {
        *self.tokens.shape().last().unwrap()
    }

    pub fn flat(&self) -> Result<Tensor> {
        let s = self.tokens.shape();
        self.tokens.reshape(&[s[0] * s[1] * s[2], s[3]])
    }
}

/// Deterministic patchify + fixed linear embed, invertible up to the embed.
/// Plays the role of the frozen autoencoder: never trained.
pub struct VideoEncoder {
    shapes: Shapes,
    embed: Tensor,     // patch_volume x c_s
    embed_pinv: Tensor, // c_s x patch_volume
}

impl VideoEncoder {
    pub fn new(shapes: &Shapes, seed: u64) -> Result<VideoEncoder> {
        let pv = shapes.patch_volume();
        let c_s = shapes.c_s;
        if c_s < pv {
            return Err(Error::Config(format!(
                "c_s {} below patch volume {}: embed would lose rank",
                c_s, pv
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70ca1_5eed);
        let embed = Tensor::randn(&[pv, c_s], 1.0 / (pv as f32).sqrt(), &mut rng);
        // right pseudo-inverse: x = y * E^T (E E^T)^-1
        let e = DMatrix::from_row_slice(pv, c_s, &embed.to_vec().iter().map(|&v| v as f64).collect::<Vec<_>>());
        let gram = &e * e.transpose();
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::msg("patch embed is rank deficient"))?;
        let pinv = e.transpose() * inv;
        let pinv_data: Vec<f32> = pinv.iter().map(|&v| v as f32).collect();
        // nalgebra iterates column-major; transpose into row-major c_s x pv
        let mut pinv_rm = vec![0.0f32; c_s * pv];
        for col in 0..pv {
            for row in 0..c_s {
                pinv_rm[row * pv + col] = pinv_data[col * c_s + row];
            }
        }
        Ok(VideoEncoder {
            shapes: shapes.clone(),
            embed,
            embed_pinv: Tensor::from_vec(&[c_s, pv], pinv_rm)?,
        })
    }

    pub fn shapes(&self) -> &Shapes {
        &self.shapes
    }

    /// Non-overlapping patchify of a `frames x H x W x 3` clip into
    /// `(l_video, patch_volume)` rows. The first temporal patch replicates
    /// frame 0 to fill its slots; later patches group `patch_t` frames.
    pub fn patchify(&self, clip: &Tensor) -> Result<Tensor> {
        let s = &self.shapes;
        let cs = clip.shape();
        if cs.len() != 4 || cs[3] != 3 {
            return Err(Error::msg(format!(
                "expected clip of shape [frames, H, W, 3], got {:?}",
                cs
            )));
        }
        let (frames, height, width) = (cs[0], cs[1], cs[2]);
        if frames != s.chunk_frames {
            return Err(Error::msg(format!(
                "clip has {} frames, config wants {} (frame axis)",
                frames, s.chunk_frames
            )));
        }
        if height % s.patch != 0 {
            return Err(Error::msg(format!(
                "height {} not divisible by patch {} (height axis)",
                height, s.patch
            )));
        }
        if width % s.patch != 0 {
            return Err(Error::msg(format!(
                "width {} not divisible by patch {} (width axis)",
                width, s.patch
            )));
        }
        if height != s.height || width != s.width {
            return Err(Error::msg(format!(
                "clip is {}x{}, config wants {}x{}",
                height, width, s.height, s.width
            )));
        }
        let (p, pt) = (s.patch, s.patch_t);
        let (f_s, h_s, w_s) = (s.f_s(), s.h_s(), s.w_s());
        let pv = s.patch_volume();
        let data = clip.data();
        let mut out = vec![0.0f32; f_s * h_s * w_s * pv];
        let pix = |f: usize, y: usize, x: usize, c: usize| data[((f * height + y) * width + x) * 3 + c];
        for ti in 0..f_s {
            for hy in 0..h_s {
                for wx in 0..w_s {
                    let row = ((ti * h_s) + hy) * w_s + wx;
                    let base = row * pv;
                    for dt in 0..pt {
                        // causal grouping: patch 0 is frame 0 replicated
                        let f = if ti == 0 { 0 } else { 1 + (ti - 1) * pt + dt };
                        for dy in 0..p {
                            for dx in 0..p {
                                for c in 0..3 {
                                    let idx = base + ((dt * p + dy) * p + dx) * 3 + c;
                                    out[idx] = pix(f, hy * p + dy, wx * p + dx, c);
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(data);
        Tensor::from_vec(&[f_s * h_s * w_s, pv], out)
    }

    pub fn encode_clip(&self, clip: &Tensor) -> Result<ClipLatent> {
        let s = &self.shapes;
        let patches = self.patchify(clip)?;
        let flat = patches.matmul(&self.embed)?;
        Ok(ClipLatent {
            grid: flat.reshape(&[s.f_s(), s.h_s(), s.w_s(), s.c_s])?,
        })
    }

    /// Invert the embed and unpatchify back to pixel space.
    pub fn decode_latent(&self, latent: &ClipLatent) -> Result<Tensor> {
        let s = &self.shapes;
        let flat = latent.flat()?;
        let patches = flat.matmul(&self.embed_pinv)?;
        let (p, pt) = (s.patch, s.patch_t);
        let (f_s, h_s, w_s) = (s.f_s(), s.h_s(), s.w_s());
        let (frames, height, width) = (s.chunk_frames, s.height, s.width);
        let pv = s.patch_volume();
        let pd = patches.data();
        let mut out = vec![0.0f32; frames * height * width * 3];
        for ti in 0..f_s {
            for hy in 0..h_s {
                for wx in 0..w_s {
                    let row = ((ti * h_s) + hy) * w_s + wx;
                    let base = row * pv;
                    let slots = if ti == 0 { 1 } else { pt };
                    for dt in 0..slots {
                        let f = if ti == 0 { 0 } else { 1 + (ti - 1) * pt + dt };
                        for dy in 0..p {
                            for dx in 0..p {
                                for c in 0..3 {
                                    let idx = base + ((dt * p + dy) * p + dx) * 3 + c;
                                    let y = hy * p + dy;
                                    let x = wx * p + dx;
                                    out[((f * height + y) * width + x) * 3 + c] = pd[idx];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(pd);
        Tensor::from_vec(&[frames, height, width, 3], out)
    }
}

#[derive(Clone)]
struct ResamplerBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl ResamplerBlock {
    fn new<R: Rng>(c_s: usize, heads: usize, ffn_mult: usize, rng: &mut R) -> ResamplerBlock {
        ResamplerBlock {
            ln_q: LayerNorm::new(c_s),
            ln_kv: LayerNorm::new(c_s),
            attn: MultiHeadAttention::new(c_s, heads, rng),
            ln_ffn: LayerNorm::new(c_s),
            ffn: FeedForward::new(c_s, ffn_mult, rng),
        }
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.ln_q.params();
        p.extend(self.ln_kv.params());
        p.extend(self.attn.params());
        p.extend(self.ln_ffn.params());
        p.extend(self.ffn.params());
        p
    }
}

/// Learnable latent grid that cross-attends to the encoded clip over four
/// pre-norm blocks. Additive learned position encodings on both sides break
/// spatial permutation symmetry.
#[derive(Clone)]
pub struct Resampler {
    pub latent_grid: (usize, usize, usize),
    pub c_s: usize,
    z_latent: Tensor,   // (l_r, c_s)
    pos_latent: Tensor, // (l_r, c_s)
    pos_source: Tensor, // (l_video, c_s)
    blocks: Vec<ResamplerBlock>,
}

impl Resampler {
    pub fn new<R: Rng>(
        latent_grid: (usize, usize, usize),
        l_video: usize,
        c_s: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Resampler {
        let l_r = latent_grid.0 * latent_grid.1 * latent_grid.2;
        Resampler {
            latent_grid,
            c_s,
            z_latent: Tensor::randn(&[l_r, c_s], 0.5, rng).trainable(),
            pos_latent: Tensor::randn(&[l_r, c_s], 0.02, rng).trainable(),
            pos_source: Tensor::randn(&[l_video, c_s], 0.02, rng).trainable(),
            blocks: (0..RESAMPLER_BLOCKS)
                .map(|_| ResamplerBlock::new(c_s, heads, ffn_mult, rng))
                .collect(),
        }
    }

    pub fn latent_len(&self) -> usize {
        self.z_latent.shape()[0]
    }

    pub fn z_latent_init(&self) -> &Tensor {
        &self.z_latent
    }

    /// Condense a flat `(l_video, c_s)` clip grid into `(l_r, c_s)`.
    pub fn forward(&self, z_source: &Tensor) -> Result<Tensor> {
        if z_source.rank() != 2 || z_source.shape()[1] != self.c_s {
            return Err(Error::shape(
                "resample",
                z_source.shape(),
                self.pos_source.shape(),
            ));
        }
        if z_source.shape()[0] != self.pos_source.shape()[0] {
            return Err(Error::shape(
                "resample source length",
                z_source.shape(),
                self.pos_source.shape(),
            ));
        }
        let src = z_source.add(&self.pos_source)?;
        let mut z = self.z_latent.add(&self.pos_latent)?;
        for block in &self.blocks {
            let q = block.ln_q.forward(&z)?;
            let kv = block.ln_kv.forward(&src)?;
            z = z.add(&block.attn.forward(&q, &kv, None, None, None)?)?;
            z = z.add(&block.ffn.forward(&block.ln_ffn.forward(&z)?)?)?;
        }
        Ok(z)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = vec![
            self.z_latent.clone(),
            self.pos_latent.clone(),
            self.pos_source.clone(),
        ];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    /// Progressive growth: enlarge the latent grid in place, keeping the
    /// attention blocks and copying trained rows into the overlap region.
    /// New grid positions start from fresh noise. Optimizer state must be
    /// rebuilt afterwards since the latent tensors are replaced.
    pub fn grow<R: Rng>(&mut self, new_grid: (usize, usize, usize), rng: &mut R) -> Result<()> {
        let (f0, h0, w0) = self.latent_grid;
        let (f1, h1, w1) = new_grid;
        if f1 < f0 || h1 < h0 || w1 < w0 {
            return Err(Error::Config(format!(
                "grow target {:?} smaller than current {:?}",
                new_grid, self.latent_grid
            )));
        }
        let l1 = f1 * h1 * w1;
        let c_s = self.c_s;
        let grown = |old: &Tensor, std: f32, rng: &mut R| -> Result<Tensor> {
            let new = Tensor::randn(&[l1, c_s], std, rng);
            {
                let old_data = old.data();
                let mut new_data = new.data_mut();
                for f in 0..f0 {
                    for h in 0..h0 {
                        for w in 0..w0 {
                            let src = ((f * h0 + h) * w0 + w) * c_s;
                            let dst = ((f * h1 + h) * w1 + w) * c_s;
                            new_data[dst..dst + c_s].copy_from_slice(&old_data[src..src + c_s]);
                        }
                    }
                }
            }
            Ok(new.trainable())
        };
        self.z_latent = grown(&self.z_latent, 0.5, rng)?;
        self.pos_latent = grown(&self.pos_latent, 0.02, rng)?;
        self.latent_grid = new_grid;
        Ok(())
    }
}

/// Mean vector plus orthonormal principal directions for channel reduction.
#[derive(Debug, Clone)]
pub struct PcaProjector {
    pub mean: Vec<f32>,
    /// `c_r x c_s`, orthonormal rows, row-major.
    pub basis: Vec<f32>,
    /// Non-increasing.
    pub explained_variance: Vec<f32>,
    pub c_s: usize,
    pub c_r: usize,
}

impl PcaProjector {
    /// Fit on rows of `c_s`-vectors pooled from all samples (each sample is
    /// reshaped to `(-1, c_s)`).
    pub fn fit(samples: &[Tensor], c_s: usize, c_r: usize) -> Result<PcaProjector> {
        let mut rows: Vec<Vec<f32>> = Vec::new();
        for s in samples {
            let numel = s.numel();
            if numel % c_s != 0 {
                return Err(Error::msg(format!(
                    "sample numel {} not divisible by c_s {}",
                    numel, c_s
                )));
            }
            let data = s.to_vec();
            for chunk in data.chunks(c_s) {
                rows.push(chunk.to_vec());
            }
        }
        let n = rows.len();
        if n < c_r {
            return Err(Error::msg(format!(
                "pca needs at least c_r = {} rows, got {}",
                c_r, n
            )));
        }
        let mut mean = vec![0.0f64; c_s];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        // covariance via centered data
        let mut centered = DMatrix::<f64>::zeros(n, c_s);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                centered[(i, j)] = v as f64 - mean[j];
            }
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c_s).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let tol = eig.eigenvalues[order[0]].abs().max(1e-12) * 1e-9;
        let rank = order
            .iter()
            .take_while(|&&i| eig.eigenvalues[i] > tol)
            .count();
        if rank < c_r {
            return Err(Error::msg(format!(
                "pca rank deficiency: need {} components, data has rank {}",
                c_r, rank
            )));
        }
        let mut basis = vec![0.0f32; c_r * c_s];
        let mut explained = vec![0.0f32; c_r];
        for (k, &i) in order.iter().take(c_r).enumerate() {
            explained[k] = eig.eigenvalues[i] as f32;
            let col = eig.eigenvectors.column(i);
            for j in 0..c_s {
                basis[k * c_s + j] = col[j] as f32;
            }
        }
        Ok(PcaProjector {
            mean: mean.iter().map(|&v| v as f32).collect(),
            basis,
            explained_variance: explained,
            c_s,
            c_r,
        })
    }

    fn basis_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.c_r, self.c_s], self.basis.clone()).expect("basis shape")
    }

    /// `(z - mean) . basis^T` applied per trailing `c_s`-vector.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let last = *z.shape().last().unwrap_or(&0);
        if last != self.c_s {
            return Err(Error::msg(format!(
                "project: last dim {} != c_s {}",
                last, self.c_s
            )));
        }
        let rows = z.numel() / self.c_s;
        let flat = z.reshape(&[rows, self.c_s])?;
        let mean = Tensor::from_vec(&[self.c_s], self.mean.clone())?;
        let centered = flat.add_rowvec(&mean.scale(-1.0))?;
        let out = centered.matmul(&self.basis_tensor().transpose2()?)?;
        let mut shape = z.shape().to_vec();
        *shape.last_mut().unwrap() = self.c_r;
        out.reshape(&shape)
    }

    /// `z . basis + mean`: exact inverse on in-subspace data.
    pub fn back_project(&self, z: &Tensor) -> Result<Tensor> {
        let last = *z.shape().last().unwrap_or(&0);
        if last != self.c_r {
            return Err(Error::msg(format!(
                "back_project: last dim {} != c_r {}",
                last, self.c_r
            )));
        }
        let rows = z.numel() / self.c_r;
        let flat = z.reshape(&[rows, self.c_r])?;
        let mean = Tensor::from_vec(&[self.c_s], self.mean.clone())?;
        let out = flat.matmul(&self.basis_tensor())?.add_rowvec(&mean)?;
        let mut shape = z.shape().to_vec();
        *shape.last_mut().unwrap() = self.c_s;
        out.reshape(&shape)
    }
}

/// Encoder + resampler + optional frozen projector, the full tokenizer.
pub struct Tokenizer {
    pub encoder: VideoEncoder,
    pub resampler: Resampler,
    pub projector: Option<PcaProjector>,
    pub shapes: Shapes,
}

impl Tokenizer {
    /// Resampler output for one clip, before channel projection:
    /// `(l_r, c_s)`.
    pub fn condense_clip(&self, clip: &Tensor) -> Result<Tensor> {
        let latent = self.encoder.encode_clip(clip)?;
        self.resampler.forward(&latent.flat()?)
    }

    /// Condensed, projected tokens for one clip.
    pub fn tokenize_clip(&self, clip: &Tensor, clip_index: usize) -> Result<SemanticTokens> {
        let condensed = self.condense_clip(clip)?;
        let p = self
            .projector
            .as_ref()
            .ok_or_else(|| Error::msg("tokenizer has no fitted projector"))?;
        let projected = p.project(&condensed)?;
        let (f_r, h_r, w_r) = self.resampler.latent_grid;
        Ok(SemanticTokens {
            tokens: projected.reshape(&[f_r, h_r, w_r, p.c_r])?.detach(),
            clip_index,
        })
    }

    /// Split a long `frames x H x W x 3` video into chunks, repeating the
    /// final frame to fill a short last chunk. Returns the per-clip tokens
    /// and the true (unpadded) frame count.
    pub fn tokenize_long_video(&self, video: &Tensor) -> Result<(Vec<SemanticTokens>, usize)> {
        let chunks = split_video(video, &self.shapes)?;
        let valid_frames = video.shape()[0];
        let mut out = Vec::with_capacity(chunks.len());
        for (i, clip) in chunks.iter().enumerate() {
            out.push(self.tokenize_clip(clip, i)?);
        }
        Ok((out, valid_frames))
    }
}

/// Chunk a long video, padding the last chunk by repeating the final frame.
pub fn split_video(video: &Tensor, shapes: &Shapes) -> Result<Vec<Tensor>> {
    let s = video.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::msg("empty or malformed video"));
    }
    let frames = s[0];
    let frame_len = s[1] * s[2] * s[3];
    let chunk = shapes.chunk_frames;
    let n = frames.div_ceil(chunk);
    let data = video.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut buf = Vec::with_capacity(chunk * frame_len);
        for f in 0..chunk {
            let src = (i * chunk + f).min(frames - 1);
            buf.extend_from_slice(&data[src * frame_len..(src + 1) * frame_len]);
        }
        out.push(Tensor::from_vec(&[chunk, s[1], s[2], s[3]], buf)?);
    }
    Ok(out)
}
