//! Diagonal denoising over a frame queue: clips are stitched into one
//! continuous video by keeping latent frames at staggered noise levels,
//! denoising them jointly one level per step, emitting the front frame when
//! it is clean and enqueueing fresh noise at the back.
//!
//! Noise levels come from a refined inference schedule with
//! `n_partitions * f_s` levels. Windows of up to `f_s` consecutive frames
//! share a model call; with lookahead only the noisier latter portion of a
//! full window is written, so every frame is denoised with cleaner context
//! ahead of it.

use std::collections::VecDeque;

use rand::Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::to2v::{SemCondition, TextEmbedding, To2v};
use crate::tokenizer::{ClipLatent, SemanticTokens, VideoEncoder};

/// Queue start-up strategy, plus the no-stitching ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FifoMode {
    /// Start with only genuinely sampled noise frames; the queue grows to
    /// capacity before the first frame is emitted.
    Adaptive,
    /// Classic start-up: front positions hold noise-augmented copies of the
    /// first frame, discarded on dequeue.
    Replication,
    /// No queue at all; clips are sampled independently.
    Off,
}

/// One latent frame in flight.
pub struct FifoEntry {
    /// `(h_s * w_s, c_s)` rows.
    pub latent: Tensor,
    /// Position in the refined schedule; the frame's noise level is
    /// `schedule.tau()[tau_index]`.
    pub tau_index: usize,
    pub clip_index: usize,
    /// Global output index; meaningless for padding.
    pub frame_number: usize,
    pub is_padding: bool,
}

/// Anything that can denoise a window of consecutive latent frames at
/// per-frame timesteps under one clip's conditioning.
pub trait WindowDenoiser {
    /// `latents` is `(frames * spatial, c_s)`; returns the noise prediction
    /// of the same shape.
    fn denoise_window(&self, latents: &Tensor, ts: &[usize], clip_index: usize)
        -> Result<Tensor>;
    /// Rows per latent frame.
    fn spatial(&self) -> usize;
    /// Latent channels.
    fn channels(&self) -> usize;
}

/// The trained clip denoiser plus per-clip conditioning.
pub struct To2vDenoiser<'a> {
    pub model: &'a To2v,
    /// One condition per clip, in backbone channel width.
    pub conds: Vec<SemCondition>,
    pub texts: Vec<TextEmbedding>,
    pub guidance: f32,
}

impl WindowDenoiser for To2vDenoiser<'_> {
    fn denoise_window(&self, latents: &Tensor, ts: &[usize], clip_index: usize) -> Result<Tensor> {
        let cond = self
            .conds
            .get(clip_index)
            .ok_or_else(|| Error::msg(format!("no condition for clip {clip_index}")))?;
        let text = self
            .texts
            .get(clip_index)
            .ok_or_else(|| Error::msg(format!("no prompt for clip {clip_index}")))?;
        self.model
            .forward_guided(latents, ts, text, Some(cond), self.guidance)
    }

    fn spatial(&self) -> usize {
        self.model.spatial
    }

    fn channels(&self) -> usize {
        self.model.c_s
    }
}

/// The diagonal queue.
pub struct FifoQueue {
    pub entries: VecDeque<FifoEntry>,
    pub schedule: NoiseSchedule,
    pub f_s: usize,
    pub n_partitions: usize,
    spatial: usize,
    c_s: usize,
    /// Next global latent frame to enqueue.
    next_frame: usize,
    /// Total latent frames this run will emit.
    total_frames: usize,
    emitted: usize,
}

impl FifoQueue {
    fn levels(&self) -> usize {
        self.n_partitions * self.f_s
    }

    pub fn capacity(&self) -> usize {
        self.n_partitions * self.f_s
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_done(&self) -> bool {
        self.emitted == self.total_frames
    }

    fn fresh_entry<R: Rng>(&mut self, rng: &mut R) -> FifoEntry {
        let e = FifoEntry {
            latent: Tensor::randn(&[self.spatial, self.c_s], 1.0, rng),
            tau_index: self.levels(),
            clip_index: self.next_frame / self.f_s,
            frame_number: self.next_frame,
            is_padding: false,
        };
        self.next_frame += 1;
        e
    }

    /// Every queue invariant; tests call this after each mutation.
    pub fn check_invariants(&self) -> Result<()> {
        let mut prev = 0usize;
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 && e.tau_index < prev {
                return Err(Error::msg(format!(
                    "tau order violated at slot {i}: {} after {prev}",
                    e.tau_index
                )));
            }
            prev = e.tau_index;
            if e.tau_index == 0 {
                return Err(Error::msg("entry resting at level 0 was not dequeued"));
            }
        }
        if self.entries.len() > self.capacity() {
            return Err(Error::msg(format!(
                "queue length {} above capacity {}",
                self.entries.len(),
                self.capacity()
            )));
        }
        // conservation over real (non padding) frames
        let in_queue = self.entries.iter().filter(|e| !e.is_padding).count();
        let pending = self.total_frames - self.next_frame;
        if self.emitted + in_queue + pending != self.total_frames {
            return Err(Error::msg(format!(
                "frame conservation broken: {} emitted + {} queued + {} pending != {}",
                self.emitted, in_queue, pending, self.total_frames
            )));
        }
        Ok(())
    }
}

fn check_schedule(schedule: &NoiseSchedule, f_s: usize, n_partitions: usize) -> Result<()> {
    let want = n_partitions * f_s;
    if schedule.tau().len() != want + 1 {
        return Err(Error::msg(format!(
            "schedule has {} inference levels, queue needs {} ({} partitions of {})",
            schedule.tau().len() - 1,
            want,
            n_partitions,
            f_s
        )));
    }
    Ok(())
}

/// Start a queue with `f_s` genuinely sampled noise frames occupying the
/// noisiest level band. No frame is a copy of another; the queue grows to
/// full occupancy before the first dequeue.
pub fn init_queue_adaptive<R: Rng>(
    schedule: NoiseSchedule,
    f_s: usize,
    n_partitions: usize,
    spatial: usize,
    c_s: usize,
    total_frames: usize,
    rng: &mut R,
) -> Result<FifoQueue> {
    check_schedule(&schedule, f_s, n_partitions)?;
    if total_frames % f_s != 0 || total_frames == 0 {
        return Err(Error::msg(format!(
            "total latent frames {} must be a positive multiple of {}",
            total_frames, f_s
        )));
    }
    let mut q = FifoQueue {
        entries: VecDeque::new(),
        schedule,
        f_s,
        n_partitions,
        spatial,
        c_s,
        next_frame: 0,
        total_frames,
        emitted: 0,
    };
    let levels = q.levels();
    for i in 0..f_s.min(total_frames) {
        let mut e = q.fresh_entry(rng);
        // frame i sits i levels below the top so the diagonal forms
        e.tau_index = levels - (f_s - 1) + i;
        q.entries.push_back(e);
    }
    q.check_invariants()?;
    Ok(q)
}

/// Classic start-up: a full queue whose front `capacity - f_s` slots hold
/// noise-augmented copies of the first frame's latent. Padding is discarded
/// on dequeue, so both modes emit identical frame counts.
pub fn init_queue_replication<R: Rng>(
    schedule: NoiseSchedule,
    f_s: usize,
    n_partitions: usize,
    spatial: usize,
    c_s: usize,
    total_frames: usize,
    rng: &mut R,
) -> Result<FifoQueue> {
    let mut q = init_queue_adaptive(
        schedule,
        f_s,
        n_partitions,
        spatial,
        c_s,
        total_frames,
        rng,
    )?;
    let first = q.entries.front().expect("nonempty init").latent.detach();
    let n_pad = q.capacity() - q.entries.len();
    for i in (0..n_pad).rev() {
        let noise = Tensor::randn(&[q.spatial, q.c_s], 0.3, rng);
        q.entries.push_front(FifoEntry {
            latent: first.add(&noise).expect("padding latent"),
            tau_index: i + 1,
            clip_index: 0,
            frame_number: usize::MAX,
            is_padding: true,
        });
    }
    q.check_invariants()?;
    Ok(q)
}

/// Pick the clip whose token conditions one model call: the owner of the
/// majority of the window's updatable entries, ties toward the newer clip.
pub fn assign_clip_condition(updatable_clips: &[usize], n_clips: usize) -> Result<usize> {
    if updatable_clips.is_empty() {
        return Err(Error::msg("window with no updatable entries"));
    }
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &c in updatable_clips {
        if c >= n_clips {
            return Err(Error::msg(format!(
                "clip {c} has no token (only {n_clips} clips)"
            )));
        }
        match counts.iter_mut().find(|(idx, _)| *idx == c) {
            Some((_, n)) => *n += 1,
            None => counts.push((c, 1)),
        }
    }
    // newer clip wins ties
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
    Ok(counts[0].0)
}

/// One diagonal denoising step over the whole queue: every entry moves down
/// exactly one level, the front frame is dequeued if it reached level 0,
/// and fresh noise is enqueued while frames remain.
///
/// The queue is processed in update blocks of `ceil(f_s / 2)` entries.
/// A block's model window extends back to `f_s` entries where history
/// exists, and only the block (the latter portion) is written.
pub fn diagonal_step<M: WindowDenoiser, R: Rng>(
    q: &mut FifoQueue,
    model: &M,
    n_clips: usize,
    rng: &mut R,
) -> Result<Option<FifoEntry>> {
    if q.entries.is_empty() {
        return Err(Error::msg("diagonal step on an empty queue"));
    }
    let len = q.entries.len();
    let h = q.f_s.div_ceil(2);
    let tau = q.schedule.tau().to_vec();
    let spatial = q.spatial;
    let mut block_start = 0usize;
    while block_start < len {
        let block_end = (block_start + h).min(len);
        let win_start = block_end.saturating_sub(q.f_s);
        // gather the window
        let mut latents = Vec::with_capacity(block_end - win_start);
        let mut ts = Vec::with_capacity(block_end - win_start);
        for i in win_start..block_end {
            let e = &q.entries[i];
            latents.push(e.latent.clone());
            ts.push(tau[e.tau_index]);
        }
        let window = Tensor::concat_rows(&latents)?;
        let updatable: Vec<usize> = (block_start..block_end)
            .map(|i| q.entries[i].clip_index)
            .collect();
        let clip = assign_clip_condition(&updatable, n_clips)?;
        let eps = model.denoise_window(&window, &ts, clip)?;
        if eps.shape() != window.shape() {
            return Err(Error::shape("denoiser output", eps.shape(), window.shape()));
        }
        for i in block_start..block_end {
            let row0 = (i - win_start) * spatial;
            let eps_i = eps.slice_rows(row0, row0 + spatial)?.detach();
            let (t, t_prev, latent) = {
                let e = &q.entries[i];
                (tau[e.tau_index], tau[e.tau_index - 1], e.latent.clone())
            };
            let stepped = q.schedule.denoise_step(&latent, &eps_i, t, t_prev)?.detach();
            let e = &mut q.entries[i];
            e.latent = stepped;
            e.tau_index -= 1;
        }
        block_start = block_end;
    }
    let mut finished = None;
    if q.entries.front().map(|e| e.tau_index) == Some(0) {
        let e = q.entries.pop_front().expect("front checked");
        if e.is_padding {
            // start-up padding carries no output frame
        } else {
            q.emitted += 1;
            finished = Some(e);
        }
    }
    if q.next_frame < q.total_frames {
        let e = q.fresh_entry(rng);
        q.entries.push_back(e);
    }
    q.check_invariants()?;
    Ok(finished)
}

/// Drive the queue until every latent frame has been emitted, in order.
/// Returns one `(spatial, c_s)` tensor per latent frame.
pub fn run_queue<M: WindowDenoiser, R: Rng>(
    q: &mut FifoQueue,
    model: &M,
    n_clips: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(q.total_frames);
    while !q.is_done() {
        if let Some(e) = diagonal_step(q, model, n_clips, rng)? {
            if e.frame_number != out.len() {
                return Err(Error::msg(format!(
                    "frame {} emitted out of order (expected {})",
                    e.frame_number,
                    out.len()
                )));
            }
            out.push(e.latent);
        }
    }
    Ok(out)
}

/// Independent per-clip deterministic sampling, the no-stitching baseline.
pub fn sample_clip_independent<M: WindowDenoiser, R: Rng>(
    model: &M,
    clip_index: usize,
    f_s: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let spatial = model.spatial();
    let mut x = Tensor::randn(&[f_s * spatial, model.channels()], 1.0, rng);
    let tau = schedule.tau().to_vec();
    for win in tau.windows(2).rev() {
        let (t_prev, t) = (win[0], win[1]);
        let eps = model.denoise_window(&x, &vec![t; f_s], clip_index)?;
        x = schedule.denoise_step(&x, &eps, t, t_prev)?.detach();
    }
    (0..f_s)
        .map(|f| x.slice_rows(f * spatial, (f + 1) * spatial).map(|t| t.detach()))
        .collect()
}

/// Generate every latent frame of an `n_clips`-clip video under the chosen
/// stitching mode.
pub fn generate_latent_frames<M: WindowDenoiser, R: Rng>(
    model: &M,
    n_clips: usize,
    f_s: usize,
    n_partitions: usize,
    schedule_train_t: usize,
    mode: FifoMode,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    match mode {
        FifoMode::Off => {
            // the baseline uses a plain short schedule, one rollout per clip
            let schedule = NoiseSchedule::new(schedule_train_t, n_partitions * f_s)?;
            let mut out = Vec::with_capacity(n_clips * f_s);
            for c in 0..n_clips {
                out.extend(sample_clip_independent(model, c, f_s, &schedule, rng)?);
            }
            Ok(out)
        }
        FifoMode::Adaptive | FifoMode::Replication => {
            let schedule = NoiseSchedule::new(schedule_train_t, n_partitions * f_s)?;
            let total = n_clips * f_s;
            let mut q = if mode == FifoMode::Adaptive {
                init_queue_adaptive(
                    schedule,
                    f_s,
                    n_partitions,
                    model.spatial(),
                    model.channels(),
                    total,
                    rng,
                )?
            } else {
                init_queue_replication(
                    schedule,
                    f_s,
                    n_partitions,
                    model.spatial(),
                    model.channels(),
                    total,
                    rng,
                )?
            };
            run_queue(&mut q, model, n_clips, rng)
        }
    }
}

/// Decode emitted latent frames back to pixels, one clip at a time.
/// Returns a `(n_clips * chunk_frames, H, W, 3)` tensor.
pub fn decode_latent_frames(encoder: &VideoEncoder, frames: &[Tensor]) -> Result<Tensor> {
    let s = encoder.shapes();
    let f_s = s.f_s();
    if frames.is_empty() || frames.len() % f_s != 0 {
        return Err(Error::msg(format!(
            "{} latent frames do not form whole clips of {}",
            frames.len(),
            f_s
        )));
    }
    let mut clips = Vec::new();
    for chunk in frames.chunks(f_s) {
        let flat = Tensor::concat_rows(&chunk.to_vec())?;
        let latent = ClipLatent {
            grid: flat.reshape(&[f_s, s.h_s(), s.w_s(), s.c_s])?,
        };
        clips.push(encoder.decode_latent(&latent)?);
    }
    let total = clips.iter().map(|c| c.shape()[0]).sum::<usize>();
    let mut data = Vec::with_capacity(total * s.height * s.width * 3);
    for c in &clips {
        data.extend(c.to_vec());
    }
    Tensor::from_vec(&[total, s.height, s.width, 3], data)
}

/// Conditions for a token list, ready for the window denoiser: tokens are
/// lifted back to backbone width through the fitted projector.
pub fn conditions_from_tokens<'a>(
    model: &'a To2v,
    tokens: &[SemanticTokens],
    projector: &crate::tokenizer::PcaProjector,
    prompt_id: usize,
) -> Result<To2vDenoiser<'a>> {
    let mut conds = Vec::with_capacity(tokens.len());
    let mut texts = Vec::with_capacity(tokens.len());
    for t in tokens {
        let s = t.tokens.shape().to_vec();
        conds.push(SemCondition {
            z: projector.back_project(&t.flat()?)?,
            grid: (s[0], s[1], s[2]),
        });
        texts.push(model.embed_text(prompt_id)?);
    }
    Ok(To2vDenoiser {
        model,
        conds,
        texts,
        guidance: 1.0,
    })
}
