//! Training drivers. Both stages follow the same progressive recipe:
//! a short warm phase with a reduced problem (small latent grid for the
//! clip stage, few chunks for the long-range stage), then the full
//! problem at a lower learning rate. All state needed to resume lives in
//! a checkpoint: parameters, optimizer moments, RNG stream position and
//! the global step, so a resumed run replays the exact loss trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, NamedBlob, OptimizerState};
use crate::config::RunConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::fifo::{
    conditions_from_tokens, decode_latent_frames, generate_latent_frames, FifoMode,
};
use crate::optim::{Adam, AdamConfig};
use crate::synth::SceneSample;
use crate::t2to::{sample_long_tokens, t2to_train_step, LongTokenGrid, T2to};
use crate::tensor::Tensor;
use crate::to2v::{to2v_train_step, ClipExample, To2v};
use crate::tokenizer::{PcaProjector, Resampler, Tokenizer, VideoEncoder, split_video};

const STEP_BLOB: &str = "train.step";

fn adam(lr: f32, params: &[Tensor]) -> Adam {
    Adam::new(
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        },
        params,
    )
}

fn step_blob(step: usize) -> NamedBlob {
    NamedBlob {
        name: STEP_BLOB.into(),
        shape: vec![1],
        data: vec![step as f32],
    }
}

fn read_step(ckpt: &Checkpoint) -> Result<usize> {
    ckpt.blobs
        .iter()
        .find(|b| b.name == STEP_BLOB)
        .map(|b| b.data[0] as usize)
        .ok_or_else(|| Error::msg("checkpoint carries no training step"))
}

fn save_opt(ckpt: &mut Checkpoint, opt: &Adam) {
    let (step_count, moments) = opt.state();
    ckpt.optimizer = Some(OptimizerState { step_count, moments });
}

fn restore_opt(ckpt: &Checkpoint, opt: &mut Adam) -> Result<()> {
    let os = ckpt
        .optimizer
        .as_ref()
        .ok_or_else(|| Error::msg("checkpoint carries no optimizer state"))?;
    opt.restore(os.step_count, &os.moments)
}

/// Encode every chunk of every scene into a detached training example.
pub fn clip_examples(encoder: &VideoEncoder, data: &[SceneSample]) -> Result<Vec<ClipExample>> {
    let mut out = Vec::new();
    for sample in data {
        for clip in split_video(&sample.video, encoder.shapes())? {
            out.push(ClipExample {
                latent: encoder.encode_clip(&clip)?.flat()?.detach(),
                prompt_id: sample.spec.scene_id,
            });
        }
    }
    Ok(out)
}

/// Clip-stage training state. Phase layout by global step:
/// `[0, b0)` unconditional backbone pretraining (base parameters),
/// `[b0, b1)` token branch + small resampler (base frozen),
/// `[b1, b2)` full resampler grid at the phase-2 learning rate.
pub struct To2vTraining {
    pub cfg: RunConfig,
    pub model: To2v,
    pub resampler: Resampler,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub losses: Vec<f32>,
    schedule: NoiseSchedule,
}

impl To2vTraining {
    fn boundaries(cfg: &RunConfig) -> (usize, usize, usize) {
        let t = &cfg.training;
        let b0 = t.base_pretrain_steps;
        let b1 = b0 + t.to2v_phase1_steps;
        (b0, b1, b1 + t.to2v_phase2_steps)
    }

    pub fn total_steps(cfg: &RunConfig) -> usize {
        Self::boundaries(cfg).2
    }

    fn branch_set(model: &To2v, resampler: &Resampler) -> Vec<Tensor> {
        let mut p = model.branch_params();
        p.extend(resampler.params());
        p
    }

    pub fn new(cfg: &RunConfig) -> Result<To2vTraining> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = To2v::new(cfg, &mut rng)?;
        let resampler = Resampler::new(
            cfg.training.phase1_latent,
            cfg.shapes.l_video(),
            cfg.shapes.c_s,
            cfg.model.resampler_heads,
            cfg.model.ffn_mult,
            &mut rng,
        );
        let opt = adam(cfg.training.learning_rate, &model.base_params());
        let schedule = NoiseSchedule::new(cfg.schedule.t_train, cfg.schedule.s_sample)?;
        Ok(To2vTraining {
            cfg: cfg.clone(),
            model,
            resampler,
            opt,
            rng,
            step: 0,
            losses: Vec::new(),
            schedule,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.step >= Self::boundaries(&self.cfg).2
    }

    /// Phase switches happen at the start of the boundary step, so a
    /// checkpoint taken after any completed step resumes identically.
    fn apply_transitions(&mut self) -> Result<()> {
        let (b0, b1, _) = Self::boundaries(&self.cfg);
        if self.step == b0 {
            // backbone freezes here; only branch + resampler update
            self.opt = adam(
                self.cfg.training.learning_rate,
                &Self::branch_set(&self.model, &self.resampler),
            );
        }
        if self.step == b1 {
            let s = &self.cfg.shapes;
            self.resampler.grow((s.f_r, s.h_r, s.w_r), &mut self.rng)?;
            self.opt = adam(
                self.cfg.training.learning_rate_phase2,
                &Self::branch_set(&self.model, &self.resampler),
            );
        }
        Ok(())
    }

    pub fn step_once(&mut self, examples: &[ClipExample]) -> Result<f32> {
        if examples.is_empty() {
            return Err(Error::msg("no training examples"));
        }
        self.apply_transitions()?;
        let (b0, _, _) = Self::boundaries(&self.cfg);
        let batch: Vec<ClipExample> = (0..self.cfg.training.batch_size)
            .map(|_| examples[self.rng.gen_range(0..examples.len())].clone())
            .collect();
        let base_phase = self.step < b0;
        let (resampler, params) = if base_phase {
            (None, self.model.base_params())
        } else {
            (
                Some(&self.resampler),
                Self::branch_set(&self.model, &self.resampler),
            )
        };
        let loss = to2v_train_step(
            &self.model,
            resampler,
            &batch,
            &self.schedule,
            &params,
            &mut self.opt,
            self.cfg.training.cond_dropout,
            self.step,
            &mut self.rng,
        )?;
        self.losses.push(loss);
        self.step += 1;
        Ok(loss)
    }

    pub fn run_to(&mut self, examples: &[ClipExample], target: usize) -> Result<()> {
        while self.step < target.min(Self::boundaries(&self.cfg).2) {
            self.step_once(examples)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(&self.cfg, &self.rng);
        c.push_params("to2v.base", &self.model.base_params());
        c.push_params("to2v.branch", &self.model.branch_params());
        c.push_params("resampler", &self.resampler.params());
        c.blobs.push(step_blob(self.step));
        save_opt(&mut c, &self.opt);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<To2vTraining> {
        let cfg = ckpt.config.clone();
        let step = read_step(ckpt)?;
        let (b0, b1, _) = Self::boundaries(&cfg);
        // rebuild the skeleton; every value is overwritten from blobs
        let mut ctor_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = To2v::new(&cfg, &mut ctor_rng)?;
        // grid growth fires at the start of step b1, so any state saved
        // after completing step b1 is already on the full grid
        let grid = if step > b1 {
            (cfg.shapes.f_r, cfg.shapes.h_r, cfg.shapes.w_r)
        } else {
            cfg.training.phase1_latent
        };
        let resampler = Resampler::new(
            grid,
            cfg.shapes.l_video(),
            cfg.shapes.c_s,
            cfg.model.resampler_heads,
            cfg.model.ffn_mult,
            &mut ctor_rng,
        );
        ckpt.load_params("to2v.base", &model.base_params())?;
        ckpt.load_params("to2v.branch", &model.branch_params())?;
        ckpt.load_params("resampler", &resampler.params())?;
        let (lr, params) = if step <= b0 {
            (cfg.training.learning_rate, model.base_params())
        } else if step <= b1 {
            (
                cfg.training.learning_rate,
                Self::branch_set(&model, &resampler),
            )
        } else {
            (
                cfg.training.learning_rate_phase2,
                Self::branch_set(&model, &resampler),
            )
        };
        let mut opt = adam(lr, &params);
        restore_opt(ckpt, &mut opt)?;
        let schedule = NoiseSchedule::new(cfg.schedule.t_train, cfg.schedule.s_sample)?;
        Ok(To2vTraining {
            cfg,
            model,
            resampler,
            opt,
            rng: ckpt.rng(),
            step,
            losses: Vec::new(),
            schedule,
        })
    }
}

/// Fit the channel projection on resampler outputs of training clips.
pub fn fit_projector(
    resampler: &Resampler,
    examples: &[ClipExample],
    max_samples: usize,
    c_r: usize,
) -> Result<PcaProjector> {
    let mut outputs = Vec::new();
    for e in examples.iter().take(max_samples) {
        outputs.push(resampler.forward(&e.latent)?.detach());
    }
    PcaProjector::fit(&outputs, resampler.c_s, c_r)
}

/// Tokenize every scene into a long token grid for stage-two training.
pub fn token_dataset(
    tokenizer: &Tokenizer,
    data: &[SceneSample],
) -> Result<Vec<(LongTokenGrid, usize)>> {
    data.iter()
        .map(|s| {
            let (tokens, _) = tokenizer.tokenize_long_video(&s.video)?;
            Ok((LongTokenGrid::from_clips(&tokens)?, s.spec.scene_id))
        })
        .collect()
}

fn truncate_grid(g: &LongTokenGrid, frames: usize) -> Result<LongTokenGrid> {
    let s = g.tokens.shape().to_vec();
    if frames >= s[0] {
        return Ok(g.clone());
    }
    let row = s[1] * s[2] * s[3];
    let data = g.tokens.data()[..frames * row].to_vec();
    Ok(LongTokenGrid {
        tokens: Tensor::from_vec(&[frames, s[1], s[2], s[3]], data)?,
        valid_frames: g.valid_frames.min(frames),
    })
}

/// Long-range token transformer training state. Phase 1 trains on the
/// first few chunks of each video, phase 2 on the full length at the
/// phase-2 learning rate.
pub struct T2toTraining {
    pub cfg: RunConfig,
    pub model: T2to,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub losses: Vec<f32>,
    schedule: NoiseSchedule,
}

impl T2toTraining {
    pub fn total_steps(cfg: &RunConfig) -> usize {
        cfg.training.t2to_phase1_steps + cfg.training.t2to_phase2_steps
    }

    /// `warm_from` seeds the timestep embedder and prompt table from a
    /// trained clip model instead of fresh noise.
    pub fn new(cfg: &RunConfig, warm_from: Option<&To2v>) -> Result<T2toTraining> {
        cfg.validate()?;
        // offset seed: stage two must not replay stage one's stream
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7432_746f);
        let mut model = T2to::new(cfg, &mut rng)?;
        if let Some(src) = warm_from {
            model.init_from(&src.t_embedder, &src.text_vocab);
        }
        let opt = adam(cfg.training.learning_rate, &model.params());
        let schedule = NoiseSchedule::new(cfg.schedule.t_train, cfg.schedule.s_sample)?;
        Ok(T2toTraining {
            cfg: cfg.clone(),
            model,
            opt,
            rng,
            step: 0,
            losses: Vec::new(),
            schedule,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.step >= Self::total_steps(&self.cfg)
    }

    pub fn step_once(&mut self, data: &[(LongTokenGrid, usize)]) -> Result<f32> {
        if data.is_empty() {
            return Err(Error::msg("no token grids to train on"));
        }
        let t = &self.cfg.training;
        if self.step == t.t2to_phase1_steps {
            // full-length phase at the lower rate; moments restart
            self.opt = adam(t.learning_rate_phase2, &self.model.params());
        }
        let phase1 = self.step < t.t2to_phase1_steps;
        let frames = t.t2to_phase1_chunks * self.cfg.shapes.f_r;
        let mut batch = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let (g, p) = &data[self.rng.gen_range(0..data.len())];
            let g = if phase1 { truncate_grid(g, frames)? } else { g.clone() };
            batch.push((g, *p));
        }
        let params = self.model.params();
        let loss = t2to_train_step(
            &self.model,
            &batch,
            &self.schedule,
            &params,
            &mut self.opt,
            self.step,
            &mut self.rng,
        )?;
        self.losses.push(loss);
        self.step += 1;
        Ok(loss)
    }

    pub fn run_to(&mut self, data: &[(LongTokenGrid, usize)], target: usize) -> Result<()> {
        while self.step < target.min(Self::total_steps(&self.cfg)) {
            self.step_once(data)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(&self.cfg, &self.rng);
        c.push_params("t2to", &self.model.params());
        c.blobs.push(step_blob(self.step));
        save_opt(&mut c, &self.opt);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<T2toTraining> {
        let cfg = ckpt.config.clone();
        let step = read_step(ckpt)?;
        let mut ctor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7432_746f);
        let model = T2to::new(&cfg, &mut ctor_rng)?;
        ckpt.load_params("t2to", &model.params())?;
        let lr = if step <= cfg.training.t2to_phase1_steps {
            cfg.training.learning_rate
        } else {
            cfg.training.learning_rate_phase2
        };
        let mut opt = adam(lr, &model.params());
        restore_opt(ckpt, &mut opt)?;
        let schedule = NoiseSchedule::new(cfg.schedule.t_train, cfg.schedule.s_sample)?;
        Ok(T2toTraining {
            cfg,
            model,
            opt,
            rng: ckpt.rng(),
            step,
            losses: Vec::new(),
            schedule,
        })
    }
}

/// Store a fitted channel projection alongside model parameters.
pub fn push_projector(ckpt: &mut Checkpoint, p: &PcaProjector) {
    ckpt.blobs.push(NamedBlob {
        name: "pca.mean".into(),
        shape: vec![p.c_s],
        data: p.mean.clone(),
    });
    ckpt.blobs.push(NamedBlob {
        name: "pca.basis".into(),
        shape: vec![p.c_r, p.c_s],
        data: p.basis.clone(),
    });
    ckpt.blobs.push(NamedBlob {
        name: "pca.var".into(),
        shape: vec![p.c_r],
        data: p.explained_variance.clone(),
    });
}

pub fn load_projector(ckpt: &Checkpoint) -> Result<PcaProjector> {
    let get = |name: &str| -> Result<&NamedBlob> {
        ckpt.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::msg(format!("checkpoint has no '{name}' blob")))
    };
    let mean = get("pca.mean")?;
    let basis = get("pca.basis")?;
    let var = get("pca.var")?;
    Ok(PcaProjector {
        mean: mean.data.clone(),
        basis: basis.data.clone(),
        explained_variance: var.data.clone(),
        c_s: mean.shape[0],
        c_r: basis.shape[0],
    })
}

/// Everything the generation commands need: the frozen pixel codec, the
/// fitted tokenizer, the clip denoiser and (optionally) the long-range
/// token model.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub tokenizer: Tokenizer,
    pub to2v: To2v,
    pub t2to: Option<T2to>,
}

impl Pipeline {
    pub fn assemble(
        cfg: &RunConfig,
        to2v: To2v,
        resampler: Resampler,
        projector: PcaProjector,
        t2to: Option<T2to>,
    ) -> Result<Pipeline> {
        let encoder = VideoEncoder::new(&cfg.shapes, cfg.seed)?;
        Ok(Pipeline {
            cfg: cfg.clone(),
            tokenizer: Tokenizer {
                encoder,
                resampler,
                projector: Some(projector),
                shapes: cfg.shapes.clone(),
            },
            to2v,
            t2to,
        })
    }

    fn projector(&self) -> Result<&PcaProjector> {
        self.tokenizer
            .projector
            .as_ref()
            .ok_or_else(|| Error::msg("pipeline has no fitted projector"))
    }

    /// Text to long video: stage two samples the token sequence, the FIFO
    /// queue stitches clips, the codec decodes pixels.
    pub fn generate<R: Rng>(
        &self,
        prompt_id: usize,
        n_clips: usize,
        mode: FifoMode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let t2to = self
            .t2to
            .as_ref()
            .ok_or_else(|| Error::msg("generation needs the long-range token model"))?;
        let tokens = sample_long_tokens(t2to, prompt_id, n_clips, &self.schedule()?, rng)?;
        self.render(&tokens, prompt_id, mode, rng)
    }

    /// Video editing: tokens come from the source video, the prompt is
    /// free to differ, stitching is identical. Stage two is not involved.
    pub fn edit<R: Rng>(
        &self,
        source: &Tensor,
        prompt_id: usize,
        mode: FifoMode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let (tokens, _) = self.tokenizer.tokenize_long_video(source)?;
        if tokens.len() > self.cfg.shapes.n_max {
            return Err(Error::msg(format!(
                "source spans {} chunks, limit is {}; trim the video or raise n_max",
                tokens.len(),
                self.cfg.shapes.n_max
            )));
        }
        self.render(&tokens, prompt_id, mode, rng)
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.cfg.schedule.t_train, self.cfg.schedule.s_sample)
    }

    /// Tokens to pixels through the chosen stitching mode.
    pub fn render<R: Rng>(
        &self,
        tokens: &[crate::tokenizer::SemanticTokens],
        prompt_id: usize,
        mode: FifoMode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let denoiser =
            conditions_from_tokens(&self.to2v, tokens, self.projector()?, prompt_id)?;
        let frames = generate_latent_frames(
            &denoiser,
            tokens.len(),
            self.cfg.shapes.f_s(),
            self.cfg.schedule.n_partitions,
            self.cfg.schedule.t_train,
            mode,
            rng,
        )?;
        decode_latent_frames(&self.tokenizer.encoder, &frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_dataset;
    use crate::to2v::param_fingerprint;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.d_model = 32;
        cfg.model.n_heads = 2;
        cfg.model.n_blocks = 2;
        cfg.model.t2to_n_blocks = 2;
        cfg.training.batch_size = 1;
        cfg.training.base_pretrain_steps = 3;
        cfg.training.to2v_phase1_steps = 3;
        cfg.training.to2v_phase2_steps = 4;
        cfg.training.t2to_phase1_steps = 3;
        cfg.training.t2to_phase2_steps = 3;
        cfg.training.pca_samples = 16;
        cfg
    }

    fn tiny_data(cfg: &RunConfig, count: usize) -> Vec<SceneSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        gen_dataset(
            count,
            cfg.model.vocab_size,
            cfg.shapes.chunk_frames * 2,
            cfg.shapes.height,
            cfg.shapes.width,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn to2v_training_walks_all_phases() {
        let cfg = tiny_cfg();
        let encoder = VideoEncoder::new(&cfg.shapes, cfg.seed).unwrap();
        let examples = clip_examples(&encoder, &tiny_data(&cfg, 3)).unwrap();
        let mut tr = To2vTraining::new(&cfg).unwrap();
        assert_eq!(tr.resampler.latent_grid, cfg.training.phase1_latent);
        tr.run_to(&examples, 3).unwrap();
        // still small grid right up to the growth step
        tr.run_to(&examples, 6).unwrap();
        assert_eq!(tr.resampler.latent_grid, cfg.training.phase1_latent);
        let frozen = param_fingerprint(&tr.model.base_params());
        tr.run_to(&examples, To2vTraining::total_steps(&cfg)).unwrap();
        let s = &cfg.shapes;
        assert_eq!(tr.resampler.latent_grid, (s.f_r, s.h_r, s.w_r));
        assert!(tr.is_complete());
        assert!(tr.losses.iter().all(|l| l.is_finite()));
        // backbone untouched after its pretraining ended
        assert_eq!(frozen, param_fingerprint(&tr.model.base_params()));
    }

    #[test]
    fn to2v_resume_replays_the_loss_trajectory() {
        let cfg = tiny_cfg();
        let encoder = VideoEncoder::new(&cfg.shapes, cfg.seed).unwrap();
        let examples = clip_examples(&encoder, &tiny_data(&cfg, 2)).unwrap();
        let total = To2vTraining::total_steps(&cfg);
        let mut full = To2vTraining::new(&cfg).unwrap();
        full.run_to(&examples, total).unwrap();

        let mut first = To2vTraining::new(&cfg).unwrap();
        first.run_to(&examples, 5).unwrap();
        let ckpt = first.to_checkpoint();
        let bytes = ckpt.encode();
        let mut resumed =
            To2vTraining::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(resumed.step, 5);
        resumed.run_to(&examples, total).unwrap();
        let tail = &full.losses[5..];
        assert_eq!(tail.len(), resumed.losses.len());
        for (a, b) in tail.iter().zip(&resumed.losses) {
            assert!((a - b).abs() < 1e-5, "trajectory diverged: {a} vs {b}");
        }
    }

    #[test]
    fn resume_across_the_growth_boundary_keeps_the_grid() {
        let cfg = tiny_cfg();
        let encoder = VideoEncoder::new(&cfg.shapes, cfg.seed).unwrap();
        let examples = clip_examples(&encoder, &tiny_data(&cfg, 2)).unwrap();
        let mut tr = To2vTraining::new(&cfg).unwrap();
        tr.run_to(&examples, 7).unwrap(); // growth fired at step 6
        let resumed = To2vTraining::from_checkpoint(&tr.to_checkpoint()).unwrap();
        let s = &cfg.shapes;
        assert_eq!(resumed.resampler.latent_grid, (s.f_r, s.h_r, s.w_r));
    }

    #[test]
    fn t2to_training_and_resume() {
        let cfg = tiny_cfg();
        let encoder = VideoEncoder::new(&cfg.shapes, cfg.seed).unwrap();
        let data = tiny_data(&cfg, 2);
        let examples = clip_examples(&encoder, &data).unwrap();
        let resampler = {
            let mut tr = To2vTraining::new(&cfg).unwrap();
            tr.run_to(&examples, To2vTraining::total_steps(&cfg)).unwrap();
            tr.resampler
        };
        let projector =
            fit_projector(&resampler, &examples, cfg.training.pca_samples, cfg.shapes.c_r)
                .unwrap();
        let tokenizer = Tokenizer {
            encoder,
            resampler,
            projector: Some(projector),
            shapes: cfg.shapes.clone(),
        };
        let grids = token_dataset(&tokenizer, &data).unwrap();
        let total = T2toTraining::total_steps(&cfg);
        let mut full = T2toTraining::new(&cfg, None).unwrap();
        full.run_to(&grids, total).unwrap();
        assert!(full.losses.iter().all(|l| l.is_finite()));

        let mut first = T2toTraining::new(&cfg, None).unwrap();
        first.run_to(&grids, 4).unwrap();
        let mut resumed = T2toTraining::from_checkpoint(&first.to_checkpoint()).unwrap();
        resumed.run_to(&grids, total).unwrap();
        for (a, b) in full.losses[4..].iter().zip(&resumed.losses) {
            assert!((a - b).abs() < 1e-5, "trajectory diverged: {a} vs {b}");
        }
    }

    #[test]
    fn pipeline_generates_and_edits() {
        let cfg = tiny_cfg();
        let encoder = VideoEncoder::new(&cfg.shapes, cfg.seed).unwrap();
        let data = tiny_data(&cfg, 2);
        let examples = clip_examples(&encoder, &data).unwrap();
        let mut tr = To2vTraining::new(&cfg).unwrap();
        tr.run_to(&examples, To2vTraining::total_steps(&cfg)).unwrap();
        let projector =
            fit_projector(&tr.resampler, &examples, cfg.training.pca_samples, cfg.shapes.c_r)
                .unwrap();
        let tokenizer = Tokenizer {
            encoder: VideoEncoder::new(&cfg.shapes, cfg.seed).unwrap(),
            resampler: tr.resampler.clone(),
            projector: Some(projector.clone()),
            shapes: cfg.shapes.clone(),
        };
        let grids = token_dataset(&tokenizer, &data).unwrap();
        let mut t2 = T2toTraining::new(&cfg, Some(&tr.model)).unwrap();
        t2.run_to(&grids, T2toTraining::total_steps(&cfg)).unwrap();
        let pipe =
            Pipeline::assemble(&cfg, tr.model, tr.resampler, projector, Some(t2.model))
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let video = pipe.generate(1, 2, FifoMode::Adaptive, &mut rng).unwrap();
        assert_eq!(
            video.shape(),
            &[2 * cfg.shapes.chunk_frames, cfg.shapes.height, cfg.shapes.width, 3]
        );
        let edited = pipe
            .edit(&data[0].video, 2, FifoMode::Off, &mut rng)
            .unwrap();
        assert_eq!(edited.shape()[0], data[0].video.shape()[0]);
    }
}
