//! Run configuration: every shape, schedule and training knob in one
//! validated structure. Two built-in profiles ship with the repo: the
//! desk-scale profile everything trains under, and the full-scale profile
//! used for shape accounting only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Shapes {
    /// Pixel frames per clip.
    pub chunk_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial patch edge.
    pub patch: usize,
    /// Temporal patch; the first frame always forms its own (padded) patch,
    /// so `chunk_frames - 1` must divide by it.
    pub patch_t: usize,
    /// Channel width of encoded clip tokens.
    pub c_s: usize,
    /// Condensed token grid.
    pub f_r: usize,
    pub h_r: usize,
    pub w_r: usize,
    /// Condensed channel width after projection.
    pub c_r: usize,
    /// Maximum chunks per long video.
    pub n_max: usize,
}

impl Shapes {
    /// Temporal extent of the encoded clip grid.
    pub fn f_s(&self) -> usize {
        (self.chunk_frames - 1) / self.patch_t + 1
    }

    pub fn h_s(&self) -> usize {
        self.height / self.patch
    }

    pub fn w_s(&self) -> usize {
        self.width / self.patch
    }

    /// Raw channel count of one patch before the linear embed.
    pub fn patch_volume(&self) -> usize {
        3 * self.patch * self.patch * self.patch_t
    }

    /// Flattened sequence length of the encoded clip.
    pub fn l_video(&self) -> usize {
        self.f_s() * self.h_s() * self.w_s()
    }

    /// Flattened condensed-token count per clip.
    pub fn l_sem(&self) -> usize {
        self.f_r * self.h_r * self.w_r
    }

    /// Token count of the long-range transformer for `n` chunks.
    pub fn long_token_count(&self, n: usize) -> usize {
        n * self.f_r * self.h_r * self.w_r
    }

    pub fn total_frames(&self, n: usize) -> usize {
        n * self.chunk_frames
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_mult: usize,
    /// Fixed text sequence length.
    pub l_text: usize,
    /// Synthetic prompt vocabulary size.
    pub vocab_size: usize,
    /// Per-head RoPE channel split for the clip denoiser (h, w, t).
    pub rope_fracs: (f32, f32, f32),
    pub t2to_d_model: usize,
    pub t2to_n_heads: usize,
    pub t2to_n_blocks: usize,
    /// Temporal-heavy split for the long-range transformer.
    pub t2to_rope_fracs: (f32, f32, f32),
    /// Resampler cross-attention heads.
    pub resampler_heads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    /// Training timesteps.
    pub t_train: usize,
    /// Inference steps for plain (non-FIFO) sampling.
    pub s_sample: usize,
    /// FIFO latent partitions; the FIFO schedule has
    /// `n_partitions * f_s` levels.
    pub n_partitions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub learning_rate_phase2: f32,
    /// Unconditional steps that produce the frozen backbone analog.
    pub base_pretrain_steps: usize,
    pub to2v_phase1_steps: usize,
    pub to2v_phase2_steps: usize,
    /// Resampler latent grid during phase 1 (grows to (f_r, h_r, w_r)).
    pub phase1_latent: (usize, usize, usize),
    pub t2to_phase1_steps: usize,
    pub t2to_phase2_steps: usize,
    /// Chunk count during the short-video phase.
    pub t2to_phase1_chunks: usize,
    /// Samples used to fit the channel projection.
    pub pca_samples: usize,
    /// Condition dropout probability for classifier-free guidance.
    pub cond_dropout: f32,
    pub guidance_scale: f32,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub fps: u32,
    pub shapes: Shapes,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    /// Small profile: everything trains in minutes on one CPU core.
    pub fn desk() -> RunConfig {
        RunConfig {
            seed: 17,
            fps: 8,
            shapes: Shapes {
                chunk_frames: 8,
                height: 16,
                width: 16,
                patch: 4,
                patch_t: 1,
                c_s: 64,
                f_r: 4,
                h_r: 2,
                w_r: 2,
                c_r: 8,
                n_max: 4,
            },
            model: ModelConfig {
                d_model: 64,
                n_heads: 4,
                n_blocks: 4,
                ffn_mult: 4,
                l_text: 4,
                vocab_size: 16,
                rope_fracs: (0.25, 0.25, 0.5),
                t2to_d_model: 64,
                t2to_n_heads: 2,
                t2to_n_blocks: 4,
                t2to_rope_fracs: (0.1, 0.1, 0.8),
                resampler_heads: 4,
            },
            schedule: ScheduleConfig {
                t_train: 64,
                s_sample: 16,
                n_partitions: 2,
            },
            training: TrainingConfig {
                batch_size: 2,
                learning_rate: 1e-3,
                learning_rate_phase2: 3e-4,
                base_pretrain_steps: 150,
                to2v_phase1_steps: 100,
                to2v_phase2_steps: 400,
                phase1_latent: (4, 1, 1),
                t2to_phase1_steps: 200,
                t2to_phase2_steps: 800,
                t2to_phase1_chunks: 2,
                pca_samples: 64,
                cond_dropout: 0.1,
                guidance_scale: 1.0,
                checkpoint_every: 100,
            },
        }
    }

    /// Published full-scale numbers. Used for shape accounting and as a
    /// documented reference; training at this scale is out of reach here.
    pub fn paper_scale() -> RunConfig {
        RunConfig {
            seed: 17,
            fps: 10,
            shapes: Shapes {
                chunk_frames: 49,
                height: 480,
                width: 720,
                patch: 16,
                patch_t: 4,
                c_s: 3072,
                f_r: 4,
                h_r: 8,
                w_r: 12,
                c_r: 16,
                n_max: 24,
            },
            model: ModelConfig {
                d_model: 3072,
                n_heads: 48,
                n_blocks: 42,
                ffn_mult: 4,
                l_text: 226,
                vocab_size: 16,
                rope_fracs: (0.25, 0.25, 0.5),
                t2to_d_model: 3072,
                t2to_n_heads: 48,
                t2to_n_blocks: 42,
                t2to_rope_fracs: (0.1, 0.1, 0.8),
                resampler_heads: 4,
            },
            schedule: ScheduleConfig {
                t_train: 1000,
                s_sample: 50,
                n_partitions: 4,
            },
            training: TrainingConfig {
                batch_size: 72,
                learning_rate: 1e-3,
                learning_rate_phase2: 3e-4,
                base_pretrain_steps: 0,
                to2v_phase1_steps: 1200,
                to2v_phase2_steps: 2600,
                phase1_latent: (4, 5, 7),
                t2to_phase1_steps: 1200,
                t2to_phase2_steps: 5000,
                t2to_phase1_chunks: 3,
                pca_samples: 300,
                cond_dropout: 0.1,
                guidance_scale: 1.0,
                checkpoint_every: 500,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.shapes;
        let err = |m: String| Err(Error::Config(m));
        if s.chunk_frames == 0 || s.height == 0 || s.width == 0 {
            return err("clip dimensions must be positive".into());
        }
        if s.patch == 0 || s.patch_t == 0 {
            return err("patch sizes must be positive".into());
        }
        if s.height % s.patch != 0 {
            return err(format!("height {} not divisible by patch {}", s.height, s.patch));
        }
        if s.width % s.patch != 0 {
            return err(format!("width {} not divisible by patch {}", s.width, s.patch));
        }
        if (s.chunk_frames - 1) % s.patch_t != 0 {
            return err(format!(
                "chunk_frames-1 ({}) not divisible by patch_t {}",
                s.chunk_frames - 1,
                s.patch_t
            ));
        }
        if s.f_r == 0 || s.h_r == 0 || s.w_r == 0 || s.c_r == 0 {
            return err("condensed token dimensions must be positive".into());
        }
        if s.f_r >= s.f_s() || s.h_r >= s.h_s() || s.w_r >= s.w_s() {
            return err(format!(
                "condensed grid {}x{}x{} must be strictly smaller than source {}x{}x{}",
                s.f_r,
                s.h_r,
                s.w_r,
                s.f_s(),
                s.h_s(),
                s.w_s()
            ));
        }
        if s.c_r >= s.c_s {
            return err(format!("c_r {} must be smaller than c_s {}", s.c_r, s.c_s));
        }
        // large condensed channel widths do not converge; stay below half
        if s.c_r > s.c_s / 2 {
            return err(format!("c_r {} exceeds c_s/2 ({})", s.c_r, s.c_s / 2));
        }
        if s.n_max == 0 {
            return err("n_max must be positive".into());
        }
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                m.d_model, m.n_heads
            ));
        }
        if m.t2to_d_model == 0
            || m.t2to_n_heads == 0
            || m.t2to_d_model % m.t2to_n_heads != 0
        {
            return err("t2to head split must divide its model width".into());
        }
        if m.vocab_size == 0 || m.l_text == 0 {
            return err("text vocabulary and length must be positive".into());
        }
        let sc = &self.schedule;
        if sc.t_train == 0 || sc.s_sample == 0 || sc.s_sample > sc.t_train {
            return err(format!(
                "schedule needs 1 <= s_sample ({}) <= t_train ({})",
                sc.s_sample, sc.t_train
            ));
        }
        if sc.n_partitions == 0 || sc.n_partitions * s.f_s() > sc.t_train {
            return err(format!(
                "fifo needs n_partitions*f_s ({}) <= t_train ({})",
                sc.n_partitions * s.f_s(),
                sc.t_train
            ));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if t.phase1_latent.0 > s.f_r || t.phase1_latent.1 > s.h_r || t.phase1_latent.2 > s.w_r {
            return err("phase1 latent grid must not exceed the full grid".into());
        }
        if !(0.0..=1.0).contains(&t.cond_dropout) {
            return err("cond_dropout must be in [0, 1]".into());
        }
        if t.pca_samples < s.c_r {
            return err(format!(
                "pca_samples {} below c_r {}",
                t.pca_samples, s.c_r
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
