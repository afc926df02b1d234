//! Command line front end. Subcommands cover the whole workflow:
//! `gen-data` renders a deterministic synthetic dataset, `train` runs the
//! two-phase progressive schedule for either stage, `generate` samples a
//! long video from a prompt, `edit` re-renders an existing video under a
//! new prompt, and `eval` reports metrics for a video file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidtok_core::checkpoint::Checkpoint;
use vidtok_core::config::RunConfig;
use vidtok_core::fifo::FifoMode;
use vidtok_core::metrics::metric_report;
use vidtok_core::synth::{sample_spec, SceneSample, SyntheticVideoSpec};
use vidtok_core::tokenizer::{Tokenizer, VideoEncoder};
use vidtok_core::train::{
    clip_examples, fit_projector, load_projector, push_projector, token_dataset, Pipeline,
    T2toTraining, To2vTraining,
};
use vidtok_core::video::{read_video, write_video};
use vidtok_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vidtok", about = "Two-stage long-video diffusion at desk scale")]
struct Cli {
    /// Run configuration file; the built-in desk profile when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FifoModeArg {
    Adaptive,
    Replication,
    Off,
}

impl From<FifoModeArg> for FifoMode {
    fn from(m: FifoModeArg) -> FifoMode {
        match m {
            FifoModeArg::Adaptive => FifoMode::Adaptive,
            FifoModeArg::Replication => FifoMode::Replication,
            FifoModeArg::Off => FifoMode::Off,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    To2v,
    T2to,
}

#[derive(Subcommand)]
enum Command {
    /// Render a deterministic synthetic dataset to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of long videos.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train one stage, writing periodic checkpoints.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Clip-stage checkpoint (required for the t2to stage).
        #[arg(long)]
        to2v: Option<PathBuf>,
    },
    /// Sample a long video from a prompt.
    Generate {
        #[arg(long)]
        to2v: PathBuf,
        #[arg(long)]
        t2to: PathBuf,
        #[arg(long, default_value_t = 0)]
        prompt: usize,
        /// Number of stitched clips.
        #[arg(long, default_value_t = 4)]
        clips: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FifoModeArg::Adaptive)]
        fifo_mode: FifoModeArg,
    },
    /// Re-render an existing video under a new prompt.
    Edit {
        #[arg(long)]
        to2v: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value_t = 0)]
        prompt: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FifoModeArg::Adaptive)]
        fifo_mode: FifoModeArg,
    },
    /// Print metrics for a video file.
    Eval {
        #[arg(long)]
        video: PathBuf,
        /// Reference video for mse/ssim.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Clip length for the boundary metric; the configured chunk
        /// length when omitted.
        #[arg(long)]
        clip_len: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::msg(format!("read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::msg(format!(
            "missing {what} checkpoint: {}",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::msg("count must be at least 1"));
    }
    fs::create_dir_all(out).map_err(|e| Error::msg(format!("create {}: {e}", out.display())))?;
    let s = &cfg.shapes;
    let frames = s.total_frames(s.n_max);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let spec = sample_spec(
            i % cfg.model.vocab_size,
            cfg.model.vocab_size,
            frames,
            s.height,
            s.width,
            &mut rng,
        );
        let video = spec.render_video()?;
        write_video(&out.join(format!("scene_{i:04}.rvid")), &video, cfg.fps)?;
        specs.push(spec);
    }
    let json = serde_json::to_string_pretty(&specs)
        .map_err(|e| Error::msg(format!("serialize specs: {e}")))?;
    fs::write(out.join("specs.json"), json)
        .map_err(|e| Error::msg(format!("write specs.json: {e}")))?;
    println!("wrote {count} videos of {frames} frames to {}", out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let text = fs::read_to_string(dir.join("specs.json"))
        .map_err(|e| Error::msg(format!("read {}/specs.json: {e}", dir.display())))?;
    let specs: Vec<SyntheticVideoSpec> =
        serde_json::from_str(&text).map_err(|e| Error::msg(format!("parse specs.json: {e}")))?;
    specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let (video, _) = read_video(&dir.join(format!("scene_{i:04}.rvid")))?;
            Ok(SceneSample { spec, video })
        })
        .collect()
}

fn cmd_train_to2v(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let mut tr = match resume {
        Some(p) => {
            require(p, "resume")?;
            let ckpt = Checkpoint::load(p)?;
            ckpt.check_shapes(cfg)?;
            To2vTraining::from_checkpoint(&ckpt)?
        }
        None => To2vTraining::new(cfg)?,
    };
    let examples = clip_examples(&VideoEncoder::new(&cfg.shapes, cfg.seed)?, &dataset)?;
    let total = To2vTraining::total_steps(cfg);
    while tr.step < total {
        let loss = tr.step_once(&examples)?;
        println!("to2v step {} loss {loss:.5}", tr.step);
        if tr.step % cfg.training.checkpoint_every == 0 || tr.step == total {
            tr.to_checkpoint().save(out)?;
        }
    }
    // ship the fitted channel projection with the finished model
    let projector = fit_projector(
        &tr.resampler,
        &examples,
        cfg.training.pca_samples,
        cfg.shapes.c_r,
    )?;
    let mut ckpt = tr.to_checkpoint();
    push_projector(&mut ckpt, &projector);
    ckpt.save(out)?;
    println!("to2v training complete: {}", out.display());
    Ok(())
}

fn cmd_train_t2to(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    to2v_path: Option<&Path>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let to2v_path =
        to2v_path.ok_or_else(|| Error::msg("t2to training needs --to2v <checkpoint>"))?;
    require(to2v_path, "to2v")?;
    let to2v_ckpt = Checkpoint::load(to2v_path)?;
    to2v_ckpt.check_shapes(cfg)?;
    let stage1 = To2vTraining::from_checkpoint(&to2v_ckpt)?;
    let projector = load_projector(&to2v_ckpt)?;
    let tokenizer = Tokenizer {
        encoder: VideoEncoder::new(&cfg.shapes, cfg.seed)?,
        resampler: stage1.resampler.clone(),
        projector: Some(projector),
        shapes: cfg.shapes.clone(),
    };
    let grids = token_dataset(&tokenizer, &dataset)?;
    let mut tr = match resume {
        Some(p) => {
            require(p, "resume")?;
            let ckpt = Checkpoint::load(p)?;
            ckpt.check_shapes(cfg)?;
            T2toTraining::from_checkpoint(&ckpt)?
        }
        None => T2toTraining::new(cfg, Some(&stage1.model))?,
    };
    let total = T2toTraining::total_steps(cfg);
    while tr.step < total {
        let loss = tr.step_once(&grids)?;
        println!("t2to step {} loss {loss:.5}", tr.step);
        if tr.step % cfg.training.checkpoint_every == 0 || tr.step == total {
            tr.to_checkpoint().save(out)?;
        }
    }
    println!("t2to training complete: {}", out.display());
    Ok(())
}

fn load_pipeline(
    cfg: &RunConfig,
    to2v_path: &Path,
    t2to_path: Option<&Path>,
) -> Result<Pipeline> {
    require(to2v_path, "to2v")?;
    let to2v_ckpt = Checkpoint::load(to2v_path)?;
    to2v_ckpt.check_shapes(cfg)?;
    let stage1 = To2vTraining::from_checkpoint(&to2v_ckpt)?;
    let projector = load_projector(&to2v_ckpt)?;
    let t2to = match t2to_path {
        Some(p) => {
            require(p, "t2to")?;
            let ckpt = Checkpoint::load(p)?;
            ckpt.check_shapes(cfg)?;
            Some(T2toTraining::from_checkpoint(&ckpt)?.model)
        }
        None => None,
    };
    Pipeline::assemble(cfg, stage1.model, stage1.resampler, projector, t2to)
}

fn write_output(cfg: &RunConfig, out: &Path, video: &vidtok_core::Tensor) -> Result<()> {
    write_video(out, video, cfg.fps)?;
    let report = metric_report(video, None, cfg.shapes.chunk_frames)?;
    let report_path = out.with_extension("report.txt");
    fs::write(&report_path, report.render())
        .map_err(|e| Error::msg(format!("write {}: {e}", report_path.display())))?;
    println!("wrote {} and {}", out.display(), report_path.display());
    print!("{}", report.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { out, count } => cmd_gen_data(&cfg, out, *count),
        Command::Train {
            stage,
            data,
            out,
            resume,
            to2v,
        } => match stage {
            Stage::To2v => cmd_train_to2v(&cfg, data, out, resume.as_deref()),
            Stage::T2to => cmd_train_t2to(&cfg, data, out, resume.as_deref(), to2v.as_deref()),
        },
        Command::Generate {
            to2v,
            t2to,
            prompt,
            clips,
            out,
            fifo_mode,
        } => {
            let pipe = load_pipeline(&cfg, to2v, Some(t2to))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let video = pipe.generate(*prompt, *clips, (*fifo_mode).into(), &mut rng)?;
            write_output(&cfg, out, &video)
        }
        Command::Edit {
            to2v,
            source,
            prompt,
            out,
            fifo_mode,
        } => {
            let pipe = load_pipeline(&cfg, to2v, None)?;
            let (src, _) = read_video(source)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let video = pipe.edit(&src, *prompt, (*fifo_mode).into(), &mut rng)?;
            write_output(&cfg, out, &video)
        }
        Command::Eval {
            video,
            reference,
            clip_len,
        } => {
            let (v, _) = read_video(video)?;
            let r = match reference {
                Some(p) => Some(read_video(p)?.0),
                None => None,
            };
            let report =
                metric_report(&v, r.as_ref(), clip_len.unwrap_or(cfg.shapes.chunk_frames))?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
