//! End-to-end acceptance suite. Each criterion prints one pass/fail line;
//! the test fails if any criterion fails. Criteria that need a trained
//! model train small ones from scratch, so this test takes a few minutes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidtok_core::checkpoint::Checkpoint;
use vidtok_core::config::RunConfig;
use vidtok_core::diffusion::NoiseSchedule;
use vidtok_core::fifo::{
    generate_latent_frames, init_queue_adaptive, init_queue_replication, run_queue, FifoMode,
    WindowDenoiser,
};
use vidtok_core::metrics::boundary_discontinuity;
use vidtok_core::nn::Linear;
use vidtok_core::optim::{Adam, AdamConfig};
use vidtok_core::rope::{Rope3dTable, RopeTables};
use vidtok_core::synth::gen_dataset;
use vidtok_core::t2to::{masked_mse, pack_frames, LongTokenGrid, T2to};
use vidtok_core::tensor::Tensor;
use vidtok_core::to2v::{
    joint_attention, param_fingerprint, to2v_train_step, ClipExample, SemCondition, To2v,
    To2vBlock,
};
use vidtok_core::tokenizer::{PcaProjector, Resampler, VideoEncoder};
use vidtok_core::train::clip_examples;
use vidtok_core::video::encode_video;

type CResult = Result<(), String>;

fn check(fails: &mut Vec<&'static str>, name: &'static str, r: CResult) {
    match r {
        Ok(()) => println!("[PASS] {name}"),
        Err(e) => {
            println!("[FAIL] {name}: {e}");
            fails.push(name);
        }
    }
}

fn adam(lr: f32, params: &[Tensor]) -> Adam {
    Adam::new(
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        },
        params,
    )
}

// ───────────────────────── 1. autodiff vs finite differences ──────────

#[derive(Clone, Copy)]
enum Op {
    AddLeaf(usize),
    MulLeaf(usize),
    MatmulLeaf(usize),
    Silu,
    Softmax,
    Scale(f32),
    AddScalar(f32),
}

fn eval_graph(ops: &[Op], leaf_data: &[Vec<f32>], n: usize) -> (f32, Vec<Tensor>) {
    let leaves: Vec<Tensor> = leaf_data
        .iter()
        .map(|d| Tensor::from_vec(&[n, n], d.clone()).unwrap().trainable())
        .collect();
    let mut cur = leaves[0].clone();
    for op in ops {
        cur = match *op {
            Op::AddLeaf(i) => cur.add(&leaves[i]).unwrap(),
            Op::MulLeaf(i) => cur.mul(&leaves[i]).unwrap(),
            Op::MatmulLeaf(i) => cur.matmul(&leaves[i]).unwrap().scale(0.5),
            Op::Silu => cur.silu(),
            Op::Softmax => cur.softmax_lastdim().unwrap(),
            Op::Scale(c) => cur.scale(c),
            Op::AddScalar(c) => cur.add_scalar(c),
        };
    }
    let loss = cur.mul(&cur).unwrap().mean_all();
    (loss.item().unwrap(), leaves)
}

fn criterion_autodiff() -> CResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let n = 4;
    for graph in 0..50 {
        let n_leaves = rng.gen_range(2..=3usize);
        let mut leaf_data: Vec<Vec<f32>> = (0..n_leaves)
            .map(|_| (0..n * n).map(|_| rng.gen_range(-1.0..1.0f32)).collect())
            .collect();
        let n_ops = rng.gen_range(3..=6usize);
        let ops: Vec<Op> = (0..n_ops)
            .map(|_| match rng.gen_range(0..7u32) {
                0 => Op::AddLeaf(rng.gen_range(0..n_leaves)),
                1 => Op::MulLeaf(rng.gen_range(0..n_leaves)),
                2 => Op::MatmulLeaf(rng.gen_range(0..n_leaves)),
                3 => Op::Silu,
                4 => Op::Softmax,
                5 => Op::Scale(rng.gen_range(0.3..1.2)),
                _ => Op::AddScalar(rng.gen_range(-0.5..0.5)),
            })
            .collect();
        let (_, leaves) = eval_graph(&ops, &leaf_data, n);
        let loss = {
            let mut cur = leaves[0].clone();
            for op in &ops {
                cur = match *op {
                    Op::AddLeaf(i) => cur.add(&leaves[i]).unwrap(),
                    Op::MulLeaf(i) => cur.mul(&leaves[i]).unwrap(),
                    Op::MatmulLeaf(i) => cur.matmul(&leaves[i]).unwrap().scale(0.5),
                    Op::Silu => cur.silu(),
                    Op::Softmax => cur.softmax_lastdim().unwrap(),
                    Op::Scale(c) => cur.scale(c),
                    Op::AddScalar(c) => cur.add_scalar(c),
                };
            }
            cur.mul(&cur).unwrap().mean_all()
        };
        loss.backward().map_err(|e| e.to_string())?;
        let analytic: Vec<Vec<f32>> = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; n * n]))
            .collect();
        let eps = 5e-3f32;
        for li in 0..n_leaves {
            for j in 0..n * n {
                let orig = leaf_data[li][j];
                leaf_data[li][j] = orig + eps;
                let (up, _) = eval_graph(&ops, &leaf_data, n);
                leaf_data[li][j] = orig - eps;
                let (down, _) = eval_graph(&ops, &leaf_data, n);
                leaf_data[li][j] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic[li][j];
                let rel = (fd - an).abs() / f32::max(1.0, f32::max(fd.abs(), an.abs()));
                if rel >= 1e-3 {
                    return Err(format!(
                        "graph {graph} leaf {li} entry {j}: analytic {an} vs fd {fd} (rel {rel})"
                    ));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s, budget 60s"));
    }
    println!("  50 graphs checked in {secs:.2}s");
    Ok(())
}

// ───────────────────────── 2. joint attention loop oracle ─────────────

mod loop_oracle {
    pub fn linear(x: &[Vec<f32>], w: &[f32], b: &[f32], d_in: usize, d_out: usize) -> Vec<Vec<f32>> {
        x.iter()
            .map(|row| {
                (0..d_out)
                    .map(|o| b[o] + (0..d_in).map(|i| row[i] * w[i * d_out + o]).sum::<f32>())
                    .collect()
            })
            .collect()
    }

    pub fn rope(x: &[Vec<f32>], cos: &[f32], sin: &[f32], d: usize) -> Vec<Vec<f32>> {
        x.iter()
            .enumerate()
            .map(|(r, row)| {
                let mut out = row.clone();
                for p in (0..d).step_by(2) {
                    let (c, s) = (cos[r * d + p], sin[r * d + p]);
                    out[p] = row[p] * c - row[p + 1] * s;
                    out[p + 1] = row[p] * s + row[p + 1] * c;
                }
                out
            })
            .collect()
    }

    pub fn attend(
        q: &[Vec<f32>],
        k: &[Vec<f32>],
        v: &[Vec<f32>],
        n_heads: usize,
        rope_q: Option<(&[f32], &[f32])>,
        rope_k: Option<(&[f32], &[f32])>,
    ) -> Vec<Vec<f32>> {
        let d = q[0].len();
        let hd = d / n_heads;
        let mut out = vec![vec![0.0f32; d]; q.len()];
        for h in 0..n_heads {
            let cols = h * hd..(h + 1) * hd;
            let slice = |rows: &[Vec<f32>]| -> Vec<Vec<f32>> {
                rows.iter().map(|r| r[cols.clone()].to_vec()).collect()
            };
            let mut qh = slice(q);
            let mut kh = slice(k);
            let vh = slice(v);
            if let Some((c, s)) = rope_q {
                qh = rope(&qh, c, s, hd);
            }
            if let Some((c, s)) = rope_k {
                kh = rope(&kh, c, s, hd);
            }
            for (i, qr) in qh.iter().enumerate() {
                let scores: Vec<f32> = kh
                    .iter()
                    .map(|kr| {
                        qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f32>() / (hd as f32).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f32 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let p = e / z;
                    for c in 0..hd {
                        out[i][h * hd + c] += p * vh[j][c];
                    }
                }
            }
        }
        out
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f32>> {
    let d = *t.shape().last().unwrap();
    t.to_vec().chunks(d).map(|c| c.to_vec()).collect()
}

fn rows_close(got: &Tensor, want: &[Vec<f32>], tol: f32) -> Result<(), String> {
    let g = rows_of(got);
    for (i, (gr, wr)) in g.iter().zip(want).enumerate() {
        for (j, (a, b)) in gr.iter().zip(wr).enumerate() {
            if (a - b).abs() >= tol {
                return Err(format!("row {i} col {j}: {a} vs {b}"));
            }
        }
    }
    Ok(())
}

fn identity_prefix(rope: &RopeTables, rows: usize, head_dim: usize) -> RopeTables {
    let mut cos = vec![1.0f32; rows * head_dim];
    let mut sin = vec![0.0f32; rows * head_dim];
    cos.extend_from_slice(&rope.cos);
    sin.extend_from_slice(&rope.sin);
    RopeTables { cos, sin }
}

fn criterion_joint_attention() -> CResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    for case in 0..20 {
        let (d, heads) = *[(8usize, 1usize), (16, 2), (32, 4)]
            .get(case % 3)
            .unwrap();
        let hd = d / heads;
        let lt = rng.gen_range(1..=3usize);
        let with_rope = case % 2 == 0;
        let (v_grid, s_grid) = ((2usize, 2usize, 2usize), (1usize, 1usize, 2usize));
        let lv = v_grid.0 * v_grid.1 * v_grid.2;
        let ls = s_grid.0 * s_grid.1 * s_grid.2;
        let w = To2vBlock::new(d, heads, 2, &mut rng);
        let z_text = Tensor::randn(&[lt, d], 1.0, &mut rng);
        let z_video = Tensor::randn(&[lv, d], 1.0, &mut rng);
        let z_sem = Tensor::randn(&[ls, d], 1.0, &mut rng);
        let (rope_tv, rope_s) = if with_rope {
            let table =
                Rope3dTable::build(hd, 0.25, 0.25, 0.5, (4, 4, 4)).map_err(|e| e.to_string())?;
            let rv = table
                .expand(&Rope3dTable::grid_positions(v_grid.0, v_grid.1, v_grid.2))
                .map_err(|e| e.to_string())?;
            let rs = table
                .expand(&Rope3dTable::grid_positions(s_grid.0, s_grid.1, s_grid.2))
                .map_err(|e| e.to_string())?;
            (Some(identity_prefix(&rv, lt, hd)), Some(rs))
        } else {
            (None, None)
        };
        let got = joint_attention(
            &z_text,
            &z_video,
            Some(&z_sem),
            &w,
            rope_tv.as_ref(),
            rope_s.as_ref(),
        )
        .map_err(|e| e.to_string())?;

        // loop transcription of the same formulas
        let mut tv = rows_of(&z_text);
        tv.extend(rows_of(&z_video));
        let lin = |l: &Linear, x: &[Vec<f32>]| {
            loop_oracle::linear(x, &l.weight.to_vec(), &l.bias.to_vec(), d, d)
        };
        let pair = |r: &Option<RopeTables>| -> Option<(Vec<f32>, Vec<f32>)> {
            r.as_ref().map(|t| (t.cos.clone(), t.sin.clone()))
        };
        fn as_ref(o: &Option<(Vec<f32>, Vec<f32>)>) -> Option<(&[f32], &[f32])> {
            o.as_ref().map(|(c, s)| (c.as_slice(), s.as_slice()))
        }
        let q = lin(&w.attn.wq, &tv);
        let k = lin(&w.attn.wk, &tv);
        let v = lin(&w.attn.wv, &tv);
        let r_tv = pair(&rope_tv);
        let r_s = pair(&rope_s);
        let base_ctx =
            loop_oracle::attend(&q, &k, &v, heads, as_ref(&r_tv), as_ref(&r_tv));
        let tv_base = lin(&w.attn.wo, &base_ctx);
        let sem_rows = rows_of(&z_sem);
        let q_tv = lin(&w.wq_c, &tv);
        let k_s = lin(&w.wk_c, &sem_rows);
        let v_s = lin(&w.wv_c, &sem_rows);
        let cross =
            loop_oracle::attend(&q_tv, &k_s, &v_s, heads, as_ref(&r_tv), as_ref(&r_s));
        let q_s = lin(&w.wq_c, &sem_rows);
        let mut k_cat = q.clone();
        k_cat.clone_from(&k);
        k_cat.extend(k_s.clone());
        let mut v_cat = v.clone();
        v_cat.extend(v_s.clone());
        let r_cat = match (&r_tv, &r_s) {
            (Some((ca, sa)), Some((cb, sb))) => {
                let mut c = ca.clone();
                c.extend_from_slice(cb);
                let mut s = sa.clone();
                s.extend_from_slice(sb);
                Some((c, s))
            }
            _ => None,
        };
        let sem_ctx =
            loop_oracle::attend(&q_s, &k_cat, &v_cat, heads, as_ref(&r_s), as_ref(&r_cat));
        let sem_out = lin(&w.wo_c, &sem_ctx);

        rows_close(&got.tv_base, &tv_base, 1e-5).map_err(|e| format!("case {case} tv_base {e}"))?;
        rows_close(&got.tv_cross.unwrap(), &cross, 1e-5)
            .map_err(|e| format!("case {case} tv_cross {e}"))?;
        rows_close(&got.sem.unwrap(), &sem_out, 1e-5)
            .map_err(|e| format!("case {case} sem {e}"))?;
    }
    Ok(())
}

// ───────────────────────── 3. FIFO vs per-frame rollouts ──────────────

struct FrameLocal {
    spatial: usize,
    c_s: usize,
}

impl WindowDenoiser for FrameLocal {
    fn denoise_window(
        &self,
        latents: &Tensor,
        _ts: &[usize],
        _clip: usize,
    ) -> vidtok_core::Result<Tensor> {
        Ok(latents.scale(0.5).add_scalar(0.01))
    }
    fn spatial(&self) -> usize {
        self.spatial
    }
    fn channels(&self) -> usize {
        self.c_s
    }
}

fn criterion_fifo_oracle() -> CResult {
    let start = Instant::now();
    for n_partitions in [1usize, 2, 4] {
        let (f_s, spatial, c_s) = (4usize, 6usize, 8usize);
        let n_clips = 3;
        let total = n_clips * f_s;
        let denoiser = FrameLocal { spatial, c_s };
        let seed = 3003;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = NoiseSchedule::new(64, n_partitions * f_s).map_err(|e| e.to_string())?;
        let mut q = init_queue_adaptive(
            sched.clone(),
            f_s,
            n_partitions,
            spatial,
            c_s,
            total,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let got = run_queue(&mut q, &denoiser, n_clips, &mut rng).map_err(|e| e.to_string())?;

        // replay the identical noise draws, then roll every frame down its
        // own schedule path independently
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = n_partitions * f_s;
        let initials: Vec<Tensor> = (0..total)
            .map(|_| Tensor::randn(&[spatial, c_s], 1.0, &mut rng))
            .collect();
        let tau = sched.tau().to_vec();
        for (k, (x0, got_k)) in initials.iter().zip(&got).enumerate() {
            let start_level = if k < f_s { levels - (f_s - 1) + k } else { levels };
            let mut x = x0.detach();
            for l in (1..=start_level).rev() {
                let eps = denoiser.denoise_window(&x, &[tau[l]], 0).unwrap();
                x = sched.denoise_step(&x, &eps, tau[l], tau[l - 1]).unwrap();
            }
            let err = x
                .to_vec()
                .iter()
                .zip(got_k.to_vec())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            if err >= 1e-5 {
                return Err(format!("partitions {n_partitions} frame {k}: max err {err}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("took {secs:.1}s, budget 120s"));
    }
    Ok(())
}

// ───────────────────────── shared tiny training setup ─────────────────

fn tiny_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.model.d_model = 32;
    cfg.model.n_heads = 2;
    cfg.model.n_blocks = 2;
    cfg.training.batch_size = 2;
    cfg
}

fn make_examples(cfg: &RunConfig, count: usize, data_seed: u64) -> Vec<ClipExample> {
    let encoder = VideoEncoder::new(&cfg.shapes, cfg.seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let data = gen_dataset(
        count,
        cfg.model.vocab_size,
        cfg.shapes.chunk_frames * 2,
        cfg.shapes.height,
        cfg.shapes.width,
        &mut rng,
    )
    .unwrap();
    clip_examples(&encoder, &data).unwrap()
}

/// Unconditional backbone pretraining; deterministic in (cfg.seed, steps).
fn pretrain_base(
    cfg: &RunConfig,
    examples: &[ClipExample],
    steps: usize,
) -> Result<(To2v, ChaCha8Rng, NoiseSchedule), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = To2v::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let schedule =
        NoiseSchedule::new(cfg.schedule.t_train, cfg.schedule.s_sample).map_err(|e| e.to_string())?;
    let params = model.base_params();
    let mut opt = adam(cfg.training.learning_rate, &params);
    for step in 0..steps {
        let batch: Vec<ClipExample> = (0..cfg.training.batch_size)
            .map(|_| examples[rng.gen_range(0..examples.len())].clone())
            .collect();
        to2v_train_step(
            &model, None, &batch, &schedule, &params, &mut opt, 0.0, step, &mut rng,
        )
        .map_err(|e| e.to_string())?;
    }
    Ok((model, rng, schedule))
}

/// Branch training with a resampler condition on a frozen backbone.
fn train_branch(
    cfg: &RunConfig,
    model: &To2v,
    examples: &[ClipExample],
    grid: (usize, usize, usize),
    steps: usize,
    batch_size: usize,
    lr: f32,
    rng: &mut ChaCha8Rng,
    schedule: &NoiseSchedule,
) -> Result<Resampler, String> {
    let resampler = Resampler::new(
        grid,
        cfg.shapes.l_video(),
        cfg.shapes.c_s,
        cfg.model.resampler_heads,
        cfg.model.ffn_mult,
        rng,
    );
    let mut params = model.branch_params();
    params.extend(resampler.params());
    let mut opt = adam(lr, &params);
    for step in 0..steps {
        let batch: Vec<ClipExample> = (0..batch_size)
            .map(|_| examples[rng.gen_range(0..examples.len())].clone())
            .collect();
        // no condition dropout: the unconditional path is entirely frozen,
        // so dropped samples would contribute nothing to the gradient
        to2v_train_step(
            model,
            Some(&resampler),
            &batch,
            schedule,
            &params,
            &mut opt,
            0.0,
            step,
            rng,
        )
        .map_err(|e| e.to_string())?;
    }
    Ok(resampler)
}

/// Validation noise-prediction error, with or without token conditions.
fn val_eps_mse(
    model: &To2v,
    resampler: Option<&Resampler>,
    val: &[ClipExample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for item in val {
        let t = rng.gen_range(1..=schedule.t_max());
        let eps = Tensor::randn(item.latent.shape(), 1.0, &mut rng);
        let noisy = schedule.q_sample(&item.latent, t, &eps).map_err(|e| e.to_string())?;
        let cond = match resampler {
            Some(rs) => Some(SemCondition {
                z: rs.forward(&item.latent).map_err(|e| e.to_string())?,
                grid: rs.latent_grid,
            }),
            None => None,
        };
        let text = model.embed_text(item.prompt_id).map_err(|e| e.to_string())?;
        let ts = vec![t; model.f_s];
        let pred = model
            .forward(&noisy, &ts, &text, cond.as_ref())
            .map_err(|e| e.to_string())?;
        total += pred.mse(&eps).map_err(|e| e.to_string())?.item().unwrap() as f64;
    }
    Ok(total / val.len() as f64)
}

// ───────────────────────── 4. freeze / branch contract ────────────────

fn criterion_freeze_branch() -> CResult {
    // (a) zeroed cross-value projection leaves the base path bit-exact
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut w = To2vBlock::new(16, 2, 2, &mut rng);
    w.wv_c = Linear::zeros(16, 16);
    let z_text = Tensor::randn(&[2, 16], 1.0, &mut rng);
    let z_video = Tensor::randn(&[4, 16], 1.0, &mut rng);
    let z_sem = Tensor::randn(&[3, 16], 1.0, &mut rng);
    let with = joint_attention(&z_text, &z_video, Some(&z_sem), &w, None, None)
        .map_err(|e| e.to_string())?;
    let without =
        joint_attention(&z_text, &z_video, None, &w, None, None).map_err(|e| e.to_string())?;
    if !with.tv_cross.unwrap().to_vec().iter().all(|&v| v == 0.0) {
        return Err("cross term not exactly zero under zeroed value projection".into());
    }
    if with.tv_base.to_vec() != without.tv_base.to_vec() {
        return Err("base attention changed when the token stream was attached".into());
    }

    // (b) backbone hash invariant across 100 branch training steps
    let cfg = tiny_cfg(4104);
    let examples = make_examples(&cfg, 8, 4204);
    let (model, mut rng, schedule) = pretrain_base(&cfg, &examples, 20)?;
    let frozen = param_fingerprint(&model.base_params());
    let _resampler = train_branch(
        &cfg,
        &model,
        &examples,
        cfg.training.phase1_latent,
        100,
        cfg.training.batch_size,
        cfg.training.learning_rate,
        &mut rng,
        &schedule,
    )?;
    if param_fingerprint(&model.base_params()) != frozen {
        return Err("frozen backbone hash changed during branch training".into());
    }
    Ok(())
}

// ───────────────────────── 5. conditioning effect (paired) ────────────

fn criterion_conditioning() -> CResult {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for seed in [11u64, 12, 13] {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        let train = make_examples(&cfg, 64, 5000 + seed);
        let val = make_examples(&cfg, 8, 6000 + seed);
        let (model, mut rng, schedule) = pretrain_base(&cfg, &train, 300)?;
        let s = &cfg.shapes;
        // the backbone is frozen from here on, so the unconditional arm of
        // the pair is exactly the pretrained model
        let resampler = train_branch(
            &cfg,
            &model,
            &train,
            (s.f_r, s.h_r, s.w_r),
            500,
            32,
            cfg.training.learning_rate * 3.0,
            &mut rng,
            &schedule,
        )?;
        let cond = val_eps_mse(&model, Some(&resampler), &val, &schedule, 7000 + seed)?;
        let uncond = val_eps_mse(&model, None, &val, &schedule, 7000 + seed)?;
        let ratio = cond / uncond;
        println!("  seed {seed}: conditioned {cond:.5} vs unconditioned {uncond:.5} (ratio {ratio:.3})");
        ratios.push(ratio);
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 900.0 {
        return Err(format!("took {secs:.0}s, budget 900s"));
    }
    println!("  total {secs:.0}s");
    if let Some(bad) = ratios.iter().find(|r| **r > 0.9) {
        return Err(format!("ratio {bad:.3} above the 0.9 bound (ratios {ratios:?})"));
    }
    Ok(())
}

// ───────────────────────── 6. token-shape ablation ────────────────────

/// Trained conditioned model plus its resampler, reused by later criteria.
struct TrainedStack {
    cfg: RunConfig,
    model: To2v,
    resampler: Resampler,
    schedule: NoiseSchedule,
}

fn train_stack(grid: (usize, usize, usize), seed: u64) -> Result<TrainedStack, String> {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    let train = make_examples(&cfg, 32, 8000 + seed);
    let (model, mut rng, schedule) = pretrain_base(&cfg, &train, 2000)?;
    let resampler = train_branch(
        &cfg,
        &model,
        &train,
        grid,
        800,
        16,
        cfg.training.learning_rate * 3.0,
        &mut rng,
        &schedule,
    )?;
    Ok(TrainedStack {
        cfg,
        model,
        resampler,
        schedule,
    })
}

/// How faithfully held-out clip content passes through the token
/// bottleneck: denoising error on noised validation clips, conditioned on
/// each clip's own tokens. Averaged over several noise draws; both stacks
/// see identical draws, so the comparison is paired.
fn reconstruction_mse(stack: &TrainedStack, val: &[ClipExample]) -> Result<f64, String> {
    let mut total = 0.0f64;
    let reps = 4u64;
    for r in 0..reps {
        total += val_eps_mse(
            &stack.model,
            Some(&stack.resampler),
            val,
            &stack.schedule,
            9100 + r,
        )?;
    }
    Ok(total / reps as f64)
}

fn criterion_token_shape(
    large: &Result<TrainedStack, String>,
    small: &Result<TrainedStack, String>,
) -> CResult {
    let large = large.as_ref().map_err(|e| format!("large-token training failed: {e}"))?;
    let small = small.as_ref().map_err(|e| format!("small-token training failed: {e}"))?;
    let val = make_examples(&large.cfg, 8, 9099);
    let mse_large = reconstruction_mse(large, &val)?;
    let mse_small = reconstruction_mse(small, &val)?;
    println!("  4x2x2 tokens: {mse_large:.5}, 2x1x1 tokens: {mse_small:.5}");
    if mse_large >= mse_small {
        return Err(format!(
            "larger token grid did not reconstruct better: {mse_large:.5} vs {mse_small:.5}"
        ));
    }
    Ok(())
}

// ───────────────────────── 7. PCA vs random projections ───────────────

fn gram_schmidt(rows: &mut Vec<Vec<f32>>) {
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f32 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let rj = rows[j].clone();
            for (x, y) in rows[i].iter_mut().zip(&rj) {
                *x -= dot * y;
            }
        }
        let norm: f32 = rows[i].iter().map(|x| x * x).sum::<f32>().sqrt();
        for x in rows[i].iter_mut() {
            *x /= norm;
        }
    }
}

fn criterion_pca() -> CResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    let (c_s, c_r, n) = (16usize, 4usize, 50usize);
    // anisotropic data: strong low-rank structure plus isotropic noise
    let samples: Vec<Tensor> = (0..n)
        .map(|_| {
            let strong = Tensor::randn(&[4, c_r], 1.0, &mut rng);
            let lift = Tensor::from_vec(
                &[c_r, c_s],
                (0..c_r * c_s).map(|i| ((i * 37 % 19) as f32 - 9.0) / 5.0).collect(),
            )
            .unwrap();
            strong
                .matmul(&lift)
                .unwrap()
                .add(&Tensor::randn(&[4, c_s], 0.1, &mut rng))
                .unwrap()
                .detach()
        })
        .collect();
    let p = PcaProjector::fit(&samples, c_s, c_r).map_err(|e| e.to_string())?;
    // orthonormality
    for i in 0..c_r {
        for j in 0..c_r {
            let dot: f32 = (0..c_s)
                .map(|k| p.basis[i * c_s + k] * p.basis[j * c_s + k])
                .sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() >= 1e-5 {
                return Err(format!("basis rows {i},{j}: gram entry {dot}"));
            }
        }
    }
    let recon_err = |basis: &[f32], mean: &[f32]| -> f64 {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for s in &samples {
            for row in s.to_vec().chunks(c_s) {
                let centered: Vec<f32> = row.iter().zip(mean).map(|(x, m)| x - m).collect();
                let coeffs: Vec<f32> = (0..c_r)
                    .map(|r| {
                        centered
                            .iter()
                            .zip(&basis[r * c_s..(r + 1) * c_s])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                for k in 0..c_s {
                    let rec: f32 = (0..c_r).map(|r| coeffs[r] * basis[r * c_s + k]).sum();
                    let d = (centered[k] - rec) as f64;
                    total += d * d;
                    count += 1;
                }
            }
        }
        total / count as f64
    };
    let pca_err = recon_err(&p.basis, &p.mean);
    for trial in 0..20 {
        let mut rows: Vec<Vec<f32>> = (0..c_r)
            .map(|_| (0..c_s).map(|_| rng.gen_range(-1.0..1.0f32)).collect())
            .collect();
        gram_schmidt(&mut rows);
        let flat: Vec<f32> = rows.concat();
        let rand_err = recon_err(&flat, &p.mean);
        if pca_err > rand_err {
            return Err(format!(
                "random projection {trial} beat the fitted basis: {rand_err:.6} < {pca_err:.6}"
            ));
        }
    }
    Ok(())
}

// ───────────────────────── 8. packing mask soundness ──────────────────

fn criterion_mask_soundness() -> CResult {
    let cfg = tiny_cfg(8008);
    let mut rng = ChaCha8Rng::seed_from_u64(8108);
    let model = T2to::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let s = &cfg.shapes;
    let mk = |chunks: usize, rng: &mut ChaCha8Rng| LongTokenGrid {
        tokens: Tensor::randn(&[chunks * s.f_r, s.h_r, s.w_r, s.c_r], 1.0, rng),
        valid_frames: chunks * s.f_r,
    };
    let grids = vec![mk(2, &mut rng), mk(1, &mut rng)];
    let packed = pack_frames(&grids).map_err(|e| e.to_string())?;
    let short = &packed.grids[1];
    let mask = &packed.loss_mask[1];
    let x = short.flat().map_err(|e| e.to_string())?;
    let text = model.embed_text(0).map_err(|e| e.to_string())?;
    let clean_out = model.forward(&x, 5, &text, mask).map_err(|e| e.to_string())?;
    // inject garbage into every padded row
    let row = s.h_r * s.w_r * s.c_r; // token channels per frame row group
    let _ = row;
    let mut data = x.to_vec();
    let cols = *x.shape().last().unwrap();
    for (i, valid) in mask.iter().enumerate() {
        if !valid {
            for c in 0..cols {
                data[i * cols + c] = 1.0e3;
            }
        }
    }
    let garbled = Tensor::from_vec(&[x.shape()[0], cols], data).unwrap();
    let garbled_out = model.forward(&garbled, 5, &text, mask).map_err(|e| e.to_string())?;
    let a = clean_out.to_vec();
    let b = garbled_out.to_vec();
    for (i, valid) in mask.iter().enumerate() {
        if *valid {
            for c in 0..cols {
                let (x, y) = (a[i * cols + c], b[i * cols + c]);
                if (x - y).abs() >= 1e-5 {
                    return Err(format!("valid row {i} changed: {x} vs {y}"));
                }
            }
        }
    }
    let target = Tensor::randn(clean_out.shape(), 1.0, &mut rng);
    let l_clean = masked_mse(&clean_out, &target, mask)
        .map_err(|e| e.to_string())?
        .item()
        .unwrap();
    let l_garbled = masked_mse(&garbled_out, &target, mask)
        .map_err(|e| e.to_string())?
        .item()
        .unwrap();
    if (l_clean - l_garbled).abs() >= 1e-5 {
        return Err(format!("masked loss moved: {l_clean} vs {l_garbled}"));
    }
    Ok(())
}

// ───────────────────────── 9. rotary embedding properties ─────────────

fn criterion_rope() -> CResult {
    // channel split at head_dim 20 with the 10/10/80 allocation
    let table = Rope3dTable::build(20, 0.1, 0.1, 0.8, (8, 8, 8)).map_err(|e| e.to_string())?;
    if table.channels() != (2, 2, 16) {
        return Err(format!("split {:?}, expected (2, 2, 16)", table.channels()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9009);
    // norm preservation: rotation never changes row norms
    let positions: Vec<(usize, usize, usize)> = (0..6)
        .map(|_| (rng.gen_range(0..8), rng.gen_range(0..8), rng.gen_range(0..8)))
        .collect();
    let t = table.expand(&positions).map_err(|e| e.to_string())?;
    let x = Tensor::randn(&[positions.len(), 20], 1.0, &mut rng);
    let rx = x.rope_apply(&t.cos, &t.sin).map_err(|e| e.to_string())?;
    for (row, (a, b)) in rows_of(&x).iter().zip(rows_of(&rx)).enumerate() {
        let na: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|v| v * v).sum::<f32>().sqrt();
        if (na - nb).abs() / na >= 1e-6 {
            return Err(format!("row {row}: norm {na} became {nb}"));
        }
    }
    // relative-shift invariance of attention scores along each axis
    let q = Tensor::randn(&[1, 20], 1.0, &mut rng);
    let k = Tensor::randn(&[1, 20], 1.0, &mut rng);
    let score = |qp: (usize, usize, usize), kp: (usize, usize, usize)| -> Result<f32, String> {
        let tq = table.expand(&[qp]).map_err(|e| e.to_string())?;
        let tk = table.expand(&[kp]).map_err(|e| e.to_string())?;
        let rq = q.rope_apply(&tq.cos, &tq.sin).map_err(|e| e.to_string())?;
        let rk = k.rope_apply(&tk.cos, &tk.sin).map_err(|e| e.to_string())?;
        Ok(rq
            .to_vec()
            .iter()
            .zip(rk.to_vec())
            .map(|(a, b)| a * b)
            .sum())
    };
    for (d_t, d_h, d_w) in [(1, 0, 0), (0, 1, 0), (0, 0, 1), (2, 1, 1)] {
        let base = score((1, 1, 1), (1 + d_t, 1 + d_h, 1 + d_w))?;
        for shift in [(1usize, 2usize, 3usize), (4, 0, 2), (0, 5, 0)] {
            let qp = (1 + shift.0, 1 + shift.1, 1 + shift.2);
            let kp = (qp.0 + d_t, qp.1 + d_h, qp.2 + d_w);
            let shifted = score(qp, kp)?;
            if (base - shifted).abs() >= 1e-5 {
                return Err(format!(
                    "shift {shift:?} delta {:?}: score {base} became {shifted}",
                    (d_t, d_h, d_w)
                ));
            }
        }
    }
    Ok(())
}

// ───────────────────────── 10. FIFO stitching ablation ────────────────

struct CondDenoiser<'a> {
    model: &'a To2v,
    conds: Vec<SemCondition>,
    text: vidtok_core::to2v::TextEmbedding,
    guidance: f32,
}

impl WindowDenoiser for CondDenoiser<'_> {
    fn denoise_window(
        &self,
        latents: &Tensor,
        ts: &[usize],
        clip_index: usize,
    ) -> vidtok_core::Result<Tensor> {
        self.model.forward_guided(
            latents,
            ts,
            &self.text,
            Some(&self.conds[clip_index]),
            self.guidance,
        )
    }
    fn spatial(&self) -> usize {
        self.model.spatial
    }
    fn channels(&self) -> usize {
        self.model.c_s
    }
}

fn criterion_fifo_ablation(stack: &Result<TrainedStack, String>) -> CResult {
    let stack = stack.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let cfg = &stack.cfg;
    let s = &cfg.shapes;
    let encoder = VideoEncoder::new(s, cfg.seed).map_err(|e| e.to_string())?;
    let n_clips = 6;

    // structural padding contract for both start-up modes
    let mut rng = ChaCha8Rng::seed_from_u64(10_010);
    let sched = NoiseSchedule::new(cfg.schedule.t_train, cfg.schedule.n_partitions * s.f_s())
        .map_err(|e| e.to_string())?;
    let total = n_clips * s.f_s();
    let qa = init_queue_adaptive(
        sched.clone(),
        s.f_s(),
        cfg.schedule.n_partitions,
        s.h_s() * s.w_s(),
        s.c_s,
        total,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    if qa.entries.iter().any(|e| e.is_padding) {
        return Err("adaptive init contains replicated padding".into());
    }
    let qr = init_queue_replication(
        sched,
        s.f_s(),
        cfg.schedule.n_partitions,
        s.h_s() * s.w_s(),
        s.c_s,
        total,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let n_pad = qr.entries.iter().filter(|e| e.is_padding).count();
    let expected = qr.capacity() - s.f_s();
    if n_pad != expected {
        return Err(format!("replication init has {n_pad} pads, expected {expected}"));
    }

    // paired generation: per-clip tokens from distinct clips, sampled with
    // strong guidance so tokens actually decide clip content; adaptive
    // stitching vs independent per-clip sampling on the same tokens
    let val = make_examples(cfg, 8, 9099);
    let mut better = 0usize;
    let (mut sum_adaptive, mut sum_off) = (0.0f64, 0.0f64);
    for seed in [21u64, 22, 23] {
        let mut conds = Vec::new();
        for item in val.iter().take(n_clips) {
            conds.push(SemCondition {
                z: stack
                    .resampler
                    .forward(&item.latent)
                    .map_err(|e| e.to_string())?
                    .detach(),
                grid: stack.resampler.latent_grid,
            });
        }
        let denoiser = CondDenoiser {
            model: &stack.model,
            conds,
            text: stack
                .model
                .embed_text(val[0].prompt_id)
                .map_err(|e| e.to_string())?,
            guidance: 6.0,
        };
        let run = |mode: FifoMode, seed: u64| -> Result<f64, String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = generate_latent_frames(
                &denoiser,
                n_clips,
                s.f_s(),
                cfg.schedule.n_partitions,
                cfg.schedule.t_train,
                mode,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            let video = vidtok_core::fifo::decode_latent_frames(&encoder, &frames)
                .map_err(|e| e.to_string())?;
            boundary_discontinuity(&video, s.chunk_frames).map_err(|e| e.to_string())
        };
        let adaptive = run(FifoMode::Adaptive, 400 + seed)?;
        let off = run(FifoMode::Off, 400 + seed)?;
        println!("  seed {seed}: adaptive {adaptive:.4} vs independent {off:.4}");
        sum_adaptive += adaptive;
        sum_off += off;
        if adaptive < off {
            better += 1;
        }
    }
    if sum_adaptive >= sum_off || better < 2 {
        return Err(format!(
            "adaptive stitching not smoother: totals {sum_adaptive:.4} vs {sum_off:.4} ({better}/3 paired runs better)"
        ));
    }
    println!("  adaptive smoother in {better}/3 paired runs, means {:.4} vs {:.4}",
        sum_adaptive / 3.0, sum_off / 3.0);
    Ok(())
}

// ───────────────────────── 11. full-scale shape accounting ────────────

fn criterion_paper_shapes() -> CResult {
    let cfg = RunConfig::paper_scale();
    let s = &cfg.shapes;
    if (s.f_s(), s.h_s(), s.w_s(), s.c_s) != (13, 30, 45, 3072) {
        return Err(format!(
            "encoded clip grid {:?}",
            (s.f_s(), s.h_s(), s.w_s(), s.c_s)
        ));
    }
    if s.patch_volume() != 3072 {
        return Err(format!("patch volume {}", s.patch_volume()));
    }
    if (s.f_r, s.h_r, s.w_r, s.c_r) != (4, 8, 12, 16) {
        return Err(format!("token grid {:?}", (s.f_r, s.h_r, s.w_r, s.c_r)));
    }
    if s.long_token_count(24) != 9216 {
        return Err(format!("long token count {}", s.long_token_count(24)));
    }
    if s.total_frames(s.n_max) != 1176 {
        return Err(format!("total frames {}", s.total_frames(s.n_max)));
    }
    Ok(())
}

// ───────────────────────── 12. determinism & persistence ──────────────

fn criterion_determinism(stack: &Result<TrainedStack, String>) -> CResult {
    let stack = stack.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let cfg = &stack.cfg;
    let s = &cfg.shapes;
    let encoder = VideoEncoder::new(s, cfg.seed).map_err(|e| e.to_string())?;
    // seed-fixed generation is byte-identical after encoding
    let render = || -> Result<Vec<u8>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(12_012);
        let cond = SemCondition {
            z: stack.resampler.z_latent_init().detach(),
            grid: stack.resampler.latent_grid,
        };
        let denoiser = CondDenoiser {
            model: &stack.model,
            conds: vec![cond.clone(), cond],
            text: stack.model.embed_text(0).map_err(|e| e.to_string())?,
            guidance: 1.0,
        };
        let frames = generate_latent_frames(
            &denoiser,
            2,
            s.f_s(),
            cfg.schedule.n_partitions,
            cfg.schedule.t_train,
            FifoMode::Adaptive,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let video = vidtok_core::fifo::decode_latent_frames(&encoder, &frames)
            .map_err(|e| e.to_string())?;
        encode_video(&video, cfg.fps).map_err(|e| e.to_string())
    };
    if render()? != render()? {
        return Err("two seed-fixed generations differ".into());
    }

    // checkpoint save -> load -> save byte identity on disk
    let tr = vidtok_core::train::To2vTraining::new(cfg).map_err(|e| e.to_string())?;
    let ckpt = tr.to_checkpoint();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    ckpt.save(&p1).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&p1).map_err(|e| e.to_string())?;
    loaded.save(&p2).map_err(|e| e.to_string())?;
    let b1 = std::fs::read(&p1).map_err(|e| e.to_string())?;
    let b2 = std::fs::read(&p2).map_err(|e| e.to_string())?;
    if b1 != b2 {
        return Err("save -> load -> save changed checkpoint bytes".into());
    }
    Ok(())
}

// ───────────────────────── harness ────────────────────────────────────

#[test]
fn acceptance() {
    let mut fails: Vec<&'static str> = Vec::new();
    check(&mut fails, "1 autodiff finite-difference oracle", criterion_autodiff());
    check(&mut fails, "2 joint attention loop oracle", criterion_joint_attention());
    check(&mut fails, "3 diagonal queue equals per-frame rollouts", criterion_fifo_oracle());
    check(&mut fails, "4 freeze and branch contract", criterion_freeze_branch());
    check(&mut fails, "5 token conditioning improves denoising", criterion_conditioning());
    let stack_large = train_stack((4, 2, 2), 606);
    let stack_small = train_stack((2, 1, 1), 606);
    check(
        &mut fails,
        "6 larger token grids reconstruct better",
        criterion_token_shape(&stack_large, &stack_small),
    );
    check(&mut fails, "7 fitted projection beats random projections", criterion_pca());
    check(&mut fails, "8 packing mask isolates padded frames", criterion_mask_soundness());
    check(&mut fails, "9 rotary embedding properties", criterion_rope());
    check(
        &mut fails,
        "10 adaptive stitching smooths clip boundaries",
        criterion_fifo_ablation(&stack_large),
    );
    check(&mut fails, "11 full-scale shape accounting", criterion_paper_shapes());
    check(
        &mut fails,
        "12 determinism and checkpoint persistence",
        criterion_determinism(&stack_large),
    );
    assert!(fails.is_empty(), "failed criteria: {fails:?}");
}
