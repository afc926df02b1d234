//! Video quality metrics: pixel MSE, a structural-similarity analog over
//! 8x8 luminance windows, a temporal-flicker score, and a clip-boundary
//! discontinuity ratio that quantifies seams between stitched clips.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Full-scale reference values for the 4x8x12 token configuration,
/// recorded for documentation; desk-scale runs are not expected to hit
/// them and nothing asserts against them.
pub const REFERENCE_MSE: f64 = 1.24e-2;
pub const REFERENCE_SSIM: f64 = 0.62;
pub const REFERENCE_FLICKER: f64 = 97.58;

fn check_video(v: &Tensor) -> Result<(usize, usize, usize)> {
    let s = v.shape();
    if s.len() != 4 || s[3] != 3 || s[0] == 0 {
        return Err(Error::msg(format!(
            "expected nonempty (frames, h, w, 3) video, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Per-pixel luminance of one frame, as h*w values.
fn luminance(frame: &[f32], h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let p = &frame[i * 3..i * 3 + 3];
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        })
        .collect()
}

/// Mean squared pixel error between two equally shaped videos.
pub fn video_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_video(a)?;
    if a.shape() != b.shape() {
        return Err(Error::msg(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Structural similarity on luminance over non-overlapping 8x8 windows
/// (whole frame when smaller), averaged across windows and frames.
/// Standard stabilizers for unit dynamic range.
pub fn video_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (frames, h, w) = check_video(a)?;
    if a.shape() != b.shape() {
        return Err(Error::msg("ssim: shape mismatch"));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win_h = h.min(8);
    let win_w = w.min(8);
    let fsize = h * w * 3;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..frames {
        let la = luminance(&a.data()[f * fsize..(f + 1) * fsize], h, w);
        let lb = luminance(&b.data()[f * fsize..(f + 1) * fsize], h, w);
        for wy in 0..h / win_h {
            for wx in 0..w / win_w {
                let mut xs = Vec::with_capacity(win_h * win_w);
                let mut ys = Vec::with_capacity(win_h * win_w);
                for dy in 0..win_h {
                    for dx in 0..win_w {
                        let i = (wy * win_h + dy) * w + wx * win_w + dx;
                        xs.push(la[i]);
                        ys.push(lb[i]);
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| (x - mx) * (y - my))
                    .sum::<f64>()
                    / n;
                total += (2.0 * mx * my + C1) * (2.0 * cov + C2)
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// 100 * (1 - mean absolute luminance change between consecutive frames).
/// Luminance lives in [0, 1] so the score is 100 for a static video and
/// falls as frame-to-frame change grows.
pub fn temporal_flicker(video: &Tensor) -> Result<f64> {
    let (frames, h, w) = check_video(video)?;
    if frames < 2 {
        return Ok(100.0);
    }
    let fsize = h * w * 3;
    let mut acc = 0.0;
    let mut prev = luminance(&video.data()[0..fsize], h, w);
    for f in 1..frames {
        let cur = luminance(&video.data()[f * fsize..(f + 1) * fsize], h, w);
        acc += prev
            .iter()
            .zip(&cur)
            .map(|(p, c)| (p - c).abs())
            .sum::<f64>()
            / (h * w) as f64;
        prev = cur;
    }
    Ok(100.0 * (1.0 - acc / (frames - 1) as f64))
}

/// Mean inter-frame L2 distance at clip boundaries divided by the mean
/// inter-frame L2 within clips. A seamless stitch scores near 1; visible
/// seams push it above the within-clip motion level. The degenerate 0/0
/// case (static video, or no boundaries) reports 1.0 by convention.
pub fn boundary_discontinuity(video: &Tensor, clip_len: usize) -> Result<f64> {
    let (frames, h, w) = check_video(video)?;
    if clip_len == 0 {
        return Err(Error::msg("clip_len must be positive"));
    }
    let fsize = h * w * 3;
    let l2 = |f: usize| -> f64 {
        video.data()[f * fsize..(f + 1) * fsize]
            .iter()
            .zip(&video.data()[(f + 1) * fsize..(f + 2) * fsize])
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let (mut at, mut n_at) = (0.0, 0usize);
    let (mut within, mut n_within) = (0.0, 0usize);
    for f in 0..frames - 1 {
        let d = l2(f);
        if (f + 1) % clip_len == 0 {
            at += d;
            n_at += 1;
        } else {
            within += d;
            n_within += 1;
        }
    }
    if n_at == 0 {
        return Ok(1.0);
    }
    let num = at / n_at as f64;
    let den = if n_within == 0 { 0.0 } else { within / n_within as f64 };
    if den == 0.0 {
        return Ok(if num == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(num / den)
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
    pub temporal_flicker: f64,
    pub boundary_discontinuity: f64,
}

impl MetricReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(m) = self.mse {
            s.push_str(&format!("mse={m:.6e}\n"));
        }
        if let Some(v) = self.ssim {
            s.push_str(&format!("ssim={v:.4}\n"));
        }
        s.push_str(&format!("temporal_flicker={:.2}\n", self.temporal_flicker));
        s.push_str(&format!(
            "boundary_discontinuity={:.4}\n",
            self.boundary_discontinuity
        ));
        s
    }
}

/// All metrics at once; reference-dependent ones only when a reference of
/// matching shape is supplied.
pub fn metric_report(
    video: &Tensor,
    reference: Option<&Tensor>,
    clip_len: usize,
) -> Result<MetricReport> {
    let (mse, ssim) = match reference {
        Some(r) => (Some(video_mse(video, r)?), Some(video_ssim(video, r)?)),
        None => (None, None),
    };
    Ok(MetricReport {
        mse,
        ssim,
        temporal_flicker: temporal_flicker(video)?,
        boundary_discontinuity: boundary_discontinuity(video, clip_len)?,
    })
}
