//! 3D rotary position embedding with configurable per-axis channel shares.
//!
//! Each attention head's channels are partitioned into height, width and
//! temporal blocks; a token's (t, h, w) grid position rotates channel pairs
//! within the matching block. Long-range token sequences allocate most of
//! the width to the temporal axis.

use crate::error::{Error, Result};

const FREQ_BASE: f32 = 10_000.0;

/// Pairwise-expanded cos/sin tables for a token sequence, ready for
/// [`crate::tensor::Tensor::rope_apply`] on one head.
#[derive(Debug, Clone)]
pub struct RopeTables {
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

/// Per-axis channel allocation plus precomputed per-position rotation tables.
#[derive(Debug, Clone)]
pub struct Rope3dTable {
    head_dim: usize,
    channels: (usize, usize, usize), // (h, w, t), each even
    max_positions: (usize, usize, usize),
    // cos/sin per axis, laid out position-major, pairwise expanded
    tables: [AxisTable; 3],
}

#[derive(Debug, Clone)]
struct AxisTable {
    channels: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

fn axis_table(channels: usize, max_pos: usize) -> AxisTable {
    let pairs = channels / 2;
    let mut cos = Vec::with_capacity(max_pos * channels);
    let mut sin = Vec::with_capacity(max_pos * channels);
    for pos in 0..max_pos {
        for p in 0..pairs {
            let freq = FREQ_BASE.powf(-(2.0 * p as f32) / channels as f32);
            let angle = pos as f32 * freq;
            let (s, c) = angle.sin_cos();
            cos.push(c);
            cos.push(c);
            sin.push(s);
            sin.push(s);
        }
    }
    AxisTable { channels, cos, sin }
}

fn even_floor(x: f32) -> usize {
    ((x.floor() as usize) / 2) * 2
}

impl Rope3dTable {
    /// Partition `head_dim` channels as `h | w | t` by the given fractions,
    /// rounding each down to an even count; any remainder goes to the
    /// temporal axis. `max_positions` is (t, h, w) grid extents.
    pub fn build(
        head_dim: usize,
        h_frac: f32,
        w_frac: f32,
        t_frac: f32,
        max_positions: (usize, usize, usize),
    ) -> Result<Rope3dTable> {
        for f in [h_frac, w_frac, t_frac] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("rope fraction {f} outside (0, 1]")));
            }
        }
        if h_frac + w_frac + t_frac > 1.0 + 1e-6 {
            return Err(Error::Config("rope fractions sum above 1".into()));
        }
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {head_dim} must be even")));
        }
        let ch_h = even_floor(head_dim as f32 * h_frac);
        let ch_w = even_floor(head_dim as f32 * w_frac);
        let ch_t_base = even_floor(head_dim as f32 * t_frac);
        let used = ch_h + ch_w + ch_t_base;
        if used > head_dim {
            return Err(Error::Config("rope allocation exceeds head_dim".into()));
        }
        let ch_t = ch_t_base + (head_dim - used);
        if ch_h < 2 || ch_w < 2 || ch_t < 2 {
            return Err(Error::Config(format!(
                "head_dim {head_dim} too small: allocation h={ch_h} w={ch_w} t={ch_t} \
                 needs at least 2 channels per axis"
            )));
        }
        let (max_t, max_h, max_w) = max_positions;
        Ok(Rope3dTable {
            head_dim,
            channels: (ch_h, ch_w, ch_t),
            max_positions,
            tables: [
                axis_table(ch_h, max_h.max(1)),
                axis_table(ch_w, max_w.max(1)),
                axis_table(ch_t, max_t.max(1)),
            ],
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// (h, w, t) channel counts.
    pub fn channels(&self) -> (usize, usize, usize) {
        self.channels
    }

    /// Expand rotation tables for a token sequence with the given (t, h, w)
    /// positions. Output rows are `head_dim` wide; channels follow the
    /// `h | w | t` partition.
    pub fn expand(&self, positions: &[(usize, usize, usize)]) -> Result<RopeTables> {
        let d = self.head_dim;
        let mut cos = vec![1.0f32; positions.len() * d];
        let mut sin = vec![0.0f32; positions.len() * d];
        for (row, &(t, h, w)) in positions.iter().enumerate() {
            if t >= self.max_positions.0.max(1)
                || h >= self.max_positions.1.max(1)
                || w >= self.max_positions.2.max(1)
            {
                return Err(Error::msg(format!(
                    "rope position ({t}, {h}, {w}) outside table extents {:?}",
                    self.max_positions
                )));
            }
            let mut offset = row * d;
            for (table, pos) in self.tables.iter().zip([h, w, t]) {
                let ch = table.channels;
                cos[offset..offset + ch].copy_from_slice(&table.cos[pos * ch..(pos + 1) * ch]);
                sin[offset..offset + ch].copy_from_slice(&table.sin[pos * ch..(pos + 1) * ch]);
                offset += ch;
            }
        }
        Ok(RopeTables { cos, sin })
    }

    /// Row-major (t, h, w) positions of a full grid, temporal-major.
    pub fn grid_positions(
        frames: usize,
        height: usize,
        width: usize,
    ) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(frames * height * width);
        for t in 0..frames {
            for h in 0..height {
                for w in 0..width {
                    out.push((t, h, w));
                }
            }
        }
        out
    }
}
