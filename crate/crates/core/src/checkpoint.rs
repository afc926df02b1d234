//! Binary checkpoint container: magic + version, a config snapshot, the
//! training RNG state, named shape-prefixed f32 parameter blobs, optional
//! optimizer moments, and a trailing content checksum. Everything is
//! little-endian and written deterministically, so save -> load -> save
//! is byte-identical.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TKCP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: usize,
    /// First and second moments, interleaved per parameter.
    pub moments: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub blobs: Vec<NamedBlob>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, rng: &ChaCha8Rng) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            blobs: Vec::new(),
            optimizer: None,
        }
    }

    /// Restore the exact RNG stream position captured at save time.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Append a parameter list under `prefix.NNN` names, preserving order.
    pub fn push_params(&mut self, prefix: &str, params: &[Tensor]) {
        for (i, p) in params.iter().enumerate() {
            self.blobs.push(NamedBlob {
                name: format!("{prefix}.{i:03}"),
                shape: p.shape().to_vec(),
                data: p.to_vec(),
            });
        }
    }

    /// Copy stored values back into a live parameter list; shapes must
    /// match pairwise.
    pub fn load_params(&self, prefix: &str, params: &[Tensor]) -> Result<()> {
        let blobs: Vec<&NamedBlob> = self
            .blobs
            .iter()
            .filter(|b| {
                b.name
                    .strip_prefix(prefix)
                    .is_some_and(|r| r.starts_with('.'))
            })
            .collect();
        if blobs.len() != params.len() {
            return Err(Error::msg(format!(
                "checkpoint has {} blobs under '{prefix}', model needs {}",
                blobs.len(),
                params.len()
            )));
        }
        for (b, p) in blobs.iter().zip(params) {
            if b.shape != p.shape() {
                return Err(Error::msg(format!(
                    "blob {} shape {:?} does not match parameter shape {:?}",
                    b.name,
                    b.shape,
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.blobs.iter().any(|b| {
            b.name
                .strip_prefix(prefix)
                .is_some_and(|r| r.starts_with('.'))
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u64).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u64).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u64).to_le_bytes());
            for d in &b.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&(o.step_count as u64).to_le_bytes());
                out.extend_from_slice(&(o.moments.len() as u64).to_le_bytes());
                for m in &o.moments {
                    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    for v in m {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 40 || &bytes[0..4] != MAGIC {
            return Err(Error::msg("not a checkpoint file (bad magic)"));
        }
        let body = &bytes[..bytes.len() - 32];
        let digest = Sha256::digest(body);
        if digest.as_slice() != &bytes[bytes.len() - 32..] {
            return Err(Error::msg("checkpoint checksum mismatch"));
        }
        let mut pos = 4usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::msg("checkpoint truncated"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let u64_at = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let version = u32_at(&mut pos)?;
        if version != VERSION {
            return Err(Error::msg(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_len = u64_at(&mut pos)? as usize;
        let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
            .map_err(|_| Error::msg("config snapshot is not utf-8"))?
            .to_string();
        let config = RunConfig::from_toml(&cfg_text)?;
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(take(&mut pos, 32)?);
        let rng_word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
        let n_blobs = u64_at(&mut pos)? as usize;
        let mut blobs = Vec::with_capacity(n_blobs);
        for _ in 0..n_blobs {
            let name_len = u64_at(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::msg("blob name is not utf-8"))?
                .to_string();
            let rank = u64_at(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64_at(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push(NamedBlob { name, shape, data });
        }
        let has_opt = take(&mut pos, 1)?[0];
        let optimizer = if has_opt == 1 {
            let step_count = u64_at(&mut pos)? as usize;
            let n = u64_at(&mut pos)? as usize;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let len = u64_at(&mut pos)? as usize;
                let raw = take(&mut pos, len * 4)?;
                moments.push(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                );
            }
            Some(OptimizerState { step_count, moments })
        } else {
            None
        };
        if pos != body.len() {
            return Err(Error::msg("trailing bytes in checkpoint"));
        }
        Ok(Checkpoint {
            config,
            rng_seed,
            rng_word_pos,
            blobs,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())
            .map_err(|e| Error::msg(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)
            .map_err(|e| Error::msg(format!("read {}: {e}", path.display())))?;
        Checkpoint::decode(&bytes)
    }

    /// Loading into a run with different shapes silently misassigns
    /// parameters; refuse instead.
    pub fn check_shapes(&self, config: &RunConfig) -> Result<()> {
        if self.config.shapes != config.shapes {
            return Err(Error::msg(
                "checkpoint shape parameters do not match the loading config",
            ));
        }
        Ok(())
    }
}
