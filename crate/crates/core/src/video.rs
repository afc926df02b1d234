//! Raw uncompressed video container: fixed little-endian header
//! (magic, width, height, frames, fps) followed by row-major RGB frames,
//! 8 bits per channel. Codec-free so outputs are bit-exact and diffable.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RVID";

/// Serialize a (frames, height, width, 3) tensor in [0, 1] to bytes.
pub fn encode_video(video: &Tensor, fps: u32) -> Result<Vec<u8>> {
    let shape = video.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::msg(format!(
            "video tensor must be (frames, h, w, 3), got {shape:?}"
        )));
    }
    let (frames, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(20 + video.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&fps.to_le_bytes());
    for v in video.data().iter() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

/// Inverse of `encode_video`; returns the float tensor and the fps field.
pub fn decode_video(bytes: &[u8]) -> Result<(Tensor, u32)> {
    if bytes.len() < 20 || &bytes[0..4] != MAGIC {
        return Err(Error::msg("not a raw video file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (w, h, frames, fps) = (word(4) as usize, word(8) as usize, word(12) as usize, word(16));
    let n = frames * h * w * 3;
    if bytes.len() != 20 + n {
        return Err(Error::msg(format!(
            "video payload length {} does not match header ({} expected)",
            bytes.len() - 20,
            n
        )));
    }
    let data: Vec<f32> = bytes[20..].iter().map(|b| *b as f32 / 255.0).collect();
    Ok((Tensor::from_vec(&[frames, h, w, 3], data)?, fps))
}

pub fn write_video(path: &Path, video: &Tensor, fps: u32) -> Result<()> {
    let bytes = encode_video(video, fps)?;
    let mut f = fs::File::create(path)
        .map_err(|e| Error::msg(format!("create {}: {e}", path.display())))?;
    f.write_all(&bytes)
        .map_err(|e| Error::msg(format!("write {}: {e}", path.display())))
}

pub fn read_video(path: &Path) -> Result<(Tensor, u32)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::msg(format!("read {}: {e}", path.display())))?;
    decode_video(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_stable_after_one_quantization() {
        let raw = Tensor::from_vec(
            &[2, 2, 3, 3],
            (0..2 * 2 * 3 * 3).map(|i| (i as f32 * 0.37).fract()).collect(),
        )
        .unwrap();
        let bytes = encode_video(&raw, 12).unwrap();
        let (dec, fps) = decode_video(&bytes).unwrap();
        assert_eq!(fps, 12);
        assert_eq!(dec.shape(), raw.shape());
        // one quantization step of loss, then bit-exact thereafter
        for (a, b) in raw.to_vec().iter().zip(dec.to_vec()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let again = encode_video(&dec, 12).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let raw = Tensor::zeros(&[1, 2, 2, 3]);
        let mut bytes = encode_video(&raw, 1).unwrap();
        bytes[0] = b'X';
        assert!(decode_video(&bytes).is_err());
        let bytes = encode_video(&raw, 1).unwrap();
        assert!(decode_video(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_non_video_shape() {
        assert!(encode_video(&Tensor::zeros(&[4, 4]), 1).is_err());
        assert!(encode_video(&Tensor::zeros(&[1, 2, 2, 4]), 1).is_err());
    }
}
