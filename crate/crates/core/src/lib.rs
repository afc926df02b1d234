//! Desk-scale two-stage long-video diffusion.
//!
//! A short-clip tokenizer condenses each clip into a small grid of semantic
//! tokens, a token-conditioned denoiser generates clips from those tokens,
//! a long-range token transformer generates the token sequence for a whole
//! video, and a diagonal FIFO scheduler stitches clips into one continuous
//! sequence. Everything trains on procedurally generated videos.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod fifo;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rope;
pub mod synth;
pub mod t2to;
pub mod tensor;
pub mod to2v;
pub mod tokenizer;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use tensor::Tensor;
