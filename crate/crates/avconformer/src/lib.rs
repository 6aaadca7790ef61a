//! Audio-visual conformer CTC toolkit.
//!
//! A desk-scale, from-scratch implementation of an audio-visual speech
//! recognition stack: a dense-tensor engine with reverse-mode autodiff,
//! mel/STFT and lip-video front-ends, multi-head self-attention in regular,
//! grouped and patch variants, conformer stages with inter-CTC residual
//! modules and early fusion, CTC loss with a brute-force oracle, greedy and
//! LM-fused beam decoding, a training harness (Adam, Noam schedule, SWA,
//! SNR-controlled noise mixing, synthetic toy tasks) and an analytic
//! FLOPs/parameter profiler.
//!
//! The `examples/` directory holds one runnable walkthrough per capability;
//! the `avconformer` binary exposes the same workflows as subcommands.

pub mod attention;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod conformer;
pub mod ctc;
pub mod nn;
pub mod profile;
pub mod tensor;
pub mod train;
pub mod video;

mod error;

pub use error::{Error, Result};
