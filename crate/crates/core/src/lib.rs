//! Far-field speech enhancement trained on real recordings with close-talk
//! pseudo-labels.
//!
//! The crate is organised bottom-up:
//!
//! * [`dsp`]: waveforms, STFT/iSTFT and WAV I/O.
//! * [`sync`]: frame-level synchronization of close-talk and far-field
//!   recordings by GCC-PHAT over per-frequency magnitude sequences.
//! * [`align`]: per-frequency FCP filters and time-domain Wiener filters that
//!   align an estimate to a pseudo-label.
//! * [`loss`]: training losses, speaker reinforcement and SI-SDR metrics.
//! * [`model`]: the enhancement network, its gradients and the training loop.
//! * [`pipeline`]: corpus simulation, manifests, checkpoints and the
//!   end-to-end orchestration behind the CLI.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod align;
pub mod dsp;
pub mod error;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod sync;

pub use error::{Error, Result};
