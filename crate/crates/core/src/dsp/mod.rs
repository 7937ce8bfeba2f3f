//! Waveforms, square-root-Hann STFT analysis/synthesis and WAV file I/O.
//!
//! Conventions used throughout the crate:
//!
//! * FFT length is the window length rounded up to the next power of two; the
//!   window is zero-padded to that length, so `F = fft_len / 2 + 1`.
//! * Signals are zero-padded by one full window on the left and by at least
//!   one window on the right before framing. Every original sample is covered
//!   by `window / hop` frames, so synthesis is exact up to the edges.
//! * The analysis and synthesis windows are both the periodic square-root
//!   Hann window. Their product sums to `window / (2 * hop)` over all shifts;
//!   synthesis divides by that constant.
//! * Energy: `sum_t sum_k c_k |X(t,k)|^2 / fft_len = window / (2 * hop) * sum_n x[n]^2`
//!   with `c_k = 1` for the DC and Nyquist bins and `2` otherwise.

pub(crate) mod stft;
mod wav;

pub use stft::{istft, istft_adjoint, stft, stft_adjoint, Spectrogram};
pub use wav::{read_wav, write_wav, write_wav_channels, WavFormat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn norm(&self) -> f64 {
        self.energy().sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum; lengths and rates must agree.
    pub fn add(&self, other: &Waveform) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::ShapeMismatch(format!(
                "sample rates {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "lengths {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    SqrtHann,
}

/// STFT geometry in milliseconds; sample counts are resolved per sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    #[serde(default)]
    pub window: WindowKind,
}

impl StftConfig {
    /// 32 ms window, 8 ms hop: the enhancement-model front end.
    pub const fn enhancement() -> Self {
        Self {
            window_ms: 32.0,
            hop_ms: 8.0,
            window: WindowKind::SqrtHann,
        }
    }

    /// 16 ms window, 1 ms hop: used only for cross-device synchronization.
    pub const fn synchronization() -> Self {
        Self {
            window_ms: 16.0,
            hop_ms: 1.0,
            window: WindowKind::SqrtHann,
        }
    }

    pub fn resolve(&self, sample_rate: u32) -> Result<FrameGeometry> {
        let to_samples = |ms: f64, what: &str| -> Result<usize> {
            let exact = ms * sample_rate as f64 / 1000.0;
            let rounded = exact.round();
            if !(ms > 0.0) || (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "{what} of {ms} ms is not a whole number of samples at {sample_rate} Hz"
                )));
            }
            Ok(rounded as usize)
        };
        let window = to_samples(self.window_ms, "window")?;
        let hop = to_samples(self.hop_ms, "hop")?;
        if window % hop != 0 || window / hop < 2 {
            return Err(Error::InvalidConfig(format!(
                "hop {hop} must divide window {window} at least twice"
            )));
        }
        Ok(FrameGeometry {
            window,
            hop,
            fft_len: window.next_power_of_two(),
        })
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::enhancement()
    }
}

/// STFT geometry in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub window: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl FrameGeometry {
    pub fn num_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Frames needed so every sample of a `len`-sample signal has full overlap.
    pub fn num_frames(&self, len: usize) -> usize {
        (self.window + len - 1) / self.hop + 1
    }

    pub fn padded_len(&self, len: usize) -> usize {
        (self.num_frames(len) - 1) * self.hop + self.window
    }

    /// Overlap-add gain of analysis times synthesis window.
    pub fn ola_gain(&self) -> f64 {
        self.window as f64 / (2.0 * self.hop as f64)
    }

    pub fn window_fn(&self) -> Vec<f64> {
        let w = self.window as f64;
        (0..self.window)
            .map(|n| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / w).cos()).sqrt())
            .collect()
    }
}
