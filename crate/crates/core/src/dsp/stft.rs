use std::cell::RefCell;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{FrameGeometry, StftConfig, Waveform};
use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn forward_plan(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

pub(crate) fn inverse_plan(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Complex `T x F` STFT matrix together with the geometry that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Array2<Complex64>,
    config: StftConfig,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    /// Wraps raw STFT data; `F` must match the config and `T` the signal length.
    pub fn from_parts(
        data: Array2<Complex64>,
        config: StftConfig,
        sample_rate: u32,
        signal_len: usize,
    ) -> Result<Self> {
        let geom = config.resolve(sample_rate)?;
        let expected = (geom.num_frames(signal_len), geom.num_bins());
        if data.dim() != expected {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram is {:?}, config implies {:?}",
                data.dim(),
                expected
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram entry".into()));
        }
        Ok(Self {
            data,
            config,
            sample_rate,
            signal_len,
        })
    }

    pub fn zeros(config: StftConfig, sample_rate: u32, signal_len: usize) -> Result<Self> {
        let geom = config.resolve(sample_rate)?;
        Ok(Self {
            data: Array2::zeros((geom.num_frames(signal_len), geom.num_bins())),
            config,
            sample_rate,
            signal_len,
        })
    }

    /// Same geometry, new data. Panics if the shape differs.
    pub fn with_data(&self, data: Array2<Complex64>) -> Self {
        assert_eq!(data.dim(), self.data.dim(), "spectrogram shape changed");
        Self {
            data,
            config: self.config,
            sample_rate: self.sample_rate,
            signal_len: self.signal_len,
        }
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.config
            .resolve(self.sample_rate)
            .expect("spectrogram config validated at construction")
    }

    pub fn same_shape(&self, other: &Spectrogram) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::ShapeMismatch(format!(
                "spectrograms {:?} vs {:?}",
                self.data.dim(),
                other.data.dim()
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, gain: Complex64) -> Self {
        self.with_data(self.data.mapv(|c| c * gain))
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).sum()
    }
}

pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    let geom = cfg.resolve(wave.sample_rate())?;
    let x = wave.samples();
    if x.len() < geom.window {
        return Err(Error::InputTooShort {
            len: x.len(),
            needed: geom.window,
        });
    }
    let frames = geom.num_frames(x.len());
    let bins = geom.num_bins();
    let mut padded = vec![0.0; geom.padded_len(x.len())];
    padded[geom.window..geom.window + x.len()].copy_from_slice(x);

    let win = geom.window_fn();
    let fft = forward_plan(geom.fft_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); geom.fft_len];
    let mut data = Array2::zeros((frames, bins));
    for t in 0..frames {
        let start = t * geom.hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for n in 0..geom.window {
            buf[n].re = padded[start + n] * win[n];
        }
        fft.process(&mut buf);
        for (k, v) in buf[..bins].iter().enumerate() {
            data[[t, k]] = *v;
        }
    }
    Ok(Spectrogram {
        data,
        config: *cfg,
        sample_rate: wave.sample_rate(),
        signal_len: x.len(),
    })
}

pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let geom = spec.config.resolve(spec.sample_rate)?;
    let bins = geom.num_bins();
    if spec.num_bins() != bins || spec.num_frames() != geom.num_frames(spec.signal_len) {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram {:?} inconsistent with config ({} bins, {} frames)",
            spec.data.dim(),
            bins,
            geom.num_frames(spec.signal_len)
        )));
    }
    let n_fft = geom.fft_len;
    let win = geom.window_fn();
    let ifft = inverse_plan(n_fft);
    let scale = 1.0 / (n_fft as f64 * geom.ola_gain());
    let mut out = vec![0.0; geom.padded_len(spec.signal_len)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..spec.num_frames() {
        hermitian_fill(&mut buf, spec.data.row(t).iter().copied());
        ifft.process(&mut buf);
        let start = t * geom.hop;
        for n in 0..geom.window {
            out[start + n] += buf[n].re * win[n] * scale;
        }
    }
    let trimmed = out[geom.window..geom.window + spec.signal_len].to_vec();
    Waveform::new(trimmed, spec.sample_rate)
}

/// Gradient of a real loss with respect to the input waveform of [`stft`],
/// given `grad = dL/dRe + i dL/dIm` at every STFT coefficient.
pub fn stft_adjoint(grad: &Spectrogram) -> Vec<f64> {
    let geom = grad.geometry();
    let n_fft = geom.fft_len;
    let win = geom.window_fn();
    let ifft = inverse_plan(n_fft);
    let mut acc = vec![0.0; geom.padded_len(grad.signal_len)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..grad.num_frames() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (k, g) in grad.data.row(t).iter().enumerate() {
            buf[k] = *g;
        }
        ifft.process(&mut buf);
        let start = t * geom.hop;
        for n in 0..geom.window {
            acc[start + n] += buf[n].re * win[n];
        }
    }
    acc[geom.window..geom.window + grad.signal_len].to_vec()
}

/// Gradient with respect to the STFT coefficients fed to [`istft`], given the
/// gradient `grad` with respect to its output samples. `like` supplies the geometry.
pub fn istft_adjoint(grad: &[f64], like: &Spectrogram) -> Spectrogram {
    let geom = like.geometry();
    assert_eq!(grad.len(), like.signal_len, "gradient length mismatch");
    let n_fft = geom.fft_len;
    let bins = geom.num_bins();
    let win = geom.window_fn();
    let fft = forward_plan(n_fft);
    let scale = 1.0 / (n_fft as f64 * geom.ola_gain());
    let mut padded = vec![0.0; geom.padded_len(like.signal_len)];
    padded[geom.window..geom.window + grad.len()].copy_from_slice(grad);
    let mut data = Array2::zeros(like.data.dim());
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..like.num_frames() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let start = t * geom.hop;
        for n in 0..geom.window {
            buf[n].re = padded[start + n] * win[n] * scale;
        }
        fft.process(&mut buf);
        for k in 0..bins {
            // Imaginary parts of the DC and Nyquist bins never reach the output.
            data[[t, k]] = if k == 0 || 2 * k == n_fft {
                Complex64::new(buf[k].re, 0.0)
            } else {
                buf[k] * 2.0
            };
        }
    }
    like.with_data(data)
}

fn hermitian_fill(buf: &mut [Complex64], half: impl Iterator<Item = Complex64>) {
    let n = buf.len();
    let mut bins = 0;
    for (k, v) in half.enumerate() {
        buf[k] = v;
        bins = k + 1;
    }
    for k in bins..n {
        buf[k] = buf[n - k].conj();
    }
}
