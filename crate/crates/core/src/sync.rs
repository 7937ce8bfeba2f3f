//! Frame-level synchronization of a close-talk recording to a far-field array.
//!
//! Every channel is analysed with a short-hop STFT. At each frequency the
//! magnitude over time is treated as a 1-D sequence and transformed with a
//! `T`-point FFT. A candidate frame delay `d` is scored by summing, over far-field
//! channels, frequencies and FFT bins, the cosine of the PHAT-weighted phase
//! difference between the far-field and close-talk sequence spectra after
//! compensating for `d`. The best candidate maximizes the score.
//!
//! Sign convention: `d > 0` means the close-talk recording lags the far-field
//! array by `d` frames and must be advanced; `d < 0` means it leads and must be
//! delayed.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, stft::forward_plan, Spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

/// Spectrum bins below this fraction of the sequence's peak bin count as zero.
const PHASE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    pub stft: StftConfig,
    pub max_delay_frames: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::synchronization(),
            max_delay_frames: 60,
        }
    }
}

impl SyncConfig {
    pub fn hop_samples(&self, sample_rate: u32) -> Result<usize> {
        Ok(self.stft.resolve(sample_rate)?.hop)
    }

    /// Candidates in tie-break order: 0, -1, 1, -2, 2, ...
    fn candidates(&self) -> impl Iterator<Item = i64> {
        let d = self.max_delay_frames as i64;
        std::iter::once(0).chain((1..=d).flat_map(|k| [-k, k]))
    }
}

/// Per-frequency magnitude sequences of one microphone and their FFTs.
#[derive(Debug, Clone)]
pub struct MagnitudeSequenceSet {
    /// `F x T`; row `f` is `|Y(., f)|`.
    magnitudes: Array2<f64>,
    /// `F x T`; row `f` is the `T`-point FFT of row `f` of `magnitudes`.
    spectra: Array2<Complex64>,
}

impl MagnitudeSequenceSet {
    pub fn magnitudes(&self) -> &Array2<f64> {
        &self.magnitudes
    }

    pub fn spectra(&self) -> &Array2<Complex64> {
        &self.spectra
    }

    pub fn num_frames(&self) -> usize {
        self.magnitudes.ncols()
    }

    pub fn num_bins(&self) -> usize {
        self.magnitudes.nrows()
    }

    /// Unit phasors of the sequence spectra; negligible bins map to zero.
    fn phasors(&self) -> Array2<Complex64> {
        let mut out = Array2::zeros(self.spectra.dim());
        for (f, row) in self.spectra.outer_iter().enumerate() {
            let peak = row.iter().map(|c| c.norm()).fold(0.0, f64::max);
            for (t, c) in row.iter().enumerate() {
                let n = c.norm();
                if n > 0.0 && n > PHASE_FLOOR * peak {
                    out[[f, t]] = c / n;
                }
            }
        }
        out
    }
}

pub fn magnitude_sequences(spec: &Spectrogram) -> MagnitudeSequenceSet {
    let (frames, bins) = spec.data().dim();
    let fft = forward_plan(frames);
    let mut magnitudes = Array2::zeros((bins, frames));
    let mut spectra = Array2::zeros((bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); frames];
    for f in 0..bins {
        for t in 0..frames {
            let m = spec.data()[[t, f]].norm();
            magnitudes[[f, t]] = m;
            buf[t] = Complex64::new(m, 0.0);
        }
        fft.process(&mut buf);
        for t in 0..frames {
            spectra[[f, t]] = buf[t];
        }
    }
    MagnitudeSequenceSet {
        magnitudes,
        spectra,
    }
}

fn check_shapes(close: &MagnitudeSequenceSet, far: &[MagnitudeSequenceSet]) -> Result<()> {
    if far.is_empty() {
        return Err(Error::InvalidConfig("no far-field channels".into()));
    }
    for (p, s) in far.iter().enumerate() {
        if s.magnitudes.dim() != close.magnitudes.dim() {
            return Err(Error::ShapeMismatch(format!(
                "far-field channel {p} has (F,T) = {:?}, close-talk {:?}",
                s.magnitudes.dim(),
                close.magnitudes.dim()
            )));
        }
    }
    Ok(())
}

/// Summed GCC-PHAT coefficient for one hypothesized frame delay, evaluated
/// term by term over channels, frequencies and sequence-FFT bins.
pub fn gcc_phat_score(
    close: &MagnitudeSequenceSet,
    far: &[MagnitudeSequenceSet],
    delay: i64,
) -> Result<f64> {
    check_shapes(close, far)?;
    let frames = close.num_frames();
    if 2 * delay.unsigned_abs() as usize > frames {
        return Err(Error::InvalidConfig(format!(
            "delay {delay} exceeds half the sequence length {frames}"
        )));
    }
    let close_ph = close.phasors();
    let mut total = 0.0;
    for p in far {
        let far_ph = p.phasors();
        for f in 0..close.num_bins() {
            for t in 0..frames {
                let (a, b) = (close_ph[[f, t]], far_ph[[f, t]]);
                if a.norm_sqr() == 0.0 || b.norm_sqr() == 0.0 {
                    continue;
                }
                let ramp = 2.0 * std::f64::consts::PI * (t as f64 / frames as f64) * delay as f64;
                total += (b.arg() - a.arg() - ramp).cos();
            }
        }
    }
    Ok(total)
}

/// Returns the best frame delay in `[-D, D]` together with every candidate's score.
pub fn delay_scores(
    close: &MagnitudeSequenceSet,
    far: &[MagnitudeSequenceSet],
    cfg: &SyncConfig,
) -> Result<(i64, Vec<(i64, f64)>)> {
    check_shapes(close, far)?;
    let frames = close.num_frames();
    if 2 * cfg.max_delay_frames > frames {
        return Err(Error::InvalidConfig(format!(
            "max delay {} frames needs at least {} frames, got {frames}",
            cfg.max_delay_frames,
            2 * cfg.max_delay_frames
        )));
    }
    // Sum of cos(phi - ramp(d)) over (p, f, t) equals Re sum_t C(t) e^{-j ramp(d)}
    // with C(t) the summed cross-phasor at sequence bin t.
    let close_ph = close.phasors();
    let mut cross = vec![Complex64::new(0.0, 0.0); frames];
    for p in far {
        let far_ph = p.phasors();
        for f in 0..close.num_bins() {
            for t in 0..frames {
                cross[t] += far_ph[[f, t]] * close_ph[[f, t]].conj();
            }
        }
    }
    let mut scores = Vec::with_capacity(2 * cfg.max_delay_frames + 1);
    let mut best: Option<(i64, f64)> = None;
    for d in cfg.candidates() {
        let score: f64 = cross
            .iter()
            .enumerate()
            .map(|(t, c)| {
                let ramp = 2.0 * std::f64::consts::PI * (t as f64 / frames as f64) * d as f64;
                (c * Complex64::from_polar(1.0, -ramp)).re
            })
            .sum();
        scores.push((d, score));
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((d, score));
        }
    }
    scores.sort_by_key(|(d, _)| *d);
    Ok((best.expect("candidate set is never empty").0, scores))
}

pub fn estimate_frame_delay(
    close: &MagnitudeSequenceSet,
    far: &[MagnitudeSequenceSet],
    cfg: &SyncConfig,
) -> Result<i64> {
    delay_scores(close, far, cfg).map(|(d, _)| d)
}

/// Advances (`frames > 0`) or delays (`frames < 0`) by whole hops, zero-filling
/// the vacated end. Length is unchanged.
pub fn apply_frame_shift(wave: &Waveform, frames: i64, cfg: &SyncConfig) -> Result<Waveform> {
    let hop = cfg.hop_samples(wave.sample_rate())?;
    Ok(shift_samples(wave, frames * hop as i64))
}

/// Positive `samples` advances the signal, negative delays it.
pub fn shift_samples(wave: &Waveform, samples: i64) -> Waveform {
    let n = wave.len();
    let x = wave.samples();
    let mut out = vec![0.0; n];
    let s = samples.unsigned_abs() as usize;
    if s < n {
        if samples >= 0 {
            out[..n - s].copy_from_slice(&x[s..]);
        } else {
            out[s..].copy_from_slice(&x[..n - s]);
        }
    }
    Waveform::new(out, wave.sample_rate()).expect("shifted samples stay finite")
}

#[derive(Debug, Clone)]
pub struct SyncOutcome {
    pub aligned: Waveform,
    pub delay_frames: i64,
    pub delay_ms: f64,
}

pub fn synchronize_pair(
    close: &Waveform,
    far: &[Waveform],
    cfg: &SyncConfig,
) -> Result<SyncOutcome> {
    let close_seq = magnitude_sequences(&stft(close, &cfg.stft)?);
    let far_seq = far
        .iter()
        .map(|w| Ok(magnitude_sequences(&stft(w, &cfg.stft)?)))
        .collect::<Result<Vec<_>>>()?;
    let delay_frames = estimate_frame_delay(&close_seq, &far_seq, cfg)?;
    Ok(SyncOutcome {
        aligned: apply_frame_shift(close, delay_frames, cfg)?,
        delay_frames,
        delay_ms: delay_frames as f64 * cfg.stft.hop_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(frames: usize, bins: usize, seed: u64) -> MagnitudeSequenceSet {
        assert_eq!(bins, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((frames, bins), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let spec = Spectrogram::from_parts(
            data,
            StftConfig {
                window_ms: 16.0,
                hop_ms: 2.0,
                window: Default::default(),
            },
            1_000,
            2 * frames - 17,
        );
        magnitude_sequences(&spec.unwrap())
    }

    /// Close-talk = far-field delayed circularly by `lag` frames.
    fn lagged_copy(far: &MagnitudeSequenceSet, lag: i64) -> MagnitudeSequenceSet {
        let (bins, frames) = far.magnitudes.dim();
        let mut m = Array2::zeros((bins, frames));
        for f in 0..bins {
            for t in 0..frames {
                let src = (t as i64 - lag).rem_euclid(frames as i64) as usize;
                m[[f, t]] = far.magnitudes[[f, src]];
            }
        }
        let fft = forward_plan(frames);
        let mut spectra = Array2::zeros((bins, frames));
        for f in 0..bins {
            let mut buf: Vec<Complex64> =
                m.row(f).iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            for t in 0..frames {
                spectra[[f, t]] = buf[t];
            }
        }
        MagnitudeSequenceSet {
            magnitudes: m,
            spectra,
        }
    }

    #[test]
    fn zero_spectrogram_gives_zero_sequences() {
        let spec = Spectrogram::zeros(StftConfig::synchronization(), 16_000, 1_000).unwrap();
        let set = magnitude_sequences(&spec);
        assert!(set.magnitudes.iter().all(|v| *v == 0.0));
        assert!(set.spectra.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn constant_magnitude_concentrates_at_dc() {
        let spec = Spectrogram::zeros(StftConfig::synchronization(), 16_000, 1_000).unwrap();
        let spec = spec.with_data(spec.data().mapv(|_| Complex64::from_polar(2.0, 0.7)));
        let set = magnitude_sequences(&spec);
        let frames = set.num_frames() as f64;
        for row in set.spectra.outer_iter() {
            assert!((row[0].re - 2.0 * frames).abs() < 1e-9);
            assert!(row.iter().skip(1).all(|c| c.norm() < 1e-9));
        }
    }

    #[test]
    fn inverse_fft_recovers_magnitudes() {
        let set = random_set(40, 9, 1);
        let frames = set.num_frames();
        let ifft = crate::dsp::stft::inverse_plan(frames);
        for f in 0..set.num_bins() {
            let mut buf = set.spectra.row(f).to_vec();
            ifft.process(&mut buf);
            for t in 0..frames {
                assert!((buf[t].re / frames as f64 - set.magnitudes[[f, t]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_copies_score_every_term_as_one() {
        let set = random_set(32, 9, 2);
        let nonzero = set.phasors().iter().filter(|c| c.norm_sqr() > 0.0).count();
        let far = vec![set.clone(), set.clone(), set.clone()];
        let score = gcc_phat_score(&set, &far, 0).unwrap();
        assert!((score - 3.0 * nonzero as f64).abs() < 1e-9);
        assert_eq!(nonzero, 32 * 9);
    }

    #[test]
    fn collapsed_scores_match_direct_sum() {
        let far = vec![random_set(50, 9, 3), random_set(50, 9, 4)];
        let close = random_set(50, 9, 5);
        let cfg = SyncConfig {
            stft: StftConfig::synchronization(),
            max_delay_frames: 20,
        };
        let (_, scores) = delay_scores(&close, &far, &cfg).unwrap();
        for (d, s) in scores {
            let direct = gcc_phat_score(&close, &far, d).unwrap();
            assert!((s - direct).abs() < 1e-8 * direct.abs().max(1.0), "d={d}");
        }
    }

    #[test]
    fn exhaustive_argmax_recovers_circular_lag() {
        let far_base = random_set(64, 9, 6);
        let cfg = SyncConfig {
            stft: StftConfig::synchronization(),
            max_delay_frames: 30,
        };
        for lag in [-17i64, -3, 0, 5, 29] {
            let close = lagged_copy(&far_base, lag);
            let far = vec![far_base.clone()];
            let brute = (-30..=30)
                .map(|d| (d, gcc_phat_score(&close, &far, d).unwrap()))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(brute, lag);
            assert_eq!(estimate_frame_delay(&close, &far, &cfg).unwrap(), lag);
        }
    }

    #[test]
    fn independent_sequences_score_near_zero() {
        let mut total = 0.0;
        let mut max_abs: f64 = 0.0;
        for seed in 0..20 {
            let close = random_set(64, 9, 100 + seed);
            let far = vec![random_set(64, 9, 200 + seed), random_set(64, 9, 300 + seed)];
            let s = gcc_phat_score(&close, &far, 0).unwrap();
            total += s;
            max_abs = max_abs.max(s.abs());
        }
        let ceiling = 2.0 * 64.0 * 9.0;
        assert!(max_abs < 0.2 * ceiling, "{max_abs}");
        assert!((total / 20.0).abs() < 0.05 * ceiling);
    }

    #[test]
    fn mismatched_shapes_error() {
        let close = random_set(40, 9, 1);
        let far = vec![random_set(41, 9, 2)];
        assert!(gcc_phat_score(&close, &far, 0).is_err());
    }

    #[test]
    fn shift_round_trip_on_unclipped_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w =
            Waveform::new((0..500).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap();
        let cfg = SyncConfig::default();
        assert_eq!(apply_frame_shift(&w, 0, &cfg).unwrap(), w);
        let there = apply_frame_shift(&w, 3, &cfg).unwrap();
        let back = apply_frame_shift(&there, -3, &cfg).unwrap();
        assert_eq!(&back.samples()[48..], &w.samples()[48..]);
        assert!(back.samples()[..48].iter().all(|s| *s == 0.0));
        assert_eq!(there.len(), w.len());
    }
}
