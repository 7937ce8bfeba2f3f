//! Synthetic corpus: harmonic speech-like bursts, domain-specific noise and
//! propagation, and for real-proxy records a close-talk recording with a
//! random cross-device offset and gain.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, MixtureRecord, Oracle, Split};
use super::substream;
use crate::dsp::{write_wav, WavFormat, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::loss::Domain;
use crate::sync::shift_samples;

const PEAK_LIMIT: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub simu_train: usize,
    pub simu_val: usize,
    pub real_train: usize,
    pub real_val: usize,
    pub real_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            simu_train: 200,
            simu_val: 20,
            real_train: 100,
            real_val: 10,
            real_test: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimCorpusConfig {
    pub sample_rate: u32,
    /// Far-field microphones per record.
    pub channels: usize,
    /// 1-based labels of microphones facing away from the talker.
    pub rear_channels: Vec<usize>,
    pub counts: SplitCounts,
    pub utterance_seconds: [f64; 2],
    pub close_talk_snr_db: [f64; 2],
    pub far_field_snr_db: [f64; 2],
    pub offset_ms: [f64; 2],
    pub max_propagation_delay_ms: f64,
    pub propagation_gain: [f64; 2],
    pub close_talk_gain: [f64; 2],
    pub speech_rms: f64,
    /// Give real-proxy records different noise and propagation than simulated ones.
    pub domain_mismatch: bool,
    pub format: WavFormat,
    pub seed: u64,
}

impl Default for SimCorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            channels: 6,
            rear_channels: vec![2],
            counts: SplitCounts::default(),
            utterance_seconds: [2.0, 3.0],
            close_talk_snr_db: [15.0, 25.0],
            far_field_snr_db: [-5.0, 5.0],
            offset_ms: [-50.0, 50.0],
            max_propagation_delay_ms: 2.0,
            propagation_gain: [0.5, 1.0],
            close_talk_gain: [0.5, 2.0],
            speech_rms: 0.05,
            domain_mismatch: true,
            format: WavFormat::Pcm16,
            seed: 0,
        }
    }
}

impl SimCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 {
            return bad("at least one far-field channel is required".into());
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        for (name, [lo, hi]) in [
            ("utterance_seconds", self.utterance_seconds),
            ("close_talk_snr_db", self.close_talk_snr_db),
            ("far_field_snr_db", self.far_field_snr_db),
            ("offset_ms", self.offset_ms),
            ("propagation_gain", self.propagation_gain),
            ("close_talk_gain", self.close_talk_gain),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} range [{lo}, {hi}] is not ordered"));
            }
        }
        if !(self.utterance_seconds[0] > 0.0) {
            return bad("utterances must have positive length".into());
        }
        if !(self.propagation_gain[0] > 0.0) || !(self.close_talk_gain[0] > 0.0) {
            return bad("gains must be positive".into());
        }
        if !(self.max_propagation_delay_ms >= 0.0) || !(self.speech_rms > 0.0) {
            return bad("propagation delay and speech level must be non-negative".into());
        }
        if let Some(c) = self
            .rear_channels
            .iter()
            .find(|&&c| c == 0 || c > self.channels)
        {
            return bad(format!("rear channel {c} outside 1..={}", self.channels));
        }
        Ok(())
    }

    /// 1-based labels of the front-facing microphones.
    pub fn front_channels(&self) -> Vec<usize> {
        (1..=self.channels)
            .filter(|c| !self.rear_channels.contains(c))
            .collect()
    }
}

/// The five manifests of a simulated corpus.
#[derive(Debug, Clone)]
pub struct SimulatedCorpus {
    pub simu_train: CorpusManifest,
    pub simu_val: CorpusManifest,
    pub real_train: CorpusManifest,
    pub real_val: CorpusManifest,
    pub real_test: CorpusManifest,
}

impl SimulatedCorpus {
    pub const FILES: [&'static str; 5] = [
        "simu_train.jsonl",
        "simu_val.jsonl",
        "real_train.jsonl",
        "real_val.jsonl",
        "real_test.jsonl",
    ];

    pub fn manifests(&self) -> [&CorpusManifest; 5] {
        [
            &self.simu_train,
            &self.simu_val,
            &self.real_train,
            &self.real_val,
            &self.real_test,
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (m, name) in self.manifests().into_iter().zip(Self::FILES) {
            m.write(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let r = |name: &str| CorpusManifest::read(&dir.join(name));
        Ok(Self {
            simu_train: r(Self::FILES[0])?,
            simu_val: r(Self::FILES[1])?,
            real_train: r(Self::FILES[2])?,
            real_val: r(Self::FILES[3])?,
            real_test: r(Self::FILES[4])?,
        })
    }
}

/// Noise and propagation character of one domain.
#[derive(Debug, Clone, Copy)]
struct Acoustics {
    /// One-pole coefficient; positive is lowpass, negative is highpass.
    tilt: [f64; 2],
    /// Share of noise energy in a stationary harmonic hum.
    hum_share: f64,
    hum_f0: [f64; 2],
    echo_taps: usize,
    echo_max_ms: f64,
    echo_decay: f64,
}

const SIMU_ACOUSTICS: Acoustics = Acoustics {
    tilt: [0.85, 0.95],
    hum_share: 0.0,
    hum_f0: [0.0, 0.0],
    echo_taps: 2,
    echo_max_ms: 1.5,
    echo_decay: 0.3,
};

const REAL_ACOUSTICS: Acoustics = Acoustics {
    tilt: [-0.95, -0.7],
    hum_share: 0.5,
    hum_f0: [120.0, 350.0],
    echo_taps: 4,
    echo_max_ms: 2.5,
    echo_decay: 0.5,
};

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
}

/// Voiced syllables: glided harmonic series shaped by three formants, with a
/// raised-cosine envelope, separated by silences.
pub fn synth_speech(rng: &mut ChaCha8Rng, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut out = vec![0.0; len];
    let f0_base = rng.gen_range(90.0..230.0);
    let top = (0.45 * sr).min(4000.0);
    let mut start = (rng.gen_range(0.05..0.15) * sr) as usize;
    let tail = (0.08 * sr) as usize;
    while start + tail < len {
        let dur = ((rng.gen_range(0.12..0.35) * sr) as usize).min(len - tail - start);
        if dur < (0.03 * sr) as usize {
            break;
        }
        let f_start: f64 = f0_base * rng.gen_range(0.85..1.15);
        let f_end = f_start * rng.gen_range(0.8..1.2);
        let formants = [
            (rng.gen_range(300.0..850.0), 90.0, 1.0),
            (rng.gen_range(900.0..2300.0), 130.0, 0.6),
            (rng.gen_range(2400.0..3300.0), 200.0, 0.3),
        ];
        let loudness = rng.gen_range(0.5..1.0);
        let harmonics = (top / f_start.max(f_end)).floor() as usize;
        let mut phases: Vec<f64> = (0..harmonics)
            .map(|_| rng.gen_range(0.0..2.0 * PI))
            .collect();
        for n in 0..dur {
            let frac = n as f64 / dur as f64;
            let f0 = f_start + (f_end - f_start) * frac;
            let env = (PI * frac).sin().powi(2) * loudness;
            let mut acc = 0.0;
            for (k, phase) in phases.iter_mut().enumerate() {
                let fk = f0 * (k + 1) as f64;
                let amp: f64 = formants
                    .iter()
                    .map(|(fc, bw, g)| g * (-0.5 * ((fk - fc) / bw).powi(2)).exp())
                    .sum::<f64>()
                    + 0.03 / (k + 1) as f64;
                *phase += 2.0 * PI * fk / sr;
                acc += amp * phase.sin();
            }
            out[start + n] += env * acc;
        }
        start += dur + (rng.gen_range(0.04..0.2) * sr) as usize;
    }
    out
}

fn colored_noise(rng: &mut ChaCha8Rng, len: usize, tilt: f64) -> Vec<f64> {
    let mut prev = 0.0;
    (0..len)
        .map(|_| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            prev = w + tilt * prev;
            prev
        })
        .collect()
}

fn hum(rng: &mut ChaCha8Rng, len: usize, sr: f64, f0_range: [f64; 2]) -> Vec<f64> {
    let f0 = uniform(rng, f0_range);
    let parts: Vec<(f64, f64, f64)> = (1..=rng.gen_range(4..=8))
        .filter(|k| (*k as f64) * f0 < 0.45 * sr)
        .map(|k| {
            (
                k as f64 * f0,
                rng.gen_range(0.3..1.0) / (k as f64).sqrt(),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let wobble = rng.gen_range(0.2..1.0);
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let am = 1.0 + 0.3 * (2.0 * PI * wobble * t).sin();
            am * parts
                .iter()
                .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>()
        })
        .collect()
}

/// Unit-RMS noise of one domain; `hum_delay` shifts the point-like hum.
fn domain_noise(
    rng: &mut ChaCha8Rng,
    ac: &Acoustics,
    len: usize,
    sr: f64,
    hum_source: Option<(&[f64], usize)>,
) -> Vec<f64> {
    let tilt = uniform(rng, ac.tilt);
    let mut diffuse = colored_noise(rng, len, tilt);
    let slow = rng.gen_range(0.3..2.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    for (n, v) in diffuse.iter_mut().enumerate() {
        *v *= 1.0 + 0.4 * (2.0 * PI * slow * n as f64 / sr + phase).sin();
    }
    scale_to_rms(&mut diffuse, (1.0 - ac.hum_share).sqrt());
    if let Some((h, delay)) = hum_source {
        for n in delay..len {
            diffuse[n] += ac.hum_share.sqrt() * h[n - delay];
        }
    }
    scale_to_rms(&mut diffuse, 1.0);
    diffuse
}

fn propagate(
    rng: &mut ChaCha8Rng,
    ac: &Acoustics,
    dry: &[f64],
    sr: f64,
    delay: usize,
    gain: f64,
) -> Vec<f64> {
    let mut taps = vec![(delay, gain)];
    for k in 1..=ac.echo_taps {
        let extra = (rng.gen_range(0.3..ac.echo_max_ms) * sr / 1000.0).round() as usize;
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        taps.push((
            delay + extra.max(1),
            sign * gain * ac.echo_decay.powi(k as i32) * rng.gen_range(0.5..1.0),
        ));
    }
    let mut out = vec![0.0; dry.len()];
    for (d, g) in taps {
        for n in d..dry.len() {
            out[n] += g * dry[n - d];
        }
    }
    out
}

fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    let s: f64 = signal.iter().map(|v| v * v).sum();
    let n: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (s / n).log10()
}

/// Scales `noise` so that `signal` over it is `snr` dB.
fn set_snr(signal: &[f64], noise: &mut [f64], snr: f64) {
    let gain = 10f64.powf((snr_db(signal, noise) - snr) / 20.0);
    noise.iter_mut().for_each(|v| *v *= gain);
}

struct Written<'a> {
    root: &'a Path,
    format: WavFormat,
    sample_rate: u32,
}

impl Written<'_> {
    fn put(&self, rel: PathBuf, samples: Vec<f64>) -> Result<PathBuf> {
        let full = self.root.join(&rel);
        write_wav(
            &full,
            &Waveform::new(samples, self.sample_rate)?,
            self.format,
        )?;
        Ok(rel)
    }
}

fn simulate_record(
    cfg: &SimCorpusConfig,
    domain: Domain,
    split: Split,
    index: usize,
    out: &Written,
) -> Result<MixtureRecord> {
    let id = format!("{domain}_{split}_{index:04}");
    let mut rng = substream(cfg.seed, &format!("corpus/{id}"));
    let sr = cfg.sample_rate as f64;
    let ac = match domain {
        Domain::Real if cfg.domain_mismatch => REAL_ACOUSTICS,
        _ => SIMU_ACOUSTICS,
    };
    let len = (uniform(&mut rng, cfg.utterance_seconds) * sr).round() as usize;
    let mut dry = synth_speech(&mut rng, len, cfg.sample_rate);
    scale_to_rms(&mut dry, cfg.speech_rms);

    let max_delay = (cfg.max_propagation_delay_ms * sr / 1000.0).round() as usize;
    let delays: Vec<usize> = (0..cfg.channels)
        .map(|_| rng.gen_range(0..=max_delay))
        .collect();
    let mut clean: Vec<Vec<f64>> = delays
        .iter()
        .map(|&d| {
            let g = uniform(&mut rng, cfg.propagation_gain);
            propagate(&mut rng, &ac, &dry, sr, d, g)
        })
        .collect();

    let hum_src = (ac.hum_share > 0.0).then(|| hum(&mut rng, len, sr, ac.hum_f0));
    let hum_scale = hum_src.as_deref().map(rms).unwrap_or(1.0);
    let hum_src = hum_src.map(|h| h.into_iter().map(|v| v / hum_scale).collect::<Vec<_>>());
    let max_hum_delay = (sr / 1000.0) as usize;
    let mut noise: Vec<Vec<f64>> = (0..cfg.channels)
        .map(|_| {
            let d = rng.gen_range(0..=max_hum_delay);
            domain_noise(&mut rng, &ac, len, sr, hum_src.as_deref().map(|h| (h, d)))
        })
        .collect();
    let far_snr = uniform(&mut rng, cfg.far_field_snr_db);
    let gain = 10f64.powf((snr_db(&clean[0], &noise[0]) - far_snr) / 20.0);
    noise.iter_mut().flatten().for_each(|v| *v *= gain);
    let mut mix: Vec<Vec<f64>> = clean
        .iter()
        .zip(&noise)
        .map(|(c, n)| c.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();
    let peak = mix.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        let g = PEAK_LIMIT / peak;
        for v in clean
            .iter_mut()
            .chain(noise.iter_mut())
            .chain(mix.iter_mut())
            .flatten()
        {
            *v *= g;
        }
    }

    let dir = PathBuf::from(split.to_string()).join(&id);
    let mut far_field_paths = Vec::new();
    let mut clean_paths = Vec::new();
    let mut noise_paths = Vec::new();
    for p in 0..cfg.channels {
        let ch = p + 1;
        far_field_paths.push(out.put(
            dir.join(format!("far_ch{ch}.wav")),
            std::mem::take(&mut mix[p]),
        )?);
        clean_paths.push(out.put(
            dir.join(format!("clean_ch{ch}.wav")),
            std::mem::take(&mut clean[p]),
        )?);
        noise_paths.push(out.put(
            dir.join(format!("noise_ch{ch}.wav")),
            std::mem::take(&mut noise[p]),
        )?);
    }
    let delay_ms: Vec<f64> = delays.iter().map(|&d| d as f64 * 1000.0 / sr).collect();
    let mean_delay = delay_ms.iter().sum::<f64>() / delay_ms.len() as f64;

    let mut oracle = Oracle {
        clean_paths,
        noise_paths,
        injected_offset_ms: 0.0,
        injected_gain: 1.0,
        true_snr_db: far_snr,
        close_talk_clean_path: None,
        close_talk_noise_path: None,
        close_talk_snr_db: None,
        propagation_delay_ms: delay_ms,
        expected_sync_ms: -mean_delay,
    };
    let mut close_talk_path = None;
    if domain == Domain::Real {
        let offset_ms = uniform(&mut rng, cfg.offset_ms);
        let shift = (offset_ms * sr / 1000.0).round() as i64;
        let offset_ms = shift as f64 * 1000.0 / sr;
        let mut gain = uniform(&mut rng, cfg.close_talk_gain);
        let dry_wave = Waveform::new(dry, cfg.sample_rate)?;
        let mut speech = shift_samples(&dry_wave, -shift).scaled(gain).into_samples();
        let close_snr = uniform(&mut rng, cfg.close_talk_snr_db);
        let mut close_noise =
            domain_noise(&mut rng, &ac, len, sr, hum_src.as_deref().map(|h| (h, 0)));
        set_snr(&speech, &mut close_noise, close_snr);
        let mut close: Vec<f64> = speech
            .iter()
            .zip(&close_noise)
            .map(|(a, b)| a + b)
            .collect();
        let peak = close.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > PEAK_LIMIT {
            let g = PEAK_LIMIT / peak;
            gain *= g;
            for v in speech
                .iter_mut()
                .chain(close_noise.iter_mut())
                .chain(close.iter_mut())
            {
                *v *= g;
            }
        }
        close_talk_path = Some(out.put(dir.join("close.wav"), close)?);
        oracle.close_talk_clean_path = Some(out.put(dir.join("close_clean.wav"), speech)?);
        oracle.close_talk_noise_path = Some(out.put(dir.join("close_noise.wav"), close_noise)?);
        oracle.close_talk_snr_db = Some(close_snr);
        oracle.injected_offset_ms = offset_ms;
        oracle.injected_gain = gain;
        oracle.expected_sync_ms = offset_ms - mean_delay;
    }
    Ok(MixtureRecord {
        id,
        domain,
        far_field_paths,
        close_talk_path,
        oracle: Some(oracle),
        pseudo_label_path: None,
        sync_delay_ms: None,
    })
}

/// Generates every split under `out_dir` and writes the five manifests there.
pub fn simulate_corpus(cfg: &SimCorpusConfig, out_dir: &Path) -> Result<SimulatedCorpus> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let writer = Written {
        root: out_dir,
        format: cfg.format,
        sample_rate: cfg.sample_rate,
    };
    let c = &cfg.counts;
    let make = |domain: Domain, split: Split, n: usize| -> Result<CorpusManifest> {
        let mut m = CorpusManifest::new(split, cfg.sample_rate, out_dir);
        for i in 0..n {
            m.records
                .push(simulate_record(cfg, domain, split, i, &writer)?);
        }
        Ok(m)
    };
    let corpus = SimulatedCorpus {
        simu_train: make(Domain::Simu, Split::Train, c.simu_train)?,
        simu_val: make(Domain::Simu, Split::Val, c.simu_val)?,
        real_train: make(Domain::Real, Split::Train, c.real_train)?,
        real_val: make(Domain::Real, Split::Val, c.real_val)?,
        real_test: make(Domain::Real, Split::Test, c.real_test)?,
    };
    corpus.write(out_dir)?;
    Ok(corpus)
}
