//! Losses with gradients, optimizers, the learning-rate schedule and the
//! simulated/real co-learning sampler.

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::ModelParams;
use crate::dsp::{Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::loss::{
    combined_loss, loss_speech_real_with_grad, normalized_distance_with_grad, AlignMode, Domain,
    LossBreakdown, LossFlags, LossParts,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub segment_seconds: f64,
    /// Range of the uniform SNR shift applied to simulated mixtures, in dB.
    pub snr_aug_range: [f64; 2],
    pub snr_augmentation: bool,
    /// Weight of simulated batches relative to real ones.
    pub alpha: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Steps per epoch; `None` means one pass over the combined corpus.
    pub steps_per_epoch: Option<usize>,
    /// Epochs without validation improvement before the learning rate halves.
    pub patience: usize,
    pub loss_flags: LossFlags,
    pub align: AlignMode,
    /// Probability of a simulated step; `None` draws in proportion to corpus sizes.
    pub simu_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: Optimizer::Sgd,
            batch_size: 1,
            segment_seconds: 8.0,
            snr_aug_range: [-10.0, 15.0],
            snr_augmentation: true,
            alpha: 5.0,
            seed: 0,
            max_epochs: 10,
            steps_per_epoch: None,
            patience: 2,
            loss_flags: LossFlags::FULL,
            align: AlignMode::default(),
            simu_ratio: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.segment_seconds > 0.0) {
            return bad("segment length must be positive".into());
        }
        let [lo, hi] = self.snr_aug_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("SNR range [{lo}, {hi}] is not ordered"));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if let Some(r) = self.simu_ratio {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("simu ratio {r} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One training utterance. `inputs` are the far-field channels fed to the model
/// in microphone order; the mixture reference is the model's reference channel.
#[derive(Debug, Clone)]
pub enum TrainExample {
    Simu {
        inputs: Vec<Spectrogram>,
        speech: Spectrogram,
        noise: Spectrogram,
    },
    Real {
        inputs: Vec<Spectrogram>,
        pseudo_label: Spectrogram,
    },
}

impl TrainExample {
    pub fn domain(&self) -> Domain {
        match self {
            TrainExample::Simu { .. } => Domain::Simu,
            TrainExample::Real { .. } => Domain::Real,
        }
    }

    pub fn inputs(&self) -> &[Spectrogram] {
        match self {
            TrainExample::Simu { inputs, .. } | TrainExample::Real { inputs, .. } => inputs,
        }
    }
}

/// Loss breakdown and parameter gradients of `LossBreakdown::total` for one example.
pub fn loss_and_grad(
    params: &ModelParams,
    example: &TrainExample,
    flags: &LossFlags,
    align: &AlignMode,
    alpha: f64,
) -> Result<(LossBreakdown, ModelParams)> {
    let (breakdown, grad_x, grad_v, cache) = loss_terms(params, example, flags, align, alpha)?;
    let grads = params.backward(&cache, &grad_x, grad_v.as_ref())?;
    Ok((breakdown, grads))
}

/// Loss breakdown without gradients.
pub fn evaluate_loss(
    params: &ModelParams,
    example: &TrainExample,
    flags: &LossFlags,
    align: &AlignMode,
    alpha: f64,
) -> Result<LossBreakdown> {
    Ok(loss_terms(params, example, flags, align, alpha)?.0)
}

type Terms = (
    LossBreakdown,
    Array2<Complex64>,
    Option<Array2<Complex64>>,
    super::network::ForwardCache,
);

fn loss_terms(
    params: &ModelParams,
    example: &TrainExample,
    flags: &LossFlags,
    align: &AlignMode,
    alpha: f64,
) -> Result<Terms> {
    let cfg = params.config();
    let domain = example.domain();
    let (want_noise, want_mixture) = match domain {
        Domain::Simu => (flags.simu_noise, flags.simu_mixture),
        Domain::Real => (false, flags.real_mixture),
    };
    if (want_noise || want_mixture) && !cfg.predict_noise {
        return Err(Error::InvalidConfig(
            "enabled loss terms need a model with a noise head".into(),
        ));
    }
    let out = params.forward(example.inputs())?;
    let mixture = &example.inputs()[cfg.reference_channel - 1];
    let mut parts = LossParts::default();

    let mut grad_x = match example {
        TrainExample::Simu { speech, .. } => {
            let (v, g) = normalized_distance_with_grad(out.speech.data(), speech.data())?;
            parts.speech = v;
            g
        }
        TrainExample::Real { pseudo_label, .. } => {
            let (v, g) = loss_speech_real_with_grad(&out.speech, pseudo_label, align)?;
            parts.speech = v;
            g
        }
    };
    let mut grad_v = out.noise.as_ref().map(|v| Array2::zeros(v.data().dim()));
    if want_noise {
        let TrainExample::Simu { noise, .. } = example else {
            unreachable!()
        };
        let est = out.noise.as_ref().expect("noise head");
        let (v, g) = normalized_distance_with_grad(est.data(), noise.data())?;
        parts.noise = Some(v);
        *grad_v.as_mut().unwrap() += &g;
    }
    if want_mixture {
        let est = out.noise.as_ref().expect("noise head");
        let sum = out.speech.data() + est.data();
        let (v, g) = normalized_distance_with_grad(&sum, mixture.data())?;
        parts.mixture = Some(v);
        grad_x += &g;
        *grad_v.as_mut().unwrap() += &g;
    }
    let breakdown = combined_loss(parts, domain, alpha)?;
    let weight = match domain {
        Domain::Simu => alpha,
        Domain::Real => 1.0,
    };
    grad_x.mapv_inplace(|c| c * weight);
    if let Some(g) = grad_v.as_mut() {
        g.mapv_inplace(|c| c * weight);
    }
    Ok((breakdown, grad_x, grad_v, out.cache))
}

/// Optimizer moments and counters; serialized next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub best_val_loss: Option<f64>,
    pub epochs_since_improvement: usize,
    #[serde(default)]
    pub first_moment: Vec<f64>,
    #[serde(default)]
    pub second_moment: Vec<f64>,
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub state: TrainState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = params.param_count();
        let moments = matches!(config.optimizer, Optimizer::Adam { .. });
        Ok(Self {
            state: TrainState {
                step: 0,
                epoch: 0,
                learning_rate: config.learning_rate,
                best_val_loss: None,
                epochs_since_improvement: 0,
                first_moment: if moments { vec![0.0; n] } else { Vec::new() },
                second_moment: if moments { vec![0.0; n] } else { Vec::new() },
            },
            params,
            config,
        })
    }

    /// One update on the mean loss of `batch`; every example must come from `domain`.
    pub fn step(&mut self, batch: &[TrainExample], domain: Domain) -> Result<LossBreakdown> {
        let (mean, grads) = batch_gradient(&self.params, batch, domain, &self.config)?;
        self.apply(&grads)?;
        Ok(mean)
    }

    fn apply(&mut self, grads: &ModelParams) -> Result<()> {
        let lr = self.state.learning_rate;
        self.state.step += 1;
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.params.values_mut().zip(grads.values()) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.state.step as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let (m, v) = (&mut self.state.first_moment, &mut self.state.second_moment);
                for (((p, g), m), v) in self.params.values_mut().zip(grads.values()).zip(m).zip(v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {} (lr {lr})",
                self.state.step
            )));
        }
        Ok(())
    }

    /// Records a validation loss at the end of an epoch and halves the learning
    /// rate after `patience` epochs without improvement. Returns true on halving.
    pub fn end_epoch(&mut self, val_loss: f64) -> bool {
        self.state.epoch += 1;
        match self.state.best_val_loss {
            Some(best) if val_loss >= best => {
                self.state.epochs_since_improvement += 1;
                if self.state.epochs_since_improvement >= self.config.patience.max(1) {
                    self.state.learning_rate *= 0.5;
                    self.state.epochs_since_improvement = 0;
                    return true;
                }
            }
            _ => {
                self.state.best_val_loss = Some(val_loss);
                self.state.epochs_since_improvement = 0;
            }
        }
        false
    }
}

/// Mean breakdown and mean gradient over a batch.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[TrainExample],
    domain: Domain,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut grads = ModelParams::zeros(params.config())?;
    let mut mean: Option<LossBreakdown> = None;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        if ex.domain() != domain {
            return Err(Error::InvalidConfig(format!(
                "{} example in a {domain} batch",
                ex.domain()
            )));
        }
        let (b, g) = loss_and_grad(params, ex, &cfg.loss_flags, &cfg.align, cfg.alpha)?;
        if !b.total.is_finite() {
            return Err(Error::NonFinite(format!("{domain} loss {b:?}")));
        }
        for (acc, v) in grads.values_mut().zip(g.values()) {
            *acc += scale * v;
        }
        mean = Some(match mean {
            None => scale_breakdown(&b, scale),
            Some(m) => add_breakdown(&m, &scale_breakdown(&b, scale)),
        });
    }
    Ok((mean.unwrap(), grads))
}

fn scale_breakdown(b: &LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        speech_simu: b.speech_simu * s,
        noise_simu: b.noise_simu * s,
        mixture_constraint: b.mixture_constraint * s,
        speech_real: b.speech_real * s,
        total: b.total * s,
        ..*b
    }
}

fn add_breakdown(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        speech_simu: a.speech_simu + b.speech_simu,
        noise_simu: a.noise_simu + b.noise_simu,
        mixture_constraint: a.mixture_constraint + b.mixture_constraint,
        speech_real: a.speech_real + b.speech_real,
        total: a.total + b.total,
        ..*a
    }
}

/// Gain applied to the noise so the mixture SNR rises by `shift_db`.
pub fn snr_shift_gain(shift_db: f64) -> f64 {
    10f64.powf(-shift_db / 20.0)
}

pub fn draw_snr_shift<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Speech plus noise rescaled so the SNR shifts by exactly `shift_db`.
pub fn snr_augment(speech: &Waveform, noise: &Waveform, shift_db: f64) -> Result<Waveform> {
    speech.check_compatible(noise)?;
    if speech.energy() == 0.0 {
        return Err(Error::ZeroSignal("speech".into()));
    }
    if noise.energy() == 0.0 {
        return Err(Error::ZeroSignal("noise".into()));
    }
    if !shift_db.is_finite() {
        return Err(Error::NonFinite("SNR shift".into()));
    }
    speech.add(&noise.scaled(snr_shift_gain(shift_db)))
}

/// Start offset of a random segment of `segment_len` samples; 0 if the
/// signal is not longer than a segment.
pub fn segment_start<R: Rng>(rng: &mut R, len: usize, segment_len: usize) -> usize {
    if len <= segment_len {
        0
    } else {
        rng.gen_range(0..=len - segment_len)
    }
}

/// `segment_len` samples starting at `start`, zero-padded past the end.
pub fn crop_or_pad(wave: &Waveform, start: usize, segment_len: usize) -> Waveform {
    let mut out = vec![0.0; segment_len];
    let src = wave.samples();
    let end = (start + segment_len).min(src.len());
    if start < end {
        out[..end - start].copy_from_slice(&src[start..end]);
    }
    Waveform::new(out, wave.sample_rate()).expect("finite input")
}

/// Endless seeded stream of `(domain, record index)` draws. Each domain is
/// visited in a reshuffled order, one full pass before any record repeats.
#[derive(Debug, Clone)]
pub struct CoLearningSchedule {
    rng: ChaCha8Rng,
    simu_prob: f64,
    simu: Cycler,
    real: Cycler,
}

#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

impl CoLearningSchedule {
    pub fn new(
        simu_len: usize,
        real_len: usize,
        ratio: Option<f64>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if simu_len + real_len == 0 {
            return Err(Error::InvalidConfig("both corpora are empty".into()));
        }
        let mut simu_prob = match ratio {
            Some(r) if (0.0..=1.0).contains(&r) => r,
            Some(r) => {
                return Err(Error::InvalidConfig(format!(
                    "simu ratio {r} outside [0, 1]"
                )))
            }
            None => simu_len as f64 / (simu_len + real_len) as f64,
        };
        if real_len == 0 {
            simu_prob = 1.0;
        } else if simu_len == 0 {
            simu_prob = 0.0;
        }
        Ok(Self {
            rng,
            simu_prob,
            simu: Cycler::new(simu_len),
            real: Cycler::new(real_len),
        })
    }

    pub fn simu_probability(&self) -> f64 {
        self.simu_prob
    }

    /// One domain draw followed by `size` records from that domain.
    pub fn next_batch(&mut self, size: usize) -> (Domain, Vec<usize>) {
        let (domain, first) = self.next().expect("endless stream");
        let mut batch = vec![first];
        for _ in 1..size {
            batch.push(match domain {
                Domain::Simu => self.simu.next(&mut self.rng),
                Domain::Real => self.real.next(&mut self.rng),
            });
        }
        (domain, batch)
    }
}

impl Iterator for CoLearningSchedule {
    type Item = (Domain, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let simu = self.rng.gen::<f64>() < self.simu_prob;
        Some(if simu {
            (Domain::Simu, self.simu.next(&mut self.rng))
        } else {
            (Domain::Real, self.real.next(&mut self.rng))
        })
    }
}
