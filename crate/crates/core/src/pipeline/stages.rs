//! The three training stages and the data plumbing around them: synchronize
//! close-talk recordings, train the close-talk enhancer on simulated data,
//! turn close-talk recordings into pseudo-labels, co-train on simulated and
//! real data, and score far-field enhancement.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, MixtureRecord};
use super::substream;
use crate::dsp::{istft, stft, write_wav, Spectrogram, WavFormat, Waveform};
use crate::error::{Error, Result};
use crate::loss::{
    filtered_sdr, si_sdr, speaker_reinforcement, Domain, MetricsReport, UtteranceMetrics,
};
use crate::model::{
    crop_or_pad, draw_snr_shift, evaluate_loss, segment_start, snr_shift_gain, CoLearningSchedule,
    ModelConfig, ModelParams, TrainConfig, TrainExample, TrainState, Trainer,
};
use crate::sync::{synchronize_pair, SyncConfig};

/// Which far-field microphones feed the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    /// Far-field microphones in the corpus.
    pub available: usize,
    /// 1-based labels eligible for sampled subsets.
    pub front: Vec<usize>,
    /// 1-based microphone whose speech is scored at evaluation.
    pub eval_channel: usize,
}

impl ChannelPlan {
    pub fn all_front(available: usize, eval_channel: usize) -> Self {
        Self {
            available,
            front: (1..=available).collect(),
            eval_channel,
        }
    }

    pub fn check(&self, model: &ModelConfig) -> Result<()> {
        let c = model.input_channels;
        if c > self.available {
            return Err(Error::Validation(format!(
                "model takes {c} channels, corpus has {}",
                self.available
            )));
        }
        if c > 1 && c < self.available && self.front.len() < c {
            return Err(Error::Validation(format!(
                "{c}-channel subsets need {c} front microphones, have {}",
                self.front.len()
            )));
        }
        if self.eval_channel == 0 || self.eval_channel > self.available {
            return Err(Error::Validation(format!(
                "evaluation channel {} outside 1..={}",
                self.eval_channel, self.available
            )));
        }
        Ok(())
    }

    /// 0-based microphones in model input order; the model's reference
    /// channel is the scored/target microphone.
    fn arrange(&self, model: &ModelConfig, target: usize, others: Vec<usize>) -> Vec<usize> {
        let mut order: Vec<usize> = others.into_iter().filter(|&o| o != target).collect();
        order.truncate(model.input_channels - 1);
        order.insert(model.reference_channel - 1, target);
        order.into_iter().map(|c| c - 1).collect()
    }

    /// Channels for a training example.
    pub fn sample(&self, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let c = model.input_channels;
        if c == self.available {
            return (0..c).collect();
        }
        if c == 1 {
            return vec![rng.gen_range(0..self.available)];
        }
        let picked: Vec<usize> = self.front.choose_multiple(rng, c).copied().collect();
        self.arrange(model, picked[0], picked[1..].to_vec())
    }

    /// Fixed channels for validation and evaluation.
    pub fn fixed(&self, model: &ModelConfig) -> Vec<usize> {
        let c = model.input_channels;
        if c == self.available {
            return (0..c).collect();
        }
        let others: Vec<usize> = self
            .front
            .iter()
            .copied()
            .filter(|&f| f != self.eval_channel)
            .collect();
        self.arrange(model, self.eval_channel, others)
    }
}

/// 0-based target microphone of an input arrangement.
fn target_of(model: &ModelConfig, channels: &[usize]) -> usize {
    channels[model.reference_channel - 1]
}

fn load_channels(
    m: &CorpusManifest,
    paths: &[PathBuf],
    channels: &[usize],
) -> Result<Vec<Waveform>> {
    channels.iter().map(|&c| m.load(&paths[c])).collect()
}

fn oracle_of(r: &MixtureRecord) -> Result<&super::manifest::Oracle> {
    r.oracle
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("record {} has no oracle", r.id)))
}

fn crop_all(waves: &mut [Waveform], start: usize, len: Option<usize>) {
    if let Some(len) = len {
        for w in waves.iter_mut() {
            *w = crop_or_pad(w, start, len);
        }
    }
}

fn spectrograms(waves: &[Waveform], model: &ModelConfig) -> Result<Vec<Spectrogram>> {
    waves.iter().map(|w| stft(w, &model.stft)).collect()
}

/// A simulated example rebuilt from clean speech and noise, so the noise can
/// be rescaled; `segment` crops (or zero-pads) to a fixed length.
pub fn simu_example(
    m: &CorpusManifest,
    r: &MixtureRecord,
    model: &ModelConfig,
    channels: &[usize],
    snr_shift_db: f64,
    segment: Option<(usize, usize)>,
) -> Result<TrainExample> {
    let o = oracle_of(r)?;
    let mut clean = load_channels(m, &o.clean_paths, channels)?;
    let gain = snr_shift_gain(snr_shift_db);
    let mut noise: Vec<Waveform> = load_channels(m, &o.noise_paths, channels)?
        .into_iter()
        .map(|n| n.scaled(gain))
        .collect();
    if let Some((start, len)) = segment {
        crop_all(&mut clean, start, Some(len));
        crop_all(&mut noise, start, Some(len));
    }
    let mix: Vec<Waveform> = clean
        .iter()
        .zip(&noise)
        .map(|(s, v)| s.add(v))
        .collect::<Result<_>>()?;
    let q = model.reference_channel - 1;
    Ok(TrainExample::Simu {
        inputs: spectrograms(&mix, model)?,
        speech: stft(&clean[q], &model.stft)?,
        noise: stft(&noise[q], &model.stft)?,
    })
}

pub fn real_example(
    m: &CorpusManifest,
    r: &MixtureRecord,
    model: &ModelConfig,
    channels: &[usize],
    segment: Option<(usize, usize)>,
) -> Result<TrainExample> {
    let pseudo_path = r
        .pseudo_label_path
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("record {} has no pseudo-label", r.id)))?;
    let mut far = load_channels(m, &r.far_field_paths, channels)?;
    let mut pseudo = vec![m.load(pseudo_path)?];
    if let Some((start, len)) = segment {
        crop_all(&mut far, start, Some(len));
        crop_all(&mut pseudo, start, Some(len));
    }
    Ok(TrainExample::Real {
        inputs: spectrograms(&far, model)?,
        pseudo_label: stft(&pseudo[0], &model.stft)?,
    })
}

fn record_len(m: &CorpusManifest, r: &MixtureRecord) -> Result<usize> {
    Ok(m.load(&r.far_field_paths[0])?.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the last ones without validation data).
    pub params: ModelParams,
    pub state: TrainState,
    pub history: Vec<EpochLog>,
}

/// Training data for one model.
pub struct TrainData<'a> {
    pub simu: &'a CorpusManifest,
    pub real: Option<&'a CorpusManifest>,
    pub simu_val: Option<&'a CorpusManifest>,
    pub real_val: Option<&'a CorpusManifest>,
}

fn validation_examples(
    data: &TrainData,
    model: &ModelConfig,
    plan: &ChannelPlan,
) -> Result<Vec<TrainExample>> {
    let channels = plan.fixed(model);
    let mut out = Vec::new();
    if let Some(m) = data.simu_val {
        for r in &m.records {
            out.push(simu_example(m, r, model, &channels, 0.0, None)?);
        }
    }
    if let (Some(m), Some(_)) = (data.real_val, data.real) {
        for r in m.records.iter().filter(|r| r.pseudo_label_path.is_some()) {
            out.push(real_example(m, r, model, &channels, None)?);
        }
    }
    Ok(out)
}

/// Mean loss over validation examples, averaged per domain and then summed.
fn validation_loss(
    params: &ModelParams,
    examples: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut sums = [(0.0, 0usize); 2];
    for ex in examples {
        let b = evaluate_loss(params, ex, &cfg.loss_flags, &cfg.align, cfg.alpha)?;
        let slot = &mut sums[(ex.domain() == Domain::Real) as usize];
        slot.0 += b.total;
        slot.1 += 1;
    }
    Ok(Some(
        sums.iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| s / *n as f64)
            .sum(),
    ))
}

/// Trains a model from scratch with co-learning over `data`. `tag` names the
/// random sub-streams so different stages draw independently.
pub fn train_model(
    tag: &str,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    plan: &ChannelPlan,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    plan.check(model)?;
    let real_len = data.real.map_or(0, |m| m.len());
    if let Some(real) = data.real {
        if let Some(r) = real.records.iter().find(|r| r.pseudo_label_path.is_none()) {
            return Err(Error::Validation(format!(
                "real record {} has no pseudo-label",
                r.id
            )));
        }
    }
    let params = ModelParams::init(model, &mut substream(cfg.seed, &format!("{tag}/init")))?;
    let mut trainer = Trainer::new(params, cfg.clone())?;
    let mut schedule = CoLearningSchedule::new(
        data.simu.len(),
        real_len,
        cfg.simu_ratio,
        substream(cfg.seed, &format!("{tag}/schedule")),
    )?;
    let mut aug = substream(cfg.seed, &format!("{tag}/augmentation"));
    let segment_len = (cfg.segment_seconds * model.sample_rate as f64).round() as usize;
    let val = validation_examples(data, model, plan)?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or(data.simu.len() + real_len)
        .max(1);

    let mut best: Option<(f64, ModelParams)> = None;
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let (domain, indices) = schedule.next_batch(cfg.batch_size);
            let mut batch = Vec::with_capacity(indices.len());
            for i in indices {
                let channels = plan.sample(model, &mut aug);
                batch.push(match domain {
                    Domain::Simu => {
                        let r = &data.simu.records[i];
                        let shift = if cfg.snr_augmentation {
                            draw_snr_shift(&mut aug, cfg.snr_aug_range)
                        } else {
                            0.0
                        };
                        let len = record_len(data.simu, r)?;
                        let start = segment_start(&mut aug, len, segment_len);
                        simu_example(
                            data.simu,
                            r,
                            model,
                            &channels,
                            shift,
                            Some((start, segment_len)),
                        )?
                    }
                    Domain::Real => {
                        let m = data.real.expect("real draws need a real corpus");
                        let r = &m.records[i];
                        let start = segment_start(&mut aug, record_len(m, r)?, segment_len);
                        real_example(m, r, model, &channels, Some((start, segment_len)))?
                    }
                });
            }
            let b = trainer.step(&batch, domain).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{tag} epoch {epoch} step {}: {what}",
                    trainer.state.step
                )),
                other => other,
            })?;
            total += b.total;
        }
        let val_loss = validation_loss(&trainer.params, &val, cfg)?;
        history.push(EpochLog {
            epoch,
            steps,
            mean_train_loss: total / steps as f64,
            val_loss,
            learning_rate: trainer.state.learning_rate,
        });
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, trainer.params.clone()));
            }
            trainer.end_epoch(v);
        } else {
            trainer.state.epoch += 1;
        }
    }
    let params = best
        .map(|(_, p)| p)
        .unwrap_or_else(|| trainer.params.clone());
    Ok(TrainOutcome {
        params,
        state: trainer.state,
        history,
    })
}

/// The monaural model configuration used for the close-talk enhancer.
pub fn monaural(model: &ModelConfig) -> ModelConfig {
    ModelConfig {
        input_channels: 1,
        reference_channel: 1,
        ..model.clone()
    }
}

/// Step (a): a monaural enhancer trained on simulated far-field channels.
pub fn train_ctse(
    simu: &CorpusManifest,
    simu_val: Option<&CorpusManifest>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    available_channels: usize,
) -> Result<TrainOutcome> {
    let data = TrainData {
        simu,
        real: None,
        simu_val,
        real_val: None,
    };
    let plan = ChannelPlan::all_front(available_channels, 1);
    train_model("ctse", &monaural(model), cfg, &data, &plan)
}

/// Step (c): co-learning on simulated data and pseudo-labelled real data.
pub fn train_ctpulse(
    data: &TrainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    plan: &ChannelPlan,
) -> Result<TrainOutcome> {
    train_model("ctpulse", model, cfg, data, plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub records: usize,
    /// Records with a known expected delay.
    pub scored: usize,
    pub within_one_ms: usize,
    pub mean_abs_error_ms: Option<f64>,
}

/// Estimates each real record's close-talk delay, writes the aligned
/// close-talk under `out_dir` and points the record at it.
pub fn run_sync(
    manifest: &CorpusManifest,
    cfg: &SyncConfig,
    out_dir: &Path,
) -> Result<(CorpusManifest, SyncReport)> {
    let mut out = manifest.clone();
    let mut errors = Vec::new();
    for r in out.records.iter_mut() {
        let Some(close_path) = r.close_talk_path.clone() else {
            continue;
        };
        let close = manifest.load(&close_path)?;
        let far = load_channels(
            manifest,
            &r.far_field_paths,
            &(0..r.num_channels()).collect::<Vec<_>>(),
        )?;
        let outcome = synchronize_pair(&close, &far, cfg)?;
        let full = out_dir.join("synced").join(format!("{}_close.wav", r.id));
        write_wav(&full, &outcome.aligned, WavFormat::Float32)?;
        r.close_talk_path = Some(relative_to(&full, &manifest.base_dir));
        r.sync_delay_ms = Some(outcome.delay_ms);
        if let Some(o) = &r.oracle {
            if r.domain == Domain::Real {
                errors.push((outcome.delay_ms - o.expected_sync_ms).abs());
            }
        }
    }
    let report = SyncReport {
        records: out
            .records
            .iter()
            .filter(|r| r.sync_delay_ms.is_some())
            .count(),
        scored: errors.len(),
        within_one_ms: errors.iter().filter(|&&e| e <= 1.0 + 1e-9).count(),
        mean_abs_error_ms: (!errors.is_empty())
            .then(|| errors.iter().sum::<f64>() / errors.len() as f64),
    };
    Ok((out, report))
}

/// `path` relative to `base` when it lies below it, otherwise absolute.
pub fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base)
        .map(Path::to_owned)
        .unwrap_or_else(|_| path.to_owned())
}

/// Step (b): enhances each real record's close-talk recording with the
/// monaural enhancer and stores the result as that record's pseudo-label.
pub fn derive_pseudo_labels(
    ctse: &ModelParams,
    manifest: &CorpusManifest,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    if ctse.config().input_channels != 1 {
        return Err(Error::Validation(
            "the close-talk enhancer must be monaural".into(),
        ));
    }
    let mut out = manifest.clone();
    for r in out.records.iter_mut() {
        let Some(close_path) = &r.close_talk_path else {
            continue;
        };
        let close = manifest.load(close_path)?;
        let pseudo = enhance(ctse, &[close])?;
        let full = out_dir.join("pseudo").join(format!("{}.wav", r.id));
        write_wav(&full, &pseudo, WavFormat::Float32)?;
        r.pseudo_label_path = Some(relative_to(&full, &manifest.base_dir));
    }
    Ok(out)
}

/// Speech estimate of the model's reference channel.
pub fn enhance(params: &ModelParams, inputs: &[Waveform]) -> Result<Waveform> {
    let specs = spectrograms(inputs, params.config())?;
    istft(&params.forward(&specs)?.speech)
}

/// SI-SDR and filter-adjusted SDR of the model output at the evaluation
/// channel against the oracle clean speech there, optionally after speaker
/// reinforcement at `gamma_db`.
pub fn evaluate(
    params: &ModelParams,
    manifest: &CorpusManifest,
    plan: &ChannelPlan,
    gamma_db: Option<f64>,
) -> Result<MetricsReport> {
    let model = params.config();
    plan.check(model)?;
    let channels = plan.fixed(model);
    let target = target_of(model, &channels);
    let mut utterances = Vec::new();
    for r in &manifest.records {
        let o = oracle_of(r)?;
        let inputs = load_channels(manifest, &r.far_field_paths, &channels)?;
        let mut est = enhance(params, &inputs)?;
        if let Some(g) = gamma_db {
            est = speaker_reinforcement(&est, &inputs[model.reference_channel - 1], g)?;
        }
        let clean = manifest.load(&o.clean_paths[target])?;
        utterances.push(UtteranceMetrics {
            id: r.id.clone(),
            si_sdr_db: si_sdr(&est, &clean)?,
            sdr_db: filtered_sdr(&est, &clean)?,
        });
    }
    Ok(MetricsReport::from_utterances(utterances))
}

/// Scores of the unprocessed mixture at the evaluation channel.
pub fn evaluate_mixture(manifest: &CorpusManifest, eval_channel: usize) -> Result<MetricsReport> {
    let mut utterances = Vec::new();
    for r in &manifest.records {
        let o = oracle_of(r)?;
        let c = eval_channel - 1;
        let mix = manifest.load(&r.far_field_paths[c])?;
        let clean = manifest.load(&o.clean_paths[c])?;
        utterances.push(UtteranceMetrics {
            id: r.id.clone(),
            si_sdr_db: si_sdr(&mix, &clean)?,
            sdr_db: filtered_sdr(&mix, &clean)?,
        });
    }
    Ok(MetricsReport::from_utterances(utterances))
}
