//! The whole pipeline from one versioned configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::simulate::{simulate_corpus, SimCorpusConfig};
use super::stages::{
    derive_pseudo_labels, evaluate, evaluate_mixture, run_sync, train_ctpulse, train_ctse,
    train_model, ChannelPlan, EpochLog, SyncReport, TrainData,
};
use crate::error::{Error, Result};
use crate::loss::MetricsReport;
use crate::model::{save_checkpoint, ModelConfig, TrainConfig};
use crate::sync::SyncConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seeds the corpus and every training stage; overrides their own seeds.
    pub seed: u64,
    pub corpus: SimCorpusConfig,
    pub sync: SyncConfig,
    /// Far-field model; the close-talk enhancer is its monaural variant.
    pub model: ModelConfig,
    pub ctse_train: TrainConfig,
    pub ctpulse_train: TrainConfig,
    /// Also train the far-field model on simulated data alone, with the
    /// co-learning configuration and budget, for comparison.
    pub train_baseline: bool,
    /// 1-based microphone scored at evaluation.
    pub eval_channel: usize,
    /// Speaker reinforcement level for an extra evaluation pass.
    pub gamma_db: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            corpus: SimCorpusConfig::default(),
            sync: SyncConfig::default(),
            model: ModelConfig::default(),
            ctse_train: TrainConfig::default(),
            ctpulse_train: TrainConfig::default(),
            train_baseline: true,
            eval_channel: 1,
            gamma_db: None,
        }
    }
}

impl RunConfig {
    /// Copies the run seed into every component.
    pub fn seeded(mut self) -> Self {
        self.corpus.seed = self.seed;
        self.ctse_train.seed = self.seed;
        self.ctpulse_train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "config schema version {} is not {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.ctse_train.validate()?;
        self.ctpulse_train.validate()?;
        if self.model.sample_rate != self.corpus.sample_rate {
            return bad(format!(
                "model runs at {} Hz, corpus at {} Hz",
                self.model.sample_rate, self.corpus.sample_rate
            ));
        }
        if let Some(g) = self.gamma_db {
            if !g.is_finite() {
                return bad("gamma must be finite".into());
            }
        }
        self.channel_plan().check(&self.model)
    }

    pub fn channel_plan(&self) -> ChannelPlan {
        ChannelPlan {
            available: self.corpus.channels,
            front: self.corpus.front_channels(),
            eval_channel: self.eval_channel,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hex SHA-256 of the configuration's JSON.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(cfg)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvements {
    pub over_mixture_si_sdr_db: f64,
    pub over_baseline_si_sdr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub sync: SyncReport,
    pub ctse_history: Vec<EpochLog>,
    pub ctpulse_history: Vec<EpochLog>,
    pub baseline_history: Option<Vec<EpochLog>>,
    pub mixture: MetricsReport,
    pub ctpulse: MetricsReport,
    pub baseline: Option<MetricsReport>,
    pub ctpulse_reinforced: Option<MetricsReport>,
    pub improvements: Improvements,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Simulates a corpus, synchronizes its close-talk recordings, trains the
/// close-talk enhancer, derives pseudo-labels, co-trains the far-field model
/// and evaluates it. Everything lands under `out_dir`; `summary.json` holds
/// every metric.
pub fn run_all(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    let cfg = cfg.clone().seeded();
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("config.json"), &cfg)?;
    let corpus_dir = out_dir.join("corpus");
    let corpus = simulate_corpus(&cfg.corpus, &corpus_dir)?;

    let mut sync_reports = Vec::new();
    let mut synced = Vec::new();
    for (m, name) in [
        (&corpus.real_train, "real_train"),
        (&corpus.real_val, "real_val"),
        (&corpus.real_test, "real_test"),
    ] {
        let (s, report) = run_sync(m, &cfg.sync, &corpus_dir)?;
        s.write(&corpus_dir.join(format!("{name}.synced.jsonl")))?;
        sync_reports.push(report);
        synced.push(s);
    }
    let sync = merge_sync_reports(&sync_reports);

    let ctse = train_ctse(
        &corpus.simu_train,
        Some(&corpus.simu_val),
        &cfg.model,
        &cfg.ctse_train,
        cfg.corpus.channels,
    )?;
    save_checkpoint(&out_dir.join("ctse.ckpt"), &ctse.params, Some(&ctse.state))?;

    let real_train = derive_pseudo_labels(&ctse.params, &synced[0], &corpus_dir)?;
    let real_val = derive_pseudo_labels(&ctse.params, &synced[1], &corpus_dir)?;
    real_train.write(&corpus_dir.join("real_train.pseudo.jsonl"))?;
    real_val.write(&corpus_dir.join("real_val.pseudo.jsonl"))?;

    let plan = cfg.channel_plan();
    let data = TrainData {
        simu: &corpus.simu_train,
        real: Some(&real_train),
        simu_val: Some(&corpus.simu_val),
        real_val: Some(&real_val),
    };
    let ctpulse = train_ctpulse(&data, &cfg.model, &cfg.ctpulse_train, &plan)?;
    save_checkpoint(
        &out_dir.join("ctpulse.ckpt"),
        &ctpulse.params,
        Some(&ctpulse.state),
    )?;

    let baseline = if cfg.train_baseline {
        // Same number of steps as co-learning, all of them simulated.
        let budget = TrainConfig {
            steps_per_epoch: Some(
                cfg.ctpulse_train
                    .steps_per_epoch
                    .unwrap_or(corpus.simu_train.len() + real_train.len()),
            ),
            ..cfg.ctpulse_train.clone()
        };
        let simu_only = TrainData {
            simu: &corpus.simu_train,
            real: None,
            simu_val: Some(&corpus.simu_val),
            real_val: None,
        };
        let out = train_model("baseline", &cfg.model, &budget, &simu_only, &plan)?;
        save_checkpoint(
            &out_dir.join("baseline.ckpt"),
            &out.params,
            Some(&out.state),
        )?;
        Some(out)
    } else {
        None
    };

    let test = &corpus.real_test;
    let mixture = evaluate_mixture(test, cfg.eval_channel)?;
    let ctpulse_metrics = evaluate(&ctpulse.params, test, &plan, None)?;
    let baseline_metrics = baseline
        .as_ref()
        .map(|b| evaluate(&b.params, test, &plan, None))
        .transpose()?;
    let reinforced = cfg
        .gamma_db
        .map(|g| evaluate(&ctpulse.params, test, &plan, Some(g)))
        .transpose()?;

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash(&cfg)?,
        seed: cfg.seed,
        sync,
        ctse_history: ctse.history,
        ctpulse_history: ctpulse.history,
        baseline_history: baseline.map(|b| b.history),
        improvements: Improvements {
            over_mixture_si_sdr_db: ctpulse_metrics.mean_si_sdr_db - mixture.mean_si_sdr_db,
            over_baseline_si_sdr_db: baseline_metrics
                .as_ref()
                .map(|b| ctpulse_metrics.mean_si_sdr_db - b.mean_si_sdr_db),
        },
        mixture,
        ctpulse: ctpulse_metrics,
        baseline: baseline_metrics,
        ctpulse_reinforced: reinforced,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn merge_sync_reports(reports: &[SyncReport]) -> SyncReport {
    let scored: usize = reports.iter().map(|r| r.scored).sum();
    let error_sum: f64 = reports
        .iter()
        .filter_map(|r| r.mean_abs_error_ms.map(|e| e * r.scored as f64))
        .sum();
    SyncReport {
        records: reports.iter().map(|r| r.records).sum(),
        scored,
        within_one_ms: reports.iter().map(|r| r.within_one_ms).sum(),
        mean_abs_error_ms: (scored > 0).then(|| error_sum / scored as f64),
    }
}
