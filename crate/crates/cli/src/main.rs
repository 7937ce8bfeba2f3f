use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pulseforge_core::align::{apply_td_filter, estimate_td_wiener, residual_energy};
use pulseforge_core::dsp::{istft, read_wav, stft, Waveform};
use pulseforge_core::loss::{align_estimate, estimate_alignment, AlignMode, LossFlags};
use pulseforge_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use pulseforge_core::pipeline::{
    derive_pseudo_labels, evaluate, monaural, run_all, run_sync, simulate_corpus, train_ctpulse,
    train_ctse, CorpusManifest, RunConfig, TrainData, TrainOutcome,
};

/// Far-field speech enhancement with close-talk pseudo-labels.
#[derive(Parser)]
#[command(name = "pulseforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Far-field channels fed to the model.
    #[arg(long, value_parser = ["1", "2", "6"])]
    channels: Option<String>,
    /// `full`, `speech`, or a comma list of simu-noise, simu-mixture, real-mixture.
    #[arg(long)]
    loss_flags: Option<String>,
    /// `fcp`, `fcp:<I>,<J>` or `td:<K>`.
    #[arg(long)]
    align: Option<String>,
    /// Weight of simulated batches.
    #[arg(long)]
    alpha: Option<f64>,
    /// Speaker reinforcement level in dB.
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifests.
    Simulate(Common),
    /// Align close-talk recordings to the far-field array.
    Sync {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the monaural close-talk enhancer on simulated data.
    TrainCtse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Enhance close-talk recordings into pseudo-labels.
    DeriveLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Co-train the far-field model on simulated and pseudo-labelled real data.
    TrainCtpulse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        simu: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        simu_val: Option<PathBuf>,
        #[arg(long)]
        real_val: Option<PathBuf>,
    },
    /// Score a checkpoint against oracle clean speech.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Every stage from simulation to evaluation.
    RunAll(Common),
    /// Residual energy of an estimate against a target before and after alignment.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
}

/// Errors caused by bad input rather than the environment.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Invalid>()
            || c.downcast_ref::<pulseforge_core::Error>()
                .is_some_and(|e| e.is_validation())
    })
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| invalid(format!("bad config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(ch) = &c.channels {
        cfg.model.input_channels = ch.parse().expect("checked by clap");
        cfg.model.reference_channel = 1;
    }
    if let Some(f) = &c.loss_flags {
        let flags: LossFlags = f.parse()?;
        cfg.ctse_train.loss_flags = flags;
        cfg.ctpulse_train.loss_flags = flags;
    }
    if let Some(a) = &c.align {
        cfg.ctpulse_train.align = a.parse()?;
    }
    if let Some(a) = c.alpha {
        cfg.ctse_train.alpha = a;
        cfg.ctpulse_train.alpha = a;
    }
    if c.gamma.is_some() {
        cfg.gamma_db = c.gamma;
    }
    let cfg = cfg.seeded();
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn print(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Creates `dir` and returns it as an absolute path, so paths written into
/// manifests do not depend on the working directory.
fn create(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(std::path::absolute(dir)?)
}

fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    Ok(CorpusManifest::read(&std::path::absolute(path)?)?)
}

fn stem(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("manifest");
    name.strip_suffix(".jsonl").unwrap_or(name).to_owned()
}

fn channels_of(m: &CorpusManifest) -> Result<usize> {
    match m.records.first() {
        Some(r) => Ok(r.num_channels()),
        None => bail!(invalid("manifest has no records")),
    }
}

fn save_model(out: &Path, name: &str, t: &TrainOutcome) -> Result<serde_json::Value> {
    let path = out.join(format!("{name}.ckpt"));
    save_checkpoint(&path, &t.params, Some(&t.state))?;
    let report = json!({ "checkpoint": path, "history": t.history });
    write_json(&out.join(format!("{name}.history.json")), &report)?;
    Ok(report)
}

fn load_model(path: &Path) -> Result<ModelParams> {
    Ok(load_checkpoint(path)?.params)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = load_config(&c)?;
            let corpus = simulate_corpus(&cfg.corpus, &c.out)?;
            let counts: Vec<_> = corpus.manifests().iter().map(|m| m.len()).collect();
            print(
                &json!({ "out": c.out, "manifests": pulseforge_core::pipeline::SimulatedCorpus::FILES, "records": counts }),
            )
        }
        Command::Sync { common, manifest } => {
            let cfg = load_config(&common)?;
            let out = create(&common.out)?;
            let m = read_manifest(&manifest)?;
            let (mut synced, report) = run_sync(&m, &cfg.sync, &out)?;
            synced.rebase(&out);
            let path = out.join(format!("{}.synced.jsonl", stem(&manifest)));
            synced.write(&path)?;
            let utterances: Vec<_> = synced
                .records
                .iter()
                .filter_map(|r| {
                    r.sync_delay_ms.map(|d| {
                        json!({
                            "id": r.id,
                            "delay_ms": d,
                            "expected_ms": r.oracle.as_ref().map(|o| o.expected_sync_ms),
                        })
                    })
                })
                .collect();
            let value = json!({ "manifest": path, "summary": report, "utterances": utterances });
            write_json(&out.join("sync_report.json"), &value)?;
            print(&value)
        }
        Command::TrainCtse {
            common,
            manifest,
            val,
        } => {
            let cfg = load_config(&common)?;
            let out = create(&common.out)?;
            let simu = read_manifest(&manifest)?;
            let val = val.as_deref().map(read_manifest).transpose()?;
            let t = train_ctse(
                &simu,
                val.as_ref(),
                &cfg.model,
                &cfg.ctse_train,
                channels_of(&simu)?,
            )?;
            print(&save_model(&out, "ctse", &t)?)
        }
        Command::DeriveLabels {
            common,
            checkpoint,
            manifest,
        } => {
            let out = create(&common.out)?;
            let params = load_model(&checkpoint)?;
            let m = read_manifest(&manifest)?;
            let mut labelled = derive_pseudo_labels(&params, &m, &out)?;
            labelled.rebase(&out);
            let path = out.join(format!("{}.pseudo.jsonl", stem(&manifest)));
            labelled.write(&path)?;
            let n = labelled
                .records
                .iter()
                .filter(|r| r.pseudo_label_path.is_some())
                .count();
            print(&json!({ "manifest": path, "pseudo_labels": n }))
        }
        Command::TrainCtpulse {
            common,
            simu,
            real,
            simu_val,
            real_val,
        } => {
            let cfg = load_config(&common)?;
            let out = create(&common.out)?;
            let simu = read_manifest(&simu)?;
            let real = read_manifest(&real)?;
            let simu_val = simu_val.as_deref().map(read_manifest).transpose()?;
            let real_val = real_val.as_deref().map(read_manifest).transpose()?;
            let mut plan = cfg.channel_plan();
            plan.available = channels_of(&simu)?;
            plan.front.retain(|&c| c <= plan.available);
            let data = TrainData {
                simu: &simu,
                real: Some(&real),
                simu_val: simu_val.as_ref(),
                real_val: real_val.as_ref(),
            };
            let t = train_ctpulse(&data, &cfg.model, &cfg.ctpulse_train, &plan)?;
            print(&save_model(&out, "ctpulse", &t)?)
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
        } => {
            let cfg = load_config(&common)?;
            let out = create(&common.out)?;
            let params = load_model(&checkpoint)?;
            let m = read_manifest(&manifest)?;
            let mut plan = cfg.channel_plan();
            plan.available = channels_of(&m)?;
            plan.front.retain(|&c| c <= plan.available);
            if params.config().input_channels == 1 && plan.available == 1 {
                plan.eval_channel = 1;
            }
            let report = evaluate(&params, &m, &plan, cfg.gamma_db)?;
            let value = serde_json::to_value(&report)?;
            write_json(&out.join("metrics.json"), &value)?;
            print(&value)
        }
        Command::RunAll(c) => {
            let cfg = load_config(&c)?;
            let summary = run_all(&cfg, &c.out)?;
            print(&serde_json::to_value(&summary)?)
        }
        Command::Align {
            common,
            estimate,
            target,
        } => {
            let cfg = load_config(&common)?;
            let mono = |p: &Path| -> Result<Waveform> {
                let mut chans = read_wav(p)?;
                if chans.len() != 1 {
                    bail!(invalid(format!("{} must be mono", p.display())));
                }
                Ok(chans.remove(0))
            };
            let est = mono(&estimate)?;
            let target = mono(&target)?;
            est.check_compatible(&target)?;
            let before = residual_energy(est.samples(), target.samples());
            let mode = cfg.ctpulse_train.align;
            let aligned = match mode {
                AlignMode::TdWiener { half_len, ridge } => {
                    let h = estimate_td_wiener(&est, &target, half_len, ridge)?;
                    apply_td_filter(&est, &h)
                }
                AlignMode::Fcp { .. } => {
                    let stft_cfg = monaural(&cfg.model).stft;
                    let (e, t) = (stft(&est, &stft_cfg)?, stft(&target, &stft_cfg)?);
                    istft(&align_estimate(&e, &estimate_alignment(&e, &t, &mode)?)?)?
                }
            };
            let after = residual_energy(aligned.samples(), target.samples());
            print(&json!({
                "align": mode,
                "target_energy": target.energy(),
                "residual_before": before,
                "residual_after": after,
            }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
