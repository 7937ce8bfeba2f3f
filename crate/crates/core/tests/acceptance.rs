//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! for each and exits non-zero if any fails. Tolerances are pinned below.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use pulseforge_core::align::{
    apply_td_filter, estimate_fcp_filter, estimate_td_wiener, fcp_objective, fcp_optimality_gap,
    residual_energy, FcpTapGeometry, Ridge,
};
use pulseforge_core::dsp::{istft, stft, Spectrogram, StftConfig, Waveform};
use pulseforge_core::loss::{loss_speech_real, speaker_reinforcement, AlignMode, LossFlags};
use pulseforge_core::model::{ModelConfig, Optimizer, TrainConfig, TrainExample};
use pulseforge_core::pipeline::{
    run_all, run_sync, simulate_corpus, substream, synth_speech, RunConfig, SimCorpusConfig,
    SplitCounts,
};
use pulseforge_core::sync::SyncConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck;

const STFT_MAX_ERROR: f64 = 1e-6;
const STFT_SIGNALS: usize = 100;
const STFT_BUDGET: Duration = Duration::from_secs(5);

const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const GRADIENT_MAX_PARAMS: usize = 1000;

const FCP_INSTANCES: usize = 50;
const FCP_OBJECTIVE_REL: f64 = 1e-6;
const FCP_MAX_GAP: f64 = 1e-8;

const WIENER_HALF_LENGTHS: [usize; 3] = [16, 64, 256];
const WIENER_RESIDUAL_REL: f64 = 1e-8;
/// Every other tap must be below this fraction of the injected gain.
const WIENER_SIDE_TAP_REL: f64 = 1e-6;

const SYNC_PAIRS: usize = 200;
const SYNC_TOLERANCE_MS: f64 = 1.0;
const SYNC_MIN_FRACTION: f64 = 0.95;
const SYNC_BUDGET: Duration = Duration::from_secs(120);

const ALIGN_DELAY: i64 = 3;
const ALIGN_TD_MAX_LOSS: f64 = 1e-6;

const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_MIN_SEEDS: usize = 2;
const E2E_OVER_MIXTURE_DB: f64 = 3.0;
const E2E_OVER_BASELINE_DB: f64 = 1.0;
const E2E_BUDGET: Duration = Duration::from_secs(30 * 60);

const REINFORCEMENT_LEVELS_DB: [f64; 2] = [0.0, 10.0];
const REINFORCEMENT_TOL_DB: f64 = 1e-9;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn white(rng: &mut ChaCha8Rng, len: usize, sample_rate: u32) -> Waveform {
    Waveform::new(
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        sample_rate,
    )
    .unwrap()
}

fn stft_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..STFT_SIGNALS {
        let len = rng.gen_range(2_000..20_000);
        let x = white(&mut rng, len, 16_000);
        let y = istft(&stft(&x, &StftConfig::enhancement()).unwrap()).unwrap();
        assert_eq!(y.len(), x.len());
        worst = worst.max(max_abs_diff(x.samples(), y.samples()));
    }
    let t = start.elapsed();
    outcome(
        worst < STFT_MAX_ERROR && t < STFT_BUDGET,
        format!(
            "{STFT_SIGNALS} signals, max error {worst:.2e}, {:.2} s",
            t.as_secs_f64()
        ),
    )
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = gradcheck::tiny();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = gradcheck::params(&cfg, &mut rng);
        let simu = TrainExample::Simu {
            inputs: vec![gradcheck::spec(&cfg, &mut rng, 0.5, 1.0)],
            speech: gradcheck::spec(&cfg, &mut rng, 1.0, 2.0),
            noise: gradcheck::spec(&cfg, &mut rng, 1.0, 2.0),
        };
        let real = TrainExample::Real {
            inputs: vec![gradcheck::spec(&cfg, &mut rng, 0.5, 1.0)],
            pseudo_label: gradcheck::spec(&cfg, &mut rng, 1.0, 2.0),
        };
        let err =
            gradcheck::worst_relative_error(&p, &simu, &LossFlags::FULL, &AlignMode::default());
        worst = worst.max(err);
        checks += 1;
        for align in gradcheck::aligns() {
            worst = worst.max(gradcheck::worst_relative_error(
                &p,
                &real,
                &LossFlags::FULL,
                &align,
            ));
            checks += 1;
        }
    }
    let t = start.elapsed();
    let n = cfg.param_count();
    outcome(
        worst < gradcheck::TOLERANCE && n <= GRADIENT_MAX_PARAMS && t < GRADIENT_BUDGET,
        format!(
            "{checks} loss/instance pairs on {n} parameters, worst relative error {worst:.2e}, {:.1} s",
            t.as_secs_f64()
        ),
    )
}

/// Conjugate gradient on the least-squares normal form `min |b - A c|^2`,
/// working from the tap columns directly.
fn cgls(a: &[Vec<Complex64>], b: &[Complex64]) -> Vec<Complex64> {
    let cols = a.len();
    let rows = b.len();
    let apply = |c: &[Complex64]| -> Vec<Complex64> {
        (0..rows)
            .map(|t| (0..cols).map(|i| a[i][t] * c[i]).sum())
            .collect()
    };
    let adjoint = |r: &[Complex64]| -> Vec<Complex64> {
        (0..cols)
            .map(|i| (0..rows).map(|t| a[i][t].conj() * r[t]).sum())
            .collect()
    };
    let mut c = vec![Complex64::new(0.0, 0.0); cols];
    let mut r = b.to_vec();
    let mut s = adjoint(&r);
    let mut p = s.clone();
    let mut gamma: f64 = s.iter().map(|v| v.norm_sqr()).sum();
    for _ in 0..200 {
        if gamma < 1e-30 {
            break;
        }
        let q = apply(&p);
        let alpha = gamma / q.iter().map(|v| v.norm_sqr()).sum::<f64>();
        for i in 0..cols {
            c[i] += p[i] * alpha;
        }
        for t in 0..rows {
            r[t] -= q[t] * alpha;
        }
        s = adjoint(&r);
        let next: f64 = s.iter().map(|v| v.norm_sqr()).sum();
        for i in 0..cols {
            p[i] = s[i] + p[i] * (next / gamma);
        }
        gamma = next;
    }
    c
}

fn fcp_closed_form() -> Outcome {
    // 32 ms window and 16 ms hop at 1 kHz: 17 bins; 96 samples give 8 frames.
    let cfg = StftConfig {
        window_ms: 32.0,
        hop_ms: 16.0,
        window: Default::default(),
    };
    let geom = FcpTapGeometry::new(2, 1).unwrap();
    let offsets = [-1i64, 0, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let random = |rng: &mut ChaCha8Rng| {
        let z = Spectrogram::zeros(cfg, 1_000, 96).unwrap();
        z.with_data(
            z.data()
                .mapv(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
        )
    };
    let (mut worst_rel, mut worst_gap) = (0.0f64, 0.0f64);
    let mut shape = (0, 0);
    for _ in 0..FCP_INSTANCES {
        let est = random(&mut rng);
        let target = random(&mut rng);
        let (frames, bins) = est.data().dim();
        shape = (frames, bins);
        let filt = estimate_fcp_filter(&est, &target, &geom, Ridge::NONE).unwrap();
        let closed = fcp_objective(&est, &target, &filt, 0.0).unwrap();
        worst_gap = worst_gap.max(fcp_optimality_gap(&est, &target, &filt, 0.0));
        for (f, &closed_f) in closed.iter().enumerate() {
            let cols: Vec<Vec<Complex64>> = offsets
                .iter()
                .map(|&o| {
                    (0..frames as i64)
                        .map(|t| {
                            let s = t + o;
                            if s < 0 || s >= frames as i64 {
                                Complex64::new(0.0, 0.0)
                            } else {
                                est.data()[[s as usize, f]]
                            }
                        })
                        .collect()
                })
                .collect();
            let b: Vec<Complex64> = (0..frames).map(|t| target.data()[[t, f]]).collect();
            let c = cgls(&cols, &b);
            let oracle: f64 = (0..frames)
                .map(|t| {
                    let fit: Complex64 = (0..3).map(|i| cols[i][t] * c[i]).sum();
                    (b[t] - fit).norm_sqr()
                })
                .sum();
            worst_rel = worst_rel.max((closed_f - oracle).abs() / oracle.max(1e-300));
        }
    }
    outcome(
        worst_rel < FCP_OBJECTIVE_REL && worst_gap <= FCP_MAX_GAP,
        format!(
            "{FCP_INSTANCES} instances of {}x{} with 2 past and 1 future tap, objective rel err {worst_rel:.2e}, gradient {worst_gap:.2e}",
            shape.0, shape.1
        ),
    )
}

fn wiener_delay_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut worst_res, mut worst_side, mut wrong_lag, mut cases) = (0.0f64, 0.0f64, 0, 0);
    for &k in &WIENER_HALF_LENGTHS {
        let ki = k as i64;
        let mut delays = vec![-ki, -1, 0, 1, ki];
        delays.extend((0..5).map(|_| rng.gen_range(-ki..=ki)));
        for d in delays {
            let gain = rng.gen_range(0.25..2.0);
            let x = white(&mut rng, 4_000, 16_000);
            let target: Vec<f64> = (0..x.len() as i64)
                .map(|n| {
                    let s = n - d;
                    if s < 0 || s >= x.len() as i64 {
                        0.0
                    } else {
                        gain * x.samples()[s as usize]
                    }
                })
                .collect();
            let target = Waveform::new(target, 16_000).unwrap();
            let h = estimate_td_wiener(&x, &target, k, Ridge::td_default()).unwrap();
            cases += 1;
            if h.dominant_lag() != d {
                wrong_lag += 1;
            }
            let side = (-ki..=ki)
                .filter(|&l| l != d)
                .map(|l| h.tap(l).abs())
                .fold(0.0, f64::max);
            worst_side = worst_side.max(side / gain);
            let res = residual_energy(apply_td_filter(&x, &h).samples(), target.samples());
            worst_res = worst_res.max(res / target.energy());
        }
    }
    outcome(
        wrong_lag == 0 && worst_res < WIENER_RESIDUAL_REL && worst_side < WIENER_SIDE_TAP_REL,
        format!(
            "{cases} delays over K in {WIENER_HALF_LENGTHS:?}, {wrong_lag} wrong lags, residual/energy {worst_res:.2e}, side/gain {worst_side:.2e}"
        ),
    )
}

fn synchronization(scratch: &Path) -> Outcome {
    let cfg = SimCorpusConfig {
        counts: SplitCounts {
            simu_train: 0,
            simu_val: 0,
            real_train: SYNC_PAIRS,
            real_val: 0,
            real_test: 0,
        },
        seed: 51,
        ..SimCorpusConfig::default()
    };
    let dir = scratch.join("sync");
    let corpus = simulate_corpus(&cfg, &dir).unwrap();
    let start = Instant::now();
    let (_, report) = run_sync(&corpus.real_train, &SyncConfig::default(), &dir).unwrap();
    let t = start.elapsed();
    let max_offset = corpus
        .real_train
        .records
        .iter()
        .map(|r| r.oracle.as_ref().unwrap().injected_offset_ms.abs())
        .fold(0.0, f64::max);
    let fraction = report.within_one_ms as f64 / report.scored as f64;
    outcome(
        report.scored == SYNC_PAIRS && fraction >= SYNC_MIN_FRACTION && t < SYNC_BUDGET,
        format!(
            "{}/{} pairs within {SYNC_TOLERANCE_MS} ms (largest offset {max_offset:.1} ms), mean error {:.2} ms, {:.1} s",
            report.within_one_ms,
            report.scored,
            report.mean_abs_error_ms.unwrap_or(f64::NAN),
            t.as_secs_f64()
        ),
    )
}

fn alignment_invariance() -> Outcome {
    let sr = 16_000;
    let mut speech = vec![0.0; 200];
    speech.extend(synth_speech(&mut substream(61, "speech"), sr as usize, sr));
    speech.extend(vec![0.0; 200]);
    let pseudo = Waveform::new(speech, sr).unwrap();
    let delayed: Vec<f64> = (0..pseudo.len())
        .map(|n| {
            let s = n as i64 - ALIGN_DELAY;
            if s < 0 {
                0.0
            } else {
                0.5 * pseudo.samples()[s as usize]
            }
        })
        .collect();
    let est = Waveform::new(delayed, sr).unwrap();
    let cfg = StftConfig::enhancement();
    let (est, pseudo) = (stft(&est, &cfg).unwrap(), stft(&pseudo, &cfg).unwrap());
    let td = loss_speech_real(&est, &pseudo, &"td:64".parse().unwrap()).unwrap();
    let one_tap = AlignMode::Fcp {
        geometry: FcpTapGeometry::new(1, 0).unwrap(),
        ridge: Ridge::fcp_default(),
    };
    let fcp = loss_speech_real(&est, &pseudo, &one_tap).unwrap();
    outcome(
        td < ALIGN_TD_MAX_LOSS && fcp > td,
        format!("{ALIGN_DELAY}-sample delay at half gain: time-domain K=64 loss {td:.2e}, 1-tap FCP loss {fcp:.2e}"),
    )
}

/// Training setup for the end-to-end comparison, sized for one CPU core.
fn e2e_config(seed: u64) -> RunConfig {
    let sample_rate = 8_000;
    let train = TrainConfig {
        optimizer: Optimizer::ADAM,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    RunConfig {
        seed,
        corpus: SimCorpusConfig {
            sample_rate,
            counts: SplitCounts {
                simu_train: 200,
                simu_val: 20,
                real_train: 100,
                real_val: 10,
                real_test: 50,
            },
            ..SimCorpusConfig::default()
        },
        model: ModelConfig {
            input_channels: 1,
            sample_rate,
            ..ModelConfig::default()
        },
        ctse_train: train.clone(),
        ctpulse_train: train,
        train_baseline: true,
        ..RunConfig::default()
    }
}

fn end_to_end(scratch: &Path) -> Outcome {
    let start = Instant::now();
    let mut passing = 0;
    let mut per_seed = Vec::new();
    for seed in E2E_SEEDS {
        let s = run_all(&e2e_config(seed), &scratch.join(format!("e2e_{seed}"))).unwrap();
        let over_mix = s.improvements.over_mixture_si_sdr_db;
        let over_base = s.improvements.over_baseline_si_sdr_db.unwrap();
        if over_mix >= E2E_OVER_MIXTURE_DB && over_base >= E2E_OVER_BASELINE_DB {
            passing += 1;
        }
        per_seed.push(format!(
            "seed {seed}: {:.2} dB (+{over_mix:.2} vs mixture, {over_base:+.2} vs simu-only)",
            s.ctpulse.mean_si_sdr_db
        ));
    }
    let t = start.elapsed();
    outcome(
        passing >= E2E_MIN_SEEDS && t < E2E_BUDGET,
        format!(
            "{passing}/{} seeds meet both margins, {:.1} min; {}",
            E2E_SEEDS.len(),
            t.as_secs_f64() / 60.0,
            per_seed.join("; ")
        ),
    )
}

fn speaker_reinforcement_level() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut worst: f64 = 0.0;
    for gamma in REINFORCEMENT_LEVELS_DB {
        for _ in 0..10 {
            let est = white(&mut rng, 8_000, 16_000).scaled(rng.gen_range(0.01..1.0));
            let mix = white(&mut rng, 8_000, 16_000).scaled(rng.gen_range(0.01..1.0));
            let out = speaker_reinforcement(&est, &mix, gamma).unwrap();
            let added: Vec<f64> = out
                .samples()
                .iter()
                .zip(est.samples())
                .map(|(o, e)| o - e)
                .collect();
            let added_norm = added.iter().map(|v| v * v).sum::<f64>().sqrt();
            let snr = 20.0 * (est.norm() / added_norm).log10();
            worst = worst.max((snr - gamma).abs());
        }
    }
    outcome(
        worst <= REINFORCEMENT_TOL_DB,
        format!("levels {REINFORCEMENT_LEVELS_DB:?} dB, worst deviation {worst:.2e} dB"),
    )
}

fn tiny_run_config() -> RunConfig {
    let sample_rate = 8_000;
    let train = TrainConfig {
        optimizer: Optimizer::ADAM,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    RunConfig {
        seed: 7,
        corpus: SimCorpusConfig {
            sample_rate,
            counts: SplitCounts {
                simu_train: 6,
                simu_val: 2,
                real_train: 4,
                real_val: 2,
                real_test: 3,
            },
            utterance_seconds: [1.0, 1.5],
            ..SimCorpusConfig::default()
        },
        model: ModelConfig {
            input_channels: 2,
            reference_channel: 1,
            hidden_width: 16,
            bottleneck: 8,
            sample_rate,
            ..ModelConfig::default()
        },
        ctse_train: train.clone(),
        ctpulse_train: train,
        gamma_db: Some(10.0),
        ..RunConfig::default()
    }
}

fn determinism(scratch: &Path) -> Outcome {
    let cfg = tiny_run_config();
    let read = |name: &str| {
        let dir = scratch.join(name);
        run_all(&cfg, &dir).unwrap();
        std::fs::read(dir.join("summary.json")).unwrap()
    };
    let (a, b) = (read("det_a"), read("det_b"));
    outcome(
        a == b,
        format!(
            "two runs with seed {}: summaries of {} and {} bytes, identical: {}",
            cfg.seed,
            a.len(),
            b.len(),
            a == b
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let dir = scratch.path();
    let criteria: Vec<Criterion> = vec![
        ("STFT round trip", Box::new(stft_round_trip)),
        ("gradient oracle", Box::new(gradient_oracle)),
        ("FCP closed form", Box::new(fcp_closed_form)),
        ("Wiener delay recovery", Box::new(wiener_delay_recovery)),
        ("synchronization", Box::new(|| synchronization(dir))),
        ("alignment-loss invariance", Box::new(alignment_invariance)),
        ("end-to-end co-learning gain", Box::new(|| end_to_end(dir))),
        (
            "speaker reinforcement",
            Box::new(speaker_reinforcement_level),
        ),
        ("determinism", Box::new(|| determinism(dir))),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} [{n}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
