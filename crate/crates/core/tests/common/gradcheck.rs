//! Finite-difference checks of model gradients.
//!
//! The losses are sums of absolute values, so a difference quotient is only
//! meaningful when no residual changes sign inside the step. The instances
//! below keep every residual well away from zero: targets have components of
//! magnitude in [1, 2], inputs in [0.5, 1], and the output masks are biased to
//! about 0.3 so estimates stay small next to the targets.

use num_complex::Complex64;
use pulseforge_core::align::{FcpTapGeometry, Ridge};
use pulseforge_core::dsp::{Spectrogram, StftConfig};
use pulseforge_core::loss::{AlignMode, LossFlags};
use pulseforge_core::model::{
    evaluate_loss, loss_and_grad, ModelConfig, ModelParams, TrainExample,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

pub fn tiny() -> ModelConfig {
    ModelConfig {
        input_channels: 1,
        reference_channel: 1,
        predict_noise: true,
        hidden_width: 8,
        num_layers: 2,
        bottleneck: 4,
        context: 2,
        stft: StftConfig {
            window_ms: 8.0,
            hop_ms: 2.0,
            window: Default::default(),
        },
        sample_rate: 1_000,
    }
}

fn away_from_zero(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.gen_range(lo..hi);
    if rng.gen::<bool>() {
        v
    } else {
        -v
    }
}

pub fn spec(cfg: &ModelConfig, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Spectrogram {
    let z = Spectrogram::zeros(cfg.stft, cfg.sample_rate, 40).unwrap();
    z.with_data(
        z.data()
            .mapv(|_| Complex64::new(away_from_zero(rng, lo, hi), away_from_zero(rng, lo, hi))),
    )
}

pub fn params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::init(cfg, rng).unwrap();
    let bins = cfg.freq_bins();
    let mut flat = p.to_flat();
    // Each head is a (2F x H) weight block followed by 2F biases, real parts first.
    let head = 2 * bins * cfg.hidden_width + 2 * bins;
    let n = flat.len();
    let heads = if cfg.predict_noise { 2 } else { 1 };
    for start in (1..=heads).map(|k| n - k * head) {
        let bias = start + 2 * bins * cfg.hidden_width;
        for f in 0..bins {
            flat[bias + f] = 0.3;
        }
    }
    p.set_flat(&flat).unwrap();
    p
}

pub fn worst_relative_error(
    p: &ModelParams,
    ex: &TrainExample,
    flags: &LossFlags,
    align: &AlignMode,
) -> f64 {
    let (_, grad) = loss_and_grad(p, ex, flags, align, 5.0).unwrap();
    let grad = grad.to_flat();
    let base = p.to_flat();
    let mut q = p.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            q.set_flat(&v).unwrap();
            evaluate_loss(&q, ex, flags, align, 5.0).unwrap().total
        };
        // Fourth-order central stencil; the second-order one leaves truncation
        // error near 1e-4 relative on the smallest gradients.
        let fd = (8.0 * (eval(STEP) - eval(-STEP)) - (eval(2.0 * STEP) - eval(-2.0 * STEP)))
            / (12.0 * STEP);
        let scale = fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    worst
}

pub fn aligns() -> [AlignMode; 2] {
    [
        AlignMode::Fcp {
            geometry: FcpTapGeometry::default(),
            ridge: Ridge::fcp_default(),
        },
        AlignMode::Fcp {
            geometry: FcpTapGeometry::new(2, 1).unwrap(),
            ridge: Ridge::fcp_default(),
        },
    ]
}
