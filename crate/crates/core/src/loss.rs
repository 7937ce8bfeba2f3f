//! Training losses, speaker reinforcement and evaluation metrics.
//!
//! Every spectral loss has the same shape: the RI-plus-magnitude distance summed
//! over all T-F units, divided by the summed magnitude of the reference. The
//! `*_with_grad` variants also return `dL/dRe + i dL/dIm` for the estimate.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::align::{
    apply_fcp, apply_fcp_adjoint, apply_td_filter, convolve_centered_adjoint, estimate_fcp_filter,
    estimate_td_wiener, fcp_total_adjoint, td_total_adjoint, FcpFilter, FcpTapGeometry, Ridge,
    TdWienerFilter,
};
use crate::dsp::{istft, istft_adjoint, stft, stft_adjoint, Spectrogram, Waveform};
use crate::error::{Error, Result};

/// Reports clamp SI-SDR to `[-SI_SDR_CAP_DB, SI_SDR_CAP_DB]`.
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Half-length of the Wiener filter used by the filter-adjusted SDR.
pub const SDR_FILTER_HALF_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Simu,
    Real,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Simu => "simu",
            Domain::Real => "real",
        })
    }
}

pub fn ri_mag_distance(a: Complex64, b: Complex64) -> f64 {
    (a.re - b.re).abs() + (a.im - b.im).abs() + (a.norm() - b.norm()).abs()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `dF/dRe(a) + i dF/dIm(a)`; the magnitude term contributes nothing at `a = 0`.
pub fn ri_mag_distance_grad(a: Complex64, b: Complex64) -> Complex64 {
    let mut g = Complex64::new(sign(a.re - b.re), sign(a.im - b.im));
    let mag = a.norm();
    if mag > 0.0 {
        g += a / mag * sign(mag - b.norm());
    }
    g
}

fn normalizer(reference: &Array2<Complex64>, what: &str) -> Result<f64> {
    let denom: f64 = reference.iter().map(|c| c.norm()).sum();
    if denom == 0.0 {
        return Err(Error::DegenerateReference(format!("{what} is all zero")));
    }
    Ok(denom)
}

fn check_dims(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `sum F(est, reference) / sum |reference|` and its gradient in `est`.
pub fn normalized_distance_with_grad(
    est: &Array2<Complex64>,
    reference: &Array2<Complex64>,
) -> Result<(f64, Array2<Complex64>)> {
    check_dims(est, reference)?;
    let denom = normalizer(reference, "reference")?;
    let mut total = 0.0;
    let mut grad = Array2::zeros(est.dim());
    for ((g, a), b) in grad.iter_mut().zip(est.iter()).zip(reference.iter()) {
        total += ri_mag_distance(*a, *b);
        *g = ri_mag_distance_grad(*a, *b) / denom;
    }
    Ok((total / denom, grad))
}

pub fn normalized_distance(est: &Array2<Complex64>, reference: &Array2<Complex64>) -> Result<f64> {
    check_dims(est, reference)?;
    let denom = normalizer(reference, "reference")?;
    let total: f64 = est
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| ri_mag_distance(*a, *b))
        .sum();
    Ok(total / denom)
}

pub fn loss_speech_simu(est: &Spectrogram, reference: &Spectrogram) -> Result<f64> {
    normalized_distance(est.data(), reference.data())
}

pub fn loss_noise_simu(est_noise: &Spectrogram, reference_noise: &Spectrogram) -> Result<f64> {
    normalized_distance(est_noise.data(), reference_noise.data())
}

pub fn loss_mixture_constraint(
    est_speech: &Spectrogram,
    est_noise: &Spectrogram,
    mixture: &Spectrogram,
) -> Result<f64> {
    est_speech.same_shape(est_noise)?;
    normalized_distance(&(est_speech.data() + est_noise.data()), mixture.data())
}

/// How the estimate is aligned to the pseudo-label before the real-data loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AlignMode {
    Fcp {
        geometry: FcpTapGeometry,
        #[serde(default = "Ridge::fcp_default")]
        ridge: Ridge,
    },
    TdWiener {
        half_len: usize,
        #[serde(default = "Ridge::td_default")]
        ridge: Ridge,
    },
}

impl Default for AlignMode {
    fn default() -> Self {
        AlignMode::TdWiener {
            half_len: 64,
            ridge: Ridge::td_default(),
        }
    }
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    /// `fcp`, `fcp:<I>,<J>` or `td:<K>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Validation(format!(
                "bad alignment mode {s:?}; use fcp, fcp:I,J or td:K"
            ))
        };
        if s == "fcp" {
            return Ok(AlignMode::Fcp {
                geometry: FcpTapGeometry::default(),
                ridge: Ridge::fcp_default(),
            });
        }
        if let Some(rest) = s.strip_prefix("fcp:") {
            let (i, j) = rest.split_once(',').ok_or_else(bad)?;
            let geometry = FcpTapGeometry::new(
                i.trim().parse().map_err(|_| bad())?,
                j.trim().parse().map_err(|_| bad())?,
            )?;
            return Ok(AlignMode::Fcp {
                geometry,
                ridge: Ridge::fcp_default(),
            });
        }
        if let Some(k) = s.strip_prefix("td:") {
            return Ok(AlignMode::TdWiener {
                half_len: k.trim().parse().map_err(|_| bad())?,
                ridge: Ridge::td_default(),
            });
        }
        Err(bad())
    }
}

/// A filter estimated from the current estimate and the pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterEstimate {
    Fcp(FcpFilter),
    TdWiener(TdWienerFilter),
}

pub fn estimate_alignment(
    est: &Spectrogram,
    pseudo: &Spectrogram,
    mode: &AlignMode,
) -> Result<FilterEstimate> {
    est.same_shape(pseudo)?;
    match mode {
        AlignMode::Fcp { geometry, ridge } => {
            estimate_fcp_filter(est, pseudo, geometry, *ridge).map(FilterEstimate::Fcp)
        }
        AlignMode::TdWiener { half_len, ridge } => {
            let est_wave = istft(est)?;
            let pseudo_wave = istft(pseudo)?;
            estimate_td_wiener(&est_wave, &pseudo_wave, *half_len, *ridge)
                .map(FilterEstimate::TdWiener)
        }
    }
}

/// The estimate mapped onto the pseudo-label by a fixed filter.
pub fn align_estimate(est: &Spectrogram, filter: &FilterEstimate) -> Result<Spectrogram> {
    match filter {
        FilterEstimate::Fcp(f) => apply_fcp(est, f),
        FilterEstimate::TdWiener(h) => {
            let wave = istft(est)?;
            stft(&apply_td_filter(&wave, h), &est.config())
        }
    }
}

pub fn loss_speech_real(est: &Spectrogram, pseudo: &Spectrogram, mode: &AlignMode) -> Result<f64> {
    normalizer(pseudo.data(), "pseudo-label")?;
    let filter = estimate_alignment(est, pseudo, mode)?;
    normalized_distance(align_estimate(est, &filter)?.data(), pseudo.data())
}

/// Distance between the filtered estimate and the pseudo-label, with the
/// gradient taken through the fixed filter only.
pub fn aligned_loss_with_grad(
    est: &Spectrogram,
    pseudo: &Spectrogram,
    filter: &FilterEstimate,
) -> Result<(f64, Array2<Complex64>)> {
    let aligned = align_estimate(est, filter)?;
    let (value, grad_aligned) = normalized_distance_with_grad(aligned.data(), pseudo.data())?;
    let grad = match filter {
        FilterEstimate::Fcp(f) => apply_fcp_adjoint(&grad_aligned, f),
        FilterEstimate::TdWiener(h) => {
            let g_filtered = stft_adjoint(&aligned.with_data(grad_aligned));
            let g_wave = convolve_centered_adjoint(&g_filtered, h);
            istft_adjoint(&g_wave, est).into_data()
        }
    };
    Ok((value, grad))
}

/// Real-data speech loss and its gradient in `est`. The filter is a function
/// of `est`, and the gradient includes its dependence through the closed-form
/// solve.
pub fn loss_speech_real_with_grad(
    est: &Spectrogram,
    pseudo: &Spectrogram,
    mode: &AlignMode,
) -> Result<(f64, Array2<Complex64>)> {
    normalizer(pseudo.data(), "pseudo-label")?;
    let filter = estimate_alignment(est, pseudo, mode)?;
    let aligned = align_estimate(est, &filter)?;
    let (value, grad_aligned) = normalized_distance_with_grad(aligned.data(), pseudo.data())?;
    let grad = match (&filter, mode) {
        (FilterEstimate::Fcp(f), AlignMode::Fcp { ridge, .. }) => {
            fcp_total_adjoint(est, pseudo, f, *ridge, &grad_aligned)?
        }
        (FilterEstimate::TdWiener(h), AlignMode::TdWiener { ridge, .. }) => {
            let g_filtered = stft_adjoint(&aligned.with_data(grad_aligned));
            let est_wave = istft(est)?;
            let pseudo_wave = istft(pseudo)?;
            let g_wave = td_total_adjoint(
                est_wave.samples(),
                pseudo_wave.samples(),
                h,
                *ridge,
                &g_filtered,
            )?;
            istft_adjoint(&g_wave, est).into_data()
        }
        _ => unreachable!("filter kind follows the mode"),
    };
    Ok((value, grad))
}

/// Which optional terms enter the simulated- and real-data losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    /// Add the noise-estimate loss on simulated batches.
    pub simu_noise: bool,
    /// Add the mixture-constraint loss on simulated batches.
    pub simu_mixture: bool,
    /// Add the mixture-constraint loss on real batches.
    pub real_mixture: bool,
}

impl LossFlags {
    /// Speech loss only on both domains.
    pub const SPEECH_ONLY: LossFlags = LossFlags {
        simu_noise: false,
        simu_mixture: false,
        real_mixture: false,
    };

    /// Speech, noise and mixture constraint on simulated data; pseudo-label
    /// speech loss plus mixture constraint on real data.
    pub const FULL: LossFlags = LossFlags {
        simu_noise: true,
        simu_mixture: true,
        real_mixture: true,
    };

    pub fn needs_noise_head(&self) -> bool {
        self.simu_noise || self.simu_mixture || self.real_mixture
    }
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags::FULL
    }
}

impl std::str::FromStr for LossFlags {
    type Err = Error;

    /// Comma-separated subset of `simu-noise,simu-mixture,real-mixture`,
    /// or `speech` / `full`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech" => return Ok(LossFlags::SPEECH_ONLY),
            "full" => return Ok(LossFlags::FULL),
            _ => {}
        }
        let mut flags = LossFlags::SPEECH_ONLY;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "simu-noise" => flags.simu_noise = true,
                "simu-mixture" => flags.simu_mixture = true,
                "real-mixture" => flags.real_mixture = true,
                other => return Err(Error::Validation(format!("unknown loss flag {other:?}"))),
            }
        }
        Ok(flags)
    }
}

/// Individual loss values of one batch; `None` when the term is disabled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub speech: f64,
    pub noise: Option<f64>,
    pub mixture: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub speech_simu: f64,
    pub noise_simu: f64,
    pub mixture_constraint: f64,
    pub speech_real: f64,
    pub total: f64,
    pub domain: Domain,
    pub alpha: f64,
}

/// Sums the enabled parts; simulated batches are weighted by `alpha`.
pub fn combined_loss(parts: LossParts, domain: Domain, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let noise = parts.noise.unwrap_or(0.0);
    let mixture = parts.mixture.unwrap_or(0.0);
    let (speech_simu, speech_real, noise_simu, weight) = match domain {
        Domain::Simu => (parts.speech, 0.0, noise, alpha),
        Domain::Real => {
            if parts.noise.is_some() {
                return Err(Error::InvalidConfig(
                    "real batches have no noise reference".into(),
                ));
            }
            (0.0, parts.speech, 0.0, 1.0)
        }
    };
    let total = weight * (parts.speech + noise + mixture);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("{domain} loss total")));
    }
    Ok(LossBreakdown {
        speech_simu,
        noise_simu,
        mixture_constraint: mixture,
        speech_real,
        total,
        domain,
        alpha,
    })
}

/// Mixes a scaled copy of the input mixture back into the estimate so that the
/// estimate-to-added-mixture energy ratio is `gamma_db`.
pub fn speaker_reinforcement(
    est: &Waveform,
    mixture: &Waveform,
    gamma_db: f64,
) -> Result<Waveform> {
    est.check_compatible(mixture)?;
    let (est_norm, mix_norm) = (est.norm(), mixture.norm());
    if mix_norm == 0.0 {
        return Err(Error::ZeroSignal("mixture".into()));
    }
    if est_norm == 0.0 {
        return Err(Error::ZeroSignal("estimate".into()));
    }
    let eta = reinforcement_gain(est_norm, mix_norm, gamma_db);
    est.add(&mixture.scaled(eta))
}

pub fn reinforcement_gain(est_norm: f64, mix_norm: f64, gamma_db: f64) -> f64 {
    est_norm / (mix_norm * 10f64.powf(gamma_db / 20.0))
}

pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    est.check_compatible(reference)?;
    let ref_energy = reference.energy();
    if ref_energy == 0.0 {
        return Err(Error::DegenerateReference(
            "SI-SDR reference is silent".into(),
        ));
    }
    let dot: f64 = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(a, b)| a * b)
        .sum();
    let scale = dot / ref_energy;
    let target_energy = scale * scale * ref_energy;
    let resid_energy: f64 = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| (e - scale * r).powi(2))
        .sum();
    let db = if resid_energy == 0.0 {
        SI_SDR_CAP_DB
    } else if target_energy == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target_energy / resid_energy).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// SI-SDR after aligning the estimate to the reference with a
/// `(2 * SDR_FILTER_HALF_LEN + 1)`-tap Wiener filter.
pub fn filtered_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    if est.energy() == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    let h = estimate_td_wiener(est, reference, SDR_FILTER_HALF_LEN, Ridge::td_default())?;
    si_sdr(&apply_td_filter(est, &h), reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub si_sdr_db: f64,
    pub sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub utterances: Vec<UtteranceMetrics>,
    pub mean_si_sdr_db: f64,
    pub mean_sdr_db: f64,
}

impl MetricsReport {
    pub fn from_utterances(utterances: Vec<UtteranceMetrics>) -> Self {
        let n = utterances.len().max(1) as f64;
        let mean_si_sdr_db = utterances.iter().map(|u| u.si_sdr_db).sum::<f64>() / n;
        let mean_sdr_db = utterances.iter().map(|u| u.sdr_db).sum::<f64>() / n;
        Self {
            utterances,
            mean_si_sdr_db,
            mean_sdr_db,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use crate::sync::shift_samples;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_spec(seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero = Spectrogram::zeros(StftConfig::enhancement(), 16_000, 2_000).unwrap();
        zero.with_data(
            zero.data()
                .mapv(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
        )
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap()
    }

    /// Speech-like test signal: decaying harmonic bursts with silent edges.
    fn bursts(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.gen_range(100.0..200.0);
        let edge = 800;
        let s = (0..len)
            .map(|n| {
                if n < edge || n + edge >= len {
                    return 0.0;
                }
                let t = n as f64 / 16_000.0;
                let env = (std::f64::consts::PI * 3.0 * t).sin().powi(2);
                (1..8)
                    .map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64)
                    .sum::<f64>()
                    * env
                    * 0.3
            })
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn distance_analytic_cases() {
        assert_eq!(ri_mag_distance(c(1.5, -2.0), c(1.5, -2.0)), 0.0);
        assert_eq!(ri_mag_distance(c(3.0, 4.0), c(0.0, 0.0)), 12.0);
        assert_eq!(ri_mag_distance(c(1.0, 0.0), c(0.0, 1.0)), 2.0);
    }

    #[test]
    fn speech_loss_cases() {
        let r = random_spec(1);
        assert_eq!(loss_speech_simu(&r, &r).unwrap(), 0.0);
        let real_only = r.with_data(r.data().mapv(|v| c(v.re, 0.0)));
        let zero = r.with_data(Array2::zeros(r.data().dim()));
        assert!((loss_speech_simu(&zero, &real_only).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            loss_speech_simu(&r, &zero),
            Err(Error::DegenerateReference(_))
        ));
    }

    #[test]
    fn speech_loss_matches_scalar_loop() {
        let (a, b) = (random_spec(2), random_spec(3));
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..a.num_frames() {
            for f in 0..a.num_bins() {
                let (x, y) = (a.data()[[t, f]], b.data()[[t, f]]);
                num += (x.re - y.re).abs()
                    + (x.im - y.im).abs()
                    + ((x.re * x.re + x.im * x.im).sqrt() - (y.re * y.re + y.im * y.im).sqrt())
                        .abs();
                den += (y.re * y.re + y.im * y.im).sqrt();
            }
        }
        assert!((loss_speech_simu(&a, &b).unwrap() - num / den).abs() < 1e-12);
        assert!((loss_noise_simu(&a, &b).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn mixture_constraint_cases() {
        let (x, v) = (random_spec(4), random_spec(5));
        let y = x.with_data(x.data() + v.data());
        assert_eq!(loss_mixture_constraint(&x, &v, &y).unwrap(), 0.0);
        let zero = x.with_data(Array2::zeros(x.data().dim()));
        assert_eq!(loss_mixture_constraint(&y, &zero, &y).unwrap(), 0.0);

        let m = random_spec(6);
        let (mut num, mut den) = (0.0, 0.0);
        for ((a, b), y) in x.data().iter().zip(v.data().iter()).zip(m.data().iter()) {
            num += ri_mag_distance(a + b, *y);
            den += y.norm();
        }
        assert!((loss_mixture_constraint(&x, &v, &m).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn distance_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let b = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let g = ri_mag_distance_grad(a, b);
            let h = 1e-7;
            let dre = (ri_mag_distance(a + h, b) - ri_mag_distance(a - h, b)) / (2.0 * h);
            let dim =
                (ri_mag_distance(a + c(0.0, h), b) - ri_mag_distance(a - c(0.0, h), b)) / (2.0 * h);
            assert!((g.re - dre).abs() < 1e-5 && (g.im - dim).abs() < 1e-5);
        }
    }

    #[test]
    fn real_loss_self_alignment_is_zero() {
        let p = stft(&bursts(8_000, 1), &StftConfig::enhancement()).unwrap();
        let mode = AlignMode::Fcp {
            geometry: FcpTapGeometry::default(),
            ridge: Ridge::NONE,
        };
        assert!(loss_speech_real(&p, &p, &mode).unwrap() < 1e-12);
    }

    #[test]
    fn real_loss_absorbs_gain_and_delay_in_time_domain() {
        let cfg = StftConfig::enhancement();
        let pseudo_wave = bursts(8_000, 2);
        let pseudo = stft(&pseudo_wave, &cfg).unwrap();
        let est = stft(&shift_samples(&pseudo_wave, -3).scaled(0.5), &cfg).unwrap();
        let mode = AlignMode::default();
        let aligned = loss_speech_real(&est, &pseudo, &mode).unwrap();
        assert!(aligned < 1e-6, "{aligned}");

        let unrelated = stft(&noise(8_000, 3).scaled(0.05), &cfg).unwrap();
        assert!(loss_speech_real(&unrelated, &pseudo, &mode).unwrap() > aligned);
    }

    #[test]
    fn estimated_filter_beats_identity_in_l2() {
        let cfg = StftConfig::enhancement();
        let pseudo = stft(&bursts(6_000, 4), &cfg).unwrap();
        let est = pseudo.with_data(pseudo.data() + random_spec_like(&pseudo, 8).data() * 0.05);
        let geometry = FcpTapGeometry::new(2, 1).unwrap();
        let filt = estimate_fcp_filter(&est, &pseudo, &geometry, Ridge::fcp_default()).unwrap();
        let l2 = |s: &Spectrogram| -> f64 {
            s.data()
                .iter()
                .zip(pseudo.data().iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum()
        };
        assert!(l2(&apply_fcp(&est, &filt).unwrap()) <= l2(&est));
    }

    fn random_spec_like(like: &Spectrogram, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        like.with_data(
            like.data()
                .mapv(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
        )
    }

    #[test]
    fn real_loss_gradient_matches_frozen_filter_differences() {
        let cfg = StftConfig {
            window_ms: 8.0,
            hop_ms: 2.0,
            window: Default::default(),
        };
        let pseudo = stft(
            &Waveform::new(noise(60, 20).into_samples(), 1_000).unwrap(),
            &cfg,
        )
        .unwrap();
        let est = random_spec_like(&pseudo, 21);
        for mode in [
            AlignMode::Fcp {
                geometry: FcpTapGeometry::new(2, 1).unwrap(),
                ridge: Ridge::fcp_default(),
            },
            AlignMode::TdWiener {
                half_len: 3,
                ridge: Ridge::td_default(),
            },
        ] {
            let filter = estimate_alignment(&est, &pseudo, &mode).unwrap();
            let (_, grad) = aligned_loss_with_grad(&est, &pseudo, &filter).unwrap();
            let h = 1e-6;
            for idx in [(0usize, 0usize), (3, 2), (7, 4), (12, 1)] {
                for unit in [c(1.0, 0.0), c(0.0, 1.0)] {
                    let bump = |s: f64| {
                        let mut d = est.data().clone();
                        d[idx] += unit * s;
                        let e = est.with_data(d);
                        normalized_distance(
                            align_estimate(&e, &filter).unwrap().data(),
                            pseudo.data(),
                        )
                        .unwrap()
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = if unit.re == 1.0 {
                        grad[idx].re
                    } else {
                        grad[idx].im
                    };
                    assert!((fd - an).abs() < 1e-5, "{mode:?} {idx:?} fd {fd} an {an}");
                }
            }
        }
    }

    #[test]
    fn real_loss_gradient_follows_the_filter_estimate() {
        let cfg = StftConfig {
            window_ms: 8.0,
            hop_ms: 2.0,
            window: Default::default(),
        };
        let pseudo = stft(
            &Waveform::new(noise(60, 30).into_samples(), 1_000).unwrap(),
            &cfg,
        )
        .unwrap();
        let est = random_spec_like(&pseudo, 31);
        for mode in [
            AlignMode::Fcp {
                geometry: FcpTapGeometry::new(2, 1).unwrap(),
                ridge: Ridge::Relative(1e-2),
            },
            AlignMode::Fcp {
                geometry: FcpTapGeometry::default(),
                ridge: Ridge::Absolute(0.5),
            },
            AlignMode::TdWiener {
                half_len: 3,
                ridge: Ridge::Relative(1e-2),
            },
            AlignMode::TdWiener {
                half_len: 2,
                ridge: Ridge::td_default(),
            },
        ] {
            let (_, grad) = loss_speech_real_with_grad(&est, &pseudo, &mode).unwrap();
            let h = 1e-7;
            for idx in [(0usize, 0usize), (3, 2), (7, 4), (12, 1), (20, 3)] {
                for unit in [c(1.0, 0.0), c(0.0, 1.0)] {
                    let bump = |s: f64| {
                        let mut d = est.data().clone();
                        d[idx] += unit * s;
                        loss_speech_real(&est.with_data(d), &pseudo, &mode).unwrap()
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = if unit.re == 1.0 {
                        grad[idx].re
                    } else {
                        grad[idx].im
                    };
                    assert!((fd - an).abs() < 1e-5, "{mode:?} {idx:?} fd {fd} an {an}");
                }
            }
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        let one = combined_loss(
            LossParts {
                speech: 0.7,
                ..Default::default()
            },
            Domain::Simu,
            1.0,
        )
        .unwrap();
        assert_eq!(one.total, 0.7);
        let simu = LossParts {
            speech: 0.2,
            noise: Some(0.1),
            mixture: Some(0.1),
        };
        assert!((combined_loss(simu, Domain::Simu, 5.0).unwrap().total - 2.0).abs() < 1e-12);
        let real = LossParts {
            speech: 0.3,
            noise: None,
            mixture: Some(0.1),
        };
        for alpha in [1.0, 5.0, 0.1] {
            let b = combined_loss(real, Domain::Real, alpha).unwrap();
            assert!((b.total - 0.4).abs() < 1e-12);
            assert_eq!(b.speech_real, 0.3);
        }
        assert!(combined_loss(real, Domain::Real, 0.0).is_err());
    }

    #[test]
    fn reinforcement_gains() {
        assert!((reinforcement_gain(2.0, 2.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((reinforcement_gain(1.0, 1.0, 10.0) - 10f64.powf(-0.5)).abs() < 1e-15);
        let x = noise(100, 1);
        assert!(speaker_reinforcement(&x, &Waveform::zeros(100, 16_000), 10.0).is_err());
        assert!(speaker_reinforcement(&Waveform::zeros(100, 16_000), &x, 10.0).is_err());
    }

    #[test]
    fn si_sdr_cases() {
        let r = noise(1_000, 9);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(si_sdr(&r.scaled(2.0), &r).unwrap(), SI_SDR_CAP_DB);
        // Orthogonal noise of equal norm.
        let n = noise(1_000, 10);
        let proj: f64 = n
            .samples()
            .iter()
            .zip(r.samples())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / r.energy();
        let ortho: Vec<f64> = n
            .samples()
            .iter()
            .zip(r.samples())
            .map(|(a, b)| a - proj * b)
            .collect();
        let ortho = Waveform::new(ortho, 16_000).unwrap();
        let ortho = ortho.scaled(r.norm() / ortho.norm());
        assert!(si_sdr(&r.add(&ortho).unwrap(), &r).unwrap().abs() < 1e-9);
    }

    #[test]
    fn parses_modes_and_flags() {
        assert_eq!("td:64".parse::<AlignMode>().unwrap(), AlignMode::default());
        assert!(
            matches!("fcp:2,1".parse::<AlignMode>().unwrap(), AlignMode::Fcp { geometry, .. } if geometry.len() == 3)
        );
        assert!("wat".parse::<AlignMode>().is_err());
        assert_eq!("full".parse::<LossFlags>().unwrap(), LossFlags::FULL);
        let f: LossFlags = "simu-noise".parse().unwrap();
        assert!(f.simu_noise && !f.simu_mixture && !f.real_mixture);
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_homogeneous(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let (a, b) = (random_spec(seed), random_spec(seed + 1));
            let l = loss_speech_simu(&a, &b).unwrap();
            prop_assert!(l >= 0.0);
            let sc = c(scale, 0.0);
            let l2 = loss_speech_simu(&a.scaled(sc), &b.scaled(sc)).unwrap();
            prop_assert!((l - l2).abs() < 1e-10 * l.max(1.0));
        }

        #[test]
        fn si_sdr_is_scale_invariant(seed in 0u64..1000, scale in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let r = noise(500, seed);
            let e = r.add(&noise(500, seed + 7).scaled(0.3)).unwrap();
            let a = si_sdr(&e, &r).unwrap();
            let b = si_sdr(&e.scaled(scale), &r).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn reinforcement_hits_requested_ratio(seed in 0u64..1000, gamma in -20.0f64..30.0) {
            let est = noise(400, seed);
            let mix = noise(400, seed + 1).scaled(3.0);
            let out = speaker_reinforcement(&est, &mix, gamma).unwrap();
            let added: Vec<f64> = out.samples().iter().zip(est.samples()).map(|(o, e)| o - e).collect();
            let added_energy: f64 = added.iter().map(|v| v * v).sum();
            let measured = 10.0 * (est.energy() / added_energy).log10();
            prop_assert!((measured - gamma).abs() < 1e-9);
        }
    }
}
