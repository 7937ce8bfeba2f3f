//! Linear filters that align an enhancement estimate to a pseudo-label.
//!
//! Two estimators, both closed-form ridge-regularized least squares:
//!
//! * FCP: per frequency, a complex filter over a window of `I` past/current and
//!   `J` future STFT frames, applied as `g(f)^H w(t, f)`.
//! * Time-domain Wiener: one real `(2K + 1)`-tap filter with lags `-K..=K`
//!   applied by zero-padded linear convolution, `y[n] = sum_k h[k] x[n - k]`.
//!   A positive lag delays the input.

use nalgebra::{Cholesky, ComplexField, DMatrix, DVector, Dyn};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{stft, Spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

/// Default FCP ridge, relative to the mean diagonal of the normal matrix.
pub const DEFAULT_FCP_RIDGE: f64 = 1e-6;

/// Default time-domain ridge. The shrinkage bias grows linearly with the ridge
/// and harmonic signals have many near-null directions, so this stays small.
pub const DEFAULT_TD_RIDGE: f64 = 1e-10;

/// Pivots below this fraction of the largest one mark an unregularized system singular.
const SINGULAR_PIVOT: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Ridge {
    Absolute(f64),
    /// Multiplies the mean diagonal of the normal matrix.
    Relative(f64),
}

impl Ridge {
    pub const NONE: Ridge = Ridge::Absolute(0.0);

    pub fn fcp_default() -> Self {
        Ridge::Relative(DEFAULT_FCP_RIDGE)
    }

    pub fn td_default() -> Self {
        Ridge::Relative(DEFAULT_TD_RIDGE)
    }

    fn resolve(self, mean_diag: f64) -> Result<f64> {
        let eps = match self {
            Ridge::Absolute(e) => e,
            Ridge::Relative(r) => r * mean_diag,
        };
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ridge must be >= 0, got {self:?}"
            )));
        }
        Ok(eps)
    }
}

/// `past_taps` counts the current frame, so `I = 1, J = 0` is a single tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcpTapGeometry {
    pub past_taps: usize,
    pub future_taps: usize,
}

impl Default for FcpTapGeometry {
    fn default() -> Self {
        Self {
            past_taps: 1,
            future_taps: 0,
        }
    }
}

impl FcpTapGeometry {
    pub fn new(past_taps: usize, future_taps: usize) -> Result<Self> {
        let g = Self {
            past_taps,
            future_taps,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidConfig("FCP needs at least one tap".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.past_taps + self.future_taps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame offset of window slot `i`, from `-(I-1)` up to `J`.
    pub fn offset(&self, i: usize) -> i64 {
        i as i64 - (self.past_taps as i64 - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcpFilter {
    /// `F x (I + J)`.
    pub taps: Array2<Complex64>,
    pub geometry: FcpTapGeometry,
}

impl FcpFilter {
    /// Single unit tap at every frequency.
    pub fn identity(bins: usize) -> Self {
        Self {
            taps: Array2::from_elem((bins, 1), Complex64::new(1.0, 0.0)),
            geometry: FcpTapGeometry::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdWienerFilter {
    /// Length `2K + 1`; index `i` holds lag `i - K`.
    pub taps: Vec<f64>,
    pub half_len: usize,
}

impl TdWienerFilter {
    pub fn unit_impulse(half_len: usize) -> Self {
        let mut taps = vec![0.0; 2 * half_len + 1];
        taps[half_len] = 1.0;
        Self { taps, half_len }
    }

    pub fn tap(&self, lag: i64) -> f64 {
        let i = lag + self.half_len as i64;
        if i < 0 || i as usize >= self.taps.len() {
            0.0
        } else {
            self.taps[i as usize]
        }
    }

    /// Lag of the largest-magnitude tap.
    pub fn dominant_lag(&self) -> i64 {
        let (i, _) = self.taps.iter().enumerate().fold((0, -1.0), |acc, (i, v)| {
            if v.abs() > acc.1 {
                (i, v.abs())
            } else {
                acc
            }
        });
        i as i64 - self.half_len as i64
    }
}

/// `T x F x (I + J)`; entry `(t, f, i)` is `est(t + offset(i), f)`, zero outside.
pub fn stack_taps(est: &Spectrogram, geom: &FcpTapGeometry) -> Array3<Complex64> {
    let (frames, bins) = est.data().dim();
    let mut out = Array3::zeros((frames, bins, geom.len()));
    for t in 0..frames {
        for i in 0..geom.len() {
            let src = t as i64 + geom.offset(i);
            if src < 0 || src >= frames as i64 {
                continue;
            }
            for f in 0..bins {
                out[[t, f, i]] = est.data()[[src as usize, f]];
            }
        }
    }
    out
}

/// Cholesky factor of `gram + eps I` and the resolved `eps`.
fn factor_normal<T>(
    mut gram: DMatrix<T>,
    ridge: Ridge,
    what: &str,
) -> Result<(Cholesky<T, Dyn>, f64)>
where
    T: ComplexField<RealField = f64>,
{
    let n = gram.nrows();
    let mean_diag = (0..n).map(|i| gram[(i, i)].clone().real()).sum::<f64>() / n as f64;
    let eps = ridge.resolve(mean_diag)?;
    for i in 0..n {
        gram[(i, i)] += T::from_real(eps);
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient(what.to_string()))?;
    if eps == 0.0 {
        let pivots: Vec<f64> = (0..n)
            .map(|i| chol.l_dirty()[(i, i)].clone().real())
            .collect();
        let max = pivots.iter().cloned().fold(0.0, f64::max);
        if pivots.iter().any(|p| p * p <= SINGULAR_PIVOT * max * max) {
            return Err(Error::RankDeficient(what.to_string()));
        }
    }
    Ok((chol, eps))
}

fn solve_normal<T>(
    gram: DMatrix<T>,
    rhs: DVector<T>,
    ridge: Ridge,
    what: &str,
) -> Result<DVector<T>>
where
    T: ComplexField<RealField = f64>,
{
    Ok(factor_normal(gram, ridge, what)?.0.solve(&rhs))
}

/// Derivative of the ridge with respect to the mean diagonal.
fn ridge_slope(ridge: Ridge) -> f64 {
    match ridge {
        Ridge::Absolute(_) => 0.0,
        Ridge::Relative(r) => r,
    }
}

/// Per-frequency Hermitian normal equations `(Phi + eps I) g = b` with
/// `Phi = sum_t w w^H` and `b = sum_t w conj(target)`.
fn fcp_normal_equations(
    stacked: &Array3<Complex64>,
    target: &Spectrogram,
    f: usize,
) -> (DMatrix<Complex64>, DVector<Complex64>) {
    let (frames, _, taps) = stacked.dim();
    let mut gram = DMatrix::zeros(taps, taps);
    let mut rhs = DVector::zeros(taps);
    for t in 0..frames {
        let y = target.data()[[t, f]];
        for a in 0..taps {
            let wa = stacked[[t, f, a]];
            rhs[a] += wa * y.conj();
            for b in 0..taps {
                gram[(a, b)] += wa * stacked[[t, f, b]].conj();
            }
        }
    }
    (gram, rhs)
}

pub fn estimate_fcp_filter(
    est: &Spectrogram,
    target: &Spectrogram,
    geom: &FcpTapGeometry,
    ridge: Ridge,
) -> Result<FcpFilter> {
    geom.validate()?;
    est.same_shape(target)?;
    let stacked = stack_taps(est, geom);
    let bins = est.num_bins();
    let mut taps = Array2::zeros((bins, geom.len()));
    for f in 0..bins {
        let (gram, rhs) = fcp_normal_equations(&stacked, target, f);
        if gram.iter().all(|c| c.norm_sqr() == 0.0) {
            // Silent bin: nothing to project, leave the filter at zero.
            continue;
        }
        let g = solve_normal(gram, rhs, ridge, &format!("FCP normal matrix at bin {f}"))?;
        for i in 0..geom.len() {
            taps[[f, i]] = g[i];
        }
    }
    Ok(FcpFilter {
        taps,
        geometry: *geom,
    })
}

pub fn apply_fcp(est: &Spectrogram, filt: &FcpFilter) -> Result<Spectrogram> {
    if filt.taps.dim() != (est.num_bins(), filt.geometry.len()) {
        return Err(Error::ShapeMismatch(format!(
            "filter {:?} for spectrogram with {} bins",
            filt.taps.dim(),
            est.num_bins()
        )));
    }
    let stacked = stack_taps(est, &filt.geometry);
    let (frames, bins) = est.data().dim();
    let mut out = Array2::zeros((frames, bins));
    for t in 0..frames {
        for f in 0..bins {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..filt.geometry.len() {
                acc += filt.taps[[f, i]].conj() * stacked[[t, f, i]];
            }
            out[[t, f]] = acc;
        }
    }
    Ok(est.with_data(out))
}

/// Gradient with respect to the input of [`apply_fcp`] (filter held fixed),
/// given `dL/dRe + i dL/dIm` of its output.
pub fn apply_fcp_adjoint(grad_out: &Array2<Complex64>, filt: &FcpFilter) -> Array2<Complex64> {
    let (frames, bins) = grad_out.dim();
    let mut grad_in = Array2::zeros((frames, bins));
    for t in 0..frames {
        for i in 0..filt.geometry.len() {
            let src = t as i64 + filt.geometry.offset(i);
            if src < 0 || src >= frames as i64 {
                continue;
            }
            for f in 0..bins {
                grad_in[[src as usize, f]] += filt.taps[[f, i]] * grad_out[[t, f]];
            }
        }
    }
    grad_in
}

/// Gradient with respect to `est` of a loss on `apply_fcp(est, g(est))`, where
/// `g(est)` is the ridge solution from [`estimate_fcp_filter`] and `grad_out`
/// is the loss gradient at the filtered output.
pub fn fcp_total_adjoint(
    est: &Spectrogram,
    target: &Spectrogram,
    filt: &FcpFilter,
    ridge: Ridge,
    grad_out: &Array2<Complex64>,
) -> Result<Array2<Complex64>> {
    let mut grad_in = apply_fcp_adjoint(grad_out, filt);
    let geom = filt.geometry;
    let stacked = stack_taps(est, &geom);
    let (frames, bins) = est.data().dim();
    let taps = geom.len();
    let slope = 2.0 * ridge_slope(ridge) / taps as f64;
    for f in 0..bins {
        let (gram, _) = fcp_normal_equations(&stacked, target, f);
        if gram.iter().all(|c| c.norm_sqr() == 0.0) {
            continue;
        }
        let (chol, _) = factor_normal(gram, ridge, &format!("FCP normal matrix at bin {f}"))?;
        let g = DVector::from_iterator(taps, filt.taps.row(f).iter().copied());
        let mut q = DVector::<Complex64>::zeros(taps);
        for t in 0..frames {
            let gt = grad_out[[t, f]].conj();
            for i in 0..taps {
                q[i] += stacked[[t, f, i]] * gt;
            }
        }
        let lambda = chol.solve(&q);
        let ridge_term = slope * lambda.dotc(&g).re;
        for t in 0..frames {
            let w = DVector::from_iterator(taps, (0..taps).map(|i| stacked[[t, f, i]]));
            let aligned = g.dotc(&w);
            let resid = target.data()[[t, f]] - aligned;
            let lw = lambda.dotc(&w);
            for i in 0..taps {
                let src = t as i64 + geom.offset(i);
                if src < 0 || src >= frames as i64 {
                    continue;
                }
                grad_in[[src as usize, f]] += lambda[i] * resid - g[i] * lw - w[i] * ridge_term;
            }
        }
    }
    Ok(grad_in)
}

/// Per-frequency value of `sum_t |target - g^H w|^2 + eps ||g||^2`.
pub fn fcp_objective(
    est: &Spectrogram,
    target: &Spectrogram,
    filt: &FcpFilter,
    eps: f64,
) -> Result<Vec<f64>> {
    let filtered = apply_fcp(est, filt)?;
    let bins = est.num_bins();
    Ok((0..bins)
        .map(|f| {
            let resid: f64 = (0..est.num_frames())
                .map(|t| (target.data()[[t, f]] - filtered.data()[[t, f]]).norm_sqr())
                .sum();
            let reg: f64 = filt.taps.row(f).iter().map(|c| c.norm_sqr()).sum();
            resid + eps * reg
        })
        .collect())
}

/// Max-norm of `(Phi + eps I) g - b` over all bins and taps, i.e. the
/// derivative of the ridge objective with respect to `conj(g)`.
pub fn fcp_optimality_gap(
    est: &Spectrogram,
    target: &Spectrogram,
    filt: &FcpFilter,
    eps: f64,
) -> f64 {
    let stacked = stack_taps(est, &filt.geometry);
    let mut worst: f64 = 0.0;
    for f in 0..est.num_bins() {
        let (gram, rhs) = fcp_normal_equations(&stacked, target, f);
        let g = DVector::from_iterator(filt.geometry.len(), filt.taps.row(f).iter().copied());
        let resid = &gram * &g + g.scale(eps) - rhs;
        worst = resid
            .iter()
            .fold(worst, |m, c| m.max(c.re.abs()).max(c.im.abs()));
    }
    worst
}

/// `y[n] = sum_k h[k] x[n - k]` for `n` in `0..x.len()`, zero-padded input.
pub fn convolve_centered(x: &[f64], filt: &TdWienerFilter) -> Vec<f64> {
    let n = x.len() as i64;
    let k = filt.half_len as i64;
    let mut y = vec![0.0; x.len()];
    for (i, &h) in filt.taps.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        let lag = i as i64 - k;
        let lo = lag.max(0);
        let hi = (n + lag).min(n);
        for m in lo..hi {
            y[m as usize] += h * x[(m - lag) as usize];
        }
    }
    y
}

/// Adjoint of [`convolve_centered`] in its input: `g_x[m] = sum_k h[k] g_y[m + k]`.
pub fn convolve_centered_adjoint(grad_out: &[f64], filt: &TdWienerFilter) -> Vec<f64> {
    let n = grad_out.len() as i64;
    let k = filt.half_len as i64;
    let mut g = vec![0.0; grad_out.len()];
    for (i, &h) in filt.taps.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        let lag = i as i64 - k;
        let lo = (-lag).max(0);
        let hi = (n - lag).min(n);
        for m in lo..hi {
            g[m as usize] += h * grad_out[(m + lag) as usize];
        }
    }
    g
}

/// Gram matrix `R[a][b] = sum_{n < N} x[n - lag_a] x[n - lag_b]` and
/// cross-correlation `p[a] = sum_n target[n] x[n - lag_a]` for lags `-K..=K`.
fn td_normal_equations(x: &[f64], target: &[f64], half_len: usize) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.len() as i64;
    let k = half_len as i64;
    let taps = 2 * half_len + 1;
    let at = |i: i64| if i >= 0 && i < n { x[i as usize] } else { 0.0 };

    let mut gram = DMatrix::zeros(taps, taps);
    // First row (lag_a = -K) directly.
    for b in 0..taps {
        let lag_b = b as i64 - k;
        let lo = lag_b.max(0);
        let hi = (n + lag_b).min(n);
        let mut acc = 0.0;
        for m in lo..hi {
            acc += at(m + k) * x[(m - lag_b) as usize];
        }
        gram[(0, b)] = acc;
    }
    // Walk each diagonal: R(l1+1, l2+1) = R(l1, l2) + x[-1-l1] x[-1-l2] - x[N-1-l1] x[N-1-l2].
    for b0 in 0..taps {
        let (mut a, mut b) = (0usize, b0);
        while b + 1 < taps {
            let (l1, l2) = (a as i64 - k, b as i64 - k);
            let next = gram[(a, b)] + at(-1 - l1) * at(-1 - l2) - at(n - 1 - l1) * at(n - 1 - l2);
            a += 1;
            b += 1;
            gram[(a, b)] = next;
        }
    }
    for a in 0..taps {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    (gram, lagged_correlation(x, target, half_len))
}

/// `p[a] = sum_{n < N} target[n] x[n - lag_a]` for lags `-K..=K`.
fn lagged_correlation(x: &[f64], target: &[f64], half_len: usize) -> DVector<f64> {
    let n = x.len() as i64;
    let k = half_len as i64;
    DVector::from_iterator(
        2 * half_len + 1,
        (0..2 * half_len + 1).map(|a| {
            let lag = a as i64 - k;
            let lo = lag.max(0);
            let hi = (n + lag).min(n);
            (lo..hi)
                .map(|m| target[m as usize] * x[(m - lag) as usize])
                .sum::<f64>()
        }),
    )
}

pub fn estimate_td_wiener(
    est: &Waveform,
    target: &Waveform,
    half_len: usize,
    ridge: Ridge,
) -> Result<TdWienerFilter> {
    est.check_compatible(target)?;
    if est.energy() == 0.0 {
        return Err(Error::RankDeficient("estimate is silent".into()));
    }
    let (gram, rhs) = td_normal_equations(est.samples(), target.samples(), half_len);
    let h = solve_normal(gram, rhs, ridge, "time-domain Wiener normal matrix")?;
    Ok(TdWienerFilter {
        taps: h.iter().copied().collect(),
        half_len,
    })
}

/// Gradient with respect to `est` of a loss on `convolve_centered(est, h(est))`,
/// where `h(est)` is the ridge solution from [`estimate_td_wiener`] and
/// `grad_out` is the loss gradient at the filtered signal.
pub fn td_total_adjoint(
    est: &[f64],
    target: &[f64],
    filt: &TdWienerFilter,
    ridge: Ridge,
    grad_out: &[f64],
) -> Result<Vec<f64>> {
    let half_len = filt.half_len;
    let (gram, _) = td_normal_equations(est, target, half_len);
    let (chol, _) = factor_normal(gram, ridge, "time-domain Wiener normal matrix")?;
    let lambda = chol.solve(&lagged_correlation(est, grad_out, half_len));
    let lambda_filt = TdWienerFilter {
        taps: lambda.iter().copied().collect(),
        half_len,
    };
    let filtered = convolve_centered(est, filt);
    let est_lambda = convolve_centered(est, &lambda_filt);
    let frozen = convolve_centered_adjoint(grad_out, filt);
    let from_target = convolve_centered_adjoint(target, &lambda_filt);
    let from_output = convolve_centered_adjoint(&filtered, &lambda_filt);
    let from_gram = convolve_centered_adjoint(&est_lambda, filt);
    let taps = 2 * half_len + 1;
    let lh: f64 = lambda.iter().zip(&filt.taps).map(|(a, b)| a * b).sum();
    let ridge_term = 2.0 * ridge_slope(ridge) / taps as f64 * lh;
    let n = est.len() as i64;
    let k = half_len as i64;
    Ok((0..est.len())
        .map(|j| {
            let j64 = j as i64;
            // Lags for which sample j lands inside the output range.
            let covered = ((n - j64).min(k + 1) - (-j64).max(-k)).max(0) as f64;
            frozen[j] + from_target[j]
                - from_output[j]
                - from_gram[j]
                - ridge_term * covered * est[j]
        })
        .collect())
}

/// Max-norm of `(R + eps I) h - p`.
pub fn td_optimality_gap(
    est: &Waveform,
    target: &Waveform,
    filt: &TdWienerFilter,
    eps: f64,
) -> f64 {
    let (gram, rhs) = td_normal_equations(est.samples(), target.samples(), filt.half_len);
    let h = DVector::from_column_slice(&filt.taps);
    let resid = &gram * &h + h.scale(eps) - rhs;
    resid.amax()
}

pub fn apply_td_filter(est: &Waveform, filt: &TdWienerFilter) -> Waveform {
    Waveform::new(convolve_centered(est.samples(), filt), est.sample_rate())
        .expect("filtering finite input stays finite")
}

pub fn apply_td_filter_stft(
    est: &Waveform,
    filt: &TdWienerFilter,
    cfg: &StftConfig,
) -> Result<Spectrogram> {
    stft(&apply_td_filter(est, filt), cfg)
}

pub fn residual_energy(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}
