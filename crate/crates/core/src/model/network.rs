//! Per-frame feed-forward complex spectral mapping network.
//!
//! ```text
//! features(t)  = [ln(1+|Y'|), ln(1+|Y'|) * Re(Y'/|Y'|), ln(1+|Y'|) * Im(Y'/|Y'|)]  per (channel, bin)
//! z(t)         = W_b features(t) + b_b                         (bottleneck, shared over frames)
//! u(t)         = [z(t-c), ..., z(t+c)]                         (zero outside the utterance)
//! h_1 = tanh(W_1 u + b_1),  h_l = tanh(W_l h_{l-1} + b_l)
//! m_X = W_x h_L + b_x  ->  X(t,f) = (m_X[f] + i m_X[F+f]) * Y_q(t,f)
//! m_V = W_v h_L + b_v  ->  V(t,f) likewise (optional head)
//! ```
//!
//! `Y'` is every input channel divided by the RMS magnitude of the reference
//! channel, which makes the output scale with the input.

use ndarray::{s, Array1, Array2, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Spectrogram, StftConfig, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

const FEATURES_PER_BIN: usize = 3;
const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// 1-based index into the input channels of the channel whose speech is predicted.
    pub reference_channel: usize,
    pub predict_noise: bool,
    pub hidden_width: usize,
    pub num_layers: usize,
    pub bottleneck: usize,
    /// Frames of context on each side.
    pub context: usize,
    pub stft: StftConfig,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            reference_channel: 1,
            predict_noise: true,
            hidden_width: 128,
            num_layers: 2,
            bottleneck: 48,
            context: 2,
            stft: StftConfig::enhancement(),
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_channels == 0 {
            return bad("input_channels must be >= 1".into());
        }
        if self.reference_channel == 0 || self.reference_channel > self.input_channels {
            return bad(format!(
                "reference channel {} outside 1..={}",
                self.reference_channel, self.input_channels
            ));
        }
        if self.hidden_width == 0 || self.num_layers == 0 || self.bottleneck == 0 {
            return bad("hidden_width, num_layers and bottleneck must be positive".into());
        }
        self.stft.resolve(self.sample_rate)?;
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.stft
            .resolve(self.sample_rate)
            .map(|g| g.num_bins())
            .unwrap_or(0)
    }

    fn input_dim(&self) -> usize {
        FEATURES_PER_BIN * self.input_channels * self.freq_bins()
    }

    /// `(rows, cols)` of every weight matrix in declaration order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let f = self.freq_bins();
        let mut shapes = vec![(self.bottleneck, self.input_dim())];
        let mut width = (2 * self.context + 1) * self.bottleneck;
        for _ in 0..self.num_layers {
            shapes.push((self.hidden_width, width));
            width = self.hidden_width;
        }
        shapes.push((2 * f, width));
        if self.predict_noise {
            shapes.push((2 * f, width));
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    /// `x W^T + b` for row-major batches `x`.
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Network parameters (or gradients with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layers: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            layers: config
                .layer_shapes()
                .into_iter()
                .map(|(r, c)| Dense::zeros(r, c))
                .collect(),
        })
    }

    /// Glorot-uniform weights, zero biases; output heads start small.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let heads = if config.predict_noise { 2 } else { 1 };
        let n = params.layers.len();
        for (i, layer) in params.layers.iter_mut().enumerate() {
            let (rows, cols) = layer.weight.dim();
            let mut limit = (6.0 / (rows + cols) as f64).sqrt();
            if i >= n - heads {
                limit *= 0.1;
            }
            layer.weight.mapv_inplace(|_| rng.gen_range(-limit..limit));
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All values in declaration order: per layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Zeroes the output heads so the model predicts silence.
    pub fn zero_output_heads(&mut self) {
        let heads = if self.config.predict_noise { 2 } else { 1 };
        let n = self.layers.len();
        for l in &mut self.layers[n - heads..] {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    fn heads(&self) -> (&Dense, Option<&Dense>) {
        let n = self.layers.len();
        if self.config.predict_noise {
            (&self.layers[n - 2], Some(&self.layers[n - 1]))
        } else {
            (&self.layers[n - 1], None)
        }
    }

    fn hidden(&self) -> &[Dense] {
        let heads = if self.config.predict_noise { 2 } else { 1 };
        &self.layers[1..self.layers.len() - heads]
    }

    pub fn forward(&self, mixtures: &[Spectrogram]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if mixtures.len() != cfg.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} channels, got {}",
                cfg.input_channels,
                mixtures.len()
            )));
        }
        let reference = &mixtures[cfg.reference_channel - 1];
        let bins = cfg.freq_bins();
        for m in mixtures {
            reference.same_shape(m)?;
            if m.num_bins() != bins {
                return Err(Error::ShapeMismatch(format!(
                    "model expects {bins} bins, got {}",
                    m.num_bins()
                )));
            }
        }
        let frames = reference.num_frames();
        let features = extract_features(mixtures, reference);

        let z = self.layers[0].apply(&features);
        let u = stack_context(&z, cfg.context);
        let mut activations = Vec::with_capacity(cfg.num_layers);
        let mut h = u.clone();
        for layer in self.hidden() {
            h = layer.apply(&h).mapv(f64::tanh);
            activations.push(h.clone());
        }
        let (speech_head, noise_head) = self.heads();
        let mask_x = speech_head.apply(&h);
        let mask_v = noise_head.map(|l| l.apply(&h));
        let apply_mask = |m: &Array2<f64>| {
            let mut out = Array2::zeros((frames, bins));
            for t in 0..frames {
                for f in 0..bins {
                    out[[t, f]] =
                        Complex64::new(m[[t, f]], m[[t, bins + f]]) * reference.data()[[t, f]];
                }
            }
            reference.with_data(out)
        };
        let speech = apply_mask(&mask_x);
        let noise = mask_v.as_ref().map(apply_mask);
        Ok(ForwardOutput {
            speech,
            noise,
            cache: ForwardCache {
                features,
                context_input: u,
                activations,
                reference: reference.data().clone(),
            },
        })
    }

    /// Reverse-mode gradients of a scalar loss given its gradients
    /// (`dL/dRe + i dL/dIm`) with respect to the speech and noise outputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_speech: &Array2<Complex64>,
        grad_noise: Option<&Array2<Complex64>>,
    ) -> Result<ModelParams> {
        let cfg = &self.config;
        let bins = cfg.freq_bins();
        let frames = cache.reference.nrows();
        if grad_speech.dim() != (frames, bins) {
            return Err(Error::ShapeMismatch("speech gradient shape".into()));
        }
        if grad_speech
            .iter()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::NonFinite("speech output gradient".into()));
        }
        let mut grads = ModelParams::zeros(cfg)?;
        let n_layers = grads.layers.len();
        let last_hidden = cache.activations.last().expect("at least one hidden layer");

        let mask_grad = |g: &Array2<Complex64>| {
            let mut dm = Array2::zeros((frames, 2 * bins));
            for t in 0..frames {
                for f in 0..bins {
                    let v = g[[t, f]] * cache.reference[[t, f]].conj();
                    dm[[t, f]] = v.re;
                    dm[[t, bins + f]] = v.im;
                }
            }
            dm
        };

        let (speech_head, noise_head) = self.heads();
        let speech_idx = if cfg.predict_noise {
            n_layers - 2
        } else {
            n_layers - 1
        };
        let dm_x = mask_grad(grad_speech);
        let mut dh = dm_x.dot(&speech_head.weight);
        grads.layers[speech_idx].weight = dm_x.t().dot(last_hidden);
        grads.layers[speech_idx].bias = dm_x.sum_axis(Axis(0));
        match (noise_head, grad_noise) {
            (Some(head), Some(gv)) => {
                if gv.dim() != (frames, bins) {
                    return Err(Error::ShapeMismatch("noise gradient shape".into()));
                }
                let dm_v = mask_grad(gv);
                dh += &dm_v.dot(&head.weight);
                grads.layers[n_layers - 1].weight = dm_v.t().dot(last_hidden);
                grads.layers[n_layers - 1].bias = dm_v.sum_axis(Axis(0));
            }
            (None, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "noise gradient for a model without a noise head".into(),
                ))
            }
            _ => {}
        }

        for (k, layer) in self.hidden().iter().enumerate().rev() {
            let act = &cache.activations[k];
            let da = dh * &act.mapv(|a| 1.0 - a * a);
            let input = if k == 0 {
                &cache.context_input
            } else {
                &cache.activations[k - 1]
            };
            grads.layers[k + 1].weight = da.t().dot(input);
            grads.layers[k + 1].bias = da.sum_axis(Axis(0));
            dh = da.dot(&layer.weight);
        }

        let dz = unstack_context(&dh, cfg.context, cfg.bottleneck);
        grads.layers[0].weight = dz.t().dot(&cache.features);
        grads.layers[0].bias = dz.sum_axis(Axis(0));
        Ok(grads)
    }
}

/// Intermediate values kept for [`ModelParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Array2<f64>,
    context_input: Array2<f64>,
    activations: Vec<Array2<f64>>,
    reference: Array2<Complex64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub speech: Spectrogram,
    pub noise: Option<Spectrogram>,
    pub cache: ForwardCache,
}

fn extract_features(mixtures: &[Spectrogram], reference: &Spectrogram) -> Array2<f64> {
    let (frames, bins) = reference.data().dim();
    let power: f64 =
        reference.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / (frames * bins) as f64;
    let scale = 1.0 / (power.sqrt() + NORM_FLOOR);
    let mut out = Array2::zeros((frames, FEATURES_PER_BIN * bins * mixtures.len()));
    for (c, m) in mixtures.iter().enumerate() {
        let base = c * FEATURES_PER_BIN * bins;
        for t in 0..frames {
            for f in 0..bins {
                let y = m.data()[[t, f]] * scale;
                let mag = y.norm();
                let logmag = mag.ln_1p();
                let (cos, sin) = if mag > 0.0 {
                    (y.re / mag, y.im / mag)
                } else {
                    (0.0, 0.0)
                };
                out[[t, base + f]] = logmag;
                out[[t, base + bins + f]] = logmag * cos;
                out[[t, base + 2 * bins + f]] = logmag * sin;
            }
        }
    }
    out
}

fn stack_context(z: &Array2<f64>, context: usize) -> Array2<f64> {
    let (frames, width) = z.dim();
    let mut u = Array2::zeros((frames, (2 * context + 1) * width));
    for t in 0..frames {
        for o in 0..=2 * context {
            let src = t as i64 + o as i64 - context as i64;
            if src < 0 || src >= frames as i64 {
                continue;
            }
            u.slice_mut(s![t, o * width..(o + 1) * width])
                .assign(&z.row(src as usize));
        }
    }
    u
}

fn unstack_context(du: &Array2<f64>, context: usize, width: usize) -> Array2<f64> {
    let frames = du.nrows();
    let mut dz = Array2::zeros((frames, width));
    for t in 0..frames {
        for o in 0..=2 * context {
            let src = t as i64 + o as i64 - context as i64;
            if src < 0 || src >= frames as i64 {
                continue;
            }
            let mut row = dz.row_mut(src as usize);
            row += &du.slice(s![t, o * width..(o + 1) * width]);
        }
    }
    dz
}
