//! Conditional Gaussian entropy model.
//!
//! A quantized element `k * s` is assigned the Gaussian mass of the bin
//! `[k s - s/2, k s + s/2]`. This module turns predicted `(mu, sigma)` and the
//! step `s` into symbol probabilities, into range-coder cdfs, and into rate
//! estimates (with gradients) for training.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use thiserror::Error;

use crate::range_coder::{Cdf, TOTAL};

/// Smallest admissible predicted standard deviation, in value units.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Probabilities below this are clamped before building explicit tables.
pub const PROB_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;
/// Symbols further than this from the predicted centre are always escaped.
pub const MAX_HALF_WINDOW: i64 = 1 << 14;
/// The coding window covers this many standard deviations either side.
const WINDOW_SIGMAS: f64 = 8.0;
/// Interval masses below this contribute a constant rate and no gradient.
const MASS_FLOOR: f64 = 1e-30;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("quantization step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("sigma {0} is not a finite value at or above the floor")]
    BadSigma(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty symbol range")]
    EmptyRange,
    #[error("value {value} quantizes outside the raw escape range")]
    EscapeOverflow { value: f64 },
}

/// Standard normal cdf.
#[inline]
pub fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_TAU * libm::exp(-0.5 * z * z)
}

/// `Phi(upper) - Phi(lower)`, evaluated in whichever tail keeps precision.
#[inline]
pub fn interval_mass(lower: f64, upper: f64) -> f64 {
    if lower + upper > 0.0 {
        0.5 * (libm::erfc(lower * FRAC_1_SQRT_2) - libm::erfc(upper * FRAC_1_SQRT_2))
    } else {
        0.5 * (libm::erfc(-upper * FRAC_1_SQRT_2) - libm::erfc(-lower * FRAC_1_SQRT_2))
    }
}

/// Per-element predicted mean and standard deviation, in value units.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, EntropyError> {
        if mu.len() != sigma.len() {
            return Err(EntropyError::Shape(format!("{} means vs {} sigmas", mu.len(), sigma.len())));
        }
        if let Some(&s) = sigma.iter().find(|s| !(**s >= SIGMA_FLOOR) || !s.is_finite()) {
            return Err(EntropyError::BadSigma(s));
        }
        Ok(GaussianParams { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Per-element positive quantization steps.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantStep(pub Vec<f64>);

impl QuantStep {
    pub fn new(steps: Vec<f64>) -> Result<Self, EntropyError> {
        check_steps(&steps)?;
        Ok(QuantStep(steps))
    }

    pub fn uniform(step: f64, len: usize) -> Result<Self, EntropyError> {
        Self::new(vec![step; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_steps(steps: &[f64]) -> Result<(), EntropyError> {
    match steps.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        Some(&s) => Err(EntropyError::BadStep(s)),
        None => Ok(()),
    }
}

/// Rounds `value / step` to the nearest integer so that
/// `|value - k * step| <= step / 2` holds in floating point.
pub fn quantize_value(value: f64, step: f64) -> (i64, f64) {
    let mut k = (value / step).round();
    let err = |k: f64| (value - k * step).abs();
    for cand in [k - 1.0, k + 1.0] {
        if err(cand) < err(k) {
            k = cand;
        }
    }
    (k as i64, k * step)
}

/// Probabilities of a contiguous symbol range for one element; whatever mass
/// falls outside the range belongs to the escape symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolPmf {
    pub first: i64,
    pub probs: Vec<f64>,
    pub escape: f64,
}

impl SymbolPmf {
    pub fn prob(&self, symbol: i64) -> f64 {
        let i = symbol - self.first;
        if i < 0 || i as usize >= self.probs.len() {
            self.escape
        } else {
            self.probs[i as usize]
        }
    }

    /// The probabilities followed by the escape mass, clamped below at
    /// `PROB_FLOOR` and renormalized, ready for `build_cdf`.
    pub fn floored_with_escape(&self) -> Vec<f64> {
        let mut p: Vec<f64> =
            self.probs.iter().chain(std::iter::once(&self.escape)).map(|&p| p.max(PROB_FLOOR)).collect();
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        p
    }
}

/// Gaussian bin masses for each element over `first..=last`.
pub fn symbol_pmf(
    params: &GaussianParams,
    step: &QuantStep,
    first: i64,
    last: i64,
) -> Result<Vec<SymbolPmf>, EntropyError> {
    if params.len() != step.0.len() {
        return Err(EntropyError::Shape(format!("{} params vs {} steps", params.len(), step.0.len())));
    }
    check_steps(&step.0)?;
    if last < first {
        return Err(EntropyError::EmptyRange);
    }
    Ok((0..params.len())
        .map(|e| {
            let (mu, sigma, s) = (params.mu[e], params.sigma[e], step.0[e]);
            let z = |k: i64| ((k as f64 - 0.5) * s - mu) / sigma;
            let probs: Vec<f64> = (first..=last).map(|k| interval_mass(z(k), z(k + 1))).collect();
            // Tails on both sides, each taken from its own side for accuracy.
            let below = phi(z(first));
            let above = 0.5 * libm::erfc(z(last + 1) * FRAC_1_SQRT_2);
            let escape = (below + above).min(1.0);
            let total: f64 = probs.iter().sum::<f64>() + escape;
            let probs = probs.into_iter().map(|p| p / total).collect();
            SymbolPmf { first, probs, escape: escape / total }
        })
        .collect())
}

/// Rate and gradient for one element.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElementRate {
    pub bits: f64,
    pub d_y: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
    pub d_step: f64,
}

/// `-log2` of the Gaussian mass of `[y - s/2, y + s/2]`, with partial
/// derivatives with respect to `y`, `mu`, `sigma` and `s` (holding `y` fixed).
#[inline]
pub fn element_rate(y: f64, mu: f64, sigma: f64, step: f64) -> ElementRate {
    let inv = 1.0 / sigma;
    let lower = (y - 0.5 * step - mu) * inv;
    let upper = (y + 0.5 * step - mu) * inv;
    let mass = interval_mass(lower, upper);
    if !(mass > MASS_FLOOR) {
        return ElementRate { bits: -MASS_FLOOR.log2(), ..Default::default() };
    }
    let bits = -mass.ln() / LN_2;
    let (pu, pl) = (normal_pdf(upper), normal_pdf(lower));
    // d(bits)/d(mass) = -1 / (mass ln 2)
    let g = -1.0 / (mass * LN_2);
    let d_upper = g * pu;
    let d_lower = -g * pl;
    ElementRate {
        bits,
        d_y: (d_upper + d_lower) * inv,
        d_mu: -(d_upper + d_lower) * inv,
        d_sigma: -(d_upper * upper + d_lower * lower) * inv,
        d_step: 0.5 * (d_upper - d_lower) * inv,
    }
}

/// How values are turned into coded positions before measuring the rate.
#[derive(Debug, Clone, Copy)]
pub enum RateMode<'a> {
    /// `y = x + u * s` with caller-supplied `u` in `[-1/2, 1/2]`.
    Noise(&'a [f64]),
    /// `y = round(x / s) * s`.
    Round,
}

/// Gradient of the summed rate with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct RateGrad {
    pub bits: f64,
    pub d_mu: Vec<f64>,
    pub d_sigma: Vec<f64>,
    pub d_step: Vec<f64>,
    pub d_values: Vec<f64>,
}

/// Total estimated bits of `values` under the model.
pub fn rate_bits(
    params: &GaussianParams,
    step: &QuantStep,
    values: &[f64],
    mode: RateMode<'_>,
) -> Result<f64, EntropyError> {
    Ok(rate_bits_grad(params, step, values, mode)?.bits)
}

/// Like [`rate_bits`], also returning the gradient. In round mode the
/// value and step gradients treat the rounded position as constant.
pub fn rate_bits_grad(
    params: &GaussianParams,
    step: &QuantStep,
    values: &[f64],
    mode: RateMode<'_>,
) -> Result<RateGrad, EntropyError> {
    let n = values.len();
    if params.len() != n || step.0.len() != n {
        return Err(EntropyError::Shape(format!("{} values, {} params, {} steps", n, params.len(), step.0.len())));
    }
    if let RateMode::Noise(u) = mode {
        if u.len() != n {
            return Err(EntropyError::Shape(format!("{} noise samples for {n} values", u.len())));
        }
    }
    check_steps(&step.0)?;
    let mut out =
        RateGrad { bits: 0.0, d_mu: vec![0.0; n], d_sigma: vec![0.0; n], d_step: vec![0.0; n], d_values: vec![0.0; n] };
    for e in 0..n {
        let s = step.0[e];
        let (y, dy_ds) = match mode {
            RateMode::Noise(u) => (values[e] + u[e] * s, u[e]),
            RateMode::Round => (quantize_value(values[e], s).1, 0.0),
        };
        let r = element_rate(y, params.mu[e], params.sigma[e], s);
        out.bits += r.bits;
        out.d_mu[e] = r.d_mu;
        out.d_sigma[e] = r.d_sigma;
        out.d_step[e] = r.d_step + r.d_y * dy_ds;
        out.d_values[e] = if matches!(mode, RateMode::Noise(_)) { r.d_y } else { 0.0 };
    }
    Ok(out)
}

/// The range-coder view of one element's Gaussian: a window of symbols
/// around the predicted centre plus one escape symbol.
///
/// The cdf is evaluated on demand: `cum(i) = i + round(M * Phi(z_i)) - base`
/// with `M = TOTAL - symbols`, so every symbol keeps at least one unit and
/// the escape symbol absorbs both tails.
#[derive(Debug, Clone)]
pub struct GaussianCdf {
    first: i64,
    window: usize,
    spare: f64,
    base: i64,
    mu: f64,
    inv_sigma: f64,
    step: f64,
}

impl GaussianCdf {
    pub fn new(mu: f64, sigma: f64, step: f64) -> Result<Self, EntropyError> {
        if !(step.is_finite() && step > 0.0) {
            return Err(EntropyError::BadStep(step));
        }
        if !(sigma.is_finite() && sigma >= SIGMA_FLOOR) {
            return Err(EntropyError::BadSigma(sigma));
        }
        let limit = (1i64 << 30) as f64;
        let centre = (mu / step).round().clamp(-limit, limit) as i64;
        let half = ((WINDOW_SIGMAS * sigma / step).ceil() as i64).clamp(1, MAX_HALF_WINDOW);
        let window = (2 * half + 1) as usize;
        let spare = (TOTAL as usize - window - 1) as f64;
        let mut cdf = GaussianCdf { first: centre - half, window, spare, base: 0, mu, inv_sigma: 1.0 / sigma, step };
        cdf.base = cdf.scaled_edge(0);
        Ok(cdf)
    }

    #[inline]
    fn scaled_edge(&self, i: usize) -> i64 {
        let k = (self.first + i as i64) as f64 - 0.5;
        let z = (k * self.step - self.mu) * self.inv_sigma;
        (self.spare * phi(z)).round() as i64
    }

    /// Index of the escape symbol.
    pub fn escape_index(&self) -> usize {
        self.window
    }

    /// Window index of `symbol`, or `None` if it must be escaped.
    pub fn index_of(&self, symbol: i64) -> Option<usize> {
        let i = symbol - self.first;
        (i >= 0 && (i as usize) < self.window).then_some(i as usize)
    }

    pub fn symbol_at(&self, index: usize) -> i64 {
        self.first + index as i64
    }

    /// Bits spent on `index` by an ideal coder with this cdf.
    pub fn cost_bits(&self, index: usize) -> f64 {
        -(self.freq(index) as f64 / TOTAL as f64).log2()
    }
}

impl Cdf for GaussianCdf {
    fn num_symbols(&self) -> usize {
        self.window + 1
    }

    #[inline]
    fn cum(&self, index: usize) -> u32 {
        if index > self.window {
            TOTAL
        } else {
            (index as i64 + self.scaled_edge(index) - self.base) as u32
        }
    }
}
