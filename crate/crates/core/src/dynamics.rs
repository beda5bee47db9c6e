//! Training-dynamics algebra for single units: ensemble versus dropout
//! error, expected gradients, and the sigmoidal co-adaptation regularizer,
//! each paired with a Monte-Carlo or exhaustive oracle.
//!
//! A unit sees `S = sum_i w_i m_i I_i` with i.i.d. masks `m_i`; the ensemble
//! replaces every `m_i` by its mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{MaskDistribution, MomentMode};
use crate::mc::{self, Track};
use crate::rng::RngStream;
use crate::statics::{probit_scaled, SigmoidParams};

pub const MIN_DYNAMIC_SAMPLES: usize = 100_000;

fn check_instance(w: &[f64], input: &[f64]) -> Result<()> {
    if w.len() != input.len() {
        return Err(Error::dims(format!(
            "{} weights but {} inputs",
            w.len(),
            input.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::invalid("unit needs at least one input"));
    }
    if w.iter().chain(input).any(|v| !v.is_finite()) {
        return Err(Error::invalid("weights and inputs must be finite"));
    }
    Ok(())
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_DYNAMIC_SAMPLES {
        return Err(Error::TooFewSamples {
            min: MIN_DYNAMIC_SAMPLES,
            got: n,
        });
    }
    Ok(())
}

/// `sum_i w_i (m_i I_i)`. Every linear-unit quantity goes through this so that
/// a constant mask reproduces the ensemble bit for bit.
#[inline]
fn masked_dot(w: &[f64], mask: impl Fn(usize) -> f64, input: &[f64]) -> f64 {
    w.iter().zip(input).enumerate().map(|(i, (w, x))| w * (mask(i) * x)).sum()
}

/// `1/2 (t - sum_i mu w_i I_i)^2`.
pub fn ensemble_error_linear(w: &[f64], input: &[f64], t: f64, mask_mean: f64) -> Result<f64> {
    check_instance(w, input)?;
    let r = t - masked_dot(w, |_| mask_mean, input);
    Ok(0.5 * r * r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub distribution: MaskDistribution,
    pub mode: MomentMode,
    pub e_ens: f64,
    pub regularizer: f64,
    /// `e_ens + regularizer`.
    pub predicted_e_d: f64,
    pub mc_e_d: Option<f64>,
    pub mc_standard_error: Option<f64>,
}

impl ErrorDecomposition {
    pub fn with_mc(mut self, mean: f64, standard_error: f64) -> Self {
        self.mc_e_d = Some(mean);
        self.mc_standard_error = Some(standard_error);
        self
    }

    /// `(mc - predicted) / se`, or `None` before an oracle run.
    pub fn z_score(&self) -> Option<f64> {
        let (m, se) = (self.mc_e_d?, self.mc_standard_error?);
        let d = m - self.predicted_e_d;
        Some(if d == 0.0 { 0.0 } else { d / se })
    }
}

/// `E[E_D] = E_ENS + 1/2 sum_i w_i^2 I_i^2 Var(m)`, exact for a linear unit
/// under the moments selected by `mode`.
pub fn expected_dropout_error_linear(
    w: &[f64],
    input: &[f64],
    t: f64,
    dist: &MaskDistribution,
    mode: MomentMode,
) -> Result<ErrorDecomposition> {
    dist.validate()?;
    let m = dist.moments_for(mode);
    let e_ens = ensemble_error_linear(w, input, t, m.mean)?;
    let spread: f64 = w.iter().zip(input).map(|(w, x)| w * w * x * x).sum();
    let regularizer = 0.5 * spread * m.variance;
    Ok(ErrorDecomposition {
        distribution: *dist,
        mode,
        e_ens,
        regularizer,
        predicted_e_d: e_ens + regularizer,
        mc_e_d: None,
        mc_standard_error: None,
    })
}

/// Sample mean and standard error of `1/2 (t - sum_i w_i m_i I_i)^2`.
pub fn mc_dropout_error_linear(
    w: &[f64],
    input: &[f64],
    t: f64,
    dist: &MaskDistribution,
    n_samples: usize,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    check_instance(w, input)?;
    dist.validate()?;
    check_samples(n_samples)?;
    let n = w.len();
    let pooled = mc::run(n_samples, 1, rng, Track::Diagonal, |g, buf| {
        let mut mask = vec![0.0; n];
        for out in buf.iter_mut() {
            dist.sample_into(g, &mut mask);
            let r = t - masked_dot(w, |i| mask[i], input);
            *out = 0.5 * r * r;
        }
    });
    Ok((pooled.mean[0], pooled.mean_se(0)))
}

/// Bernoulli-mask expectation of `E_D` by enumerating all `2^n` masks.
pub fn exhaustive_bernoulli_error_linear(w: &[f64], input: &[f64], t: f64, p: f64) -> Result<f64> {
    let mut acc = 0.0;
    enumerate_bernoulli(w, input, p, |prob, mask| {
        let r = t - masked_dot(w, |i| mask[i], input);
        acc += prob * 0.5 * r * r;
    })?;
    Ok(acc)
}

/// Bernoulli-mask expected gradient of the quadratic loss, enumerated.
pub fn exhaustive_bernoulli_gradient_linear(w: &[f64], input: &[f64], t: f64, p: f64) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; w.len()];
    enumerate_bernoulli(w, input, p, |prob, mask| {
        let r = t - masked_dot(w, |i| mask[i], input);
        for (i, a) in acc.iter_mut().enumerate() {
            *a += prob * (-r * mask[i] * input[i]);
        }
    })?;
    Ok(acc)
}

pub const MAX_EXHAUSTIVE_INPUTS: usize = 20;

fn enumerate_bernoulli(w: &[f64], input: &[f64], p: f64, mut visit: impl FnMut(f64, &[f64])) -> Result<()> {
    check_instance(w, input)?;
    MaskDistribution::bernoulli(p)?;
    let n = w.len();
    if n > MAX_EXHAUSTIVE_INPUTS {
        return Err(Error::invalid(format!(
            "exhaustive enumeration limited to {MAX_EXHAUSTIVE_INPUTS} inputs, got {n}"
        )));
    }
    let mut mask = vec![0.0; n];
    for bits in 0u32..(1 << n) {
        let mut prob = 1.0;
        for (i, m) in mask.iter_mut().enumerate() {
            let on = bits >> i & 1 == 1;
            *m = if on { 1.0 } else { 0.0 };
            prob *= if on { p } else { 1.0 - p };
        }
        visit(prob, &mask);
    }
    Ok(())
}

/// `E[dE_D/dw_i] = -(t - O_ENS) mu I_i + w_i I_i^2 Var(m)` for a linear unit.
pub fn expected_gradient_linear(
    w: &[f64],
    input: &[f64],
    t: f64,
    dist: &MaskDistribution,
    mode: MomentMode,
) -> Result<Vec<f64>> {
    check_instance(w, input)?;
    dist.validate()?;
    let m = dist.moments_for(mode);
    let residual = t - masked_dot(w, |_| m.mean, input);
    Ok(w
        .iter()
        .zip(input)
        .map(|(w, x)| -residual * m.mean * x + w * x * x * m.variance)
        .collect())
}

/// The single-unit model an oracle differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitModel {
    /// Identity output, `1/2 (t - O)^2`.
    LinearQuadratic,
    /// Sigmoid output, `-(t log O + (1 - t) log(1 - O))`.
    SigmoidRelativeEntropy(SigmoidParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub n_samples: usize,
}

/// Monte-Carlo mean of the realized gradient `dE_D/dw`.
pub fn mc_expected_gradient(
    w: &[f64],
    input: &[f64],
    t: f64,
    dist: &MaskDistribution,
    model: UnitModel,
    n_samples: usize,
    rng: &RngStream,
) -> Result<GradientEstimate> {
    check_instance(w, input)?;
    dist.validate()?;
    check_samples(n_samples)?;
    let n = w.len();
    let pooled = mc::run(n_samples, n, rng, Track::Diagonal, |g, buf| {
        let mut mask = vec![0.0; n];
        for row in buf.chunks_exact_mut(n) {
            dist.sample_into(g, &mut mask);
            let s = masked_dot(w, |i| mask[i], input);
            // dE_D/dS
            let ds = match model {
                UnitModel::LinearQuadratic => -(t - s),
                UnitModel::SigmoidRelativeEntropy(p) => -p.lambda * (t - p.value(s)),
            };
            for i in 0..n {
                row[i] = ds * (mask[i] * input[i]);
            }
        }
    });
    Ok(GradientEstimate {
        standard_error: (0..n).map(|i| pooled.mean_se(i)).collect(),
        mean: pooled.mean,
        n_samples,
    })
}

fn sigmoid_summary(w: &[f64], input: &[f64], dist: &MaskDistribution, mode: MomentMode) -> (f64, f64, f64, Vec<f64>) {
    let m = dist.moments_for(mode);
    let mu_s = masked_dot(w, |_| m.mean, input);
    let terms: Vec<f64> = w.iter().zip(input).map(|(w, x)| w * w * x * x * m.variance).collect();
    let var_s = terms.iter().sum();
    (m.mean, mu_s, var_s, terms)
}

/// The chain of approximations to the expected sigmoid-unit gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidGradientApprox {
    /// `-lambda (t - sigmoid(mu_S / sqrt(1 + pi sigma_S^2 / 8))) mu I_i`.
    pub ensemble: Vec<f64>,
    /// Ensemble plus `lambda mu I_i (sigmoid(mu_S / r'_i) - sigmoid(mu_S / r))`,
    /// where `r'_i` conditions on `m_i = mu` so that
    /// `sigma_S'^2 = sum_{j != i} w_j^2 I_j^2 sigma^2`.
    pub conditioned: Vec<f64>,
    /// Ensemble plus the first-order expansion
    /// `lambda mu I_i sigmoid'(.) (pi/16) mu_S w_i^2 I_i^2 sigma^2 / (1 + pi sigma_S^2 / 8)`.
    pub linearized: Vec<f64>,
}

pub fn sigmoid_expected_gradient(
    w: &[f64],
    input: &[f64],
    t: f64,
    dist: &MaskDistribution,
    params: SigmoidParams,
    mode: MomentMode,
) -> Result<SigmoidGradientApprox> {
    check_instance(w, input)?;
    dist.validate()?;
    let (mu, mu_s, var_s, terms) = sigmoid_summary(w, input, dist, mode);
    let lam = params.lambda;
    let x = probit_scaled(mu_s, var_s);
    let o_ens = params.value(x);
    let slope = params.slope(x);
    let denom = 1.0 + std::f64::consts::PI * var_s / 8.0;
    let mut ensemble = Vec::with_capacity(w.len());
    let mut conditioned = Vec::with_capacity(w.len());
    let mut linearized = Vec::with_capacity(w.len());
    for (i, &xi) in input.iter().enumerate() {
        let ens = -lam * (t - o_ens) * mu * xi;
        let var_cond = var_s - terms[i];
        let cond = ens + lam * mu * xi * (params.value(probit_scaled(mu_s, var_cond)) - o_ens);
        let lin = ens + lam * mu * xi * slope * (std::f64::consts::PI / 16.0) * mu_s * terms[i] / denom;
        ensemble.push(ens);
        conditioned.push(cond);
        linearized.push(lin);
    }
    Ok(SigmoidGradientApprox {
        ensemble,
        conditioned,
        linearized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidRegularizer {
    /// The continuous-mask double sum
    /// `1/2 lambda sigmoid'(mu_S / sqrt(1 + pi sigma_S^2 / 8))
    ///  sum_i sum_j w_i w_j mu^2 I_i I_j (pi/8 w_i^2 I_i^2 sigma^2) / (1 + pi/8 sum_i w_i^2 I_i^2 sigma^2)`.
    pub continuous: f64,
    /// `1/2 lambda sigmoid'(mu_S) sum_i w_i^2 I_i^2 Var(m)`, the Bernoulli form
    /// evaluated with the same mask variance.
    pub bernoulli: f64,
    pub mu_s: f64,
    pub var_s: f64,
}

/// Second term of the sigmoidal `E_D` decomposition; `sigmoid'` is
/// `O (1 - O)` with the gain `lambda` kept as a separate factor.
pub fn sigmoidal_regularizer(
    w: &[f64],
    input: &[f64],
    dist: &MaskDistribution,
    params: SigmoidParams,
    mode: MomentMode,
) -> Result<SigmoidRegularizer> {
    check_instance(w, input)?;
    dist.validate()?;
    let (mu, mu_s, var_s, terms) = sigmoid_summary(w, input, dist, mode);
    let eighth = std::f64::consts::PI / 8.0;
    let denom = 1.0 + eighth * var_s;
    let mut double_sum = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            double_sum += w[i] * w[j] * mu * mu * input[i] * input[j] * (eighth * terms[i]) / denom;
        }
    }
    let slope = params.slope(probit_scaled(mu_s, var_s));
    Ok(SigmoidRegularizer {
        continuous: 0.5 * params.lambda * slope * double_sum,
        bernoulli: 0.5 * params.lambda * params.slope(mu_s) * var_s,
        mu_s,
        var_s,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Relative-entropy loss of a sigmoid unit at pre-activation `s`.
fn sigmoid_relative_entropy(s: f64, t: f64, p: SigmoidParams) -> f64 {
    let u = p.c.ln() - p.lambda * s;
    // -log O = softplus(u); -log(1 - O) = softplus(u) - u
    t * softplus(u) + (1.0 - t) * (softplus(u) - u)
}

/// Monte-Carlo estimate of `E[E_D] - E_ENS` for a sigmoid unit under relative
/// entropy, with `E_ENS` the loss at the ensemble input `mu_S`. The gap is the
/// same for every target `t`, so `t = 0` is used.
pub fn mc_sigmoid_regularizer(
    w: &[f64],
    input: &[f64],
    dist: &MaskDistribution,
    params: SigmoidParams,
    n_samples: usize,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    check_instance(w, input)?;
    dist.validate()?;
    check_samples(n_samples)?;
    let mean = dist.mean();
    let e_ens = sigmoid_relative_entropy(masked_dot(w, |_| mean, input), 0.0, params);
    let n = w.len();
    let pooled = mc::run(n_samples, 1, rng, Track::Diagonal, |g, buf| {
        let mut mask = vec![0.0; n];
        for out in buf.iter_mut() {
            dist.sample_into(g, &mut mask);
            *out = sigmoid_relative_entropy(masked_dot(w, |i| mask[i], input), 0.0, params) - e_ens;
        }
    });
    Ok((pooled.mean[0], pooled.mean_se(0)))
}
