//! Static properties of masked layers: closed-form moments of the
//! pre-activation `S = W (I * m)`, the expected output of a sigmoid unit,
//! and layerwise propagation of expectations, each paired with a numerical
//! oracle (Monte-Carlo sampling or adaptive quadrature).

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{MaskDistribution, MomentMode};
use crate::mc::{self, Track};
use crate::network::{Activation, Network};
use crate::rng::RngStream;

/// Logistic unit `1 / (1 + c exp(-lambda s))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub c: f64,
    pub lambda: f64,
}

impl Default for SigmoidParams {
    fn default() -> Self {
        Self { c: 1.0, lambda: 1.0 }
    }
}

impl SigmoidParams {
    pub fn new(c: f64, lambda: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite() && lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "sigmoid needs c > 0 and lambda > 0, got c={c}, lambda={lambda}"
            )));
        }
        Ok(Self { c, lambda })
    }

    #[inline]
    pub fn value(&self, s: f64) -> f64 {
        1.0 / (1.0 + self.c * (-self.lambda * s).exp())
    }

    /// `E[value(S)]` for `S ~ N(mu, var)` under the probit matching
    /// approximation, applied to the logit `lambda s - ln c`.
    #[inline]
    pub fn smoothed(&self, mu: f64, var: f64) -> f64 {
        let u = self.lambda * mu - self.c.ln();
        let scaled = probit_scaled(u, self.lambda * self.lambda * var);
        1.0 / (1.0 + (-scaled).exp())
    }

    /// `O (1 - O)`; the derivative with the gain `lambda` factored out.
    #[inline]
    pub fn slope(&self, s: f64) -> f64 {
        let o = self.value(s);
        o * (1.0 - o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    ClosedForm,
    MonteCarlo,
}

/// Moments of the outputs of one masked linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub source: MomentSource,
    pub distribution: MaskDistribution,
    /// Moment mode for closed-form reports; `None` for sampled ones.
    pub mode: Option<MomentMode>,
    pub expected: Vec<f64>,
    pub variance: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub n_samples: Option<usize>,
    pub expected_standard_error: Option<Vec<f64>>,
    /// Standard errors of the `covariance` entries.
    pub standard_error: Option<Vec<Vec<f64>>>,
}

fn check_layer(w: &ArrayView2<f64>, input: &[f64]) -> Result<()> {
    if w.ncols() != input.len() {
        return Err(Error::dims(format!(
            "weight matrix has {} columns but input has length {}",
            w.ncols(),
            input.len()
        )));
    }
    if w.iter().chain(input).any(|v| !v.is_finite()) {
        return Err(Error::invalid("weights and inputs must be finite"));
    }
    Ok(())
}

/// Closed-form moments using the realized (post-clip) mask moments.
pub fn linear_output_moments(
    w: ArrayView2<f64>,
    input: &[f64],
    dist: &MaskDistribution,
) -> Result<MomentReport> {
    linear_output_moments_with(w, input, dist, MomentMode::Effective)
}

/// Closed-form moments:
/// `E[S_i] = mean * sum_j w_ij I_j` and
/// `Cov(S_i, S_l) = var * sum_j w_ij w_lj I_j^2`, with `(mean, var)` taken
/// from the mask law according to `mode`.
pub fn linear_output_moments_with(
    w: ArrayView2<f64>,
    input: &[f64],
    dist: &MaskDistribution,
    mode: MomentMode,
) -> Result<MomentReport> {
    dist.validate()?;
    check_layer(&w, input)?;
    let m = dist.moments_for(mode);
    let k = w.nrows();
    let expected: Vec<f64> = w
        .rows()
        .into_iter()
        .map(|row| m.mean * row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>())
        .collect();
    let mut covariance = vec![vec![0.0; k]; k];
    for i in 0..k {
        for l in i..k {
            let s: f64 = (0..input.len())
                .map(|j| w[[i, j]] * w[[l, j]] * input[j] * input[j])
                .sum();
            covariance[i][l] = m.variance * s;
            covariance[l][i] = covariance[i][l];
        }
    }
    let variance = (0..k).map(|i| covariance[i][i]).collect();
    Ok(MomentReport {
        source: MomentSource::ClosedForm,
        distribution: *dist,
        mode: Some(mode),
        expected,
        variance,
        covariance,
        n_samples: None,
        expected_standard_error: None,
        standard_error: None,
    })
}

pub const MIN_MOMENT_SAMPLES: usize = 10_000;

/// Monte-Carlo estimate of the layer moments over `n_samples` independent
/// mask vectors, with per-entry standard errors.
pub fn mc_output_moments(
    w: ArrayView2<f64>,
    input: &[f64],
    dist: &MaskDistribution,
    n_samples: usize,
    rng: &RngStream,
) -> Result<MomentReport> {
    dist.validate()?;
    check_layer(&w, input)?;
    if n_samples < MIN_MOMENT_SAMPLES {
        return Err(Error::TooFewSamples {
            min: MIN_MOMENT_SAMPLES,
            got: n_samples,
        });
    }
    let (k, n) = w.dim();
    if k == 0 {
        return Err(Error::dims("layer has no outputs"));
    }
    let wm = w.to_owned();
    let pooled = mc::run(n_samples, k, rng, Track::Covariance, |g, buf| {
        let mut masked = vec![0.0; n];
        for row in buf.chunks_exact_mut(k) {
            dist.sample_into(g, &mut masked);
            for (m, x) in masked.iter_mut().zip(input) {
                *m *= x;
            }
            for (i, out) in row.iter_mut().enumerate() {
                *out = wm.row(i).iter().zip(&masked).map(|(a, b)| a * b).sum();
            }
        }
    });
    let covariance: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|l| pooled.covariance(i, l)).collect())
        .collect();
    let standard_error = (0..k)
        .map(|i| (0..k).map(|l| pooled.covariance_se(i, l)).collect())
        .collect();
    Ok(MomentReport {
        source: MomentSource::MonteCarlo,
        distribution: *dist,
        mode: None,
        expected: pooled.mean.clone(),
        variance: (0..k).map(|i| covariance[i][i]).collect(),
        covariance,
        n_samples: Some(n_samples),
        expected_standard_error: Some((0..k).map(|i| pooled.mean_se(i)).collect()),
        standard_error: Some(standard_error),
    })
}

/// Deviations of a closed-form report from a sampled one, in standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub max_z_expected: f64,
    pub max_z_covariance: f64,
    pub entries: usize,
}

impl Agreement {
    pub fn within(&self, z: f64) -> bool {
        self.max_z_expected <= z && self.max_z_covariance <= z
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        diff.abs() / se
    }
}

/// Compares every entry of a closed-form report against a Monte-Carlo one.
pub fn compare_reports(closed: &MomentReport, sampled: &MomentReport) -> Result<Agreement> {
    let (Some(mean_se), Some(cov_se)) = (&sampled.expected_standard_error, &sampled.standard_error)
    else {
        return Err(Error::invalid("second report must be a Monte-Carlo report"));
    };
    let k = closed.expected.len();
    if sampled.expected.len() != k {
        return Err(Error::dims("reports have different sizes"));
    }
    let mut agreement = Agreement {
        max_z_expected: 0.0,
        max_z_covariance: 0.0,
        entries: 0,
    };
    for i in 0..k {
        let z = z_score(closed.expected[i] - sampled.expected[i], mean_se[i]);
        agreement.max_z_expected = agreement.max_z_expected.max(z);
        agreement.entries += 1;
        for l in i..k {
            let z = z_score(closed.covariance[i][l] - sampled.covariance[i][l], cov_se[i][l]);
            agreement.max_z_covariance = agreement.max_z_covariance.max(z);
            agreement.entries += 1;
        }
    }
    Ok(agreement)
}

/// Kolmogorov-Smirnov distance between sampled `S_row` and the normal law
/// with the sample's own mean and variance. Diagnostic for the CLT
/// approximation of `S`; small values mean `S` is close to Gaussian.
pub fn normality_diagnostic(
    w_row: &[f64],
    input: &[f64],
    dist: &MaskDistribution,
    n_samples: usize,
    rng: &RngStream,
) -> Result<f64> {
    dist.validate()?;
    if w_row.len() != input.len() {
        return Err(Error::dims("weight row and input differ in length"));
    }
    if n_samples < 2 {
        return Err(Error::TooFewSamples { min: 2, got: n_samples });
    }
    let mut g = rng.generator();
    let mut mask = vec![0.0; input.len()];
    let mut s: Vec<f64> = (0..n_samples)
        .map(|_| {
            dist.sample_into(&mut g, &mut mask);
            w_row.iter().zip(input).zip(&mask).map(|((w, x), m)| w * x * m).sum()
        })
        .collect();
    let n = n_samples as f64;
    let mean = s.iter().sum::<f64>() / n;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Ok(1.0);
    }
    s.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for (i, v) in s.iter().enumerate() {
        let f = crate::masks::normal_cdf((v - mean) / sd);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    Ok(d)
}

fn check_variance(var_s: f64) -> Result<()> {
    if !(var_s >= 0.0) || !var_s.is_finite() {
        return Err(Error::invalid(format!("variance must be finite and >= 0, got {var_s}")));
    }
    Ok(())
}

/// Approximates `E[sigmoid(S)]` for `S ~ N(mu_s, var_s)` by
/// `sigmoid(mu_s / sqrt(1 + pi var_s / 8))` (for unit `c` and `lambda`).
pub fn sigmoid_expectation(mu_s: f64, var_s: f64, params: SigmoidParams) -> Result<f64> {
    check_variance(var_s)?;
    Ok(params.smoothed(mu_s, var_s))
}

/// `mu / sqrt(1 + pi var / 8)`.
#[inline]
pub fn probit_scaled(mu: f64, var: f64) -> f64 {
    mu / (1.0 + std::f64::consts::PI * var / 8.0).sqrt()
}

pub const QUADRATURE_TOLERANCE: f64 = 1e-10;

/// `E[sigmoid(S)]` for `S ~ N(mu_s, var_s)` by adaptive Gauss-Kronrod
/// integration after mapping the real line onto `(-1, 1)` with
/// `z = t / (1 - t^2)`.
pub fn sigmoid_expectation_quadrature(mu_s: f64, var_s: f64, params: SigmoidParams) -> Result<f64> {
    check_variance(var_s)?;
    if var_s == 0.0 {
        return Ok(params.value(mu_s));
    }
    let sd = var_s.sqrt();
    let integrand = |t: f64| {
        let one_minus = 1.0 - t * t;
        let z = t / one_minus;
        if z.abs() > 40.0 {
            return 0.0;
        }
        let jac = (1.0 + t * t) / (one_minus * one_minus);
        params.value(mu_s + sd * z) * crate::masks::normal_pdf(z) * jac
    };
    adaptive_gauss_kronrod(&integrand, -1.0, 1.0, QUADRATURE_TOLERANCE)
}

// 15-point Kronrod extension of the 7-point Gauss rule (QUADPACK qk15).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod_15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for (j, (&x, &wk)) in XGK.iter().zip(&WGK).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += wk * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive integration: repeatedly bisects the interval with the
/// largest error estimate until the summed estimate is below `tol`.
pub(crate) fn adaptive_gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    const MAX_INTERVALS: usize = 2000;
    let (v, e) = gauss_kronrod_15(f, a, b);
    let mut parts: Vec<(f64, f64, f64, f64)> = vec![(a, b, v, e)];
    loop {
        let total_err: f64 = parts.iter().map(|p| p.3).sum();
        if total_err <= tol {
            break;
        }
        if parts.len() >= MAX_INTERVALS {
            return Err(Error::Numeric(format!(
                "quadrature did not converge (error estimate {total_err:e} after {MAX_INTERVALS} intervals)"
            )));
        }
        let (idx, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (lo, hi, _, _) = parts.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gauss_kronrod_15(f, lo, mid);
        let (v2, e2) = gauss_kronrod_15(f, mid, hi);
        parts.push((lo, mid, v1, e1));
        parts.push((mid, hi, v2, e2));
    }
    let mut sorted = parts;
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(sorted.iter().map(|p| p.2).sum())
}

/// One grid point of the sigmoid-approximation study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproximationPoint {
    pub mu: f64,
    pub var: f64,
    pub approximation: f64,
    pub quadrature: f64,
    pub abs_error: f64,
}

/// Evaluates the approximation against quadrature on the product grid.
pub fn approximation_error_grid(
    mus: &[f64],
    vars: &[f64],
    params: SigmoidParams,
) -> Result<Vec<ApproximationPoint>> {
    let mut out = Vec::with_capacity(mus.len() * vars.len());
    for &var in vars {
        for &mu in mus {
            let approximation = sigmoid_expectation(mu, var, params)?;
            let quadrature = sigmoid_expectation_quadrature(mu, var, params)?;
            out.push(ApproximationPoint {
                mu,
                var,
                approximation,
                quadrature,
                abs_error: (approximation - quadrature).abs(),
            });
        }
    }
    Ok(out)
}

/// The grid used to bound the approximation error: `mu` in `[-6, 6]` by
/// 0.5 and `var` in `{0, 0.5, 1, 2, 4, 8}`.
pub fn default_approximation_grid() -> (Vec<f64>, Vec<f64>) {
    let mus = (0..=24).map(|i| -6.0 + 0.5 * i as f64).collect();
    (mus, vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0])
}

/// Expected pre-activations, their variances, and expected outputs of one
/// layer under the propagation recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerExpectation {
    pub expected_s: Vec<f64>,
    pub variance_s: Vec<f64>,
    pub expected_o: Vec<f64>,
}

/// Deterministic layer-by-layer propagation of expectations through a
/// sigmoid network whose every layer input is masked by `dist`.
///
/// Each layer sees the upstream expected outputs as effective inputs:
/// `E[S_i] = sum_j w_ij E[m] E[O_j] + b_i` and
/// `Var(S_i) = sum_j w_ij^2 E[O_j]^2 Var(m)` (pre-clip variance). Continuous
/// laws use `E[O] ~ sigmoid(E[S] / sqrt(1 + pi Var(S) / 8))`; Bernoulli masks
/// use `E[O] ~ sigmoid(E[S])`.
pub fn propagate_expectations(
    net: &Network,
    input: &[f64],
    dist: &MaskDistribution,
) -> Result<Vec<LayerExpectation>> {
    dist.validate()?;
    if input.len() != net.input_dim() {
        return Err(Error::dims(format!(
            "network expects {} inputs, got {}",
            net.input_dim(),
            input.len()
        )));
    }
    let m = dist.nominal_moments();
    let bernoulli = matches!(dist, MaskDistribution::Bernoulli { .. });
    let mut current = input.to_vec();
    let mut out = Vec::with_capacity(net.layers.len());
    for (idx, layer) in net.layers.iter().enumerate() {
        let Activation::Sigmoid(params) = layer.activation else {
            return Err(Error::Unsupported(format!(
                "expectation propagation is defined for sigmoid layers only (layer {idx} is {})",
                layer.activation
            )));
        };
        let mut expected_s = Vec::with_capacity(layer.units());
        let mut variance_s = Vec::with_capacity(layer.units());
        for (row, b) in layer.weights.rows().into_iter().zip(layer.bias.iter()) {
            let mut es = 0.0;
            let mut vs = 0.0;
            for (w, x) in row.iter().zip(&current) {
                es += w * (m.mean * x);
                vs += w * w * x * x;
            }
            expected_s.push(es + b);
            variance_s.push(m.variance * vs);
        }
        let expected_o: Vec<f64> = expected_s
            .iter()
            .zip(&variance_s)
            .map(|(&es, &vs)| {
                if bernoulli {
                    params.value(es)
                } else {
                    params.smoothed(es, vs)
                }
            })
            .collect();
        current = expected_o.clone();
        out.push(LayerExpectation {
            expected_s,
            variance_s,
            expected_o,
        });
    }
    Ok(out)
}

/// Monte-Carlo mean of every layer's pre-activation and output under masks
/// drawn from `dist` at each layer input. Oracle for
/// [`propagate_expectations`].
pub fn mc_propagate(
    net: &Network,
    input: &[f64],
    dist: &MaskDistribution,
    n_samples: usize,
    rng: &RngStream,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    dist.validate()?;
    if input.len() != net.input_dim() {
        return Err(Error::dims("input dimension does not match network"));
    }
    let widths: Vec<usize> = net.layers.iter().map(|l| l.units()).collect();
    let total: usize = widths.iter().map(|w| 2 * w).sum();
    let pooled = mc::run(n_samples, total, rng, Track::Diagonal, |g, buf| {
        let mut mask = Vec::new();
        for row in buf.chunks_exact_mut(total) {
            let mut current = input.to_vec();
            let mut offset = 0;
            for layer in &net.layers {
                mask.resize(current.len(), 0.0);
                dist.sample_into(g, &mut mask);
                let masked: Vec<f64> = current.iter().zip(&mask).map(|(x, m)| x * m).collect();
                let k = layer.units();
                for i in 0..k {
                    let s: f64 = layer
                        .weights
                        .row(i)
                        .iter()
                        .zip(&masked)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
                        + layer.bias[i];
                    row[offset + i] = s;
                    row[offset + k + i] = s;
                }
                layer.activation.apply_row(&mut row[offset + k..offset + 2 * k]);
                current = row[offset + k..offset + 2 * k].to_vec();
                offset += 2 * k;
            }
        }
    });
    let mut out = Vec::new();
    let mut offset = 0;
    for &k in &widths {
        out.push((
            pooled.mean[offset..offset + k].to_vec(),
            pooled.mean[offset + k..offset + 2 * k].to_vec(),
        ));
        offset += 2 * k;
    }
    Ok(out)
}

/// Random `(W, I)` instance with standard-normal entries, `1 <= k, n <= max_dim`.
pub fn random_layer_instance<R: Rng + ?Sized>(rng: &mut R, max_dim: usize) -> (ndarray::Array2<f64>, Vec<f64>) {
    let k = rng.random_range(1..=max_dim);
    let n = rng.random_range(1..=max_dim);
    random_layer(rng, k, n)
}

/// Random `k x n` weights and length-`n` input with standard-normal entries.
pub fn random_layer<R: Rng + ?Sized>(rng: &mut R, k: usize, n: usize) -> (ndarray::Array2<f64>, Vec<f64>) {
    use rand_distr::StandardNormal;
    let w = ndarray::Array2::from_shape_fn((k, n), |_| rng.sample(StandardNormal));
    let input = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (w, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DenseLayer;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform() -> MaskDistribution {
        MaskDistribution::Uniform
    }

    #[test]
    fn uniform_two_input_example() {
        let w = array![[1.0, 2.0]];
        let r = linear_output_moments(w.view(), &[1.0, 1.0], &uniform()).unwrap();
        assert_eq!(r.expected, vec![1.5]);
        assert!((r.variance[0] - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_layers() {
        let w = ndarray::Array2::zeros((3, 4));
        let r = linear_output_moments(w.view(), &[1.0, -2.0, 0.5, 4.0], &uniform()).unwrap();
        assert!(r.expected.iter().all(|&v| v == 0.0));
        assert!(r.covariance.iter().flatten().all(|&v| v == 0.0));

        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let r = linear_output_moments(w.view(), &[3.0, -1.0], &MaskDistribution::BERNOULLI_HALF).unwrap();
        assert_eq!(r.covariance[0][1], 0.0);
        assert!(linear_output_moments(w.view(), &[1.0], &uniform()).is_err());
    }

    #[test]
    fn bernoulli_is_three_uniforms() {
        let w = array![[0.3, -1.7, 2.2], [1.1, 0.4, -0.9]];
        let x = [0.5, 2.0, -1.25];
        let b = linear_output_moments(w.view(), &x, &MaskDistribution::BERNOULLI_HALF).unwrap();
        let u = linear_output_moments(w.view(), &x, &uniform()).unwrap();
        for i in 0..2 {
            for l in 0..2 {
                let (cb, cu) = (b.covariance[i][l], u.covariance[i][l]);
                assert!((cb - 3.0 * cu).abs() <= 4.0 * f64::EPSILON * cb.abs(), "{cb} vs {cu}");
            }
        }
    }

    #[test]
    fn gaussian_with_uniform_variance_matches_uniform() {
        let w = array![[0.3, -1.7], [1.1, 0.4]];
        let g = MaskDistribution::gaussian(0.5, 1.0 / 12.0).unwrap();
        let a = linear_output_moments(w.view(), &[1.0, 2.0], &g).unwrap();
        let b = linear_output_moments(w.view(), &[1.0, 2.0], &uniform()).unwrap();
        assert_eq!(a.expected, b.expected);
        assert_eq!(a.covariance, b.covariance);
    }

    #[test]
    fn closed_form_agrees_with_mc() {
        let w = array![[0.3, -1.7, 2.2], [1.1, 0.4, -0.9]];
        let x = [0.5, 2.0, -1.25];
        for (k, d) in [MaskDistribution::BERNOULLI_HALF, uniform(), MaskDistribution::gaussian(0.5, 0.2).unwrap()]
            .iter()
            .enumerate()
        {
            let c = linear_output_moments(w.view(), &x, d).unwrap();
            let s = mc_output_moments(w.view(), &x, d, 200_000, &RngStream::new(8, k as u64)).unwrap();
            let a = compare_reports(&c, &s).unwrap();
            assert!(a.within(4.0), "{d}: {a:?}");
        }
        assert!(matches!(
            mc_output_moments(w.view(), &x, &uniform(), 10, &RngStream::new(0, 0)),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn nominal_mode_overstates_clipped_variance() {
        let w = array![[1.0]];
        let d = MaskDistribution::clipped_gaussian(0.5, 0.2).unwrap();
        let p = linear_output_moments_with(w.view(), &[1.0], &d, MomentMode::Nominal).unwrap();
        let e = linear_output_moments_with(w.view(), &[1.0], &d, MomentMode::Effective).unwrap();
        assert_eq!(p.variance[0], 0.2);
        assert!(e.variance[0] < 0.2);
    }

    #[test]
    fn normality_improves_with_width() {
        let narrow = normality_diagnostic(&[1.0], &[1.0], &MaskDistribution::BERNOULLI_HALF, 20_000, &RngStream::new(1, 1)).unwrap();
        let row = vec![1.0; 64];
        let wide = normality_diagnostic(&row, &row, &MaskDistribution::BERNOULLI_HALF, 20_000, &RngStream::new(1, 1)).unwrap();
        assert!(narrow > 0.3);
        assert!(wide < 0.1);
    }

    #[test]
    fn sigmoid_examples() {
        let p = SigmoidParams::default();
        assert_eq!(sigmoid_expectation(0.0, 3.0, p).unwrap(), 0.5);
        assert!((sigmoid_expectation(2.0, 0.0, p).unwrap() - 0.880_797_077_977_882_4).abs() < 1e-15);
        let v = sigmoid_expectation(2.0, 8.0 / std::f64::consts::PI, p).unwrap();
        assert!((v - 1.0 / (1.0 + (-2.0f64 / 2f64.sqrt()).exp())).abs() < 1e-15);
        assert!((v - 0.804_429_682_507).abs() < 1e-12);
        let q = sigmoid_expectation_quadrature(2.0, 8.0 / std::f64::consts::PI, p).unwrap();
        assert!((v - q).abs() < 0.02);
        assert!(sigmoid_expectation(0.0, -1.0, p).is_err());
    }

    #[test]
    fn quadrature_examples() {
        let p = SigmoidParams::default();
        // By symmetry E[sigmoid(S)] = 1/2 for any variance when mu = 0.
        assert!((sigmoid_expectation_quadrature(0.0, 4.0, p).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(sigmoid_expectation_quadrature(1.5, 0.0, p).unwrap(), p.value(1.5));
        // E[sigmoid(S)] + E[sigmoid(-S)] = 1.
        let a = sigmoid_expectation_quadrature(1.3, 2.0, p).unwrap();
        let b = sigmoid_expectation_quadrature(-1.3, 2.0, p).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        // Gauss-Kronrod on a polynomial is exact.
        let q = adaptive_gauss_kronrod(&|x: f64| x.powi(4), 0.0, 2.0, 1e-12).unwrap();
        assert!((q - 32.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_matches_mc() {
        let p = SigmoidParams::default();
        let q = sigmoid_expectation_quadrature(0.7, 2.5, p).unwrap();
        let mut g = RngStream::new(6, 0).generator();
        let n = 400_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = g.sample(rand_distr::StandardNormal);
            xs.push(p.value(0.7 + 2.5f64.sqrt() * z));
        }
        let m = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((m - q).abs() < 4.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn approximation_grid_error_is_small() {
        let (mus, vars) = default_approximation_grid();
        assert_eq!(mus.len(), 25);
        let grid = approximation_error_grid(&mus, &vars, SigmoidParams::default()).unwrap();
        let worst = grid.iter().map(|p| p.abs_error).fold(0.0, f64::max);
        assert!(worst < 0.02, "worst {worst}");
        assert!(worst > 1e-4);
    }

    fn sigmoid_layer(w: ndarray::Array2<f64>) -> DenseLayer {
        let k = w.nrows();
        DenseLayer::new(w, Array1::zeros(k), Activation::sigmoid(), None).unwrap()
    }

    #[test]
    fn propagation_single_layer() {
        let net = Network::new(vec![sigmoid_layer(array![[1.0, 2.0]])]).unwrap();
        let out = propagate_expectations(&net, &[1.0, 1.0], &uniform()).unwrap();
        assert_eq!(out[0].expected_s, vec![1.5]);
        assert!((out[0].variance_s[0] - 5.0 / 12.0).abs() < 1e-15);
        let want = SigmoidParams::default().value(1.5 / (1.0 + std::f64::consts::PI * (5.0 / 12.0) / 8.0).sqrt());
        assert!((out[0].expected_o[0] - want).abs() < 1e-15);

        let b = propagate_expectations(&net, &[1.0, 1.0], &MaskDistribution::BERNOULLI_HALF).unwrap();
        assert_eq!(b[0].expected_o[0], SigmoidParams::default().value(1.5));

        let relu = Network::new(vec![DenseLayer::new(array![[1.0]], Array1::zeros(1), Activation::Relu, None).unwrap()]).unwrap();
        assert!(matches!(propagate_expectations(&relu, &[1.0], &uniform()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn propagation_tracks_mc_through_depth() {
        let net = Network::new(vec![
            sigmoid_layer(array![[0.8, -0.5, 0.3], [0.2, 0.9, -0.4]]),
            sigmoid_layer(array![[1.2, -0.7]]),
        ])
        .unwrap();
        let x = [1.0, 0.5, -1.0];
        let d = MaskDistribution::gaussian(0.5, 0.2).unwrap();
        let pred = propagate_expectations(&net, &x, &d).unwrap();
        let mc = mc_propagate(&net, &x, &d, 200_000, &RngStream::new(2, 2)).unwrap();
        // Layer 1 pre-activations are exact in expectation.
        for i in 0..2 {
            assert!((pred[0].expected_s[i] - mc[0].0[i]).abs() < 0.01);
        }
        for (p, m) in pred.iter().zip(&mc) {
            for (a, b) in p.expected_o.iter().zip(&m.1) {
                assert!((a - b).abs() < 0.02, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn covariance_is_psd_and_mean_linear(seed in any::<u64>(), scale in 0.1f64..5.0) {
            let mut g = RngStream::new(seed, 0).generator();
            let (w, x) = random_layer_instance(&mut g, 6);
            let r = linear_output_moments(w.view(), &x, &uniform()).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let rs = linear_output_moments(w.view(), &xs, &uniform()).unwrap();
            for i in 0..r.expected.len() {
                prop_assert!((rs.expected[i] - scale * r.expected[i]).abs() <= 1e-9 * (1.0 + r.expected[i].abs() * scale));
                prop_assert!(r.variance[i] >= 0.0);
                for l in 0..r.expected.len() {
                    let bound = (r.variance[i] * r.variance[l]).sqrt();
                    prop_assert!(r.covariance[i][l].abs() <= bound * (1.0 + 1e-12) + 1e-300);
                    prop_assert_eq!(r.covariance[i][l], r.covariance[l][i]);
                }
            }
        }

        #[test]
        fn approximation_is_monotone_in_mean(mu in -6.0f64..6.0, d in 0.01f64..1.0, var in 0.0f64..8.0) {
            let p = SigmoidParams::default();
            prop_assert!(sigmoid_expectation(mu + d, var, p).unwrap() > sigmoid_expectation(mu, var, p).unwrap());
        }
    }
}
