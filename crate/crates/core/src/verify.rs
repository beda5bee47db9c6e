//! The closed-form-versus-oracle suites, bundled so that a single command
//! can run them all. Each check returns a [`CheckResult`] with the measured
//! worst-case metric and the tolerance it was held to.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    exhaustive_bernoulli_error_linear, exhaustive_bernoulli_gradient_linear, expected_dropout_error_linear,
    expected_gradient_linear, mc_dropout_error_linear, mc_expected_gradient, UnitModel,
};
use crate::error::Result;
use crate::masks::{MaskDistribution, MomentMode};
use crate::network::{gradient_check, one_hot, Activation, DenseLayer, Loss, Network};
use crate::rng::{streams, RngStream};
use crate::statics::{
    approximation_error_grid, compare_reports, default_approximation_grid, linear_output_moments, mc_output_moments,
    random_layer_instance, SigmoidParams,
};
use crate::stats::{signed_ranks, t_test, wilcoxon_signed_rank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(id: &str, metric: f64, tolerance: f64, detail: String) -> Self {
        Self {
            id: id.into(),
            passed: metric <= tolerance,
            metric,
            tolerance,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} metric={:.6e} tol={:.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.metric,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub instances: usize,
    pub moment_samples: usize,
    pub dynamic_samples: usize,
    pub max_dim: usize,
    pub z_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            instances: 100,
            moment_samples: 1_000_000,
            dynamic_samples: 1_000_000,
            max_dim: 8,
            z_tolerance: 4.0,
        }
    }
}

fn moment_laws() -> [MaskDistribution; 3] {
    [
        MaskDistribution::BERNOULLI_HALF,
        MaskDistribution::Uniform,
        MaskDistribution::gaussian(0.5, 0.2).expect("valid law"),
    ]
}

fn analysis(seed: u64, suite: u64) -> RngStream {
    RngStream::new(seed, streams::ANALYSIS).substream(suite)
}

/// Closed-form layer moments against Monte Carlo on random layers.
pub fn check_moments(cfg: &VerifyConfig) -> Result<CheckResult> {
    let root = analysis(cfg.seed, 1);
    let mut g = root.generator();
    let (mut worst, mut entries) = (0.0f64, 0usize);
    for inst in 0..cfg.instances {
        let (w, x) = random_layer_instance(&mut g, cfg.max_dim);
        for (li, law) in moment_laws().iter().enumerate() {
            let closed = linear_output_moments(w.view(), &x, law)?;
            let stream = root.substream(1 + (inst * 3 + li) as u64);
            let sampled = mc_output_moments(w.view(), &x, law, cfg.moment_samples, &stream)?;
            let a = compare_reports(&closed, &sampled)?;
            worst = worst.max(a.max_z_expected).max(a.max_z_covariance);
            entries += a.entries;
        }
    }
    Ok(CheckResult::new(
        "moments",
        worst,
        cfg.z_tolerance,
        format!("{} layers x 3 laws, {entries} entries, max |z|", cfg.instances),
    ))
}

/// `Var_Bernoulli = 3 Var_Uniform` and the same for covariances, in closed form.
pub fn check_ratio_laws(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut g = analysis(cfg.seed, 2).generator();
    let mut worst = 0.0f64;
    for _ in 0..cfg.instances {
        let (w, x) = random_layer_instance(&mut g, cfg.max_dim);
        let b = linear_output_moments(w.view(), &x, &MaskDistribution::BERNOULLI_HALF)?;
        let u = linear_output_moments(w.view(), &x, &MaskDistribution::Uniform)?;
        for (rb, ru) in b.covariance.iter().zip(&u.covariance) {
            for (&cb, &cu) in rb.iter().zip(ru) {
                if cb != 0.0 {
                    worst = worst.max(((cb - 3.0 * cu) / cb).abs());
                } else {
                    worst = worst.max(cu.abs());
                }
            }
        }
    }
    Ok(CheckResult::new(
        "ratio-laws",
        worst,
        8.0 * f64::EPSILON,
        "max relative |Cov_B - 3 Cov_U| / |Cov_B|".into(),
    ))
}

/// Probit-matched sigmoid expectation against adaptive quadrature.
pub fn check_sigmoid_approximation() -> Result<CheckResult> {
    let (mus, vars) = default_approximation_grid();
    let grid = approximation_error_grid(&mus, &vars, SigmoidParams::default())?;
    let worst = grid.iter().max_by(|a, b| a.abs_error.total_cmp(&b.abs_error)).expect("non-empty grid");
    Ok(CheckResult::new(
        "sigmoid-approximation",
        worst.abs_error,
        0.02,
        format!("{} grid points, worst at mu={} var={}", grid.len(), worst.mu, worst.var),
    ))
}

/// A random single-unit instance: `1 <= n <= max_dim`, standard-normal
/// weights, inputs and target.
pub fn random_unit<R: Rng + ?Sized>(g: &mut R, max_dim: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let n = g.random_range(1..=max_dim);
    let w = (0..n).map(|_| g.sample(StandardNormal)).collect();
    let x = (0..n).map(|_| g.sample(StandardNormal)).collect();
    (w, x, g.sample(StandardNormal))
}

fn z(mean: f64, se: f64, want: f64) -> f64 {
    let d = mean - want;
    if d == 0.0 {
        0.0
    } else {
        (d / se).abs()
    }
}

/// Linear-unit error decomposition: Monte Carlo under unclipped Gaussian and
/// Bernoulli masks, plus exhaustive Bernoulli enumeration.
pub fn check_decomposition(cfg: &VerifyConfig) -> Result<(CheckResult, CheckResult)> {
    let root = analysis(cfg.seed, 4);
    let mut g = root.generator();
    let gauss = MaskDistribution::gaussian(0.5, 0.2)?;
    let bern = MaskDistribution::BERNOULLI_HALF;
    let mut worst_z = 0.0f64;
    for inst in 0..cfg.instances {
        let (w, x, t) = random_unit(&mut g, cfg.max_dim);
        for (li, law) in [gauss, bern].iter().enumerate() {
            let d = expected_dropout_error_linear(&w, &x, t, law, MomentMode::Nominal)?;
            let (m, se) = mc_dropout_error_linear(&w, &x, t, law, cfg.dynamic_samples, &root.substream(1 + (2 * inst + li) as u64))?;
            worst_z = worst_z.max(z(m, se, d.predicted_e_d));
        }
    }
    let mut worst_rel = 0.0f64;
    let mut ge = analysis(cfg.seed, 40).generator();
    for n in 1..=12 {
        for _ in 0..4 {
            let (w, x, t) = random_unit(&mut ge, 1);
            let w: Vec<f64> = (0..n).map(|i| if i == 0 { w[0] } else { ge.sample(StandardNormal) }).collect();
            let x: Vec<f64> = (0..n).map(|i| if i == 0 { x[0] } else { ge.sample(StandardNormal) }).collect();
            let closed = expected_dropout_error_linear(&w, &x, t, &bern, MomentMode::Nominal)?.predicted_e_d;
            let exact = exhaustive_bernoulli_error_linear(&w, &x, t, 0.5)?;
            worst_rel = worst_rel.max((exact - closed).abs() / closed.abs().max(1e-300));
        }
    }
    Ok((
        CheckResult::new(
            "decomposition-mc",
            worst_z,
            cfg.z_tolerance,
            format!("{} units x (gaussian, bernoulli), max |z|", cfg.instances),
        ),
        CheckResult::new(
            "decomposition-exhaustive",
            worst_rel,
            1e-12,
            "bernoulli n <= 12, max relative error vs 2^n enumeration".into(),
        ),
    ))
}

/// Expected linear-unit gradient against Monte Carlo on the same instances
/// as [`check_decomposition`], plus exhaustive Bernoulli gradients.
pub fn check_expected_gradient(cfg: &VerifyConfig) -> Result<CheckResult> {
    let root = analysis(cfg.seed, 4);
    let mut g = root.generator();
    let gauss = MaskDistribution::gaussian(0.5, 0.2)?;
    let bern = MaskDistribution::BERNOULLI_HALF;
    let grad_root = analysis(cfg.seed, 5);
    let mut worst = 0.0f64;
    for inst in 0..cfg.instances {
        let (w, x, t) = random_unit(&mut g, cfg.max_dim);
        for (li, law) in [gauss, bern].iter().enumerate() {
            let closed = expected_gradient_linear(&w, &x, t, law, MomentMode::Nominal)?;
            let est = mc_expected_gradient(
                &w,
                &x,
                t,
                law,
                UnitModel::LinearQuadratic,
                cfg.dynamic_samples,
                &grad_root.substream(1 + (2 * inst + li) as u64),
            )?;
            for ((m, se), c) in est.mean.iter().zip(&est.standard_error).zip(&closed) {
                worst = worst.max(z(*m, *se, *c));
            }
        }
        if w.len() <= 12 {
            let exact = exhaustive_bernoulli_gradient_linear(&w, &x, t, 0.5)?;
            let closed = expected_gradient_linear(&w, &x, t, &bern, MomentMode::Nominal)?;
            for (a, b) in exact.iter().zip(&closed) {
                if (a - b).abs() > 1e-12 * b.abs().max(1.0) {
                    worst = f64::INFINITY;
                }
            }
        }
    }
    Ok(CheckResult::new(
        "expected-gradient",
        worst,
        cfg.z_tolerance,
        format!("{} units x (gaussian, bernoulli), max |z| per coordinate", cfg.instances),
    ))
}

/// A random network for gradient checking; case `c` fixes depth, loss and
/// activations so that 20 cases cover every combination.
pub fn gradient_case<R: Rng + ?Sized>(g: &mut R, case: usize, max_width: usize) -> (Network, Loss) {
    let depth = 1 + case % 3;
    let loss = if case % 2 == 0 { Loss::Quadratic } else { Loss::RelativeEntropy };
    let hidden = [Activation::sigmoid(), Activation::Relu, Activation::Identity][(case / 2) % 3];
    let output = match loss {
        Loss::Quadratic => [Activation::Identity, Activation::sigmoid(), Activation::Softmax, Activation::Relu][(case / 2) % 4],
        Loss::RelativeEntropy => [Activation::Softmax, Activation::sigmoid()][(case / 2) % 2],
    };
    let output = match output {
        Activation::Sigmoid(_) if case % 4 == 1 => Activation::Sigmoid(SigmoidParams { c: 1.5, lambda: 0.7 }),
        a => a,
    };
    let laws = [
        None,
        Some(MaskDistribution::BERNOULLI_HALF),
        Some(MaskDistribution::Uniform),
        Some(MaskDistribution::clipped_gaussian(0.5, 0.2).expect("valid law")),
    ];
    let mut inputs = g.random_range(1..=max_width);
    let mut layers = Vec::with_capacity(depth);
    for d in 0..depth {
        let last = d + 1 == depth;
        let units = if last && output == Activation::Softmax {
            g.random_range(2..=max_width.max(2))
        } else {
            g.random_range(1..=max_width)
        };
        let scale = 1.0 / (inputs as f64).sqrt();
        let w = Array2::from_shape_fn((units, inputs), |_| scale * g.sample::<f64, _>(StandardNormal));
        let b = Array1::from_shape_fn(units, |_| 0.1 * g.sample::<f64, _>(StandardNormal));
        let dropout = laws[(case + d) % laws.len()];
        let act = if last { output } else { hidden };
        layers.push(DenseLayer::new(w, b, act, dropout).expect("finite layer"));
        inputs = units;
    }
    (Network::new(layers).expect("consistent dims"), loss)
}

/// Backpropagation against central finite differences on 20 random networks.
pub fn check_backprop(cfg: &VerifyConfig) -> Result<CheckResult> {
    let root = analysis(cfg.seed, 6);
    let mut g = root.generator();
    let mut worst = 0.0f64;
    let cases = 20;
    for case in 0..cases {
        let (net, loss) = gradient_case(&mut g, case, 16);
        let n = 4;
        let x = Array2::from_shape_fn((n, net.input_dim()), |_| g.sample::<f64, _>(StandardNormal));
        let k = net.output_dim();
        let targets = match (loss, net.layers.last().expect("layer").activation) {
            (_, Activation::Softmax) => one_hot(&(0..n).map(|_| g.random_range(0..k)).collect::<Vec<_>>(), k),
            _ => Array2::from_shape_fn((n, k), |_| g.random_range(0.0..1.0)),
        };
        let r = gradient_check(&net, x.view(), targets.view(), loss, &root.substream(case as u64), 1e-5)?;
        worst = worst.max(r.relative_error);
    }
    Ok(CheckResult::new(
        "backprop",
        worst,
        1e-5,
        format!("{cases} networks, max relative error vs central differences"),
    ))
}

/// Two-sided t-test p-value for integer `df` from the closed-form series for
/// the Student-t CDF (Abramowitz & Stegun 26.7.3-26.7.4).
pub fn t_p_reference(t: f64, df: u32) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let c2 = c * c;
    let a = if df % 2 == 0 {
        let (mut term, mut sum) = (1.0, 1.0);
        let mut k = 2;
        while k < df {
            term *= c2 * (k - 1) as f64 / k as f64;
            sum += term;
            k += 2;
        }
        s * sum
    } else {
        let mut inner = 0.0;
        if df > 1 {
            let mut term = 1.0;
            inner = 1.0;
            let mut k = 3;
            while k < df {
                term *= c2 * (k - 1) as f64 / k as f64;
                inner += term;
                k += 2;
            }
        }
        2.0 / std::f64::consts::PI * (theta + s * c * inner)
    };
    1.0 - a
}

/// Two-sided Wilcoxon p-value from all `2^n` sign assignments of the ranks.
pub fn wilcoxon_p_enumerated(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return 1.0;
    }
    let r = signed_ranks(&nz);
    let w: f64 = nz.iter().zip(&r).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = r.len();
    let (mut lo, mut hi) = (0u64, 0u64);
    for bits in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| r[i]).sum();
        if s <= w + 1e-9 {
            lo += 1;
        }
        if s >= w - 1e-9 {
            hi += 1;
        }
    }
    (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
}

/// Fixed fixtures plus random samples with `n <= 8`.
pub fn stats_fixtures(seed: u64) -> Vec<Vec<f64>> {
    let mut f = vec![
        vec![1.0, 2.0, 3.0, 4.0, 5.0],
        vec![1.0, 2.0, 3.0, 4.0, 5.0, -1.0],
        vec![0.5, -0.25, 0.75, 1.5],
        vec![-3.0, -1.0, 2.0, 2.0, -2.0, 4.0, 0.0, 1.0],
        vec![0.01, 0.02],
        vec![0.1, 0.1, 0.1, -0.1, 0.3, 0.2, 0.4],
    ];
    let mut g = analysis(seed, 9).generator();
    for _ in 0..40 {
        let n = g.random_range(2..=8);
        // Integer-valued draws exercise ties and zeros.
        f.push((0..n).map(|_| g.random_range(-4i32..=4) as f64 * 0.25 + 0.1).collect());
    }
    f
}

pub fn check_statistics(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let fixtures = stats_fixtures(cfg.seed);
    for d in &fixtures {
        let t = t_test(d)?;
        if !t.degenerate {
            worst = worst.max((t.p_value - t_p_reference(t.statistic, t.df as u32)).abs());
        }
        let w = wilcoxon_signed_rank(d)?;
        worst = worst.max((w.p_value - wilcoxon_p_enumerated(d)).abs());
    }
    Ok(CheckResult::new(
        "statistics",
        worst,
        1e-6,
        format!("{} fixtures, max |p - reference|", fixtures.len()),
    ))
}

/// Every suite, in a fixed order.
pub fn run_all(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let (dec, exh) = check_decomposition(cfg)?;
    Ok(vec![
        check_moments(cfg)?,
        check_ratio_laws(cfg)?,
        check_sigmoid_approximation()?,
        dec,
        exh,
        check_expected_gradient(cfg)?,
        check_backprop(cfg)?,
        check_statistics(cfg)?,
    ])
}
