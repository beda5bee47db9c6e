//! Mini-batch SGD with momentum, max-norm projection, and a decaying
//! learning rate, plus multi-run comparisons and variance sweeps.
//!
//! A run is fully determined by its seed: initial weights come from the
//! `INIT` stream, epoch `e` is shuffled by `SHUFFLE.substream(e)` and update
//! `s` draws its masks from `MASKS.substream(s)`.

use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, Mnist};
use crate::error::{Error, Result};
use crate::masks::MaskDistribution;
use crate::network::{
    apply_maxnorm, argmax_rows, Activation, backward, forward_test, forward_train, loss_value, one_hot, Init, Loss, NetSpec,
    Network,
};
use crate::rng::{streams, RngStream};
use crate::stats::{mean_std, paired_t_test, paired_wilcoxon, TTest, Wilcoxon};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    /// Epochs over which momentum ramps linearly from start to end.
    pub momentum_ramp_epochs: usize,
    /// Max-norm radius for hidden units; `None` leaves weights unconstrained.
    pub maxnorm_c: Option<f64>,
    pub seed: u64,
    /// Mask law at every dropout site; `None` trains without dropout.
    pub dropout: Option<MaskDistribution>,
    /// Whether the raw input is masked too (hidden-layer inputs always are).
    pub mask_input: bool,
    pub init: Init,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 100,
            lr_initial: 0.05,
            lr_decay: 0.998,
            momentum_start: 0.5,
            momentum_end: 0.95,
            momentum_ramp_epochs: 10,
            maxnorm_c: Some(3.5),
            seed: 0,
            dropout: None,
            mask_input: false,
            init: Init::UniformFan,
            loss: Loss::RelativeEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::invalid("lr_initial must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::invalid("lr_decay must be > 0"));
        }
        for m in [self.momentum_start, self.momentum_end] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::invalid(format!("momentum must be in [0, 1), got {m}")));
            }
        }
        if let Some(c) = self.maxnorm_c {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("maxnorm_c must be > 0, got {c}")));
            }
        }
        if let Some(d) = &self.dropout {
            d.validate()?;
        }
        if let Init::Normal { std } = self.init {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::invalid("init std must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn momentum_at(&self, epoch: usize) -> f64 {
        if self.momentum_ramp_epochs == 0 {
            return self.momentum_end;
        }
        let f = (epoch as f64 / self.momentum_ramp_epochs as f64).min(1.0);
        self.momentum_start + (self.momentum_end - self.momentum_start) * f
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_initial * self.lr_decay.powi(epoch as i32)
    }

    /// Name used in reports: the mask spec string, or `none`.
    pub fn method_name(&self) -> String {
        self.dropout.map_or_else(|| "none".to_string(), |d| d.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Mean masked training loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub validation_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub final_validation_error: Option<f64>,
    pub test_error: Option<f64>,
    pub initial_fingerprint: String,
    pub final_fingerprint: String,
    /// Excluded from determinism comparisons.
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Copy with the wall-clock field zeroed, for byte-level comparison.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Misclassification rate of argmax test-time predictions.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if ds.dim() != net.input_dim() {
        return Err(Error::dims(format!(
            "dataset has {} features but network expects {}",
            ds.dim(),
            net.input_dim()
        )));
    }
    let mut wrong = 0usize;
    for (chunk, labels) in ds.inputs.axis_chunks_iter(Axis(0), 1000).zip(ds.labels.chunks(1000)) {
        let out = forward_test(net, chunk)?;
        wrong += argmax_rows(&out.view()).iter().zip(labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / ds.len() as f64)
}

/// Trains a network built from `spec` with the config's dropout installed at
/// its sites. `validation` may be empty.
pub fn train(spec: &NetSpec, train_set: &Dataset, validation: &Dataset, cfg: &TrainConfig) -> Result<(Network, RunReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if train_set.dim() != spec.input_dim {
        return Err(Error::dims(format!(
            "training data has {} features but the network expects {}",
            train_set.dim(),
            spec.input_dim
        )));
    }
    let out_dim = spec.layers.last().map_or(0, |l| l.units);
    if train_set.n_classes > out_dim {
        return Err(Error::dims(format!(
            "{} classes but only {out_dim} outputs",
            train_set.n_classes
        )));
    }
    let started = Instant::now();
    let spec = spec.with_dropout(cfg.dropout, cfg.mask_input);
    let mut net = Network::init(&spec, cfg.init, &RngStream::new(cfg.seed, streams::INIT))?;
    let initial_fingerprint = net.fingerprint();
    let shuffle = RngStream::new(cfg.seed, streams::SHUFFLE);
    let masks = RngStream::new(cfg.seed, streams::MASKS);
    let mut velocity: Vec<(ndarray::Array2<f64>, ndarray::Array1<f64>)> = net
        .layers
        .iter()
        .map(|l| (ndarray::Array2::zeros(l.weights.dim()), ndarray::Array1::zeros(l.bias.len())))
        .collect();
    let targets = one_hot(&train_set.labels, out_dim);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let momentum = cfg.momentum_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut shuffle.substream(epoch as u64).generator());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let x = train_set.inputs.select(Axis(0), idx);
            let t = targets.select(Axis(0), idx);
            let trace = forward_train(&net, x.view(), &masks.substream(step as u64))?;
            let loss = loss_value(&net, &trace, t.view(), cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            let grads = backward(&net, &trace, t.view(), cfg.loss)?;
            for ((layer, (vw, vb)), g) in net.layers.iter_mut().zip(&mut velocity).zip(&grads.layers) {
                vw.zip_mut_with(&g.weights, |v, &gw| *v = momentum * *v - lr * gw);
                vb.zip_mut_with(&g.bias, |v, &gb| *v = momentum * *v - lr * gb);
                layer.weights += &*vw;
                layer.bias += &*vb;
            }
            if let Some(c) = cfg.maxnorm_c {
                apply_maxnorm(&mut net, c)?;
            }
            if net.layers.iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
                return Err(Error::Divergence { epoch, step, loss: f64::NAN });
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let validation_error = if validation.is_empty() { None } else { Some(evaluate(&net, validation)?) };
        records.push(EpochRecord {
            epoch,
            learning_rate: lr,
            momentum,
            train_loss: loss_sum / batches as f64,
            validation_error,
        });
    }
    let final_validation_error = if validation.is_empty() { None } else { Some(evaluate(&net, validation)?) };
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: cfg.method_name(),
        seed: cfg.seed,
        config: cfg.clone(),
        epochs: records,
        final_validation_error,
        test_error: None,
        initial_fingerprint,
        final_fingerprint: net.fingerprint(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}

/// Training, validation, and test partitions for an experiment.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub test: &'a Dataset,
}

/// Owned partitions, typically MNIST cut into train/validation plus the
/// official test set.
#[derive(Debug, Clone)]
pub struct Partitions {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl Partitions {
    /// Splits the MNIST training set into `train_count` training examples and
    /// a validation remainder with the `SPLIT` stream of `seed`.
    pub fn from_mnist(mnist: Mnist, train_count: usize, seed: u64) -> Result<Self> {
        let (train, validation) = split(&mnist.train, train_count, &RngStream::new(seed, streams::SPLIT))?;
        Ok(Self {
            train,
            validation,
            test: mnist.test,
        })
    }

    pub fn view(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            validation: &self.validation,
            test: &self.test,
        }
    }
}

pub const MNIST_TRAIN_COUNT: usize = 50_000;
pub const DESK_WIDTH: usize = 128;

/// `784-width-width-10` with ReLU hidden units and a softmax output.
pub fn mnist_spec(width: usize) -> NetSpec {
    NetSpec::mlp(784, &[width, width], Activation::Relu, 10, None, false)
}

/// [`train`] followed by evaluation on the test set.
pub fn train_and_test(spec: &NetSpec, data: Splits<'_>, cfg: &TrainConfig) -> Result<(Network, RunReport)> {
    let (net, mut report) = train(spec, data.train, data.validation, cfg)?;
    report.test_error = Some(evaluate(&net, data.test)?);
    Ok((net, report))
}

/// Seed of run `i` in a multi-run experiment; run 0 reproduces a single
/// training run with seed `base`.
pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub method_a: String,
    pub method_b: String,
    pub errors_a: Vec<f64>,
    pub errors_b: Vec<f64>,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
    pub t_test: TTest,
    pub wilcoxon: Wilcoxon,
    pub p_value_t: f64,
    pub p_value_w: f64,
}

impl ComparisonReport {
    pub fn new(method_a: &str, errors_a: &[f64], method_b: &str, errors_b: &[f64]) -> Result<Self> {
        let t = paired_t_test(errors_a, errors_b)?;
        let w = paired_wilcoxon(errors_a, errors_b)?;
        let (mean_a, std_a) = mean_std(errors_a);
        let (mean_b, std_b) = mean_std(errors_b);
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            method_a: method_a.into(),
            method_b: method_b.into(),
            errors_a: errors_a.to_vec(),
            errors_b: errors_b.to_vec(),
            mean_a,
            std_a,
            mean_b,
            std_b,
            p_value_t: t.p_value,
            p_value_w: w.p_value,
            t_test: t,
            wilcoxon: w,
        })
    }
}

/// Every run of every method, and the pairwise comparisons of test errors.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub methods: Vec<String>,
    /// `runs[m][i]`: method `m`, run `i`.
    pub runs: Vec<Vec<RunReport>>,
    pub networks: Vec<Vec<Network>>,
    pub pairs: Vec<ComparisonReport>,
}

impl Comparison {
    pub fn test_errors(&self, method: usize) -> Vec<f64> {
        self.runs[method].iter().map(|r| r.test_error.unwrap_or(f64::NAN)).collect()
    }

    pub fn mean_test_error(&self, method: usize) -> f64 {
        mean_std(&self.test_errors(method)).0
    }
}

/// Trains `n_runs` networks per mask law. Run `i` of every law uses the same
/// seed, hence the same initial weights and shuffles; this is verified by
/// weight fingerprint. Runs execute in parallel; results are in input order.
pub fn compare_methods(
    spec: &NetSpec,
    data: Splits<'_>,
    base: &TrainConfig,
    dists: &[Option<MaskDistribution>],
    n_runs: usize,
) -> Result<Comparison> {
    if n_runs < 2 {
        return Err(Error::TooFewSamples { min: 2, got: n_runs });
    }
    if dists.is_empty() {
        return Err(Error::invalid("no methods to compare"));
    }
    let jobs: Vec<(usize, usize)> = (0..dists.len()).flat_map(|m| (0..n_runs).map(move |i| (m, i))).collect();
    let results: Vec<(Network, RunReport)> = jobs
        .par_iter()
        .map(|&(m, i)| {
            let cfg = TrainConfig {
                seed: run_seed(base.seed, i),
                dropout: dists[m],
                ..base.clone()
            };
            train_and_test(spec, data, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut runs: Vec<Vec<RunReport>> = vec![Vec::with_capacity(n_runs); dists.len()];
    let mut networks: Vec<Vec<Network>> = vec![Vec::with_capacity(n_runs); dists.len()];
    for ((m, _), (net, report)) in jobs.into_iter().zip(results) {
        runs[m].push(report);
        networks[m].push(net);
    }
    for i in 0..n_runs {
        let first = &runs[0][i].initial_fingerprint;
        if runs.iter().any(|r| &r[i].initial_fingerprint != first) {
            return Err(Error::Numeric(format!("run {i}: methods did not start from identical weights")));
        }
    }
    let methods: Vec<String> = runs.iter().map(|r| r[0].method.clone()).collect();
    let mut pairs = Vec::new();
    for a in 0..dists.len() {
        for b in a + 1..dists.len() {
            let ea: Vec<f64> = runs[a].iter().map(|r| r.test_error.expect("evaluated")).collect();
            let eb: Vec<f64> = runs[b].iter().map(|r| r.test_error.expect("evaluated")).collect();
            pairs.push(ComparisonReport::new(&methods[a], &ea, &methods[b], &eb)?);
        }
    }
    Ok(Comparison {
        methods,
        runs,
        networks,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_sq: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub errors: Vec<f64>,
}

/// Test error of clipped-Gaussian dropout `N(0.5, sigma^2)` for every grid
/// value, `n_seeds` runs each.
pub fn variance_sweep(
    spec: &NetSpec,
    data: Splits<'_>,
    base: &TrainConfig,
    sigma_sq_grid: &[f64],
    n_seeds: usize,
) -> Result<Vec<SweepRow>> {
    if sigma_sq_grid.is_empty() {
        return Err(Error::invalid("variance grid is empty"));
    }
    if n_seeds == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    let laws = sigma_sq_grid
        .iter()
        .map(|&v| MaskDistribution::clipped_gaussian(0.5, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..laws.len()).flat_map(|g| (0..n_seeds).map(move |i| (g, i))).collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, i)| {
            let cfg = TrainConfig {
                seed: run_seed(base.seed, i),
                dropout: Some(laws[g]),
                ..base.clone()
            };
            Ok(train_and_test(spec, data, &cfg)?.1.test_error.expect("evaluated"))
        })
        .collect::<Result<_>>()?;
    Ok(sigma_sq_grid
        .iter()
        .enumerate()
        .map(|(g, &sigma_sq)| {
            let e = errors[g * n_seeds..(g + 1) * n_seeds].to_vec();
            let (mean_error, std_error) = mean_std(&e);
            SweepRow {
                sigma_sq,
                mean_error,
                std_error,
                errors: e,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sigma_sq,mean_error,std_error,n_runs\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.sigma_sq, r.mean_error, r.std_error, r.errors.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_gaussian_blobs;
    use crate::network::Activation;

    fn blobs(sep: f64, seed: u64) -> Dataset {
        synthetic_gaussian_blobs(100, 2, 2, sep, &RngStream::new(seed, 5)).unwrap()
    }

    fn linear_spec(dim: usize, classes: usize) -> NetSpec {
        NetSpec::mlp(dim, &[], Activation::Relu, classes, None, false)
    }

    fn empty(dim: usize) -> Dataset {
        Dataset::new(ndarray::Array2::zeros((0, dim)), vec![], 2).unwrap()
    }

    #[test]
    fn separable_blobs_reach_zero_train_error() {
        let ds = blobs(10.0, 1);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let (net, report) = train(&linear_spec(2, 2), &ds, &ds, &cfg).unwrap();
        assert_eq!(evaluate(&net, &ds).unwrap(), 0.0);
        assert_eq!(report.final_validation_error, Some(0.0));
    }

    #[test]
    fn zero_epochs_is_chance() {
        let ds = synthetic_gaussian_blobs(500, 4, 5, 1.0, &RngStream::new(2, 5)).unwrap();
        let spec = NetSpec::mlp(5, &[16], Activation::Relu, 4, None, false);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (net, report) = train(&spec, &ds, &empty(5), &cfg).unwrap();
        assert!(report.epochs.is_empty());
        let e = evaluate(&net, &ds).unwrap();
        let n = ds.len() as f64;
        let se = (0.75 * 0.25 / n).sqrt();
        // Argmax of a near-constant output is one class for most inputs.
        assert!((e - 0.75).abs() < 4.0 * se + 0.05, "{e}");
    }

    #[test]
    fn identical_config_identical_report() {
        let ds = blobs(3.0, 2);
        let spec = NetSpec::mlp(2, &[8], Activation::Relu, 2, None, false);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            dropout: Some(MaskDistribution::clipped_gaussian(0.5, 0.2).unwrap()),
            seed: 42,
            ..TrainConfig::default()
        };
        let (a, ra) = train(&spec, &ds, &ds, &cfg).unwrap();
        let (b, rb) = train(&spec, &ds, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.without_timing(), rb.without_timing());
        let other = TrainConfig { seed: 43, ..cfg };
        assert_ne!(train(&spec, &ds, &ds, &other).unwrap().0.fingerprint(), a.fingerprint());
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.momentum_at(0), 0.5);
        assert!((cfg.momentum_at(5) - 0.725).abs() < 1e-15);
        assert_eq!(cfg.momentum_at(10), 0.95);
        assert_eq!(cfg.momentum_at(30), 0.95);
        assert_eq!(cfg.lr_at(0), 0.05);
        assert!((cfg.lr_at(2) - 0.05 * 0.998 * 0.998).abs() < 1e-17);
    }

    #[test]
    fn config_errors() {
        let ds = blobs(3.0, 2);
        let bad = [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr_initial: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum_end: 1.0, ..TrainConfig::default() },
            TrainConfig { maxnorm_c: Some(-1.0), ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(train(&linear_spec(2, 2), &ds, &ds, &cfg), Err(Error::InvalidParameter(_))));
        }
        assert!(matches!(train(&linear_spec(3, 2), &ds, &ds, &TrainConfig::default()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = blobs(3.0, 2);
        let spec = NetSpec::mlp(2, &[8], Activation::Relu, 2, None, false);
        let cfg = TrainConfig {
            epochs: 5,
            lr_initial: 1e200,
            maxnorm_c: None,
            loss: Loss::Quadratic,
            init: Init::Normal { std: 1.0 },
            ..TrainConfig::default()
        };
        assert!(matches!(train(&spec, &ds, &ds, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn evaluate_extremes() {
        let ds = blobs(10.0, 3);
        let cfg = TrainConfig { epochs: 20, batch_size: 10, ..TrainConfig::default() };
        let (net, _) = train(&linear_spec(2, 2), &ds, &ds, &cfg).unwrap();
        assert_eq!(evaluate(&net, &ds).unwrap(), 0.0);
        let flipped = Dataset::new(ds.inputs.clone(), ds.labels.iter().map(|l| 1 - l).collect(), 2).unwrap();
        assert_eq!(evaluate(&net, &flipped).unwrap(), 1.0);
        assert!(evaluate(&net, &empty(2)).is_err());
    }

    #[test]
    fn comparisons_pair_runs() {
        let ds = blobs(2.0, 4);
        let data = Splits { train: &ds, validation: &ds, test: &ds };
        let spec = NetSpec::mlp(2, &[6], Activation::Relu, 2, None, false);
        let cfg = TrainConfig { epochs: 2, batch_size: 20, ..TrainConfig::default() };
        let laws = [Some(MaskDistribution::BERNOULLI_HALF), Some(MaskDistribution::BERNOULLI_HALF), None];
        let c = compare_methods(&spec, data, &cfg, &laws, 3).unwrap();
        assert_eq!(c.pairs.len(), 3);
        let same = &c.pairs[0];
        assert_eq!(same.errors_a, same.errors_b);
        assert_eq!(same.p_value_t, 1.0);
        assert!(same.t_test.degenerate);
        for i in 0..3 {
            assert_eq!(c.runs[0][i].initial_fingerprint, c.runs[2][i].initial_fingerprint);
        }
        assert_ne!(c.runs[0][0].initial_fingerprint, c.runs[0][1].initial_fingerprint);
        assert!(compare_methods(&spec, data, &cfg, &laws, 1).is_err());
    }

    #[test]
    fn sweep_shape() {
        let ds = blobs(2.0, 4);
        let data = Splits { train: &ds, validation: &ds, test: &ds };
        let spec = NetSpec::mlp(2, &[6], Activation::Relu, 2, None, false);
        let cfg = TrainConfig { epochs: 1, batch_size: 50, ..TrainConfig::default() };
        let rows = variance_sweep(&spec, data, &cfg, &[0.0, 0.2, 0.5], 2).unwrap();
        assert_eq!(rows.len(), 3);
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(variance_sweep(&spec, data, &cfg, &[], 2).is_err());
    }

    #[test]
    fn zero_variance_sweep_point_is_mean_scaled_training() {
        // sigma^2 = 0 masks are exactly 0.5, so training equals a plain run
        // on a network whose dropout-site inputs are halved.
        let ds = blobs(2.0, 6);
        let spec = NetSpec::mlp(2, &[6], Activation::Relu, 2, None, false);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 20,
            dropout: Some(MaskDistribution::clipped_gaussian(0.5, 0.0).unwrap()),
            ..TrainConfig::default()
        };
        let (net, _) = train(&spec, &ds, &empty(2), &cfg).unwrap();
        let out_train = forward_train(&net, ds.inputs.view(), &RngStream::new(0, 0)).unwrap();
        let out_test = forward_test(&net, ds.inputs.view()).unwrap();
        assert_eq!(out_train.output(), &out_test);
    }
}
