use serde::Serialize;

use contdrop::coadapt::{covariance_samples, shared_histograms, with_probe_dropout, BinSpec, CovHistogram};
use contdrop::data::{load_mnist, mnist_dir};
use contdrop::network::Network;
use contdrop::rng::streams;
use contdrop::train::{
    compare_methods, mnist_spec, sweep_csv, train_and_test, variance_sweep, ComparisonReport, Partitions, RunReport,
    SweepRow, TrainConfig,
};
use contdrop::{MaskDistribution, RngStream};

use crate::output::{ensure_dir, slug, write_json, write_text};
use crate::{CliResult, CompareArgs, CovhistArgs, Failure, Format, SweepArgs, TrainArgs, TrainOpts};

/// MNIST cut into train/validation with the run seed's split stream, plus the
/// (optionally truncated) test set.
fn load_data(opts: &TrainOpts, seed: u64) -> CliResult<Partitions> {
    let dir = mnist_dir(opts.mnist_dir.as_deref());
    let mnist = load_mnist(&dir)?;
    let mut parts = Partitions::from_mnist(mnist, opts.train_count, seed)?;
    if let Some(n) = opts.test_count {
        if n == 0 || n > parts.test.len() {
            return Err(Failure::Invalid(format!("--test-count must be in 1..={}", parts.test.len())));
        }
        parts.test = parts.test.head(n);
    }
    Ok(parts)
}

fn config(opts: &TrainOpts, seed: u64) -> CliResult<TrainConfig> {
    let cfg = opts.config(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn epochs_csv(report: &RunReport) -> String {
    let mut out = String::from("epoch,learning_rate,momentum,train_loss,validation_error\n");
    for e in &report.epochs {
        let v = e.validation_error.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{v}\n", e.epoch, e.learning_rate, e.momentum, e.train_loss));
    }
    out
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg = TrainConfig {
        dropout: a.dropout.0,
        ..config(&a.opts, a.common.seed)?
    };
    let parts = load_data(&a.opts, a.common.seed)?;
    let dir = ensure_dir(&a.common.out_dir)?;
    let (net, report) = train_and_test(&mnist_spec(a.opts.width), parts.view(), &cfg)?;
    println!(
        "{}: test error {:.4}, validation error {:.4}",
        report.method,
        report.test_error.unwrap_or(f64::NAN),
        report.final_validation_error.unwrap_or(f64::NAN)
    );
    write_json(&dir, "report.json", &report)?;
    net.save(&dir.join("model.json"))?;
    if a.common.format == Format::Csv {
        write_text(&dir, "epochs.csv", &epochs_csv(&report))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareOutput {
    methods: Vec<String>,
    mean_test_error: Vec<f64>,
    pairs: Vec<ComparisonReport>,
    runs: Vec<Vec<RunReport>>,
}

pub fn compare(a: CompareArgs) -> CliResult {
    let cfg = config(&a.opts, a.common.seed)?;
    let parts = load_data(&a.opts, a.common.seed)?;
    let dir = ensure_dir(&a.common.out_dir)?;
    let c = compare_methods(&mnist_spec(a.opts.width), parts.view(), &cfg, &a.dropout, a.runs)?;
    let means: Vec<f64> = (0..c.methods.len()).map(|m| c.mean_test_error(m)).collect();
    for (m, mean) in c.methods.iter().zip(&means) {
        println!("{m}: mean test error {mean:.4}");
    }
    for p in &c.pairs {
        println!("{} vs {}: p_t {:.4}, p_w {:.4}", p.method_a, p.method_b, p.p_value_t, p.p_value_w);
    }
    if a.common.format == Format::Csv {
        let mut csv = String::from("method,run,seed,test_error\n");
        for (m, runs) in c.methods.iter().zip(&c.runs) {
            for (i, r) in runs.iter().enumerate() {
                csv.push_str(&format!("{m},{i},{},{}\n", r.seed, r.test_error.unwrap_or(f64::NAN)));
            }
        }
        write_text(&dir, "comparison.csv", &csv)?;
    }
    let out = CompareOutput {
        methods: c.methods,
        mean_test_error: means,
        pairs: c.pairs,
        runs: c.runs,
    };
    write_json(&dir, "comparison.json", &out)?;
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CliResult {
    let cfg = config(&a.opts, a.common.seed)?;
    let parts = load_data(&a.opts, a.common.seed)?;
    let dir = ensure_dir(&a.common.out_dir)?;
    let rows: Vec<SweepRow> = variance_sweep(&mnist_spec(a.opts.width), parts.view(), &cfg, &a.grid, a.runs)?;
    for r in &rows {
        println!("var {}: mean test error {:.4} +- {:.4}", r.sigma_sq, r.mean_error, r.std_error);
    }
    write_text(&dir, "sweep.csv", &sweep_csv(&rows))?;
    write_json(&dir, "sweep.json", &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct CovhistSummary {
    method: String,
    layer_index: usize,
    zero_bin_fraction_signed: f64,
    zero_bin_fraction_absolute: f64,
}

pub fn covhist(a: CovhistArgs) -> CliResult {
    if a.repeats < contdrop::coadapt::MIN_REPEATS {
        return Err(Failure::Invalid(format!("--repeats must be at least {}", contdrop::coadapt::MIN_REPEATS)));
    }
    let parts = load_data(&a.opts, a.common.seed)?;
    if a.n_inputs == 0 || a.n_inputs > parts.test.len() {
        return Err(Failure::Invalid(format!("--n-inputs must be in 1..={}", parts.test.len())));
    }
    let dir = ensure_dir(&a.common.out_dir)?;
    let nets: Vec<(String, Network)> = if a.model.is_empty() {
        let laws: Vec<Option<MaskDistribution>> = if a.dropout.is_empty() {
            vec![Some(MaskDistribution::clipped_gaussian(0.5, 0.2)?), None]
        } else {
            a.dropout.clone()
        };
        let spec = mnist_spec(a.opts.width);
        let base = config(&a.opts, a.common.seed)?;
        let mut out = Vec::with_capacity(laws.len());
        for law in laws {
            let cfg = TrainConfig { dropout: law, ..base.clone() };
            let (net, report) = train_and_test(&spec, parts.view(), &cfg)?;
            println!("{}: test error {:.4}", report.method, report.test_error.unwrap_or(f64::NAN));
            out.push((report.method, net));
        }
        out
    } else {
        a.model
            .iter()
            .map(|p| {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
                Ok((stem, Network::load(p)?))
            })
            .collect::<CliResult<_>>()?
    };
    let hidden = nets.iter().map(|(_, n)| n.layers.len().saturating_sub(1)).min().unwrap_or(0);
    if hidden == 0 {
        return Err(Failure::Invalid("networks need at least one hidden layer".into()));
    }
    let inputs = parts.test.head(a.n_inputs).inputs;
    let bins = BinSpec::Auto {
        bins: a.bins,
        percentile: a.percentile,
    };
    let root = RngStream::new(a.common.seed, streams::ANALYSIS).substream(300);
    let mut summary = Vec::new();
    for layer in 0..hidden {
        let samples = nets
            .iter()
            .map(|(_, net)| {
                let probed = with_probe_dropout(net, a.probe, layer)?;
                Ok(covariance_samples(&probed, layer, inputs.view(), a.repeats, &root.substream(layer as u64))?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let signed = shared_histograms(&samples, &bins, false)?;
        let absolute = shared_histograms(&samples, &bins, true)?;
        for (((name, _), s), abs) in nets.iter().zip(&signed).zip(&absolute) {
            let base = format!("covhist_{}_layer{}", slug(name), layer + 1);
            write_text(&dir, &format!("{base}_signed.csv"), &s.to_csv())?;
            write_text(&dir, &format!("{base}_abs.csv"), &abs.to_csv())?;
            println!(
                "{name} layer {}: zero-bin fraction {:.4} (signed), {:.4} (absolute)",
                layer + 1,
                s.zero_bin_fraction(),
                abs.zero_bin_fraction()
            );
            summary.push(CovhistSummary {
                method: name.clone(),
                layer_index: layer,
                zero_bin_fraction_signed: s.zero_bin_fraction(),
                zero_bin_fraction_absolute: abs.zero_bin_fraction(),
            });
        }
        let h: Vec<(&str, &CovHistogram, &CovHistogram)> =
            nets.iter().zip(&signed).zip(&absolute).map(|(((n, _), s), a)| (n.as_str(), s, a)).collect();
        write_json(&dir, &format!("covhist_layer{}.json", layer + 1), &h)?;
    }
    write_json(&dir, "covhist_summary.json", &summary)?;
    Ok(())
}
