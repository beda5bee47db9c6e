//! Co-adaptation analysis: histograms of pairwise covariances between the
//! outputs of units in one layer, estimated over repeated mask draws for a
//! fixed input.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::MaskDistribution;
use crate::mc::{self, Track};
use crate::network::{forward_train_with, Network};
use crate::rng::RngStream;

pub const MIN_REPEATS: usize = 100;

/// Covariance matrix of one layer's outputs for a single input, with
/// standard errors of every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputCovariance {
    pub covariance: Array2<f64>,
    pub standard_error: Array2<f64>,
    pub n_repeats: usize,
}

fn check_layer(net: &Network, layer: usize) -> Result<()> {
    if layer >= net.layers.len() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for a {}-layer network",
            net.layers.len()
        )));
    }
    if net.layers[..=layer].iter().all(|l| l.dropout.is_none()) {
        return Err(Error::invalid(format!(
            "layer {layer} has no stochastic masks upstream; nothing to estimate"
        )));
    }
    Ok(())
}

/// `Cov(O_i, O_l)` of layer `layer`'s outputs over `n_repeats` forward passes
/// of `input` with fresh masks.
pub fn output_covariance(
    net: &Network,
    layer: usize,
    input: ArrayView1<f64>,
    n_repeats: usize,
    rng: &RngStream,
) -> Result<OutputCovariance> {
    check_layer(net, layer)?;
    if n_repeats < MIN_REPEATS {
        return Err(Error::TooFewSamples {
            min: MIN_REPEATS,
            got: n_repeats,
        });
    }
    if input.len() != net.input_dim() {
        return Err(Error::dims("input does not match network"));
    }
    let prefix = Network {
        layers: net.layers[..=layer].to_vec(),
    };
    let k = prefix.output_dim();
    let row = input.insert_axis(ndarray::Axis(0));
    let failure = std::sync::Mutex::new(None);
    let pooled = mc::run(n_repeats, k, rng, Track::Covariance, |g, buf| {
        let rows = buf.len() / k;
        let batch = row.broadcast((rows, input.len())).expect("broadcast row").to_owned();
        match forward_train_with(&prefix, batch.view(), g) {
            Ok(trace) => buf.copy_from_slice(trace.output().as_slice().expect("standard layout")),
            Err(e) => *failure.lock().expect("lock") = Some(e),
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    Ok(OutputCovariance {
        covariance: Array2::from_shape_fn((k, k), |(i, l)| pooled.covariance(i, l)),
        standard_error: Array2::from_shape_fn((k, k), |(i, l)| pooled.covariance_se(i, l)),
        n_repeats,
    })
}

/// Pairwise covariances `i < l`, pooled over all inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovSamples {
    pub layer_index: usize,
    pub n_inputs: usize,
    pub n_repeats: usize,
    pub values: Vec<f64>,
}

/// Per-input covariance estimates for every unit pair of `layer`. Input `i`
/// draws its masks from `rng.substream(i)`.
pub fn covariance_samples(
    net: &Network,
    layer: usize,
    inputs: ArrayView2<f64>,
    n_repeats: usize,
    rng: &RngStream,
) -> Result<CovSamples> {
    check_layer(net, layer)?;
    let per_input: Vec<Vec<f64>> = (0..inputs.nrows())
        .into_par_iter()
        .map(|i| {
            let c = output_covariance(net, layer, inputs.row(i), n_repeats, &rng.substream(i as u64))?;
            let k = c.covariance.nrows();
            let mut v = Vec::with_capacity(k * (k - 1) / 2);
            for a in 0..k {
                for b in a + 1..k {
                    v.push(c.covariance[[a, b]]);
                }
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    Ok(CovSamples {
        layer_index: layer,
        n_inputs: inputs.nrows(),
        n_repeats,
        values: per_input.concat(),
    })
}

/// How histogram bins are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinSpec {
    /// `bins` uniform bins over `[-c, c]`, `c` the given percentile of
    /// `|cov|` (1 when that is 0), plus an overflow bin on each side bounded
    /// by the observed extremes.
    Auto { bins: usize, percentile: f64 },
    /// Explicit sorted edges.
    Edges(Vec<f64>),
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::Auto {
            bins: 41,
            percentile: 99.9,
        }
    }
}

fn percentile_abs(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut a: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    let rank = (pct / 100.0 * (a.len() - 1) as f64).round() as usize;
    a[rank.min(a.len() - 1)]
}

impl BinSpec {
    /// Resolves to concrete edges for the pooled `samples`.
    pub fn edges(&self, samples: &[&[f64]]) -> Result<Vec<f64>> {
        match self {
            BinSpec::Edges(e) => {
                if e.len() < 2 || e.windows(2).any(|w| !(w[0] <= w[1])) {
                    return Err(Error::invalid("bin edges must be sorted with at least two entries"));
                }
                Ok(e.clone())
            }
            &BinSpec::Auto { bins, percentile } => {
                if bins == 0 || !(0.0..=100.0).contains(&percentile) {
                    return Err(Error::invalid("auto bins need bins > 0 and a percentile in [0, 100]"));
                }
                let all: Vec<f64> = samples.iter().flat_map(|s| s.iter().copied()).collect();
                let mut c = percentile_abs(&all, percentile);
                if c == 0.0 {
                    c = 1.0;
                }
                let lo = all.iter().copied().fold(-c, f64::min);
                let hi = all.iter().copied().fold(c, f64::max);
                let mut edges = Vec::with_capacity(bins + 3);
                edges.push(lo);
                for b in 0..=bins {
                    edges.push(-c + 2.0 * c * b as f64 / bins as f64);
                }
                edges.push(hi);
                Ok(edges)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovHistogram {
    pub layer_index: usize,
    pub n_inputs: usize,
    pub n_repeats: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// `log10(count)`; `None` for empty bins.
    pub log_counts: Vec<Option<f64>>,
    /// Whether `|cov|` was binned instead of the signed value.
    pub absolute: bool,
}

impl CovHistogram {
    /// Bins `[e_b, e_{b+1})`, the last one closed. Values outside the edges
    /// are not counted.
    pub fn from_samples(samples: &CovSamples, edges: Vec<f64>, absolute: bool) -> Self {
        let nb = edges.len() - 1;
        let mut counts = vec![0u64; nb];
        for &raw in &samples.values {
            let v = if absolute { raw.abs() } else { raw };
            if let Some(b) = bin_index(&edges, v) {
                counts[b] += 1;
            }
        }
        let log_counts = counts.iter().map(|&c| (c > 0).then(|| (c as f64).log10())).collect();
        Self {
            layer_index: samples.layer_index,
            n_inputs: samples.n_inputs,
            n_repeats: samples.n_repeats,
            bin_edges: edges,
            counts,
            log_counts,
            absolute,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the bin containing 0, if any.
    pub fn zero_bin(&self) -> Option<usize> {
        bin_index(&self.bin_edges, 0.0)
    }

    /// Share of counted pairs that fall into the bin containing 0.
    pub fn zero_bin_fraction(&self) -> f64 {
        match (self.zero_bin(), self.total()) {
            (Some(b), t) if t > 0 => self.counts[b] as f64 / t as f64,
            _ => 0.0,
        }
    }

    /// `bin_left,bin_right,log10_count`; empty bins leave the count blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,log10_count\n");
        for (b, lc) in self.log_counts.iter().enumerate() {
            let lc = lc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", self.bin_edges[b], self.bin_edges[b + 1], lc));
        }
        out
    }
}

fn bin_index(edges: &[f64], v: f64) -> Option<usize> {
    let nb = edges.len() - 1;
    if v.is_nan() || v < edges[0] || v > edges[nb] {
        return None;
    }
    // first edge strictly greater than v
    let upper = edges.partition_point(|&e| e <= v);
    Some(upper.saturating_sub(1).min(nb - 1))
}

/// Signed covariance histogram of `layer`'s unit pairs.
pub fn covariance_histogram(
    net: &Network,
    layer: usize,
    inputs: ArrayView2<f64>,
    n_repeats: usize,
    bins: &BinSpec,
    rng: &RngStream,
) -> Result<CovHistogram> {
    let s = covariance_samples(net, layer, inputs, n_repeats, rng)?;
    let edges = bins.edges(&[&s.values])?;
    Ok(CovHistogram::from_samples(&s, edges, false))
}

/// Histograms of several sample sets over one set of edges pooled from all of
/// them, so that bin fractions are comparable across networks. With
/// `absolute`, `|cov|` is binned and automatic bins cover `[0, c]` plus one
/// upper overflow bin.
pub fn shared_histograms(samples: &[CovSamples], bins: &BinSpec, absolute: bool) -> Result<Vec<CovHistogram>> {
    let edges = match (bins, absolute) {
        (&BinSpec::Auto { bins: nb, percentile }, true) => {
            if nb == 0 || !(0.0..=100.0).contains(&percentile) {
                return Err(Error::invalid("auto bins need bins > 0 and a percentile in [0, 100]"));
            }
            let all: Vec<f64> = samples.iter().flat_map(|s| s.values.iter().copied()).collect();
            let mut c = percentile_abs(&all, percentile);
            if c == 0.0 {
                c = 1.0;
            }
            let mut e: Vec<f64> = (0..=nb).map(|b| c * b as f64 / nb as f64).collect();
            let hi = all.iter().map(|v| v.abs()).fold(c, f64::max);
            e.push(hi);
            e
        }
        _ => {
            let views: Vec<&[f64]> = samples.iter().map(|s| s.values.as_slice()).collect();
            bins.edges(&views)?
        }
    };
    Ok(samples.iter().map(|s| CovHistogram::from_samples(s, edges.clone(), absolute)).collect())
}

/// The same network with `law` installed at every layer input up to and
/// including `through` that has no dropout, each such layer's weights scaled
/// by `1 / mean` so the test-time function is unchanged. Lets a network
/// trained without (or with partial) dropout be probed for covariance.
pub fn with_probe_dropout(net: &Network, law: MaskDistribution, through: usize) -> Result<Network> {
    law.validate()?;
    let mean = law.mean();
    if mean <= 0.0 {
        return Err(Error::invalid("probe law needs a positive mean"));
    }
    let mut probed = net.clone();
    for layer in probed.layers.iter_mut().take(through + 1) {
        if layer.dropout.is_none() {
            layer.dropout = Some(law);
            layer.weights.mapv_inplace(|w| w / mean);
        }
    }
    Ok(probed)
}
