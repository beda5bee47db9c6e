//! Dense feedforward networks with input-side dropout masks.
//!
//! A layer computes `S = (X * M) W^T + b` and `O = act(S)`, where `M` is the
//! mask on the layer's *inputs* (absent when the layer has no dropout). Masks
//! are drawn per example and per input unit on every training forward pass
//! and recorded in the [`ForwardTrace`] so that [`backward`] differentiates
//! the realized masked loss exactly. At test time each mask is replaced by
//! its mean.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masks::MaskDistribution;
use crate::rng::RngStream;
use crate::statics::SigmoidParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid(SigmoidParams),
    Relu,
    /// Row-wise softmax; only allowed on the final layer.
    Softmax,
    Identity,
}

impl Activation {
    pub fn sigmoid() -> Self {
        Activation::Sigmoid(SigmoidParams::default())
    }

    /// Applies the activation to one example's pre-activations.
    pub fn apply_row(&self, row: &mut [f64]) {
        match self {
            Activation::Sigmoid(p) => row.iter_mut().for_each(|v| *v = p.value(*v)),
            Activation::Relu => row.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Identity => {}
            Activation::Softmax => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }

    fn apply(&self, pre: &Array2<f64>) -> Array2<f64> {
        let mut out = pre.as_standard_layout().into_owned();
        match self {
            Activation::Sigmoid(p) => out.mapv_inplace(|v| p.value(v)),
            Activation::Relu => out.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
            Activation::Softmax => {
                for mut row in out.rows_mut() {
                    self.apply_row(row.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    /// Maps `dL/dO` to `dL/dS`.
    fn backprop(&self, pre: &Array2<f64>, out: &Array2<f64>, grad_out: Array2<f64>) -> Array2<f64> {
        let mut g = grad_out;
        match self {
            Activation::Identity => {}
            Activation::Relu => Zip::from(&mut g).and(pre).for_each(|g, &s| {
                if s <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Sigmoid(p) => Zip::from(&mut g)
                .and(out)
                .for_each(|g, &o| *g *= p.lambda * o * (1.0 - o)),
            Activation::Softmax => {
                for (mut grow, orow) in g.rows_mut().into_iter().zip(out.rows()) {
                    let dot: f64 = grow.iter().zip(orow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut grow).and(&orow).for_each(|gv, &o| *gv = o * (*gv - dot));
                }
            }
        }
        g
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Sigmoid(p) if *p == SigmoidParams::default() => write!(f, "sigmoid"),
            Activation::Sigmoid(p) => write!(f, "sigmoid:c={},lambda={}", p.c, p.lambda),
            Activation::Relu => write!(f, "relu"),
            Activation::Softmax => write!(f, "softmax"),
            Activation::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let fail = |reason: &str| Error::Parse {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        match lower.split_once(':') {
            None => match lower.as_str() {
                "sigmoid" => Ok(Activation::sigmoid()),
                "relu" => Ok(Activation::Relu),
                "softmax" => Ok(Activation::Softmax),
                "identity" | "linear" => Ok(Activation::Identity),
                _ => Err(fail("unknown activation")),
            },
            Some(("sigmoid", rest)) => {
                let mut p = SigmoidParams::default();
                for item in rest.split(',').filter(|t| !t.is_empty()) {
                    let (k, v) = item.split_once('=').ok_or_else(|| fail("expected key=value"))?;
                    let v: f64 = v.trim().parse().map_err(|_| fail("not a number"))?;
                    match k.trim() {
                        "c" => p.c = v,
                        "lambda" => p.lambda = v,
                        _ => return Err(fail("unknown sigmoid parameter")),
                    }
                }
                Ok(Activation::Sigmoid(SigmoidParams::new(p.c, p.lambda)?))
            }
            Some(_) => Err(fail("only sigmoid takes parameters")),
        }
    }
}

/// One fully connected layer; `weights` is `units x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    /// Mask law applied to this layer's inputs during training.
    pub dropout: Option<MaskDistribution>,
}

impl DenseLayer {
    pub fn new(
        weights: Array2<f64>,
        bias: Array1<f64>,
        activation: Activation,
        dropout: Option<MaskDistribution>,
    ) -> Result<Self> {
        if bias.len() != weights.nrows() {
            return Err(Error::dims(format!(
                "bias has length {} but layer has {} units",
                bias.len(),
                weights.nrows()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("layer parameters must be finite"));
        }
        if let Some(d) = &dropout {
            d.validate()?;
        }
        Ok(Self {
            weights,
            bias,
            activation,
            dropout,
        })
    }

    /// Layer without bias, activation or dropout.
    pub fn linear(weights: Array2<f64>) -> Self {
        let k = weights.nrows();
        Self {
            weights,
            bias: Array1::zeros(k),
            activation: Activation::Identity,
            dropout: None,
        }
    }

    pub fn units(&self) -> usize {
        self.weights.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].units() != pair[1].inputs() {
                return Err(Error::dims(format!(
                    "layer {i} has {} units but layer {} expects {} inputs",
                    pair[0].units(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.activation == Activation::Softmax && i != last {
                return Err(Error::invalid(format!("softmax on hidden layer {i}")));
            }
            if l.bias.len() != l.units() {
                return Err(Error::dims(format!("layer {i} bias length mismatch")));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].units()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.dropout.is_some())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// SHA-256 over layer shapes and the bit patterns of all parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update((l.units() as u64).to_le_bytes());
            h.update((l.inputs() as u64).to_le_bytes());
            for v in l.weights.iter().chain(l.bias.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Architecture of a network before initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    #[serde(with = "activation_string")]
    pub activation: Activation,
    pub dropout: Option<MaskDistribution>,
}

impl NetSpec {
    /// An MLP with `hidden` widths, softmax output over `n_out` classes, and
    /// `dropout` on the input of every hidden-to-next connection. With
    /// `mask_input` the raw input is masked as well.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        hidden_activation: Activation,
        n_out: usize,
        dropout: Option<MaskDistribution>,
        mask_input: bool,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        for (i, &units) in hidden.iter().chain(std::iter::once(&n_out)).enumerate() {
            let is_out = i == hidden.len();
            layers.push(LayerSpec {
                units,
                activation: if is_out { Activation::Softmax } else { hidden_activation },
                dropout: if i == 0 && !mask_input { None } else { dropout },
            });
        }
        Self { input_dim, layers }
    }

    /// The same architecture with every existing dropout site switched to
    /// `dropout` (or removed when `None`).
    pub fn with_dropout(&self, dropout: Option<MaskDistribution>, mask_input: bool) -> Self {
        let mut spec = self.clone();
        for (i, l) in spec.layers.iter_mut().enumerate() {
            l.dropout = if i == 0 && !mask_input { None } else { dropout };
        }
        spec
    }
}

/// Weight initialization; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `N(0, std^2)`.
    Normal { std: f64 },
    /// Glorot-Bengio uniform on `+-sqrt(6 / (fan_in + fan_out))`.
    UniformFan,
}

impl Default for Init {
    fn default() -> Self {
        Init::Normal { std: 0.01 }
    }
}

impl Network {
    pub fn init(spec: &NetSpec, init: Init, rng: &RngStream) -> Result<Self> {
        let mut g = rng.generator();
        let mut inputs = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            if l.units == 0 || inputs == 0 {
                return Err(Error::invalid("layer widths must be positive"));
            }
            let weights = match init {
                Init::Normal { std } => {
                    Array2::from_shape_simple_fn((l.units, inputs), || std * g.sample::<f64, _>(StandardNormal))
                }
                Init::UniformFan => {
                    let a = (6.0 / (inputs + l.units) as f64).sqrt();
                    Array2::from_shape_simple_fn((l.units, inputs), || g.random_range(-a..a))
                }
            };
            layers.push(DenseLayer::new(weights, Array1::zeros(l.units), l.activation, l.dropout)?);
            inputs = l.units;
        }
        Network::new(layers)
    }
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// The masked input actually multiplied by the weights.
    pub input: Array2<f64>,
    /// Sampled mask; `None` for layers without dropout.
    pub mask: Option<Array2<f64>>,
    pub pre: Array2<f64>,
    pub out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.layers.last().expect("non-empty trace").out
    }

    pub fn masks(&self) -> Vec<Option<Array2<f64>>> {
        self.layers.iter().map(|l| l.mask.clone()).collect()
    }
}

fn check_batch(net: &Network, batch: &ArrayView2<f64>) -> Result<()> {
    if batch.ncols() != net.input_dim() {
        return Err(Error::dims(format!(
            "batch has width {} but network expects {}",
            batch.ncols(),
            net.input_dim()
        )));
    }
    if batch.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("batch contains NaN"));
    }
    Ok(())
}

fn affine(layer: &DenseLayer, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut pre = x.dot(&layer.weights.t()).as_standard_layout().into_owned();
    pre += &layer.bias;
    pre
}

/// Forward pass with freshly sampled masks at every dropout site.
pub fn forward_train(net: &Network, batch: ArrayView2<f64>, rng: &RngStream) -> Result<ForwardTrace> {
    forward_train_with(net, batch, &mut rng.generator())
}

/// [`forward_train`] drawing masks from an existing generator, in layer order
/// and row-major within each layer.
pub fn forward_train_with<R: Rng + ?Sized>(net: &Network, batch: ArrayView2<f64>, g: &mut R) -> Result<ForwardTrace> {
    check_batch(net, &batch)?;
    let n = batch.nrows();
    let masks = net
        .layers
        .iter()
        .map(|l| {
            l.dropout.map(|d| {
                let mut m = Array2::zeros((n, l.inputs()));
                d.sample_into(g, m.as_slice_mut().expect("standard layout"));
                m
            })
        })
        .collect();
    forward_with_masks(net, batch, masks)
}

/// Forward pass with caller-supplied masks (`None` leaves a layer's input
/// unmasked). Used for replaying a trace and for gradient checks.
pub fn forward_with_masks(
    net: &Network,
    batch: ArrayView2<f64>,
    masks: Vec<Option<Array2<f64>>>,
) -> Result<ForwardTrace> {
    check_batch(net, &batch)?;
    if masks.len() != net.layers.len() {
        return Err(Error::dims("one mask slot per layer required"));
    }
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(net.layers.len());
    for (layer, mask) in net.layers.iter().zip(masks) {
        let prev = match layers.last() {
            Some(t) => t.out.view(),
            None => batch.view(),
        };
        let input = match &mask {
            Some(m) => {
                if m.dim() != prev.dim() {
                    return Err(Error::dims(format!(
                        "mask shape {:?} does not match layer input {:?}",
                        m.dim(),
                        prev.dim()
                    )));
                }
                &prev * m
            }
            None => prev.to_owned(),
        };
        let pre = affine(layer, &input.view());
        let out = layer.activation.apply(&pre);
        layers.push(LayerTrace {
            input,
            mask,
            pre,
            out,
        });
    }
    Ok(ForwardTrace { layers })
}

/// Deterministic forward pass: each dropout site scales its input by the
/// mask mean instead of sampling.
pub fn forward_test(net: &Network, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_batch(net, &batch)?;
    let mut current: Option<Array2<f64>> = None;
    for layer in &net.layers {
        let x = current.as_ref().map_or(batch.view(), |c| c.view());
        let pre = match layer.dropout {
            Some(d) => {
                let mean = d.mean();
                affine(layer, &x.mapv(|v| v * mean).view())
            }
            None => affine(layer, &x),
        };
        current = Some(layer.activation.apply(&pre));
    }
    Ok(current.expect("non-empty network"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `1/2 sum_k (t_k - O_k)^2`.
    Quadratic,
    /// `-sum_k t_k log O_k` after softmax, or
    /// `-sum_k [t_k log O_k + (1 - t_k) log(1 - O_k)]` after sigmoid.
    RelativeEntropy,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean per-example loss of a trace's final layer.
pub fn loss_value(net: &Network, trace: &ForwardTrace, targets: ArrayView2<f64>, loss: Loss) -> Result<f64> {
    let last = trace.layers.last().ok_or_else(|| Error::invalid("empty trace"))?;
    if targets.dim() != last.out.dim() {
        return Err(Error::dims(format!(
            "targets {:?} vs outputs {:?}",
            targets.dim(),
            last.out.dim()
        )));
    }
    let n = targets.nrows() as f64;
    let act = net.layers.last().expect("non-empty").activation;
    let total = match loss {
        Loss::Quadratic => {
            Zip::from(&last.out)
                .and(&targets)
                .fold(0.0, |acc, &o, &t| acc + 0.5 * (t - o) * (t - o))
        }
        Loss::RelativeEntropy => match act {
            Activation::Softmax => {
                let mut acc = 0.0;
                for (srow, trow) in last.pre.rows().into_iter().zip(targets.rows()) {
                    let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + srow.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
                    acc -= srow.iter().zip(trow.iter()).map(|(s, t)| t * (s - lse)).sum::<f64>();
                }
                acc
            }
            Activation::Sigmoid(p) => {
                let lnc = p.c.ln();
                Zip::from(&last.pre).and(&targets).fold(0.0, |acc, &s, &t| {
                    let u = lnc - p.lambda * s;
                    // log O = -softplus(u); log(1 - O) = u - softplus(u)
                    acc + t * softplus(u) - (1.0 - t) * (u - softplus(u))
                })
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "relative entropy needs a sigmoid or softmax output, found {other}"
                )))
            }
        },
    };
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    /// All gradient entries in network order (weights then bias per layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied())
            .collect()
    }
}

/// Exact gradients of the mean realized loss with respect to every weight
/// and bias, with the trace's masks held fixed.
pub fn backward(net: &Network, trace: &ForwardTrace, targets: ArrayView2<f64>, loss: Loss) -> Result<Gradients> {
    if trace.layers.len() != net.layers.len() {
        return Err(Error::dims("trace and network have different depths"));
    }
    for (i, (l, t)) in net.layers.iter().zip(&trace.layers).enumerate() {
        if t.input.ncols() != l.inputs() || t.pre.ncols() != l.units() {
            return Err(Error::dims(format!("trace layer {i} does not match network")));
        }
    }
    let last = trace.layers.last().expect("non-empty");
    if targets.dim() != last.out.dim() {
        return Err(Error::dims(format!(
            "targets {:?} vs outputs {:?}",
            targets.dim(),
            last.out.dim()
        )));
    }
    let n = targets.nrows() as f64;
    let out_act = net.layers.last().expect("non-empty").activation;

    let mut delta = match loss {
        Loss::Quadratic => out_act.backprop(&last.pre, &last.out, &last.out - &targets),
        Loss::RelativeEntropy => match out_act {
            Activation::Sigmoid(p) => (&last.out - &targets) * p.lambda,
            Activation::Softmax => {
                let tsum = targets.sum_axis(Axis(1)).insert_axis(Axis(1));
                &last.out * &tsum - targets
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "relative entropy needs a sigmoid or softmax output, found {other}"
                )))
            }
        },
    };
    delta /= n;

    let mut grads = Vec::with_capacity(net.layers.len());
    for idx in (0..net.layers.len()).rev() {
        let t = &trace.layers[idx];
        let layer = &net.layers[idx];
        grads.push(LayerGradient {
            weights: delta.t().dot(&t.input),
            bias: delta.sum_axis(Axis(0)),
        });
        if idx > 0 {
            let mut grad_in = delta.dot(&layer.weights);
            if let Some(m) = &t.mask {
                grad_in *= m;
            }
            let prev = &trace.layers[idx - 1];
            delta = net.layers[idx - 1].activation.backprop(&prev.pre, &prev.out, grad_in);
        }
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Central finite-difference gradient of the realized loss under fixed masks.
pub fn numerical_gradient(
    net: &Network,
    batch: ArrayView2<f64>,
    masks: &[Option<Array2<f64>>],
    targets: ArrayView2<f64>,
    loss: Loss,
    step: f64,
) -> Result<Gradients> {
    let eval = |n: &Network| -> Result<f64> {
        let t = forward_with_masks(n, batch, masks.to_vec())?;
        loss_value(n, &t, targets, loss)
    };
    let mut probe = net.clone();
    let mut layers = Vec::with_capacity(net.layers.len());
    for li in 0..net.layers.len() {
        let (k, m) = net.layers[li].weights.dim();
        let mut gw = Array2::zeros((k, m));
        for i in 0..k {
            for j in 0..m {
                let orig = probe.layers[li].weights[[i, j]];
                probe.layers[li].weights[[i, j]] = orig + step;
                let up = eval(&probe)?;
                probe.layers[li].weights[[i, j]] = orig - step;
                let down = eval(&probe)?;
                probe.layers[li].weights[[i, j]] = orig;
                gw[[i, j]] = (up - down) / (2.0 * step);
            }
        }
        let mut gb = Array1::zeros(k);
        for i in 0..k {
            let orig = probe.layers[li].bias[i];
            probe.layers[li].bias[i] = orig + step;
            let up = eval(&probe)?;
            probe.layers[li].bias[i] = orig - step;
            let down = eval(&probe)?;
            probe.layers[li].bias[i] = orig;
            gb[i] = (up - down) / (2.0 * step);
        }
        layers.push(LayerGradient { weights: gw, bias: gb });
    }
    Ok(Gradients { layers })
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// `||g - g_fd|| / max(||g|| + ||g_fd||, 1e-12)` over all parameters.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub parameters: usize,
}

pub fn gradient_check(
    net: &Network,
    batch: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss: Loss,
    rng: &RngStream,
    step: f64,
) -> Result<GradientCheck> {
    let trace = forward_train(net, batch, rng)?;
    let analytic = backward(net, &trace, targets, loss)?.flatten();
    let numeric = numerical_gradient(net, batch, &trace.masks(), targets, loss, step)?.flatten();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    Ok(GradientCheck {
        relative_error: norm(&diff) / (norm(&analytic) + norm(&numeric)).max(1e-12),
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        parameters: analytic.len(),
    })
}

/// Rescales every hidden unit's incoming weight vector whose L2 norm exceeds
/// `c_max` back onto the ball of radius `c_max`. The output layer is left
/// unconstrained.
pub fn apply_maxnorm(net: &mut Network, c_max: f64) -> Result<()> {
    if c_max.is_nan() || c_max <= 0.0 {
        return Err(Error::invalid(format!("max-norm radius must be > 0, got {c_max}")));
    }
    if c_max.is_infinite() {
        return Ok(());
    }
    let hidden = net.layers.len().saturating_sub(1);
    for layer in &mut net.layers[..hidden] {
        for mut row in layer.weights.rows_mut() {
            let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
            if norm > c_max {
                let scale = c_max / norm;
                row.mapv_inplace(|w| w * scale);
            }
        }
    }
    Ok(())
}

/// Indices of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows(outputs: &ArrayView2<f64>) -> Vec<usize> {
    outputs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

mod activation_string {
    use super::Activation;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &Activation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&a.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Activation, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const MODEL_FORMAT: &str = "contdrop-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    layers: Vec<ModelLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelLayer {
    inputs: usize,
    units: usize,
    #[serde(with = "activation_string")]
    activation: Activation,
    dropout: Option<MaskDistribution>,
    /// Row-major `units x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Network {
    /// Versioned JSON model; weights round-trip bit-exactly.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| ModelLayer {
                    inputs: l.inputs(),
                    units: l.units(),
                    activation: l.activation,
                    dropout: l.dropout,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unexpected format tag `{}`", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Model(format!("unsupported model version {}", file.version)));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                let w = Array2::from_shape_vec((l.units, l.inputs), l.weights)
                    .map_err(|e| Error::Model(e.to_string()))?;
                DenseLayer::new(w, Array1::from(l.bias), l.activation, l.dropout)
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One-hot targets for class labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), n_classes));
    for (i, &c) in labels.iter().enumerate() {
        t[[i, c]] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn identity_12() -> Network {
        Network::new(vec![DenseLayer::linear(array![[1.0, 2.0]])]).unwrap()
    }

    #[test]
    fn forward_examples() {
        let net = identity_12();
        let x = array![[1.0, 1.0]];
        let t = forward_train(&net, x.view(), &RngStream::new(0, 0)).unwrap();
        assert_eq!(t.layers[0].pre, array![[3.0]]);
        assert_eq!(t.output(), &array![[3.0]]);
        assert!(t.layers[0].mask.is_none());

        let t = forward_with_masks(&net, x.view(), vec![Some(array![[1.0, 0.0]])]).unwrap();
        assert_eq!(t.layers[0].pre, array![[1.0]]);
        let t = forward_with_masks(&net, x.view(), vec![Some(array![[0.5, 0.5]])]).unwrap();
        assert_eq!(t.layers[0].pre, array![[1.5]]);
    }

    #[test]
    fn forward_errors() {
        let net = identity_12();
        assert!(matches!(
            forward_train(&net, array![[1.0, 2.0, 3.0]].view(), &RngStream::new(0, 0)),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(forward_test(&net, array![[f64::NAN, 1.0]].view()).is_err());
        assert!(forward_with_masks(&net, array![[1.0, 1.0]].view(), vec![Some(array![[1.0]])]).is_err());
    }

    #[test]
    fn test_time_scaling() {
        let mut net = identity_12();
        net.layers[0].dropout = Some(MaskDistribution::BERNOULLI_HALF);
        let x = array![[1.0, 3.0], [-2.0, 0.5]];
        let plain = identity_12();
        assert_eq!(forward_test(&net, x.view()).unwrap(), forward_test(&plain, (&x * 0.5).view()).unwrap());

        let mut g = net.clone();
        g.layers[0].dropout = Some(MaskDistribution::clipped_gaussian(0.5, 0.2).unwrap());
        assert_eq!(forward_test(&g, x.view()).unwrap(), forward_test(&net, x.view()).unwrap());

        let out = forward_test(&plain, x.view()).unwrap();
        for s in 0..3 {
            assert_eq!(&out, forward_train(&plain, x.view(), &RngStream::new(s, s)).unwrap().output());
        }
    }

    #[test]
    fn single_unit_gradient_is_g_squared() {
        let net = Network::new(vec![DenseLayer::linear(array![[1.0]])]).unwrap();
        for g in [0.0, 0.3, 1.0, 0.77] {
            let t = forward_with_masks(&net, array![[1.0]].view(), vec![Some(array![[g]])]).unwrap();
            let grads = backward(&net, &t, array![[0.0]].view(), Loss::Quadratic).unwrap();
            assert!((grads.layers[0].weights[[0, 0]] - g * g).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_error_gives_zero_gradient() {
        let net = random_net(&mut RngStream::new(4, 4).generator(), 2, false);
        let x = array![[0.2, -0.4, 0.1, 0.9]];
        let x = x.slice(ndarray::s![.., ..net.input_dim()]).to_owned();
        let out = forward_test(&net, x.view()).unwrap();
        let trace = forward_with_masks(&net, x.view(), vec![None; net.layers.len()]).unwrap();
        let grads = backward(&net, &trace, out.view(), Loss::Quadratic).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    fn random_activation<R: Rng>(g: &mut R, last: bool) -> Activation {
        match g.random_range(0..if last { 4 } else { 3 }) {
            0 => Activation::Sigmoid(SigmoidParams::new(g.random_range(0.5..2.0), g.random_range(0.5..2.0)).unwrap()),
            1 => Activation::Relu,
            2 => Activation::Identity,
            _ => Activation::Softmax,
        }
    }

    fn random_net<R: Rng>(g: &mut R, depth: usize, relative_entropy: bool) -> Network {
        let mut inputs = g.random_range(1..=4usize);
        let mut layers = Vec::new();
        for d in 0..depth {
            let last = d + 1 == depth;
            let units = g.random_range(1..=5usize);
            let activation = if last && relative_entropy {
                if g.random_bool(0.5) {
                    Activation::Softmax
                } else {
                    Activation::sigmoid()
                }
            } else {
                random_activation(g, last)
            };
            let w = Array2::from_shape_fn((units, inputs), |_| g.random_range(-1.0..1.0));
            let b = Array1::from_shape_fn(units, |_| g.random_range(-0.5..0.5));
            let dropout = match g.random_range(0..4) {
                0 => None,
                1 => Some(MaskDistribution::BERNOULLI_HALF),
                2 => Some(MaskDistribution::Uniform),
                _ => Some(MaskDistribution::clipped_gaussian(0.5, 0.2).unwrap()),
            };
            layers.push(DenseLayer::new(w, b, activation, dropout).unwrap());
            inputs = units;
        }
        Network::new(layers).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut g = RngStream::new(2024, 7).generator();
        for case in 0..20 {
            let depth = 1 + case % 3;
            let loss = if case % 2 == 0 { Loss::Quadratic } else { Loss::RelativeEntropy };
            let net = random_net(&mut g, depth, loss == Loss::RelativeEntropy);
            let n = 3;
            let x = Array2::from_shape_fn((n, net.input_dim()), |_| g.random_range(-1.0..1.0));
            let targets = match (loss, net.layers.last().unwrap().activation) {
                (Loss::RelativeEntropy, Activation::Softmax) => one_hot(&[0, net.output_dim() - 1, 0], net.output_dim()),
                _ => Array2::from_shape_fn((n, net.output_dim()), |_| g.random_range(0.0..1.0)),
            };
            let r = gradient_check(&net, x.view(), targets.view(), loss, &RngStream::new(case as u64, 1), 1e-5).unwrap();
            assert!(r.relative_error < 1e-5, "case {case}: {r:?}");
        }
    }

    #[test]
    fn relative_entropy_needs_probabilistic_output() {
        let net = identity_12();
        let t = forward_train(&net, array![[1.0, 1.0]].view(), &RngStream::new(0, 0)).unwrap();
        assert!(matches!(
            backward(&net, &t, array![[1.0]].view(), Loss::RelativeEntropy),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn maxnorm_examples() {
        let hidden = DenseLayer::linear(array![[2.0, 0.0], [0.0, 7.0]]);
        let out = DenseLayer::linear(array![[10.0, 0.0]]);
        let mut net = Network::new(vec![hidden, out]).unwrap();
        apply_maxnorm(&mut net, 3.5).unwrap();
        assert_eq!(net.layers[0].weights, array![[2.0, 0.0], [0.0, 3.5]]);
        assert_eq!(net.layers[1].weights, array![[10.0, 0.0]]);
        let before = net.clone();
        apply_maxnorm(&mut net, f64::INFINITY).unwrap();
        assert_eq!(net, before);
        assert!(apply_maxnorm(&mut net, 0.0).is_err());
    }

    #[test]
    fn softmax_only_on_output() {
        let sm = DenseLayer::new(array![[1.0]], array![0.0], Activation::Softmax, None).unwrap();
        assert!(Network::new(vec![sm.clone(), DenseLayer::linear(array![[1.0]])]).is_err());
        assert!(Network::new(vec![DenseLayer::linear(array![[1.0]]), sm]).is_ok());
        assert!(Network::new(vec![DenseLayer::linear(array![[1.0, 1.0]]), DenseLayer::linear(array![[1.0, 1.0]])]).is_err());
    }

    #[test]
    fn expectation_consistency_linear() {
        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.5]];
        let mut net = Network::new(vec![DenseLayer::linear(w)]).unwrap();
        net.layers[0].dropout = Some(MaskDistribution::Uniform);
        let x = array![[1.0, 2.0, -1.0]];
        let n = 100_000;
        let batch = Array2::from_shape_fn((n, 3), |(_, j)| x[[0, j]]);
        let out = forward_train(&net, batch.view(), &RngStream::new(3, 3)).unwrap();
        let o = out.output();
        let expected = forward_test(&net, x.view()).unwrap();
        for k in 0..2 {
            let col = o.column(k);
            let m = col.mean().unwrap();
            let sd = col.std(1.0);
            assert!((m - expected[[0, k]]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn masks_are_independent() {
        let mut net = identity_12();
        net.layers[0].dropout = Some(MaskDistribution::clipped_gaussian(0.5, 0.3).unwrap());
        let n = 100_000;
        let batch = Array2::ones((n, 2));
        let t = forward_train(&net, batch.view(), &RngStream::new(8, 0)).unwrap();
        let m = t.layers[0].mask.as_ref().unwrap();
        let corr = |a: &[f64], b: &[f64]| {
            let (ma, mb) = (a.iter().sum::<f64>() / a.len() as f64, b.iter().sum::<f64>() / b.len() as f64);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let c0: Vec<f64> = m.column(0).to_vec();
        let c1: Vec<f64> = m.column(1).to_vec();
        // Across units, and across consecutive examples.
        let bound = 4.0 / (n as f64).sqrt();
        assert!(corr(&c0, &c1).abs() < bound);
        assert!(corr(&c0[..n - 1], &c0[1..]).abs() < bound);
    }

    #[test]
    fn traces_are_deterministic() {
        let net = random_net(&mut RngStream::new(1, 1).generator(), 3, false);
        let x = Array2::from_elem((4, net.input_dim()), 0.3);
        let r = RngStream::new(5, 9);
        assert_eq!(forward_train(&net, x.view(), &r).unwrap(), forward_train(&net, x.view(), &r).unwrap());
    }

    #[test]
    fn init_schemes() {
        let spec = NetSpec::mlp(50, &[40], Activation::Relu, 10, Some(MaskDistribution::BERNOULLI_HALF), false);
        let a = Network::init(&spec, Init::default(), &RngStream::new(1, 0)).unwrap();
        assert_eq!(a.fingerprint(), Network::init(&spec, Init::default(), &RngStream::new(1, 0)).unwrap().fingerprint());
        assert_ne!(a.fingerprint(), Network::init(&spec, Init::default(), &RngStream::new(2, 0)).unwrap().fingerprint());
        let sd = a.layers[0].weights.std(0.0);
        assert!((sd - 0.01).abs() < 0.001, "{sd}");
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(a.layers[0].dropout.is_none() && a.layers[1].dropout.is_some());
        let u = Network::init(&spec, Init::UniformFan, &RngStream::new(1, 0)).unwrap();
        let bound = (6.0f64 / 90.0).sqrt();
        assert!(u.layers[0].weights.iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut net = random_net(&mut RngStream::new(3, 3).generator(), 3, false);
        net.layers[0].weights[[0, 0]] = 0.1 + 0.2;
        let back = Network::from_json(&net.to_json()).unwrap();
        assert_eq!(back.fingerprint(), net.fingerprint());
        assert_eq!(back, net);
        assert!(matches!(Network::from_json("{\"format\":\"x\",\"version\":1,\"layers\":[]}"), Err(Error::Model(_))));
        let bumped = net.to_json().replace("\"version\":1", "\"version\":99");
        assert!(matches!(Network::from_json(&bumped), Err(Error::Model(_))));
    }

    #[test]
    fn activation_strings() {
        for a in [Activation::sigmoid(), Activation::Sigmoid(SigmoidParams::new(2.0, 0.5).unwrap()), Activation::Relu, Activation::Softmax, Activation::Identity] {
            assert_eq!(a.to_string().parse::<Activation>().unwrap(), a);
        }
        assert!("tanh".parse::<Activation>().is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let o = array![[0.2, 0.4, 0.4], [1.0, 1.0, 0.0], [0.0, 0.0, 3.0]];
        assert_eq!(argmax_rows(&o.view()), vec![1, 0, 2]);
    }
}
