//! Dropout mask laws.
//!
//! A mask multiplies a unit's input elementwise during training. Three laws
//! are used for training (Bernoulli, uniform on `[0, 1)`, and a Gaussian
//! censored to `[0, 1]`); an unclipped Gaussian is also provided for the
//! analytical checks, where the closed-form moment algebra assumes no
//! clipping.
//!
//! All other modules consume masks through [`MaskDistribution::sample_into`],
//! [`MaskDistribution::moments`] and [`MaskDistribution::nominal_moments`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// The law a dropout mask is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MaskDistribution {
    /// Keep with probability `p`: samples in `{0, 1}`.
    Bernoulli { p: f64 },
    /// Uniform on `[0, 1)`.
    Uniform,
    /// `clip(g, 0, 1)` with `g ~ N(mu, sigma_sq)`; point masses at 0 and 1.
    ClippedGaussian { mu: f64, sigma_sq: f64 },
    /// `g ~ N(mu, sigma_sq)` without clipping. Analysis only; masks may be
    /// negative or exceed one.
    Gaussian { mu: f64, sigma_sq: f64 },
}

/// First two moments of a mask law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Which moments the analytical layer plugs into its formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    /// Pre-clip `(mu, sigma_sq)` for Gaussian laws, i.e. the textbook algebra
    /// that ignores clipping.
    #[default]
    Nominal,
    /// Moments of the values that actually multiply the input.
    Effective,
}

impl MaskDistribution {
    /// Bernoulli(0.5), the classical dropout setting.
    pub const BERNOULLI_HALF: Self = Self::Bernoulli { p: 0.5 };

    pub fn bernoulli(p: f64) -> Result<Self> {
        let d = Self::Bernoulli { p };
        d.validate()?;
        Ok(d)
    }

    pub fn clipped_gaussian(mu: f64, sigma_sq: f64) -> Result<Self> {
        let d = Self::ClippedGaussian { mu, sigma_sq };
        d.validate()?;
        Ok(d)
    }

    pub fn gaussian(mu: f64, sigma_sq: f64) -> Result<Self> {
        let d = Self::Gaussian { mu, sigma_sq };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Bernoulli { p } => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::invalid(format!(
                        "bernoulli keep probability must lie in (0, 1), got {p}"
                    )));
                }
            }
            Self::Uniform => {}
            Self::ClippedGaussian { mu, sigma_sq } | Self::Gaussian { mu, sigma_sq } => {
                if !mu.is_finite() {
                    return Err(Error::invalid(format!("gaussian mean must be finite, got {mu}")));
                }
                if !(sigma_sq >= 0.0 && sigma_sq.is_finite()) {
                    return Err(Error::invalid(format!(
                        "gaussian variance must be finite and >= 0, got {sigma_sq}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact moments of the realized mask values (post-clip for
    /// [`MaskDistribution::ClippedGaussian`]).
    pub fn moments(&self) -> MaskMoments {
        match *self {
            Self::Bernoulli { p } => MaskMoments {
                mean: p,
                variance: p * (1.0 - p),
            },
            Self::Uniform => MaskMoments {
                mean: 0.5,
                variance: 1.0 / 12.0,
            },
            Self::ClippedGaussian { mu, sigma_sq } => censored_unit_moments(mu, sigma_sq),
            Self::Gaussian { mu, sigma_sq } => MaskMoments {
                mean: mu,
                variance: sigma_sq,
            },
        }
    }

    /// Moments with clipping ignored: `(mu, sigma_sq)` for both Gaussian
    /// variants, otherwise identical to [`Self::moments`].
    pub fn nominal_moments(&self) -> MaskMoments {
        match *self {
            Self::ClippedGaussian { mu, sigma_sq } => MaskMoments {
                mean: mu,
                variance: sigma_sq,
            },
            _ => self.moments(),
        }
    }

    pub fn moments_for(&self, mode: MomentMode) -> MaskMoments {
        match mode {
            MomentMode::Nominal => self.nominal_moments(),
            MomentMode::Effective => self.moments(),
        }
    }

    /// Mean of the realized mask; the test-time scaling factor.
    pub fn mean(&self) -> f64 {
        self.moments().mean
    }

    /// The same law with clipping removed (identity for non-Gaussian laws).
    pub fn unclipped(&self) -> Self {
        match *self {
            Self::ClippedGaussian { mu, sigma_sq } => Self::Gaussian { mu, sigma_sq },
            other => other,
        }
    }

    /// Short human-readable name used in reports.
    pub fn family(&self) -> &'static str {
        match self {
            Self::Bernoulli { .. } => "bernoulli",
            Self::Uniform => "uniform",
            Self::ClippedGaussian { .. } => "gaussian",
            Self::Gaussian { .. } => "gaussian-unclipped",
        }
    }

    /// Fills `out` with independent mask values. Parameters are assumed
    /// valid; this is the hot path used by every sampler in the crate.
    #[inline]
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match *self {
            Self::Bernoulli { p } => {
                for m in out.iter_mut() {
                    *m = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                }
            }
            Self::Uniform => {
                for m in out.iter_mut() {
                    *m = rng.random::<f64>();
                }
            }
            Self::ClippedGaussian { mu, sigma_sq } => {
                let sigma = sigma_sq.sqrt();
                for m in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *m = (mu + sigma * z).clamp(0.0, 1.0);
                }
            }
            Self::Gaussian { mu, sigma_sq } => {
                let sigma = sigma_sq.sqrt();
                for m in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *m = mu + sigma * z;
                }
            }
        }
    }
}

/// Draws `count` masks from the start of `rng`.
pub fn sample_mask(dist: &MaskDistribution, count: usize, rng: &RngStream) -> Result<Vec<f64>> {
    dist.validate()?;
    if count == 0 {
        return Err(Error::invalid("mask count must be at least 1"));
    }
    let mut out = vec![0.0; count];
    dist.sample_into(&mut rng.generator(), &mut out);
    Ok(out)
}

/// Standard normal density.
pub(crate) fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal upper tail `1 - Phi(z)`.
pub(crate) fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mean and variance of `clip(g, 0, 1)` for `g ~ N(mu, sigma_sq)`.
///
/// With `a = -mu / sigma` and `b = (1 - mu) / sigma`:
///
/// ```text
/// E[X]   = mu + (1 - mu) Q(b) - mu Phi(a) + sigma (phi(a) - phi(b))
/// E[X^2] = (mu^2 + sigma^2) (1 - Phi(a) - Q(b)) + 2 mu sigma (phi(a) - phi(b))
///          + sigma^2 (a phi(a) - b phi(b)) + Q(b)
/// ```
///
/// The mean is arranged so that `mu = 0.5` yields exactly `0.5`: there
/// `Phi(a)` and `Q(b)` are the same floating-point expression.
fn censored_unit_moments(mu: f64, sigma_sq: f64) -> MaskMoments {
    if sigma_sq == 0.0 {
        return MaskMoments {
            mean: mu.clamp(0.0, 1.0),
            variance: 0.0,
        };
    }
    let sigma = sigma_sq.sqrt();
    let a = -mu / sigma;
    let b = (1.0 - mu) / sigma;
    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
    let lower = normal_cdf(a);
    let upper = normal_sf(b);
    let inside = 1.0 - lower - upper;

    let mean = mu + ((1.0 - mu) * upper - mu * lower) + sigma * (pa - pb);
    let second = (mu * mu + sigma_sq) * inside
        + 2.0 * mu * sigma * (pa - pb)
        + sigma_sq * (a * pa - b * pb)
        + upper;
    MaskMoments {
        mean,
        variance: (second - mean * mean).max(0.0),
    }
}

impl fmt::Display for MaskDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Bernoulli { p } => write!(f, "bernoulli:p={p}"),
            Self::Uniform => write!(f, "uniform"),
            Self::ClippedGaussian { mu, sigma_sq } => write!(f, "gaussian:mu={mu},var={sigma_sq}"),
            Self::Gaussian { mu, sigma_sq } => {
                write!(f, "gaussian:mu={mu},var={sigma_sq},clip=false")
            }
        }
    }
}

impl FromStr for MaskDistribution {
    type Err = Error;

    /// Parses `bernoulli:p=0.5`, `uniform`, `gaussian:mu=0.5,var=0.2` and
    /// `gaussian:mu=0.5,var=0.2,clip=false`, case-insensitively. `p`
    /// defaults to 0.5 and `mu` to 0.5; `var` is required.
    fn from_str(spec: &str) -> Result<Self> {
        let fail = |reason: String| Error::Parse {
            spec: spec.to_string(),
            reason,
        };
        let lower = spec.trim().to_ascii_lowercase();
        let (family, rest) = match lower.split_once(':') {
            Some((f, r)) => (f.trim(), Some(r)),
            None => (lower.as_str(), None),
        };

        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(rest) = rest {
            for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (k, v) = item
                    .split_once('=')
                    .ok_or_else(|| fail(format!("expected key=value, found `{item}`")))?;
                let k = k.trim().to_string();
                if pairs.iter().any(|(seen, _)| *seen == k) {
                    return Err(fail(format!("duplicate key `{k}`")));
                }
                pairs.push((k, v.trim().to_string()));
            }
        }
        let allowed: &[&str] = match family {
            "bernoulli" => &["p"],
            "uniform" => &[],
            "gaussian" => &["mu", "var", "clip"],
            other => return Err(fail(format!("unknown distribution `{other}`"))),
        };
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            return Err(fail(format!("unknown key `{k}` for {family}")));
        }
        let real = |key: &str| -> Result<Option<f64>> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| {
                    v.parse::<f64>()
                        .map_err(|_| fail(format!("`{key}` is not a number: `{v}`")))
                })
                .transpose()
        };

        let dist = match family {
            "bernoulli" => Self::Bernoulli {
                p: real("p")?.unwrap_or(0.5),
            },
            "uniform" => Self::Uniform,
            _ => {
                let mu = real("mu")?.unwrap_or(0.5);
                let sigma_sq = real("var")?.ok_or_else(|| fail("missing `var`".into()))?;
                let clip = match pairs.iter().find(|(k, _)| k == "clip") {
                    None => true,
                    Some((_, v)) => v
                        .parse::<bool>()
                        .map_err(|_| fail(format!("`clip` must be true or false, got `{v}`")))?,
                };
                if clip {
                    Self::ClippedGaussian { mu, sigma_sq }
                } else {
                    Self::Gaussian { mu, sigma_sq }
                }
            }
        };
        dist.validate()?;
        Ok(dist)
    }
}

impl From<MaskDistribution> for String {
    fn from(d: MaskDistribution) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for MaskDistribution {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
