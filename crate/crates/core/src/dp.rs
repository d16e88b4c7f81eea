//! Gaussian mechanism for clipped gradient sums, plus basic-composition
//! accounting.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Gradient;
use crate::scalar::Scalar;

/// Privacy settings of the clipped, noised local steps.
///
/// Exactly one of `epsilon` and `noise_multiplier` is set. With `epsilon`, the
/// multiplier is calibrated from `(epsilon, delta)`; with `noise_multiplier`,
/// the per-step epsilon is whatever the Gaussian mechanism bound yields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_multiplier: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Per-example L2 clip bound; also the sensitivity of the clipped sum.
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_delta() -> f64 {
    1e-5
}

fn default_clip() -> f64 {
    1.0
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: Some(1.0),
            noise_multiplier: None,
            delta: 1e-5,
            clip: 1.0,
        }
    }
}

impl PrivacyConfig {
    pub fn with_noise_multiplier(sigma: f64) -> Self {
        Self {
            enabled: true,
            epsilon: None,
            noise_multiplier: Some(sigma),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.epsilon, self.noise_multiplier) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "privacy.epsilon",
                    "set either epsilon or noise_multiplier, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "privacy.epsilon",
                    "one of epsilon or noise_multiplier is required",
                ))
            }
            (Some(e), None) if !(e > 0.0 && e.is_finite()) => {
                return Err(Error::config("privacy.epsilon", format!("must be finite and > 0, got {e}")))
            }
            (None, Some(s)) if !(s >= 0.0 && s.is_finite()) => {
                return Err(Error::config(
                    "privacy.noise_multiplier",
                    format!("must be finite and >= 0, got {s}"),
                ))
            }
            _ => {}
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("privacy.delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config("privacy.clip", format!("must be finite and > 0, got {}", self.clip)));
        }
        Ok(())
    }

    /// L2 sensitivity of one step's clipped gradient sum.
    pub fn sensitivity(&self) -> f64 {
        self.clip
    }

    /// Noise standard deviation in units of the clip bound.
    pub fn sigma(&self) -> Result<f64> {
        match (self.epsilon, self.noise_multiplier) {
            (_, Some(s)) => Ok(s),
            (Some(e), None) => Ok(calibrate_sigma(e, self.delta, self.sensitivity())? / self.clip),
            (None, None) => Err(Error::config("privacy.epsilon", "unset")),
        }
    }

    /// Per-step epsilon; infinite for a zero multiplier.
    pub fn epsilon_per_step(&self) -> Result<f64> {
        match (self.epsilon, self.noise_multiplier) {
            (Some(e), _) => Ok(e),
            (None, Some(s)) => epsilon_for_noise(s * self.clip, self.delta, self.sensitivity()),
            (None, None) => Err(Error::config("privacy.epsilon", "unset")),
        }
    }
}

/// Noise standard deviation making a query of L2 sensitivity `sensitivity`
/// `(epsilon, delta)`-DP: `sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Smallest epsilon the Gaussian mechanism bound grants for noise standard
/// deviation `std`.
pub fn epsilon_for_noise(std: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    if std == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / (std / sensitivity))
}

/// Rescales `g` to L2 norm at most `clip`: `g / max(1, |g| / clip)`.
pub fn clip_gradient<T: Scalar>(g: &Gradient<T>, clip: T) -> Gradient<T> {
    let factor = T::one().max(g.l2_norm() / clip);
    let mut out = g.clone();
    if factor > T::one() {
        out.values_mut().iter_mut().for_each(|v| *v = *v / factor);
    }
    out
}

/// `(clipped_sum + z) / batch` with `z ~ N(0, (sigma * clip)^2 I)` drawn from `rng`.
pub fn gaussian_perturb<T: Scalar, R: Rng>(
    clipped_sum: &Gradient<T>,
    sigma: f64,
    clip: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Gradient<T>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let std = sigma * clip;
    let inv_b = T::one() / T::from_count(batch);
    let mut out = clipped_sum.clone();
    for v in out.values_mut() {
        let noise = if std > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(std * z)
        } else {
            T::zero()
        };
        *v = (*v + noise) * inv_b;
    }
    Ok(out)
}

/// Basic-composition ledger of noised steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub steps: u64,
    pub epsilon_step: f64,
    pub delta_step: f64,
}

impl PrivacyLedger {
    pub fn new(epsilon_step: f64, delta_step: f64) -> Self {
        Self {
            steps: 0,
            epsilon_step,
            delta_step,
        }
    }

    pub fn from_config(cfg: &PrivacyConfig) -> Result<Self> {
        Ok(Self::new(cfg.epsilon_per_step()?, cfg.delta))
    }

    pub fn epsilon_total(&self) -> f64 {
        self.steps as f64 * self.epsilon_step
    }

    pub fn delta_total(&self) -> f64 {
        self.steps as f64 * self.delta_step
    }
}

pub fn ledger_advance(ledger: &PrivacyLedger, steps: u64) -> PrivacyLedger {
    PrivacyLedger {
        steps: ledger.steps + steps,
        ..*ledger
    }
}
