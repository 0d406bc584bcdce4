use crate::error::{Error, Result};
use crate::normal;
use serde::{Deserialize, Serialize};
use std::f64::consts::E;

/// Error-spending function `a(gamma, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpendingFunction {
    PocockLike,
    ObfLike,
    Power { rho: f64 },
}

/// Above this level the O'Brien-Fleming type nominal levels are not known to be
/// monotone in gamma.
// Empirical, unrelated to 1/pi.
#[allow(clippy::approx_constant)]
pub const OBF_MONOTONE_LIMIT: f64 = 0.318;

impl SpendingFunction {
    pub fn validate(&self) -> Result<()> {
        match self {
            SpendingFunction::Power { rho } if !(rho.is_finite() && *rho > 0.0) => Err(Error::OutOfDomain {
                what: format!("power spending needs rho > 0, got {rho}"),
            }),
            _ => Ok(()),
        }
    }

    pub fn spend(&self, gamma: f64, t: f64) -> Result<f64> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::OutOfDomain {
                what: format!("gamma={gamma} not in (0,1]"),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain {
                what: format!("t={t} not in [0,1]"),
            });
        }
        self.validate()?;
        Ok(self.spend_unchecked(gamma, t))
    }

    pub(crate) fn spend_unchecked(&self, gamma: f64, t: f64) -> f64 {
        if t <= 0.0 || gamma <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return gamma;
        }
        match *self {
            SpendingFunction::PocockLike => gamma * (1.0 + (E - 1.0) * t).ln(),
            SpendingFunction::Power { rho } => gamma * t.powf(rho),
            SpendingFunction::ObfLike => 2.0 * normal::sf(normal::isf(gamma / 2.0) / t.sqrt()),
        }
    }

    /// The `gamma` with `a(gamma, t) = level`, for level in `[0, a(1, t)]`.
    pub(crate) fn inverse_in_gamma(&self, level: f64, t: f64) -> f64 {
        if level <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return level.min(1.0);
        }
        let g = match *self {
            SpendingFunction::PocockLike => level / (1.0 + (E - 1.0) * t).ln(),
            SpendingFunction::Power { rho } => level / t.powf(rho),
            SpendingFunction::ObfLike => 2.0 * normal::sf(normal::isf(level / 2.0) * t.sqrt()),
        };
        g.min(1.0)
    }

    /// Largest gamma for which nominal levels are guaranteed strictly increasing.
    pub fn proven_monotone_limit(&self) -> f64 {
        match self {
            SpendingFunction::ObfLike => OBF_MONOTONE_LIMIT,
            _ => 1.0,
        }
    }
}
