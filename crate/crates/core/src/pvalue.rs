//! Repeated and sequential p-value families of shifted null hypotheses.

use crate::boundary::GsdBoundary;
use crate::error::{Error, Result};
use crate::normal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lambda {
    #[serde(rename = "r")]
    Repeated,
    #[serde(rename = "s")]
    Sequential,
}

impl std::fmt::Display for Lambda {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Lambda::Repeated => "r",
            Lambda::Sequential => "s",
        })
    }
}

/// Stagewise estimates of one hypothesis together with its boundary.
#[derive(Debug, Clone)]
pub struct HypothesisSeries {
    boundary: Arc<GsdBoundary>,
    estimates: Vec<f64>,
    ses: Vec<f64>,
}

impl HypothesisSeries {
    pub fn new(boundary: Arc<GsdBoundary>, estimates: Vec<f64>, ses: Vec<f64>) -> Result<Self> {
        let mut s = HypothesisSeries {
            boundary,
            estimates: Vec::new(),
            ses: Vec::new(),
        };
        if estimates.len() != ses.len() {
            return Err(Error::DimensionMismatch {
                what: "standard errors".into(),
                expected: estimates.len(),
                found: ses.len(),
            });
        }
        for (e, se) in estimates.into_iter().zip(ses) {
            s.push(e, se)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, estimate: f64, se: f64) -> Result<()> {
        if !estimate.is_finite() || !(se.is_finite() && se > 0.0) {
            return Err(Error::OutOfDomain {
                what: format!("estimate {estimate} with standard error {se}"),
            });
        }
        if self.estimates.len() >= self.boundary.stages() {
            return Err(Error::StageOverrun {
                stage: self.estimates.len() + 1,
                max: self.boundary.stages(),
            });
        }
        self.estimates.push(estimate);
        self.ses.push(se);
        Ok(())
    }

    /// Replaces the boundary, e.g. with one computed for a longer realised schedule.
    pub fn set_boundary(&mut self, boundary: Arc<GsdBoundary>) -> Result<()> {
        if boundary.stages() < self.estimates.len() {
            return Err(Error::StageOverrun {
                stage: self.estimates.len(),
                max: boundary.stages(),
            });
        }
        self.boundary = boundary;
        Ok(())
    }

    pub fn boundary(&self) -> &Arc<GsdBoundary> {
        &self.boundary
    }

    pub fn observed_stages(&self) -> usize {
        self.estimates.len()
    }

    pub fn estimate(&self, k: usize) -> f64 {
        self.estimates[k]
    }

    pub fn std_error(&self, k: usize) -> f64 {
        self.ses[k]
    }

    fn check(&self, k: usize) -> Result<()> {
        if k >= self.estimates.len() {
            return Err(Error::StageOverrun {
                stage: k + 1,
                max: self.estimates.len(),
            });
        }
        Ok(())
    }

    /// Local p-value `1 - Phi((theta_hat - mu)/SE)` at stage `k`.
    pub fn local_p(&self, k: usize, mu: f64) -> f64 {
        normal::sf((self.estimates[k] - mu) / self.ses[k])
    }

    pub fn repeated_p(&self, k: usize, mu: f64) -> Result<f64> {
        self.check(k)?;
        self.boundary.level_for_nominal(k, self.local_p(k, mu))
    }

    pub fn sequential_p(&self, k: usize, mu: f64) -> Result<f64> {
        self.check(k)?;
        let mut best = 1.0f64;
        // A stage outside the monotone domain has p above `top`, so it only
        // matters when nothing smaller than `top` was seen.
        let mut beyond: Option<f64> = None;
        for s in 0..=k {
            match self.repeated_p(s, mu) {
                Ok(p) => best = best.min(p),
                Err(Error::SpendingMonotonicityViolation { gamma }) => {
                    beyond = Some(beyond.map_or(gamma, |b: f64| b.min(gamma)));
                }
                Err(e) => return Err(e),
            }
        }
        match beyond {
            Some(top) if best >= top => Err(Error::SpendingMonotonicityViolation { gamma: top }),
            _ => Ok(best),
        }
    }

    pub fn pvalue(&self, k: usize, lambda: Lambda, mu: f64) -> Result<f64> {
        match lambda {
            Lambda::Repeated => self.repeated_p(k, mu),
            Lambda::Sequential => self.sequential_p(k, mu),
        }
    }

    /// Shift `mu` at which the repeated p-value of stage `k` equals `gamma`.
    pub fn inverse_repeated(&self, k: usize, gamma: f64) -> Result<f64> {
        self.check(k)?;
        if gamma <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let a = self.boundary.nominal_level(k, gamma.min(1.0))?;
        if a >= 1.0 {
            return Ok(f64::INFINITY);
        }
        Ok(self.estimates[k] - self.ses[k] * normal::isf(a))
    }

    pub fn inverse_sequential(&self, k: usize, gamma: f64) -> Result<f64> {
        self.check(k)?;
        let mut best = f64::NEG_INFINITY;
        for s in 0..=k {
            best = best.max(self.inverse_repeated(s, gamma)?);
        }
        Ok(best)
    }

    pub fn inverse(&self, k: usize, lambda: Lambda, gamma: f64) -> Result<f64> {
        match lambda {
            Lambda::Repeated => self.inverse_repeated(k, gamma),
            Lambda::Sequential => self.inverse_sequential(k, gamma),
        }
    }

    /// Whether the unshifted hypothesis is rejected at overall level `level`,
    /// i.e. `p^lambda_k(0) <= level`, decided on the nominal-level scale.
    pub fn rejects(&self, k: usize, lambda: Lambda, level: f64) -> Result<bool> {
        self.check(k)?;
        let stages = match lambda {
            Lambda::Repeated => k..=k,
            Lambda::Sequential => 0..=k,
        };
        for s in stages {
            let p = self.local_p(s, 0.0);
            let hit = if level <= 0.0 {
                p <= 0.0
            } else {
                p <= self.boundary.nominal_level(s, level.min(1.0))?
            };
            if hit {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// A monotone p-value function of the shift together with its inverse.
pub trait ShiftedPValue: Sync {
    fn pvalue(&self, mu: f64) -> Result<f64>;
    fn inverse(&self, gamma: f64) -> Result<f64>;
}

/// `p^lambda_{j,k}` of one series at a fixed stage.
#[derive(Debug, Clone, Copy)]
pub struct StagePValue<'a> {
    pub series: &'a HypothesisSeries,
    pub stage: usize,
    pub lambda: Lambda,
}

impl ShiftedPValue for StagePValue<'_> {
    fn pvalue(&self, mu: f64) -> Result<f64> {
        self.series.pvalue(self.stage, self.lambda, mu)
    }

    fn inverse(&self, gamma: f64) -> Result<f64> {
        self.series.inverse(self.stage, self.lambda, gamma)
    }
}

/// Per-hypothesis views at the stages `stages[j]`.
pub fn stage_views<'a>(series: &'a [HypothesisSeries], stages: &[usize], lambda: Lambda) -> Vec<StagePValue<'a>> {
    series
        .iter()
        .zip(stages)
        .map(|(s, &k)| StagePValue {
            series: s,
            stage: k,
            lambda,
        })
        .collect()
}

/// Anything that can decide unshifted rejections for the sequential test.
pub trait PValueSource {
    fn m(&self) -> usize;
    fn has_stage(&self, j: usize, stage: usize) -> bool;
    fn rejects(&self, j: usize, stage: usize, lambda: Lambda, level: f64) -> Result<bool>;
}

impl PValueSource for [HypothesisSeries] {
    fn m(&self) -> usize {
        self.len()
    }

    fn has_stage(&self, j: usize, stage: usize) -> bool {
        j < self.len() && stage < self[j].observed_stages()
    }

    fn rejects(&self, j: usize, stage: usize, lambda: Lambda, level: f64) -> Result<bool> {
        self[j].rejects(stage, lambda, level)
    }
}

impl PValueSource for Vec<HypothesisSeries> {
    fn m(&self) -> usize {
        self.len()
    }

    fn has_stage(&self, j: usize, stage: usize) -> bool {
        self.as_slice().has_stage(j, stage)
    }

    fn rejects(&self, j: usize, stage: usize, lambda: Lambda, level: f64) -> Result<bool> {
        self.as_slice().rejects(j, stage, lambda, level)
    }
}

/// Repeated p-values supplied directly, indexed `[hypothesis][stage]`.
#[derive(Debug, Clone)]
pub struct InjectedPValues {
    pub repeated: Vec<Vec<f64>>,
}

impl InjectedPValues {
    pub fn value(&self, j: usize, stage: usize, lambda: Lambda) -> f64 {
        match lambda {
            Lambda::Repeated => self.repeated[j][stage],
            Lambda::Sequential => self.repeated[j][..=stage].iter().copied().fold(1.0, f64::min),
        }
    }
}

impl PValueSource for InjectedPValues {
    fn m(&self) -> usize {
        self.repeated.len()
    }

    fn has_stage(&self, j: usize, stage: usize) -> bool {
        j < self.repeated.len() && stage < self.repeated[j].len()
    }

    fn rejects(&self, j: usize, stage: usize, lambda: Lambda, level: f64) -> Result<bool> {
        if !self.has_stage(j, stage) {
            return Err(Error::MissingObservation { hypothesis: j });
        }
        Ok(self.value(j, stage, lambda) <= level)
    }
}
