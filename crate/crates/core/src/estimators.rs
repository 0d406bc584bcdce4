//! Median-conservative effect estimators: the bound procedures rerun at overall level 1/2.

use crate::compatible::{compatible_bounds, compatible_bounds_adjustment};
use crate::engine::efficient_multiple_adjustment;
use crate::error::{Error, Result};
use crate::graph::{run_graph_test_with, ValidatedGraph};
use crate::informative::{default_delta0, isci_efficient_adjustment, primary_algorithm, IterationConfig};
use crate::pvalue::{stage_views, HypothesisSeries, Lambda};
use serde::{Deserialize, Serialize};

/// Overall level used for estimation.
pub const ALPHA_M: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorVariant {
    /// Compatible bounds of the stagewise test.
    A,
    /// Compatible bounds of the efficient multiple adjustment.
    B,
    /// Informative bounds, stagewise.
    C,
    /// Informative bounds with efficient multiple adjustment.
    D,
}

impl EstimatorVariant {
    pub const ALL: [EstimatorVariant; 4] = [Self::A, Self::B, Self::C, Self::D];
}

impl std::fmt::Display for EstimatorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EstimatorVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            _ => Err(Error::Validation(format!("unknown estimator variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub variant: EstimatorVariant,
    /// Family used by variants a and c; b and d always combine both.
    pub lambda: Option<Lambda>,
    /// Stage index per hypothesis whose data the estimate uses.
    pub stages: Vec<usize>,
    /// `-inf` means no informative estimate.
    #[serde(with = "crate::serde_ext::vec")]
    pub estimates: Vec<f64>,
    /// Components pinned at 0 by the compatible construction rather than the data.
    pub degenerate: Vec<bool>,
    /// False when an informative bracket stopped before reaching its tolerance.
    pub converged: bool,
}

fn estimation_config(cfg: &IterationConfig) -> IterationConfig {
    let mut c = cfg.clone();
    c.delta0 = c.delta0.min(default_delta0(ALPHA_M));
    c
}

fn single_pass(graph: &ValidatedGraph, series: &[HypothesisSeries], stages: &[usize], lambda: Lambda) -> Result<Vec<usize>> {
    let mut state = graph.initial_state();
    let mut r = run_graph_test_with(
        &mut state,
        |j, level| series[j].rejects(stages[j], lambda, level),
        ALPHA_M,
        |e| e[0],
    )?;
    r.sort_unstable();
    Ok(r)
}

/// Estimates for hypothesis data frozen at `stages` (the current stages for
/// variants a and c, the stopping stages for b and d).
pub fn median_estimator(
    variant: EstimatorVariant,
    lambda: Lambda,
    graph: &ValidatedGraph,
    series: &[HypothesisSeries],
    stages: &[usize],
    cfg: &IterationConfig,
) -> Result<EstimatorResult> {
    let m = graph.m();
    if series.len() != m || stages.len() != m {
        return Err(Error::DimensionMismatch {
            what: "hypothesis data".into(),
            expected: m,
            found: series.len().min(stages.len()),
        });
    }
    let cfg = estimation_config(cfg);
    let mut converged = true;
    let mut degenerate = vec![false; m];
    let (estimates, lam) = match variant {
        EstimatorVariant::A => {
            let r = single_pass(graph, series, stages, lambda)?;
            if r.len() < m {
                for &j in &r {
                    degenerate[j] = true;
                }
            }
            (compatible_bounds(graph, series, lambda, ALPHA_M, &r, stages)?.lower, Some(lambda))
        }
        EstimatorVariant::B => {
            let r_s = single_pass(graph, series, stages, Lambda::Sequential)?;
            let r_c = efficient_multiple_adjustment(graph, &r_s, stages, series, ALPHA_M)?;
            if r_s.len() < m {
                for &j in &r_c {
                    degenerate[j] = true;
                }
            }
            let b = compatible_bounds_adjustment(graph, series, ALPHA_M, &r_s, &r_c, stages)?;
            (b.lower, None)
        }
        EstimatorVariant::C => {
            let pv = stage_views(series, stages, lambda);
            let b = primary_algorithm(graph, &pv, ALPHA_M, &cfg, None, None)?;
            converged = b.converged;
            (b.lower, Some(lambda))
        }
        EstimatorVariant::D => {
            let pv = stage_views(series, stages, Lambda::Sequential);
            let b = primary_algorithm(graph, &pv, ALPHA_M, &cfg, None, None)?;
            converged = b.converged;
            let pr = stage_views(series, stages, Lambda::Repeated);
            (isci_efficient_adjustment(graph, &b.lower, &pr, cfg.q, ALPHA_M)?.0, None)
        }
    };
    Ok(EstimatorResult {
        variant,
        lambda: lam,
        stages: stages.to_vec(),
        estimates,
        degenerate,
        converged,
    })
}
