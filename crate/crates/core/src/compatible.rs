//! Simultaneous confidence bounds that reproduce the test decisions exactly.

use crate::error::Result;
use crate::graph::ValidatedGraph;
use crate::pvalue::{HypothesisSeries, Lambda};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundVariant {
    #[serde(rename = "r")]
    Repeated,
    #[serde(rename = "s")]
    Sequential,
    #[serde(rename = "c")]
    Adjusted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibleBounds {
    pub variant: BoundVariant,
    /// Lower bounds, `-inf` where no information is available.
    pub lower: Vec<f64>,
}

fn contains(set: &[usize], j: usize) -> bool {
    set.contains(&j)
}

/// Bounds matching the stagewise test with rejection set `rejected` when each
/// hypothesis uses its data up to `stages[j]`.
pub fn compatible_bounds(
    graph: &ValidatedGraph,
    series: &[HypothesisSeries],
    lambda: Lambda,
    alpha: f64,
    rejected: &[usize],
    stages: &[usize],
) -> Result<CompatibleBounds> {
    let m = graph.m();
    let all = (0..m).all(|j| contains(rejected, j));
    let weights = graph.weights_without(rejected);
    let mut lower = Vec::with_capacity(m);
    for j in 0..m {
        let b = if all {
            series[j]
                .inverse(stages[j], lambda, graph.exhaustion_weights()[j] * alpha)?
                .max(0.0)
        } else if contains(rejected, j) {
            0.0
        } else {
            series[j].inverse(stages[j], lambda, weights[j] * alpha)?
        };
        lower.push(b);
    }
    Ok(CompatibleBounds {
        variant: match lambda {
            Lambda::Repeated => BoundVariant::Repeated,
            Lambda::Sequential => BoundVariant::Sequential,
        },
        lower,
    })
}

/// Bounds matching the efficient multiple adjustment with sets `r_s` and `r_c`.
pub fn compatible_bounds_adjustment(
    graph: &ValidatedGraph,
    series: &[HypothesisSeries],
    alpha: f64,
    r_s: &[usize],
    r_c: &[usize],
    stages: &[usize],
) -> Result<CompatibleBounds> {
    let m = graph.m();
    let all_s = (0..m).all(|j| contains(r_s, j));
    let mut lower = Vec::with_capacity(m);
    for j in 0..m {
        let b = if contains(r_c, j) {
            if all_s {
                series[j]
                    .inverse_repeated(stages[j], graph.exhaustion_weights()[j] * alpha)?
                    .max(0.0)
            } else {
                0.0
            }
        } else {
            let others: Vec<usize> = r_s.iter().copied().filter(|&i| i != j).collect();
            let level = graph.weights_without(&others)[j] * alpha;
            series[j].inverse_repeated(stages[j], level)?
        };
        lower.push(b);
    }
    Ok(CompatibleBounds {
        variant: BoundVariant::Adjusted,
        lower,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::GsdBoundary;
    use crate::graph::GraphSpec;
    use crate::spending::SpendingFunction;
    use std::sync::Arc;

    fn fam(est: &[[f64; 2]]) -> Vec<HypothesisSeries> {
        let b = Arc::new(GsdBoundary::new(SpendingFunction::PocockLike, vec![0.5, 1.0]).unwrap());
        est.iter()
            .map(|e| HypothesisSeries::new(b.clone(), e.to_vec(), vec![0.2, 0.14]).unwrap())
            .collect()
    }

    #[test]
    fn hierarchical_after_two_rejections() {
        let g = ValidatedGraph::new(&GraphSpec::hierarchical(4)).unwrap();
        let f = fam(&[[0.6, 0.5], [0.3, 0.5], [0.2, 0.1], [0.1, 0.3]]);
        let b = compatible_bounds(&g, &f, Lambda::Repeated, 0.025, &[0, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(b.lower[0], 0.0);
        assert_eq!(b.lower[1], 0.0);
        assert_eq!(b.lower[2], f[2].inverse_repeated(1, 0.025).unwrap());
        assert_eq!(b.lower[3], f64::NEG_INFINITY);
    }

    #[test]
    fn single_hypothesis_no_rejection() {
        let g = ValidatedGraph::new(&GraphSpec::hierarchical(1)).unwrap();
        let f = fam(&[[0.1, 0.05]]);
        let b = compatible_bounds(&g, &f, Lambda::Sequential, 0.025, &[], &[1]).unwrap();
        assert_eq!(b.lower[0], f[0].inverse_sequential(1, 0.025).unwrap());
        assert!(b.lower[0] < 0.0);
    }

    #[test]
    fn all_rejected_clamps_at_zero() {
        let g = ValidatedGraph::new(&GraphSpec::holm(2)).unwrap();
        let f = fam(&[[0.2, 0.9], [1.0, 0.1]]);
        let b = compatible_bounds(&g, &f, Lambda::Sequential, 0.025, &[0, 1], &[1, 1]).unwrap();
        for (j, &l) in b.lower.iter().enumerate() {
            let raw = f[j].inverse_sequential(1, 0.0125).unwrap();
            assert_eq!(l, raw.max(0.0));
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn adjustment_cases() {
        let g = ValidatedGraph::new(&GraphSpec::hierarchical(4)).unwrap();
        let f = fam(&[[0.6, 0.5], [0.3, 0.5], [0.2, 0.5], [0.1, 0.5]]);
        let b = compatible_bounds_adjustment(&g, &f, 0.025, &[0, 1, 2, 3], &[1, 3], &[0, 1, 1, 1]).unwrap();
        // r_s is everything, so rejected members use the exhaustion levels.
        assert_eq!(b.lower[1], f[1].inverse_repeated(1, 0.0).unwrap().max(0.0));
        assert_eq!(b.lower[3], 0.0);
        assert_eq!(b.lower[0], f[0].inverse_repeated(0, 0.025).unwrap());
        let e = compatible_bounds_adjustment(&g, &f, 0.025, &[], &[], &[1, 1, 1, 1]).unwrap();
        let r = compatible_bounds(&g, &f, Lambda::Repeated, 0.025, &[], &[1, 1, 1, 1]).unwrap();
        assert_eq!(e.lower, r.lower);
    }
}
