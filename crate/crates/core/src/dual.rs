//! Dual graphs and the local levels of shifted intersection hypotheses.
//!
//! Node layout: index `j` is the original hypothesis `H_j` (present only when
//! `mu_j > 0`), index `m + j` is the shifted hypothesis `H_j^{mu_j}`.

use crate::error::{Error, Result};
use crate::graph::{GraphState, ValidatedGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualNode {
    Original(usize),
    Shifted(usize),
}

#[derive(Debug, Clone)]
pub struct DualGraph {
    pub base: GraphState,
    pub q: f64,
    pub mu: Vec<f64>,
    m: usize,
}

impl DualGraph {
    fn index(&self, n: DualNode) -> usize {
        match n {
            DualNode::Original(j) => j,
            DualNode::Shifted(j) => self.m + j,
        }
    }

    pub fn has_node(&self, n: DualNode) -> bool {
        self.base.is_active(self.index(n))
    }

    pub fn weight(&self, n: DualNode) -> f64 {
        self.base.weight(self.index(n))
    }

    pub fn edge(&self, from: DualNode, to: DualNode) -> f64 {
        self.base.g(self.index(from), self.index(to))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLevels {
    pub alpha_mu: Vec<f64>,
    pub nu: Vec<f64>,
}

pub(crate) fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidWeight { q })
    }
}

pub fn build_dual_graph(graph: &ValidatedGraph, mu: &[f64], q: f64) -> Result<DualGraph> {
    check_q(q)?;
    let m = graph.m();
    if mu.len() != m {
        return Err(Error::DimensionMismatch {
            what: "shift vector".into(),
            expected: m,
            found: mu.len(),
        });
    }
    if mu.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::OutOfDomain {
            what: "shift vector must be real or -inf".into(),
        });
    }
    let n = 2 * m;
    let mut active = vec![false; n];
    let mut weights = vec![0.0; n];
    let mut tr = vec![0.0; n * n];
    let target = |i: usize| if mu[i] > 0.0 { i } else { m + i };
    for j in 0..m {
        active[m + j] = true;
        if mu[j] > 0.0 {
            active[j] = true;
            weights[j] = graph.weights()[j];
            let qm = q.powf(mu[j]);
            let s = graph.row_sum(j).min(1.0);
            tr[j * n + m + j] = qm + (1.0 - qm) * (1.0 - s);
            for i in 0..m {
                if i != j {
                    tr[j * n + target(i)] = graph.g(j, i) * (1.0 - qm);
                }
            }
        } else {
            weights[m + j] = graph.weights()[j];
        }
    }
    Ok(DualGraph {
        base: GraphState::from_parts(active, weights, tr),
        q,
        mu: mu.to_vec(),
        m,
    })
}

/// Local levels `alpha_j^mu` of the shifted intersection hypothesis.
pub fn local_levels(graph: &ValidatedGraph, mu: &[f64], q: f64, alpha: f64) -> Result<LocalLevels> {
    let alpha_mu = local_alpha(graph, mu, q, alpha)?;
    let nu = alpha_mu
        .iter()
        .zip(mu)
        .map(|(a, &x)| {
            if *a == 0.0 {
                0.0
            } else {
                a / alpha * (-(x.max(0.0)) * q.ln()).exp()
            }
        })
        .collect();
    Ok(LocalLevels { alpha_mu, nu })
}

/// Same as [`local_levels`] without the `nu` factors.
pub fn local_alpha(graph: &ValidatedGraph, mu: &[f64], q: f64, alpha: f64) -> Result<Vec<f64>> {
    let mut d = build_dual_graph(graph, mu, q)?;
    let m = graph.m();
    for j in 0..m {
        if mu[j] > 0.0 {
            d.base.reject(j)?;
        }
    }
    Ok((0..m).map(|j| d.base.weight(m + j) * alpha).collect())
}
