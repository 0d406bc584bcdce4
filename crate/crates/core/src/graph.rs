//! Graphical weighted Bonferroni tests.
//!
//! Weights are stored as fractions of the overall level, so the local level of
//! hypothesis `j` is `weights[j] * alpha`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub(crate) const SUM_TOL: f64 = 1e-12;

/// Raw description of a graphical test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub initial_weights: Vec<f64>,
    /// Row-major `m x m` transition matrix.
    pub transition: Vec<Vec<f64>>,
    /// Levels used when every hypothesis has been rejected. Must sum to one.
    pub exhaustion_weights: Vec<f64>,
}

impl GraphSpec {
    /// Fixed-sequence test: all weight on the first hypothesis, arrows `j -> j+1`.
    pub fn hierarchical(m: usize) -> Self {
        let mut transition = vec![vec![0.0; m]; m];
        for (j, row) in transition.iter_mut().enumerate().take(m.saturating_sub(1)) {
            row[j + 1] = 1.0;
        }
        let mut w = vec![0.0; m];
        if m > 0 {
            w[0] = 1.0;
        }
        GraphSpec {
            initial_weights: w.clone(),
            transition,
            exhaustion_weights: w,
        }
    }

    /// Equal weights, every arrow `1/(m-1)`.
    pub fn holm(m: usize) -> Self {
        let w = vec![1.0 / m as f64; m];
        let off = if m > 1 { 1.0 / (m - 1) as f64 } else { 0.0 };
        let transition = (0..m)
            .map(|i| (0..m).map(|l| if i == l { 0.0 } else { off }).collect())
            .collect();
        GraphSpec {
            initial_weights: w.clone(),
            transition,
            exhaustion_weights: w,
        }
    }
}

/// A graph whose invariants have been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedGraph {
    m: usize,
    weights: Vec<f64>,
    transition: Vec<f64>,
    exhaustion: Vec<f64>,
}

fn check_finite_nonneg(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NegativeWeight { what: what.into() });
    }
    Ok(())
}

pub fn validate_graph(spec: &GraphSpec) -> Result<ValidatedGraph> {
    let m = spec.initial_weights.len();
    if m == 0 {
        return Err(Error::DimensionMismatch {
            what: "initial_weights".into(),
            expected: 1,
            found: 0,
        });
    }
    if spec.transition.len() != m {
        return Err(Error::DimensionMismatch {
            what: "transition rows".into(),
            expected: m,
            found: spec.transition.len(),
        });
    }
    if spec.exhaustion_weights.len() != m {
        return Err(Error::DimensionMismatch {
            what: "exhaustion_weights".into(),
            expected: m,
            found: spec.exhaustion_weights.len(),
        });
    }
    check_finite_nonneg(&spec.initial_weights, "initial_weights")?;
    check_finite_nonneg(&spec.exhaustion_weights, "exhaustion_weights")?;
    for w in spec.initial_weights.iter().chain(&spec.exhaustion_weights) {
        if *w > 1.0 + SUM_TOL {
            return Err(Error::WeightSumExceeded { sum: *w });
        }
    }
    let sum: f64 = spec.initial_weights.iter().sum();
    if sum > 1.0 + SUM_TOL {
        return Err(Error::WeightSumExceeded { sum });
    }
    let mut transition = Vec::with_capacity(m * m);
    for (i, row) in spec.transition.iter().enumerate() {
        if row.len() != m {
            return Err(Error::DimensionMismatch {
                what: format!("transition row {}", i + 1),
                expected: m,
                found: row.len(),
            });
        }
        check_finite_nonneg(row, "transition")?;
        if row.iter().any(|g| *g > 1.0 + SUM_TOL) {
            return Err(Error::RowSumExceeded {
                row: i,
                sum: row.iter().sum(),
            });
        }
        if row[i] != 0.0 {
            return Err(Error::NonZeroDiagonal { row: i });
        }
        let s: f64 = row.iter().sum();
        if s > 1.0 + SUM_TOL {
            return Err(Error::RowSumExceeded { row: i, sum: s });
        }
        transition.extend_from_slice(row);
    }
    let ex: f64 = spec.exhaustion_weights.iter().sum();
    if (ex - 1.0).abs() > SUM_TOL {
        return Err(Error::ExhaustionWeightSum { sum: ex });
    }
    Ok(ValidatedGraph {
        m,
        weights: spec.initial_weights.clone(),
        transition,
        exhaustion: spec.exhaustion_weights.clone(),
    })
}

impl ValidatedGraph {
    pub fn new(spec: &GraphSpec) -> Result<Self> {
        validate_graph(spec)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn exhaustion_weights(&self) -> &[f64] {
        &self.exhaustion
    }

    pub fn g(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.m + to]
    }

    /// Outgoing weight of a node.
    pub fn row_sum(&self, from: usize) -> f64 {
        self.transition[from * self.m..(from + 1) * self.m].iter().sum()
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            initial_weights: self.weights.clone(),
            transition: self
                .transition
                .chunks(self.m)
                .map(|r| r.to_vec())
                .collect(),
            exhaustion_weights: self.exhaustion.clone(),
        }
    }

    pub fn initial_state(&self) -> GraphState {
        GraphState {
            active: vec![true; self.m],
            weights: self.weights.clone(),
            transition: self.transition.clone(),
        }
    }

    /// Weights `w_j(J)` for the index set `J = {0..m} \ removed`.
    pub fn weights_without(&self, removed: &[usize]) -> Vec<f64> {
        let mut st = self.initial_state();
        let mut sorted = removed.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for j in sorted {
            st.reject(j).expect("index set was deduplicated");
        }
        st.weights
    }
}

/// Current weights and transitions while hypotheses are being rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    active: Vec<bool>,
    weights: Vec<f64>,
    transition: Vec<f64>,
}

impl GraphState {
    /// Builds a state directly. Used by the dual-graph construction.
    pub(crate) fn from_parts(active: Vec<bool>, weights: Vec<f64>, transition: Vec<f64>) -> Self {
        GraphState {
            active,
            weights,
            transition,
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, j: usize) -> bool {
        self.active[j]
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.active[j]).collect()
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn g(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.len() + to]
    }

    /// Rejects `j` and redistributes its weight along the outgoing arrows.
    pub fn reject(&mut self, j: usize) -> Result<()> {
        let n = self.len();
        if j >= n || !self.active[j] {
            return Err(Error::InactiveNode { index: j });
        }
        self.active[j] = false;
        let wj = self.weights[j];
        let old = self.transition.clone();
        let g = |a: usize, b: usize| old[a * n + b];
        for l in 0..n {
            self.weights[l] = if self.active[l] {
                self.weights[l] + wj * g(j, l)
            } else {
                0.0
            };
        }
        for l in 0..n {
            for i in 0..n {
                let v = if self.active[l] && self.active[i] && l != i {
                    let d = g(l, j) * g(j, l);
                    if d < 1.0 {
                        (g(l, i) + g(l, j) * g(j, i)) / (1.0 - d)
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                self.transition[l * n + i] = v;
            }
        }
        Ok(())
    }
}

/// Functional form of [`GraphState::reject`].
pub fn update_after_rejection(state: &GraphState, j: usize) -> Result<GraphState> {
    let mut s = state.clone();
    s.reject(j)?;
    Ok(s)
}

/// Runs the graphical test on one vector of p-values, rejecting the lowest
/// eligible index first. Returns indices in rejection order.
pub fn run_single_stage_test(
    graph: &ValidatedGraph,
    pvalues: &[f64],
    alpha: f64,
) -> Result<(Vec<usize>, GraphState)> {
    if pvalues.len() != graph.m() {
        return Err(Error::DimensionMismatch {
            what: "p-values".into(),
            expected: graph.m(),
            found: pvalues.len(),
        });
    }
    if pvalues.iter().any(|p| !p.is_finite()) {
        return Err(Error::OutOfDomain {
            what: "p-values must be finite".into(),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::OutOfDomain {
            what: format!("alpha={alpha}"),
        });
    }
    let mut state = graph.initial_state();
    let rejected = run_graph_test_with(&mut state, |j, level| Ok(pvalues[j] <= level), alpha, |e| e[0])?;
    Ok((rejected, state))
}

/// Core rejection loop. `rejects(j, level)` decides whether hypothesis `j` is
/// rejected at local level `level`; `choose` picks among eligible indices.
pub fn run_graph_test_with<F, C>(
    state: &mut GraphState,
    mut rejects: F,
    alpha: f64,
    mut choose: C,
) -> Result<Vec<usize>>
where
    F: FnMut(usize, f64) -> Result<bool>,
    C: FnMut(&[usize]) -> usize,
{
    let mut out = Vec::new();
    loop {
        let mut eligible = Vec::new();
        for j in state.active_indices() {
            if rejects(j, state.weight(j) * alpha)? {
                eligible.push(j);
            }
        }
        if eligible.is_empty() {
            return Ok(out);
        }
        let j = choose(&eligible);
        state.reject(j)?;
        out.push(j);
    }
}
