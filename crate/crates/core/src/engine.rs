//! Stagewise graphical group sequential test and its follow-up adjustment.

use crate::error::{Error, Result};
use crate::graph::{run_graph_test_with, GraphState, ValidatedGraph};
use crate::pvalue::{Lambda, PValueSource};
use serde::{Deserialize, Serialize};

/// Data-collection bookkeeping shared by the sequential procedures.
/// Stages are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub num_stages: usize,
    /// Number of stages analysed so far.
    pub stage: usize,
    /// Hypotheses with ongoing data collection (`D`).
    pub collecting: Vec<bool>,
    /// Current last stage of data collection `k_j*`.
    pub last_stage: Vec<usize>,
    /// Final stage of data collection `tau_j*`, once known.
    pub final_stage: Vec<Option<usize>>,
    /// A stage has been analysed and awaits stop decisions.
    pub pending_decision: bool,
}

impl TrialState {
    pub fn new(m: usize, num_stages: usize) -> Self {
        TrialState {
            num_stages,
            stage: 0,
            collecting: vec![true; m],
            last_stage: vec![0; m],
            final_stage: vec![None; m],
            pending_decision: false,
        }
    }

    pub fn m(&self) -> usize {
        self.collecting.len()
    }

    pub fn collecting_indices(&self) -> Vec<usize> {
        (0..self.m()).filter(|&j| self.collecting[j]).collect()
    }

    pub fn is_finished(&self) -> bool {
        !self.pending_decision && (self.stage >= self.num_stages || !self.collecting.iter().any(|&c| c))
    }

    /// Opens the next stage and returns its index.
    pub fn begin_stage(&mut self) -> Result<usize> {
        if self.pending_decision {
            return Err(Error::Validation(format!(
                "stop decisions for stage {} are pending",
                self.stage + 1
            )));
        }
        if self.is_finished() {
            return Err(Error::StageOverrun {
                stage: self.stage + 1,
                max: if self.stage >= self.num_stages { self.num_stages } else { self.stage },
            });
        }
        let k = self.stage;
        for j in 0..self.m() {
            if self.collecting[j] {
                self.last_stage[j] = k;
            }
        }
        self.pending_decision = true;
        Ok(k)
    }

    /// Stops data collection for `stops` and closes the current stage.
    pub fn apply_stops(&mut self, stops: &[usize]) -> Result<()> {
        if !self.pending_decision {
            return Err(Error::Validation("no analysed stage awaits decisions".into()));
        }
        for &j in stops {
            if j >= self.m() || !self.collecting[j] {
                return Err(Error::NotCollecting { hypothesis: j });
            }
        }
        let k = self.stage;
        for &j in stops {
            self.collecting[j] = false;
            self.final_stage[j] = Some(k);
        }
        self.pending_decision = false;
        self.stage += 1;
        if self.stage >= self.num_stages {
            self.terminate_at(k);
        }
        Ok(())
    }

    /// Ends the trial: every hypothesis still collecting gets `tau_j* = k`.
    pub fn terminate_at(&mut self, k: usize) {
        for j in 0..self.m() {
            if self.collecting[j] {
                self.collecting[j] = false;
                self.final_stage[j] = Some(k);
            }
        }
    }

    /// `tau*`, the stage at which the trial ended.
    pub fn tau_star(&self) -> Option<usize> {
        if self.collecting.iter().any(|&c| c) {
            return None;
        }
        self.final_stage.iter().flatten().copied().max()
    }

    /// `k_j*(k) = min(tau_j*, k)`.
    pub fn stages_at(&self, k: usize) -> Vec<usize> {
        (0..self.m())
            .map(|j| match self.final_stage[j] {
                Some(t) => t.min(k),
                None => k,
            })
            .collect()
    }
}

/// Graphical test for group sequential designs with repeated or sequential p-values.
#[derive(Debug, Clone)]
pub struct GraphicalGsd {
    graph: ValidatedGraph,
    alpha: f64,
    lambda: Lambda,
    pub state: TrialState,
    graph_state: GraphState,
    /// Rejection sets `R_k`, cumulative, one per analysed stage.
    rejected_by_stage: Vec<Vec<usize>>,
    last_new: Vec<usize>,
    stop_on_reject: bool,
    terminated: bool,
}

impl GraphicalGsd {
    pub fn new(graph: ValidatedGraph, alpha: f64, lambda: Lambda, num_stages: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::OutOfDomain {
                what: format!("alpha={alpha}"),
            });
        }
        let m = graph.m();
        Ok(GraphicalGsd {
            graph_state: graph.initial_state(),
            graph,
            alpha,
            lambda,
            state: TrialState::new(m, num_stages),
            rejected_by_stage: Vec::new(),
            last_new: Vec::new(),
            stop_on_reject: lambda == Lambda::Repeated,
            terminated: false,
        })
    }

    /// For repeated p-values, rejected hypotheses are stopped automatically
    /// unless this is switched off. Continuing makes the test backward
    /// inconsistent and is meant for research use only.
    pub fn set_stop_on_reject(&mut self, on: bool) {
        if !on && self.lambda == Lambda::Repeated {
            log::warn!("continuing data collection after rejection with repeated p-values is backward inconsistent");
        }
        self.stop_on_reject = on;
    }

    pub fn lambda(&self) -> Lambda {
        self.lambda
    }

    pub fn graph(&self) -> &ValidatedGraph {
        &self.graph
    }

    pub fn graph_state(&self) -> &GraphState {
        &self.graph_state
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated || self.state.is_finished()
    }

    /// Analyses the next stage. Returns the newly rejected hypotheses.
    pub fn advance_stage(&mut self, source: &dyn PValueSource) -> Result<Vec<usize>> {
        if self.terminated {
            return Err(Error::StageOverrun {
                stage: self.state.stage + 1,
                max: self.state.stage,
            });
        }
        let mut probe = self.state.clone();
        let k = probe.begin_stage()?;
        for j in probe.collecting_indices() {
            if !source.has_stage(j, k) {
                return Err(Error::MissingObservation { hypothesis: j });
            }
        }
        self.state = probe;
        let stages = self.state.last_stage.clone();
        let lambda = self.lambda;
        let new = run_graph_test_with(
            &mut self.graph_state,
            |j, level| source.rejects(j, stages[j], lambda, level),
            self.alpha,
            |e| e[0],
        )?;
        let mut all = self.rejected_by_stage.last().cloned().unwrap_or_default();
        all.extend(&new);
        all.sort_unstable();
        self.rejected_by_stage.push(all);
        self.last_new = new.clone();
        Ok(new)
    }

    /// Applies stop decisions for the current stage and returns the full set
    /// stopped, including any forced stops of newly rejected hypotheses.
    pub fn apply_stop_decisions(&mut self, stops: &[usize]) -> Result<Vec<usize>> {
        let mut all: Vec<usize> = stops.to_vec();
        if self.stop_on_reject {
            for &j in &self.last_new {
                if self.state.collecting[j] && !all.contains(&j) {
                    all.push(j);
                }
            }
        }
        all.sort_unstable();
        all.dedup();
        let k = self.state.stage;
        self.state.apply_stops(&all)?;
        if self.graph_state.active_indices().is_empty() {
            self.state.terminate_at(k);
            self.terminated = true;
        }
        Ok(all)
    }

    pub fn rejected_by_stage(&self) -> &[Vec<usize>] {
        &self.rejected_by_stage
    }

    /// Current cumulative rejection set.
    pub fn rejected(&self) -> Vec<usize> {
        self.rejected_by_stage.last().cloned().unwrap_or_default()
    }
}

/// Retests every hypothesis in `r_s` with its repeated p-value at stage
/// `stages[j]`, at the level obtained when all other members of `r_s` are rejected.
pub fn efficient_multiple_adjustment<S: PValueSource + ?Sized>(
    graph: &ValidatedGraph,
    r_s: &[usize],
    stages: &[usize],
    source: &S,
    alpha: f64,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for &j in r_s {
        let others: Vec<usize> = r_s.iter().copied().filter(|&i| i != j).collect();
        let level = graph.weights_without(&others)[j] * alpha;
        if source.rejects(j, stages[j], Lambda::Repeated, level)? {
            out.push(j);
        }
    }
    out.sort_unstable();
    Ok(out)
}
