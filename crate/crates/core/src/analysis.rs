//! Stage-by-stage monitoring of a trial: every procedure recomputed per stage.

use crate::compatible::{compatible_bounds, compatible_bounds_adjustment};
use crate::design::{StageObservation, ValidatedDesign};
use crate::engine::{efficient_multiple_adjustment, TrialState};
use crate::error::{Error, Result};
use crate::estimators::{median_estimator, EstimatorResult, EstimatorVariant};
use crate::graph::{run_graph_test_with, GraphState};
use crate::informative::{isci_efficient_adjustment, BoundsBracket, InformativeGsd};
use crate::pvalue::{stage_views, HypothesisSeries, Lambda};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorOptions {
    /// Stop hypotheses automatically once the repeated-p-value test rejects them.
    pub stop_on_reject: bool,
    /// Compute median-conservative estimators at every stage.
    pub estimators: bool,
}

/// Results of one analysed stage. Stage and hypothesis numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// Stage whose data each hypothesis contributes, `k_j*(k)`.
    pub data_stages: Vec<usize>,
    pub collecting: Vec<bool>,
    pub rejected_r: Vec<usize>,
    pub rejected_s: Vec<usize>,
    /// Efficient multiple adjustment as if the trial ended at this stage.
    pub rejected_c: Vec<usize>,
    #[serde(with = "crate::serde_ext::vec")]
    pub compatible_r: Vec<f64>,
    #[serde(with = "crate::serde_ext::vec")]
    pub compatible_s: Vec<f64>,
    #[serde(with = "crate::serde_ext::vec")]
    pub compatible_c: Vec<f64>,
    pub informative_r: BoundsBracket,
    pub informative_s: BoundsBracket,
    #[serde(with = "crate::serde_ext::vec")]
    pub informative_c: Vec<f64>,
    pub informative_rejected_c: Vec<usize>,
    /// The informative repeated-p-value bounds revoked an earlier rejection.
    pub revoked_r: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub estimators: Vec<EstimatorResult>,
}

/// Computation limits for one stage.
struct Limits {
    deadline: Option<Instant>,
    /// Iteration caps for the repeated and sequential brackets.
    caps: [Option<usize>; 2],
    estimators: bool,
}

fn one_based(v: &[usize]) -> Vec<usize> {
    v.iter().map(|j| j + 1).collect()
}

#[derive(Debug, Clone)]
pub struct TrialMonitor {
    design: ValidatedDesign,
    opts: MonitorOptions,
    state: TrialState,
    series: Vec<HypothesisSeries>,
    realized: Vec<Vec<f64>>,
    graph_r: GraphState,
    graph_s: GraphState,
    rejected_r: Vec<usize>,
    rejected_s: Vec<usize>,
    last_new_r: Vec<usize>,
    isci_r: InformativeGsd,
    isci_s: InformativeGsd,
    reports: Vec<StageReport>,
}

impl TrialMonitor {
    pub fn new(design: ValidatedDesign, opts: MonitorOptions) -> Result<Self> {
        let m = design.m();
        let k = design.num_stages();
        let series = (0..m)
            .map(|j| HypothesisSeries::new(design.planned_boundary(j)?, vec![], vec![]))
            .collect::<Result<Vec<_>>>()?;
        let cfg = design.iteration_config();
        let g = design.graph().clone();
        Ok(TrialMonitor {
            isci_r: InformativeGsd::new(g.clone(), design.alpha(), Lambda::Repeated, k, cfg.clone())?,
            isci_s: InformativeGsd::new(g.clone(), design.alpha(), Lambda::Sequential, k, cfg)?,
            graph_r: g.initial_state(),
            graph_s: g.initial_state(),
            state: TrialState::new(m, k),
            series,
            realized: vec![Vec::new(); m],
            rejected_r: Vec::new(),
            rejected_s: Vec::new(),
            last_new_r: Vec::new(),
            reports: Vec::new(),
            design,
            opts,
        })
    }

    pub fn design(&self) -> &ValidatedDesign {
        &self.design
    }

    pub fn options(&self) -> MonitorOptions {
        self.opts
    }

    pub fn state(&self) -> &TrialState {
        &self.state
    }

    pub fn reports(&self) -> &[StageReport] {
        &self.reports
    }

    pub fn series(&self) -> &[HypothesisSeries] {
        &self.series
    }

    /// Checks a stage submission without changing anything.
    pub fn check_submission(&self, obs: &[StageObservation]) -> Result<usize> {
        if obs.is_empty() {
            return Err(Error::Validation("no observations submitted".into()));
        }
        let mut probe = self.state.clone();
        let k = probe.begin_stage()?;
        let m = self.design.m();
        let mut seen = vec![false; m];
        for o in obs {
            if o.hypothesis >= m {
                return Err(Error::Validation(format!("unknown hypothesis {}", o.hypothesis + 1)));
            }
            if o.stage != k {
                return Err(Error::StageOverrun { stage: o.stage + 1, max: k + 1 });
            }
            if !probe.collecting[o.hypothesis] {
                return Err(Error::NotCollecting { hypothesis: o.hypothesis });
            }
            if seen[o.hypothesis] {
                return Err(Error::Validation(format!("duplicate observation for hypothesis {}", o.hypothesis + 1)));
            }
            seen[o.hypothesis] = true;
            if !(o.std_error.is_finite() && o.std_error > 0.0) || !o.estimate.is_finite() {
                return Err(Error::Validation(format!(
                    "hypothesis {}: estimate and a positive standard error are required",
                    o.hypothesis + 1
                )));
            }
            let prev = self.realized[o.hypothesis].last().copied().unwrap_or(0.0);
            if !(o.info_fraction > prev && o.info_fraction <= 1.0) {
                return Err(Error::Validation(format!(
                    "hypothesis {}: information fraction {} must exceed {prev} and be at most 1",
                    o.hypothesis + 1,
                    o.info_fraction
                )));
            }
        }
        if let Some(j) = probe.collecting_indices().into_iter().find(|&j| !seen[j]) {
            return Err(Error::MissingObservation { hypothesis: j });
        }
        Ok(k)
    }

    /// Adds one stage of data and analyses it.
    pub fn submit_stage(&mut self, obs: &[StageObservation], deadline: Option<Instant>) -> Result<&StageReport> {
        let limits = Limits {
            deadline,
            caps: [None, None],
            estimators: self.opts.estimators,
        };
        self.transact(obs, &limits, None)?;
        Ok(self.reports.last().expect("stage analysed"))
    }

    /// Re-applies a stage recorded earlier together with its report. Brackets
    /// that hit the deadline originally are rerun with their iteration count as
    /// the cap, so the internal state matches the original run exactly; the
    /// recorded report is kept as the stage snapshot.
    pub fn restore_stage(&mut self, obs: &[StageObservation], report: StageReport) -> Result<()> {
        let cap = |b: &BoundsBracket| b.timed_out.then_some(b.iterations);
        let limits = Limits {
            deadline: None,
            caps: [cap(&report.informative_r), cap(&report.informative_s)],
            estimators: false,
        };
        self.transact(obs, &limits, Some(report))
    }

    fn transact(&mut self, obs: &[StageObservation], limits: &Limits, recorded: Option<StageReport>) -> Result<()> {
        self.check_submission(obs)?;
        let saved = self.clone();
        let res = self.analyse_stage(obs, limits).and_then(|()| match recorded {
            None => Ok(()),
            Some(rec) => {
                let now = self.reports.last_mut().expect("stage analysed");
                let same = now.stage == rec.stage
                    && now.rejected_r == rec.rejected_r
                    && now.rejected_s == rec.rejected_s
                    && now.rejected_c == rec.rejected_c
                    && now.informative_r.lower == rec.informative_r.lower
                    && now.informative_s.lower == rec.informative_s.lower;
                if !same {
                    return Err(Error::Validation(format!(
                        "recorded stage {} does not reproduce on replay",
                        rec.stage
                    )));
                }
                *now = rec;
                Ok(())
            }
        });
        if res.is_err() {
            *self = saved;
        }
        res
    }

    fn analyse_stage(&mut self, obs: &[StageObservation], limits: &Limits) -> Result<()> {
        let deadline = limits.deadline;
        let k = self.state.begin_stage()?;
        for o in obs {
            let j = o.hypothesis;
            self.realized[j].push(o.info_fraction);
            let b = self.design.boundary_for(j, &self.realized[j])?;
            self.series[j].set_boundary(b)?;
            self.series[j].push(o.estimate, o.std_error)?;
        }
        let stages = self.state.last_stage.clone();
        let graph = self.design.graph().clone();
        let alpha = self.design.alpha();
        let series = &self.series;

        let new_r = run_graph_test_with(
            &mut self.graph_r,
            |j, l| series[j].rejects(stages[j], Lambda::Repeated, l),
            alpha,
            |e| e[0],
        )?;
        self.rejected_r.extend(&new_r);
        self.rejected_r.sort_unstable();
        self.last_new_r = new_r;
        let new_s = run_graph_test_with(
            &mut self.graph_s,
            |j, l| series[j].rejects(stages[j], Lambda::Sequential, l),
            alpha,
            |e| e[0],
        )?;
        self.rejected_s.extend(&new_s);
        self.rejected_s.sort_unstable();
        let rejected_c = efficient_multiple_adjustment(&graph, &self.rejected_s, &stages, series, alpha)?;

        let comp_r = compatible_bounds(&graph, series, Lambda::Repeated, alpha, &self.rejected_r, &stages)?;
        let comp_s = compatible_bounds(&graph, series, Lambda::Sequential, alpha, &self.rejected_s, &stages)?;
        let comp_c = compatible_bounds_adjustment(&graph, series, alpha, &self.rejected_s, &rejected_c, &stages)?;

        let max_iters = self.design.iteration_config().max_iters;
        self.isci_r.cfg.deadline = deadline;
        self.isci_s.cfg.deadline = deadline;
        self.isci_r.cfg.max_iters = limits.caps[0].unwrap_or(max_iters);
        self.isci_s.cfg.max_iters = limits.caps[1].unwrap_or(max_iters);
        let inf_r = self.isci_r.analyse(series, &stages)?.clone();
        let inf_s = self.isci_s.analyse(series, &stages)?.clone();
        self.isci_r.cfg.max_iters = max_iters;
        self.isci_s.cfg.max_iters = max_iters;
        let pr = stage_views(series, &stages, Lambda::Repeated);
        let q = self.isci_s.cfg.q;
        let (inf_c, inf_rc) = isci_efficient_adjustment(&graph, &inf_s.lower, &pr, q, alpha)?;

        let mut estimators = Vec::new();
        if limits.estimators {
            let mut cfg = self.isci_s.cfg.clone();
            cfg.deadline = deadline;
            for v in EstimatorVariant::ALL {
                let lambdas: &[Lambda] = match v {
                    EstimatorVariant::A | EstimatorVariant::C => &[Lambda::Repeated, Lambda::Sequential],
                    _ => &[Lambda::Sequential],
                };
                for &l in lambdas {
                    estimators.push(median_estimator(v, l, &graph, series, &stages, &cfg)?);
                }
            }
        }

        self.reports.push(StageReport {
            stage: k + 1,
            data_stages: one_based(&stages),
            collecting: self.state.collecting.clone(),
            rejected_r: one_based(&self.rejected_r),
            rejected_s: one_based(&self.rejected_s),
            rejected_c: one_based(&rejected_c),
            compatible_r: comp_r.lower,
            compatible_s: comp_s.lower,
            compatible_c: comp_c.lower,
            informative_rejected_c: one_based(&inf_rc),
            informative_r: inf_r,
            informative_s: inf_s,
            informative_c: inf_c,
            revoked_r: self.isci_r.revoked(),
            estimators,
        });
        Ok(())
    }

    /// Applies stop decisions for the analysed stage and returns every
    /// hypothesis stopped, including automatic stops.
    pub fn decide(&mut self, stops: &[usize]) -> Result<Vec<usize>> {
        let mut all = stops.to_vec();
        if self.opts.stop_on_reject {
            for &j in &self.last_new_r {
                if self.state.collecting[j] {
                    all.push(j);
                }
            }
        }
        all.sort_unstable();
        all.dedup();
        self.state.apply_stops(&all)?;
        Ok(all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{DesignFile, Format};

    fn design() -> ValidatedDesign {
        let t = r#"
alpha = 0.025
hypotheses = ["H1", "H2"]
initial_weights = [0.5, 0.5]
transition = [[0.0, 1.0], [1.0, 0.0]]
exhaustion_weights = [0.5, 0.5]
stages = 2
information_fractions = [0.5, 1.0]
q = 0.5
spending = [{ kind = "pocock_like" }, { kind = "pocock_like" }]
"#;
        DesignFile::parse(t, Format::Toml).unwrap().validate().unwrap()
    }

    fn obs(j: usize, k: usize, est: f64, t: f64) -> StageObservation {
        StageObservation {
            hypothesis: j,
            stage: k,
            estimate: est,
            std_error: 0.1 / t.sqrt(),
            info_fraction: t,
            stopped: false,
        }
    }

    #[test]
    fn two_stage_flow() {
        let mut mon = TrialMonitor::new(design(), MonitorOptions { stop_on_reject: true, estimators: true }).unwrap();
        let r = mon.submit_stage(&[obs(0, 0, 0.5, 0.5), obs(1, 0, 0.05, 0.5)], None).unwrap();
        assert_eq!(r.rejected_r, vec![1]);
        assert_eq!(r.estimators.len(), 6);
        assert_eq!(mon.decide(&[]).unwrap(), vec![0]);
        let e = mon.submit_stage(&[obs(0, 1, 0.5, 1.0), obs(1, 1, 0.3, 1.0)], None).unwrap_err();
        assert!(matches!(e, Error::NotCollecting { hypothesis: 0 }));
        let r = mon.submit_stage(&[obs(1, 1, 0.3, 1.0)], None).unwrap();
        assert_eq!(r.data_stages, vec![1, 2]);
        assert_eq!(r.rejected_r, vec![1, 2]);
        assert!(r.informative_s.lower[0] >= mon.reports()[0].informative_s.lower[0]);
        mon.decide(&[]).unwrap();
        assert!(mon.state().is_finished());
    }

    #[test]
    fn restore_reproduces_timed_out_brackets() {
        let stage = [obs(0, 0, 0.5, 0.5), obs(1, 0, 0.05, 0.5)];
        let mut live = TrialMonitor::new(design(), MonitorOptions::default()).unwrap();
        // An expired deadline stops both brackets before the first iteration.
        let rep = live.submit_stage(&stage, Some(Instant::now())).unwrap().clone();
        assert!(rep.informative_s.timed_out && rep.informative_s.iterations == 0);
        let mut replay = TrialMonitor::new(design(), MonitorOptions::default()).unwrap();
        replay.restore_stage(&stage, rep.clone()).unwrap();
        assert_eq!(replay.reports(), live.reports());
        live.decide(&[]).unwrap();
        replay.decide(&[]).unwrap();
        let next = [obs(0, 1, 0.5, 1.0), obs(1, 1, 0.2, 1.0)];
        let a = live.submit_stage(&next, None).unwrap().clone();
        let b = replay.submit_stage(&next, None).unwrap().clone();
        assert_eq!(a, b);
        let mut bad = rep;
        bad.rejected_s = vec![1, 2];
        let mut fresh = TrialMonitor::new(design(), MonitorOptions::default()).unwrap();
        assert!(fresh.restore_stage(&stage, bad).is_err());
        assert!(fresh.reports().is_empty());
    }

    #[test]
    fn out_of_order_and_missing() {
        let mut mon = TrialMonitor::new(design(), MonitorOptions::default()).unwrap();
        let e = mon.submit_stage(&[obs(0, 1, 0.5, 0.5), obs(1, 1, 0.5, 0.5)], None).unwrap_err();
        assert!(matches!(e, Error::StageOverrun { .. }));
        let e = mon.submit_stage(&[obs(0, 0, 0.5, 0.5)], None).unwrap_err();
        assert!(matches!(e, Error::MissingObservation { hypothesis: 1 }));
        assert!(mon.submit_stage(&[], None).is_err());
        assert!(mon.reports().is_empty());
    }
}
