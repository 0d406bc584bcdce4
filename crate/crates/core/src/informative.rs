//! Informative simultaneous confidence bounds by bracketed fixed-point iteration.

use crate::dual::{check_q, local_alpha};
use crate::engine::TrialState;
use crate::error::{Error, Result};
use crate::graph::ValidatedGraph;
use crate::pvalue::{stage_views, HypothesisSeries, Lambda, PValueSource, ShiftedPValue};
use crate::roots::illinois;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const XTOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    /// Information weight in (0,1).
    pub q: f64,
    /// Stop when the Euclidean gap between the sequences falls below this.
    pub epsilon: f64,
    /// First element of the sequence `delta_l = delta0 * 2^-l`.
    pub delta0: f64,
    pub max_iters: usize,
    /// Upper iterates below this are reported as `-inf`.
    pub divergence_floor: f64,
    #[serde(skip)]
    pub deadline: Option<Instant>,
    #[serde(default)]
    pub trace: bool,
}

impl IterationConfig {
    pub fn new(q: f64, alpha: f64) -> Self {
        IterationConfig {
            q,
            epsilon: 1e-6,
            delta0: default_delta0(alpha),
            max_iters: 500,
            divergence_floor: -1e6,
            deadline: None,
            trace: false,
        }
    }

    pub fn delta(&self, l: usize) -> f64 {
        self.delta0 * 0.5f64.powi(l.min(1100) as i32)
    }

    pub fn validate_for(&self, alpha: f64) -> Result<()> {
        check_q(self.q)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::OutOfDomain {
                what: format!("alpha={alpha}"),
            });
        }
        if !(self.delta0 > 0.0 && alpha + self.delta0 < 1.0) {
            return Err(Error::OutOfDomain {
                what: format!("delta0={} must be positive with alpha + delta0 < 1", self.delta0),
            });
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::OutOfDomain {
                what: format!("epsilon={}", self.epsilon),
            });
        }
        Ok(())
    }
}

pub fn default_delta0(alpha: f64) -> f64 {
    (0.9 * (1.0 - alpha)).min(0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    #[serde(with = "crate::serde_ext::vec")]
    pub lower: Vec<f64>,
    #[serde(with = "crate::serde_ext::vec")]
    pub upper: Vec<f64>,
    #[serde(with = "crate::serde_ext::scalar")]
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsBracket {
    #[serde(with = "crate::serde_ext::vec")]
    pub lower: Vec<f64>,
    #[serde(with = "crate::serde_ext::vec")]
    pub upper: Vec<f64>,
    #[serde(with = "crate::serde_ext::scalar")]
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub timed_out: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceStep>,
}

impl BoundsBracket {
    pub fn rejected(&self) -> Vec<usize> {
        (0..self.lower.len()).filter(|&j| self.lower[j] >= 0.0).collect()
    }
}

/// Euclidean gap over finite pairs. Pairs that are both `-inf` add nothing,
/// a single `-inf` makes the gap infinite.
pub fn gap(lower: &[f64], upper: &[f64]) -> f64 {
    let mut s = 0.0;
    for (l, u) in lower.iter().zip(upper) {
        if l.is_finite() && u.is_finite() {
            s += (u - l) * (u - l);
        } else if l != u {
            return f64::INFINITY;
        }
    }
    s.sqrt()
}

fn inv<P: ShiftedPValue + ?Sized>(p: &P, gamma: f64) -> Result<f64> {
    p.inverse(gamma.min(1.0))
}

/// Solves `x = Inv(a_prev * factor * q^{(x v 0) - (prev v 0)})` for the
/// unique root. Left side increasing, right side non-increasing in `x`.
fn solve_component<P: ShiftedPValue + ?Sized>(p: &P, a_prev: f64, prev: f64, factor: f64, ln_q: f64) -> Result<f64> {
    if !(a_prev > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let prev_pos = if prev > 0.0 { prev } else { 0.0 };
    let ln_base = (a_prev * factor).ln() - prev_pos * ln_q;
    let target = |x: f64| (ln_base + x.max(0.0) * ln_q).exp();
    let g = |x: f64| -> Result<f64> { Ok(x - inv(p, target(x))?) };
    let (lo, hi, glo, ghi);
    if ln_base <= 0.0 {
        let x0 = inv(p, ln_base.exp())?;
        if x0 <= 0.0 {
            return Ok(x0);
        }
        if x0.is_finite() {
            lo = 0.0;
            glo = -x0;
            hi = x0;
            ghi = g(hi)?;
            return illinois(g, lo, hi, glo, ghi, XTOL);
        }
    }
    let x1 = (ln_base / -ln_q).max(0.0);
    let mut a = x1;
    let mut ga = g(a)?;
    let mut step = x1.abs().max(1.0);
    let mut b = x1 + step;
    let mut gb = g(b)?;
    let mut n = 0;
    while gb < 0.0 {
        a = b;
        ga = gb;
        step *= 2.0;
        b += step;
        gb = g(b)?;
        n += 1;
        if n > 200 {
            return Err(Error::ConvergenceFailure {
                what: "could not bracket informative bound".into(),
            });
        }
    }
    illinois(g, a, b, ga, gb, XTOL)
}

fn slack(x: f64) -> f64 {
    1e-9 * x.abs().max(1.0)
}

/// Checks the lower start condition `p_j(mu_j) <= alpha_j^mu` for every `j`.
pub fn valid_lower_start<P: ShiftedPValue>(
    graph: &ValidatedGraph,
    pv: &[P],
    alpha: f64,
    q: f64,
    mu: &[f64],
) -> Result<Option<usize>> {
    let a = local_alpha(graph, mu, q, alpha)?;
    for j in 0..mu.len() {
        if mu[j] == f64::NEG_INFINITY {
            continue;
        }
        let bound = inv(&pv[j], a[j])?;
        if mu[j] > bound + slack(bound) {
            return Ok(Some(j));
        }
    }
    Ok(None)
}

/// Checks the upper start condition `p_j(rho_j) >= alpha_j^rho (alpha+delta0)/alpha`.
pub fn valid_upper_start<P: ShiftedPValue>(
    graph: &ValidatedGraph,
    pv: &[P],
    alpha: f64,
    cfg: &IterationConfig,
    rho: &[f64],
) -> Result<Option<usize>> {
    let a = local_alpha(graph, rho, cfg.q, alpha)?;
    let f = (alpha + cfg.delta0) / alpha;
    for j in 0..rho.len() {
        let bound = inv(&pv[j], a[j] * f)?;
        if rho[j] < bound - slack(bound) {
            return Ok(Some(j));
        }
    }
    Ok(None)
}

/// Lower start `min(0, Inv_j(alpha_j))` and upper start `Inv_j(alpha + delta0)`.
pub fn default_start_vectors<P: ShiftedPValue>(
    graph: &ValidatedGraph,
    pv: &[P],
    alpha: f64,
    delta0: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lower = Vec::with_capacity(pv.len());
    let mut upper = Vec::with_capacity(pv.len());
    for (j, p) in pv.iter().enumerate() {
        lower.push(inv(p, graph.weights()[j] * alpha)?.min(0.0));
        upper.push(inv(p, alpha + delta0)?);
    }
    Ok((lower, upper))
}

/// Primary algorithm: lower and upper sequences bracketing the projected bounds.
pub fn primary_algorithm<P: ShiftedPValue>(
    graph: &ValidatedGraph,
    pv: &[P],
    alpha: f64,
    cfg: &IterationConfig,
    start_lower: Option<&[f64]>,
    start_upper: Option<&[f64]>,
) -> Result<BoundsBracket> {
    cfg.validate_for(alpha)?;
    let m = graph.m();
    if pv.len() != m {
        return Err(Error::DimensionMismatch {
            what: "p-value families".into(),
            expected: m,
            found: pv.len(),
        });
    }
    let (dl, du) = default_start_vectors(graph, pv, alpha, cfg.delta0)?;
    let mut lower = match start_lower {
        Some(s) => {
            if let Some(j) = valid_lower_start(graph, pv, alpha, cfg.q, s)? {
                return Err(Error::InvalidStartVector {
                    which: "lower",
                    component: j,
                });
            }
            s.to_vec()
        }
        None => dl,
    };
    let mut upper = match start_upper {
        Some(s) => {
            if let Some(j) = valid_upper_start(graph, pv, alpha, cfg, s)? {
                return Err(Error::InvalidStartVector {
                    which: "upper",
                    component: j,
                });
            }
            s.to_vec()
        }
        None => du,
    };
    let ln_q = cfg.q.ln();
    let mut trace = Vec::new();
    let mut l = 0usize;
    let mut converged = false;
    let mut timed_out = false;
    let mut g;
    loop {
        g = gap(&lower, &upper);
        if cfg.trace {
            trace.push(TraceStep {
                lower: lower.clone(),
                upper: upper.clone(),
                gap: g,
            });
        }
        if g < cfg.epsilon {
            converged = true;
            break;
        }
        if l >= cfg.max_iters {
            break;
        }
        if cfg.deadline.is_some_and(|d| Instant::now() >= d) {
            timed_out = true;
            break;
        }
        let a_lo = local_alpha(graph, &lower, cfg.q, alpha)?;
        let a_up = local_alpha(graph, &upper, cfg.q, alpha)?;
        let f_up = (alpha + cfg.delta(l)) / alpha;
        let mut nl = Vec::with_capacity(m);
        let mut nu = Vec::with_capacity(m);
        for j in 0..m {
            let x = solve_component(&pv[j], a_lo[j], lower[j], 1.0, ln_q)?;
            nl.push(if x > lower[j] { x } else { lower[j] });
            let y = solve_component(&pv[j], a_up[j], upper[j], f_up, ln_q)?;
            let y = if y < upper[j] { y } else { upper[j] };
            nu.push(if y < cfg.divergence_floor { f64::NEG_INFINITY } else { y });
        }
        lower = nl;
        upper = nu;
        l += 1;
    }
    Ok(BoundsBracket {
        lower,
        upper,
        gap: g,
        iterations: l,
        converged,
        timed_out,
        trace,
    })
}

/// `p_j(mu_j) - alpha_j^mu` for every finite component.
pub fn limit_residuals<P: ShiftedPValue>(
    graph: &ValidatedGraph,
    pv: &[P],
    alpha: f64,
    q: f64,
    mu: &[f64],
) -> Result<Vec<f64>> {
    let a = local_alpha(graph, mu, q, alpha)?;
    let mut out = Vec::with_capacity(mu.len());
    for j in 0..mu.len() {
        out.push(if mu[j].is_finite() {
            pv[j].pvalue(mu[j])? - a[j]
        } else {
            0.0
        });
    }
    Ok(out)
}

/// Whether `mu` lies in the confidence set, i.e. `p_j(mu_j) > alpha_j^mu`
/// for every `j` with positive local level.
pub fn in_confidence_set<P: ShiftedPValue>(
    graph: &ValidatedGraph,
    pv: &[P],
    alpha: f64,
    q: f64,
    mu: &[f64],
) -> Result<bool> {
    let a = local_alpha(graph, mu, q, alpha)?;
    for j in 0..mu.len() {
        // p(mu) <= a  iff  mu <= Inv(a); avoids p-values above the spending domain.
        if a[j] > 0.0 && mu[j] <= pv[j].inverse(a[j])? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Stagewise informative bounds for repeated or sequential p-values.
#[derive(Debug, Clone)]
pub struct InformativeGsd {
    graph: ValidatedGraph,
    alpha: f64,
    lambda: Lambda,
    pub cfg: IterationConfig,
    pub state: TrialState,
    brackets: Vec<BoundsBracket>,
    rejected_by_stage: Vec<Vec<usize>>,
    stop_on_reject: bool,
    revoked: bool,
}

impl InformativeGsd {
    pub fn new(graph: ValidatedGraph, alpha: f64, lambda: Lambda, num_stages: usize, cfg: IterationConfig) -> Result<Self> {
        cfg.validate_for(alpha)?;
        let m = graph.m();
        Ok(InformativeGsd {
            graph,
            alpha,
            lambda,
            cfg,
            state: TrialState::new(m, num_stages),
            brackets: Vec::new(),
            rejected_by_stage: Vec::new(),
            stop_on_reject: lambda == Lambda::Repeated,
            revoked: false,
        })
    }

    /// See [`crate::engine::GraphicalGsd::set_stop_on_reject`].
    pub fn set_stop_on_reject(&mut self, on: bool) {
        if !on && self.lambda == Lambda::Repeated {
            log::warn!("continuing data collection after rejection with repeated p-values may revoke rejections");
        }
        self.stop_on_reject = on;
    }

    pub fn lambda(&self) -> Lambda {
        self.lambda
    }

    /// True once a rejection has been revoked at a later stage.
    pub fn revoked(&self) -> bool {
        self.revoked
    }

    pub fn brackets(&self) -> &[BoundsBracket] {
        &self.brackets
    }

    pub fn rejected_by_stage(&self) -> &[Vec<usize>] {
        &self.rejected_by_stage
    }

    pub fn advance_stage(&mut self, series: &[HypothesisSeries]) -> Result<&BoundsBracket> {
        let mut probe = self.state.clone();
        let k = probe.begin_stage()?;
        for j in probe.collecting_indices() {
            if !series.has_stage(j, k) {
                return Err(Error::MissingObservation { hypothesis: j });
            }
        }
        self.analyse(series, &probe.last_stage)?;
        self.state = probe;
        Ok(self.brackets.last().expect("just pushed"))
    }

    /// Computes the next stage's bracket for data frozen at `stages`, without
    /// touching the trial bookkeeping. Used by drivers that own the stopping state.
    pub fn analyse(&mut self, series: &[HypothesisSeries], stages: &[usize]) -> Result<&BoundsBracket> {
        let pv = stage_views(series, stages, self.lambda);
        let warm = self.warm_start(&pv)?;
        let bracket = match warm {
            Some(w) => match primary_algorithm(&self.graph, &pv, self.alpha, &self.cfg, Some(&w), None) {
                Err(Error::InvalidStartVector { .. }) => {
                    log::debug!("warm start rejected at stage {}, using defaults", self.brackets.len() + 1);
                    primary_algorithm(&self.graph, &pv, self.alpha, &self.cfg, None, None)?
                }
                other => other?,
            },
            None => primary_algorithm(&self.graph, &pv, self.alpha, &self.cfg, None, None)?,
        };
        let rejected = bracket.rejected();
        if let Some(prev) = self.rejected_by_stage.last() {
            if prev.iter().any(|j| !rejected.contains(j)) {
                self.revoked = true;
            }
        }
        self.rejected_by_stage.push(rejected);
        self.brackets.push(bracket);
        Ok(self.brackets.last().expect("just pushed"))
    }

    fn warm_start<P: ShiftedPValue>(&self, pv: &[P]) -> Result<Option<Vec<f64>>> {
        let Some(prev) = self.brackets.last() else {
            return Ok(None);
        };
        match self.lambda {
            Lambda::Sequential => Ok(Some(prev.lower.clone())),
            Lambda::Repeated => {
                let (mut dl, _) = default_start_vectors(&self.graph, pv, self.alpha, self.cfg.delta0)?;
                let prev_rej = self.rejected_by_stage.last().expect("stage analysed");
                for &j in prev_rej {
                    dl[j] = prev.lower[j];
                }
                Ok(Some(dl))
            }
        }
    }

    /// Applies stop decisions; with repeated p-values and stop-on-reject,
    /// rejected hypotheses that are still collecting are stopped as well.
    pub fn apply_stop_decisions(&mut self, stops: &[usize]) -> Result<Vec<usize>> {
        let mut all = stops.to_vec();
        if self.stop_on_reject {
            if let Some(r) = self.rejected_by_stage.last() {
                for &j in r {
                    if self.state.collecting[j] && !all.contains(&j) {
                        all.push(j);
                    }
                }
            }
        }
        all.sort_unstable();
        all.dedup();
        self.state.apply_stops(&all)?;
        Ok(all)
    }
}

/// Informative bounds for the efficient multiple adjustment, given final
/// sequential-family bounds `l_s` and repeated p-values at `tau_j*`.
pub fn isci_efficient_adjustment<P: ShiftedPValue>(
    graph: &ValidatedGraph,
    l_s: &[f64],
    pv_r: &[P],
    q: f64,
    alpha: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    check_q(q)?;
    let m = graph.m();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let mut mu = l_s.to_vec();
        let mut level_at = |x: f64| -> Result<f64> {
            mu[j] = x;
            Ok(local_alpha(graph, &mu, q, alpha)?[j])
        };
        let a0 = level_at(0.0)?;
        if !(a0 > 0.0) {
            out.push(f64::NEG_INFINITY);
            continue;
        }
        let lo = inv(&pv_r[j], a0)?;
        if lo <= 0.0 {
            // Equal to l_s[j] in exact arithmetic when the p-values coincide.
            out.push(lo.min(l_s[j]));
            continue;
        }
        let hi = lo.min(l_s[j]);
        let mut h = |x: f64| -> Result<f64> {
            let a = level_at(x)?;
            Ok(x - inv(&pv_r[j], a)?)
        };
        let h_hi = h(hi)?;
        if h_hi < 0.0 {
            out.push(hi);
            continue;
        }
        out.push(illinois(&mut h, 0.0, hi, -lo, h_hi, XTOL)?);
    }
    let rejected = (0..m).filter(|&j| out[j] >= 0.0).collect();
    Ok((out, rejected))
}
