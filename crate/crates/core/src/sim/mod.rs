//! Monte Carlo harness: correlated group sequential data, stopping policies
//! and FWER / coverage / median-conservativeness estimates.

pub mod oracle;

use crate::compatible::{compatible_bounds, compatible_bounds_adjustment};
use crate::design::{parse_document, DesignFile, Format, ValidatedDesign};
use crate::engine::{efficient_multiple_adjustment, TrialState};
use crate::error::{Error, Result};
use crate::estimators::{median_estimator, EstimatorVariant};
use crate::graph::run_graph_test_with;
use crate::informative::{isci_efficient_adjustment, InformativeGsd, IterationConfig};
use crate::pvalue::{stage_views, HypothesisSeries, Lambda};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Default maximum information per hypothesis (final standard error 0.1).
pub const DEFAULT_INFORMATION: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingPolicy {
    /// Each procedure stops a hypothesis once it rejects it.
    StopOnReject,
    NeverStop,
    /// Hypotheses to stop after each stage (0-based here, 1-based in files).
    Scripted(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Procedure {
    #[serde(rename = "gsd-r")]
    GsdR,
    #[serde(rename = "gsd-s")]
    GsdS,
    #[serde(rename = "adjust")]
    Adjust,
    #[serde(rename = "isci-r")]
    IsciR,
    #[serde(rename = "isci-s")]
    IsciS,
    #[serde(rename = "isci-adjust")]
    IsciAdjust,
    #[serde(rename = "est-a-r")]
    EstAR,
    #[serde(rename = "est-a-s")]
    EstAS,
    #[serde(rename = "est-b")]
    EstB,
    #[serde(rename = "est-c-r")]
    EstCR,
    #[serde(rename = "est-c-s")]
    EstCS,
    #[serde(rename = "est-d")]
    EstD,
}

impl Procedure {
    pub const ALL: [Procedure; 12] = [
        Self::GsdR,
        Self::GsdS,
        Self::Adjust,
        Self::IsciR,
        Self::IsciS,
        Self::IsciAdjust,
        Self::EstAR,
        Self::EstAS,
        Self::EstB,
        Self::EstCR,
        Self::EstCS,
        Self::EstD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GsdR => "gsd-r",
            Self::GsdS => "gsd-s",
            Self::Adjust => "adjust",
            Self::IsciR => "isci-r",
            Self::IsciS => "isci-s",
            Self::IsciAdjust => "isci-adjust",
            Self::EstAR => "est-a-r",
            Self::EstAS => "est-a-s",
            Self::EstB => "est-b",
            Self::EstCR => "est-c-r",
            Self::EstCS => "est-c-s",
            Self::EstD => "est-d",
        }
    }

    pub fn is_estimator(self) -> bool {
        self >= Self::EstAR
    }

    fn family(self) -> Family {
        match self {
            Self::GsdR | Self::EstAR | Self::EstCR => Family::Gsd(Lambda::Repeated),
            Self::GsdS | Self::Adjust | Self::EstAS | Self::EstB | Self::EstCS | Self::EstD => Family::Gsd(Lambda::Sequential),
            Self::IsciR => Family::Informative(Lambda::Repeated),
            Self::IsciS | Self::IsciAdjust => Family::Informative(Lambda::Sequential),
        }
    }

    fn estimator(self) -> Option<(EstimatorVariant, Lambda)> {
        match self {
            Self::EstAR => Some((EstimatorVariant::A, Lambda::Repeated)),
            Self::EstAS => Some((EstimatorVariant::A, Lambda::Sequential)),
            Self::EstB => Some((EstimatorVariant::B, Lambda::Sequential)),
            Self::EstCR => Some((EstimatorVariant::C, Lambda::Repeated)),
            Self::EstCS => Some((EstimatorVariant::C, Lambda::Sequential)),
            Self::EstD => Some((EstimatorVariant::D, Lambda::Sequential)),
            _ => None,
        }
    }
}

impl std::str::FromStr for Procedure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Procedure::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown procedure `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Family {
    Gsd(Lambda),
    Informative(Lambda),
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub design: ValidatedDesign,
    pub theta: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    /// Maximum information per hypothesis.
    pub information: f64,
    pub policy: StoppingPolicy,
    pub replications: usize,
    pub seed: u64,
    pub procedures: Vec<Procedure>,
    chol: Vec<f64>,
}

/// Lower-triangular factor of a positive semi-definite matrix, row-major.
pub fn psd_cholesky(a: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = a.len();
    if a.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch {
            what: "correlation matrix".into(),
            expected: m,
            found: a.iter().map(|r| r.len()).find(|&l| l != m).unwrap_or(m),
        });
    }
    for i in 0..m {
        for j in 0..m {
            if !a[i][j].is_finite() || (a[i][j] - a[j][i]).abs() > 1e-12 {
                return Err(Error::NotPsd);
            }
        }
    }
    let mut l = vec![0.0; m * m];
    for j in 0..m {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j * m + k] * l[j * m + k];
        }
        if d < -1e-10 {
            return Err(Error::NotPsd);
        }
        let d = d.max(0.0).sqrt();
        l[j * m + j] = d;
        for i in j + 1..m {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            if d > 1e-12 {
                l[i * m + j] = s / d;
            } else if s.abs() > 1e-10 {
                return Err(Error::NotPsd);
            }
        }
    }
    Ok(l)
}

impl ScenarioSpec {
    pub fn new(
        name: impl Into<String>,
        design: ValidatedDesign,
        theta: Vec<f64>,
        correlation: Option<Vec<Vec<f64>>>,
        policy: StoppingPolicy,
        replications: usize,
        seed: u64,
    ) -> Result<Self> {
        let m = design.m();
        if theta.len() != m || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("theta needs {m} finite entries")));
        }
        if replications == 0 {
            return Err(Error::Validation("replications must be at least 1".into()));
        }
        let correlation = correlation.unwrap_or_else(|| {
            (0..m)
                .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        });
        if correlation.len() != m {
            return Err(Error::DimensionMismatch {
                what: "correlation matrix".into(),
                expected: m,
                found: correlation.len(),
            });
        }
        if correlation.iter().enumerate().any(|(i, r)| r.get(i).is_some_and(|&d| (d - 1.0).abs() > 1e-12)) {
            return Err(Error::Validation("correlation matrix needs a unit diagonal".into()));
        }
        let chol = psd_cholesky(&correlation)?;
        if let StoppingPolicy::Scripted(s) = &policy {
            if s.iter().flatten().any(|&j| j >= m) {
                return Err(Error::Validation("scripted stop for an unknown hypothesis".into()));
            }
        }
        Ok(ScenarioSpec {
            name: name.into(),
            design,
            theta,
            correlation,
            information: DEFAULT_INFORMATION,
            policy,
            replications,
            seed,
            procedures: vec![Procedure::GsdR, Procedure::GsdS, Procedure::Adjust],
            chol,
        })
    }

    pub fn with_information(mut self, info: f64) -> Result<Self> {
        if !(info.is_finite() && info > 0.0) {
            return Err(Error::Validation(format!("information {info} must be positive")));
        }
        self.information = info;
        Ok(self)
    }

    pub fn with_procedures(mut self, p: Vec<Procedure>) -> Self {
        self.procedures = p;
        self
    }

    pub fn m(&self) -> usize {
        self.theta.len()
    }
}

/// Simulated estimates and standard errors, indexed `[stage][hypothesis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub estimates: Vec<Vec<f64>>,
    pub std_errors: Vec<Vec<f64>>,
}

/// Draws the full data matrix of replication `rep`. Procedures ignore the
/// stages after a hypothesis stops.
pub fn simulate_trial(spec: &ScenarioSpec, rep: u64) -> TrialData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(rep);
    let m = spec.m();
    let t = &spec.design.file().information_fractions;
    let mut s = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut estimates = Vec::with_capacity(t.len());
    let mut std_errors = Vec::with_capacity(t.len());
    let mut prev = 0.0;
    for &tk in t {
        let info = tk * spec.information;
        let d = info - prev;
        prev = info;
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..m {
            let mut e = 0.0;
            for k in 0..=i {
                e += spec.chol[i * m + k] * z[k];
            }
            s[i] += spec.theta[i] * d + d.sqrt() * e;
        }
        estimates.push(s.iter().map(|x| x / info).collect());
        std_errors.push(vec![1.0 / info.sqrt(); m]);
    }
    TrialData { estimates, std_errors }
}

/// Per-stage decisions and bounds of one procedure family along one path.
/// Entries after the end of the trial repeat the final values.
#[derive(Debug, Clone, Default)]
pub struct PathOutcome {
    pub rejected: Vec<Vec<usize>>,
    pub bounds: Vec<Vec<f64>>,
    /// Adjustment as if the trial ended at each stage (sequential family only).
    pub adjust_rejected: Vec<Vec<usize>>,
    pub adjust_bounds: Vec<Vec<f64>>,
    /// `tau_j*`.
    pub final_stages: Vec<usize>,
    pub series: Vec<HypothesisSeries>,
    /// Informative brackets that stopped early.
    pub unconverged: usize,
}

fn stops_for(policy: &StoppingPolicy, k: usize, rejected: &[usize], state: &TrialState) -> Vec<usize> {
    let mut s: Vec<usize> = match policy {
        StoppingPolicy::StopOnReject => rejected.to_vec(),
        StoppingPolicy::NeverStop => Vec::new(),
        StoppingPolicy::Scripted(script) => script.get(k).cloned().unwrap_or_default(),
    };
    s.retain(|&j| state.collecting[j]);
    s.sort_unstable();
    s.dedup();
    s
}

fn run_path(spec: &ScenarioSpec, data: &TrialData, family: Family, cfg: &IterationConfig) -> Result<PathOutcome> {
    let d = &spec.design;
    let graph = d.graph();
    let alpha = d.alpha();
    let m = d.m();
    let big_k = d.num_stages();
    let mut series = (0..m)
        .map(|j| HypothesisSeries::new(d.planned_boundary(j)?, vec![], vec![]))
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrialState::new(m, big_k);
    let mut gstate = graph.initial_state();
    let mut cum: Vec<usize> = Vec::new();
    let mut isci = match family {
        Family::Informative(l) => Some(InformativeGsd::new(graph.clone(), alpha, l, big_k, cfg.clone())?),
        Family::Gsd(_) => None,
    };
    let mut out = PathOutcome::default();
    while !state.is_finished() {
        let k = state.begin_stage()?;
        for j in state.collecting_indices() {
            series[j].push(data.estimates[k][j], data.std_errors[k][j])?;
        }
        let stages = state.last_stage.clone();
        let (rejected, bounds, seq) = match family {
            Family::Gsd(lambda) => {
                let new = run_graph_test_with(
                    &mut gstate,
                    |j, l| series[j].rejects(stages[j], lambda, l),
                    alpha,
                    |e| e[0],
                )?;
                cum.extend(new);
                cum.sort_unstable();
                let b = compatible_bounds(graph, &series, lambda, alpha, &cum, &stages)?;
                (cum.clone(), b.lower, lambda == Lambda::Sequential)
            }
            Family::Informative(lambda) => {
                let b = isci.as_mut().expect("informative driver").analyse(&series, &stages)?;
                if !b.converged {
                    out.unconverged += 1;
                }
                (b.rejected(), b.lower.clone(), lambda == Lambda::Sequential)
            }
        };
        if seq {
            match family {
                Family::Gsd(_) => {
                    let rc = efficient_multiple_adjustment(graph, &rejected, &stages, &series, alpha)?;
                    let b = compatible_bounds_adjustment(graph, &series, alpha, &rejected, &rc, &stages)?;
                    out.adjust_rejected.push(rc);
                    out.adjust_bounds.push(b.lower);
                }
                Family::Informative(_) => {
                    let pr = stage_views(&series, &stages, Lambda::Repeated);
                    let (lc, rc) = isci_efficient_adjustment(graph, &bounds, &pr, cfg.q, alpha)?;
                    out.adjust_rejected.push(rc);
                    out.adjust_bounds.push(lc);
                }
            }
        }
        let stops = stops_for(&spec.policy, k, &rejected, &state);
        out.rejected.push(rejected);
        out.bounds.push(bounds);
        state.apply_stops(&stops)?;
        if matches!(family, Family::Gsd(_)) && gstate.active_indices().is_empty() {
            state.terminate_at(k);
        }
    }
    for v in [&mut out.rejected, &mut out.adjust_rejected] {
        if let Some(last) = v.last().cloned() {
            v.resize(big_k, last);
        }
    }
    for v in [&mut out.bounds, &mut out.adjust_bounds] {
        if let Some(last) = v.last().cloned() {
            v.resize(big_k, last);
        }
    }
    out.final_stages = state.final_stage.iter().map(|t| t.expect("trial finished")).collect();
    out.series = series;
    Ok(out)
}

/// Outcomes of one replication for every requested procedure.
#[derive(Debug, Clone, Default)]
pub struct ReplicationOutcome {
    /// Per procedure: rejection set (ever rejected), per-stage bounds, estimates.
    pub rejected: BTreeMap<Procedure, Vec<usize>>,
    pub bounds: BTreeMap<Procedure, Vec<Vec<f64>>>,
    pub estimates: BTreeMap<Procedure, Vec<f64>>,
    pub unconverged: usize,
}

pub fn run_replication(spec: &ScenarioSpec, rep: u64) -> Result<ReplicationOutcome> {
    let data = simulate_trial(spec, rep);
    run_replication_on(spec, &data)
}

pub fn run_replication_on(spec: &ScenarioSpec, data: &TrialData) -> Result<ReplicationOutcome> {
    let cfg = spec.design.iteration_config();
    let mut paths: BTreeMap<(u8, u8), PathOutcome> = BTreeMap::new();
    let key = |f: Family| match f {
        Family::Gsd(l) => (0u8, l as u8),
        Family::Informative(l) => (1u8, l as u8),
    };
    let mut out = ReplicationOutcome::default();
    for &p in &spec.procedures {
        let f = p.family();
        if !paths.contains_key(&key(f)) {
            let path = run_path(spec, data, f, &cfg)?;
            out.unconverged += path.unconverged;
            paths.insert(key(f), path);
        }
        let path = &paths[&key(f)];
        let ever = |sets: &[Vec<usize>]| {
            let mut u: Vec<usize> = sets.iter().flatten().copied().collect();
            u.sort_unstable();
            u.dedup();
            u
        };
        match p {
            Procedure::Adjust | Procedure::IsciAdjust => {
                let last = path.adjust_rejected.last().cloned().unwrap_or_default();
                out.rejected.insert(p, last);
                out.bounds.insert(p, path.adjust_bounds.clone());
            }
            _ if p.is_estimator() => {
                let (v, l) = p.estimator().expect("estimator");
                let r = median_estimator(v, l, spec.design.graph(), &path.series, &path.final_stages, &cfg)?;
                out.estimates.insert(p, r.estimates);
            }
            _ => {
                out.rejected.insert(p, ever(&path.rejected));
                out.bounds.insert(p, path.bounds.clone());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub scenario: String,
    pub procedure: String,
    pub metric: String,
    pub estimate: f64,
    pub mc_se: f64,
    pub n_reps: u64,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    n: u64,
    /// (procedure, metric) -> hits.
    hits: BTreeMap<(Procedure, String), u64>,
    unconverged: u64,
}

impl Tally {
    fn merge(mut self, o: Tally) -> Tally {
        self.n += o.n;
        self.unconverged += o.unconverged;
        for (k, v) in o.hits {
            *self.hits.entry(k).or_insert(0) += v;
        }
        self
    }
}

fn covered(bounds: &[f64], theta: &[f64]) -> bool {
    bounds.iter().zip(theta).all(|(l, t)| *l < *t)
}

fn tally_one(spec: &ScenarioSpec, o: &ReplicationOutcome) -> Tally {
    let mut t = Tally {
        n: 1,
        unconverged: o.unconverged as u64,
        ..Default::default()
    };
    let mut hit = |p: Procedure, metric: String, h: bool| {
        *t.hits.entry((p, metric)).or_insert(0) += h as u64;
    };
    for (&p, r) in &o.rejected {
        hit(p, "fwer".into(), r.iter().any(|&j| spec.theta[j] <= 0.0));
    }
    for (&p, b) in &o.bounds {
        for (k, bk) in b.iter().enumerate() {
            hit(p, format!("coverage_stage{}", k + 1), covered(bk, &spec.theta));
        }
    }
    for (&p, e) in &o.estimates {
        hit(p, "median".into(), e.iter().zip(&spec.theta).all(|(x, th)| x <= th));
    }
    t
}

/// Runs every replication (in parallel, deterministic for a given seed) and
/// returns one row per procedure and metric.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<Vec<MetricRow>> {
    let tally = (0..spec.replications as u64)
        .into_par_iter()
        .map(|rep| run_replication(spec, rep).map(|o| tally_one(spec, &o)))
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;
    if tally.unconverged > 0 {
        log::info!("{}: {} brackets stopped before reaching their tolerance", spec.name, tally.unconverged);
    }
    let n = tally.n;
    let mut rows: Vec<MetricRow> = tally
        .hits
        .into_iter()
        .map(|((p, metric), h)| {
            let est = h as f64 / n as f64;
            MetricRow {
                scenario: spec.name.clone(),
                procedure: p.name().into(),
                metric,
                estimate: est,
                mc_se: (est * (1.0 - est) / n as f64).sqrt(),
                n_reps: n,
            }
        })
        .collect();
    let order = |r: &MetricRow| spec.procedures.iter().position(|p| p.name() == r.procedure);
    rows.sort_by(|a, b| order(a).cmp(&order(b)).then_with(|| a.metric.cmp(&b.metric)));
    Ok(rows)
}

pub fn write_rows<W: std::io::Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DesignRef {
    Path(String),
    Inline(Box<DesignFile>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFile {
    StopOnReject,
    NeverStop,
    /// 1-based hypothesis numbers to stop after each stage.
    Scripted(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    /// Path relative to the scenario file, or an inline design table.
    pub design: DesignRef,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub information: Option<f64>,
    pub policy: PolicyFile,
    pub replications: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedures: Option<Vec<String>>,
}

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path)?;
    let f: ScenarioFile = parse_document(&text, Format::from_path(path))?;
    let design = match f.design {
        DesignRef::Inline(d) => d.validate()?,
        DesignRef::Path(p) => {
            let base = path.parent().unwrap_or(Path::new("."));
            crate::design::load_design(&base.join(p))?
        }
    };
    let policy = match f.policy {
        PolicyFile::StopOnReject => StoppingPolicy::StopOnReject,
        PolicyFile::NeverStop => StoppingPolicy::NeverStop,
        PolicyFile::Scripted(s) => {
            if s.iter().flatten().any(|&j| j == 0) {
                return Err(Error::Validation("scripted stops use 1-based hypothesis numbers".into()));
            }
            StoppingPolicy::Scripted(s.into_iter().map(|v| v.into_iter().map(|j| j - 1).collect()).collect())
        }
    };
    let mut spec = ScenarioSpec::new(f.name, design, f.theta, f.correlation, policy, f.replications, f.seed)?;
    if let Some(i) = f.information {
        spec = spec.with_information(i)?;
    }
    if let Some(p) = f.procedures {
        spec = spec.with_procedures(p.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?);
    }
    Ok(spec)
}
