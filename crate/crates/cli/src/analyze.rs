//! Batch analysis of a data file, stage by stage.

use clap::{Args, ValueEnum};
use seqgraph::design::{group_by_stage, read_observations};
use seqgraph::estimators::{EstimatorResult, EstimatorVariant};
use seqgraph::serde_ext;
use seqgraph::{load_design, Error, Lambda, MonitorOptions, Result, StageReport, TrialMonitor};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProcedureArg {
    #[value(name = "gsd-r")]
    GsdR,
    #[value(name = "gsd-s")]
    GsdS,
    Adjust,
    #[value(name = "isci-r")]
    IsciR,
    #[value(name = "isci-s")]
    IsciS,
    #[value(name = "isci-adjust")]
    IsciAdjust,
}

impl ProcedureArg {
    fn name(self) -> &'static str {
        match self {
            Self::GsdR => "gsd-r",
            Self::GsdS => "gsd-s",
            Self::Adjust => "adjust",
            Self::IsciR => "isci-r",
            Self::IsciS => "isci-s",
            Self::IsciAdjust => "isci-adjust",
        }
    }

    /// The median-conservative estimator built from the same bounds.
    fn estimator(self) -> (EstimatorVariant, Option<Lambda>) {
        match self {
            Self::GsdR => (EstimatorVariant::A, Some(Lambda::Repeated)),
            Self::GsdS => (EstimatorVariant::A, Some(Lambda::Sequential)),
            Self::Adjust => (EstimatorVariant::B, None),
            Self::IsciR => (EstimatorVariant::C, Some(Lambda::Repeated)),
            Self::IsciS => (EstimatorVariant::C, Some(Lambda::Sequential)),
            Self::IsciAdjust => (EstimatorVariant::D, None),
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Design file (TOML or JSON).
    pub design: PathBuf,
    /// Observations as CSV: hypothesis,stage,estimate,std_error,info_fraction,stopped.
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub procedure: ProcedureArg,
    /// Report the analysis after this stage (default: the last stage with data).
    /// Stages after the end of the trial repeat the final, frozen result.
    #[arg(long)]
    pub stage: Option<usize>,
    /// Also compute the median-conservative estimator.
    #[arg(long)]
    pub estimators: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Serialize)]
pub struct HypothesisRow {
    pub name: String,
    pub data_stage: usize,
    pub collecting: bool,
    pub rejected: bool,
    #[serde(with = "serde_ext::scalar")]
    pub lower: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<serde_ext::ExtReal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<serde_ext::ExtReal>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub procedure: &'static str,
    pub stage: usize,
    /// Last stage actually analysed; smaller than `stage` once the trial has ended.
    pub analysed_stage: usize,
    pub frozen: bool,
    pub hypotheses: Vec<HypothesisRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<serde_ext::ExtReal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<String>,
}

/// Feeds the data through a monitor, applying the stop flags of the file,
/// up to `--stage` or the end of the trial.
pub fn run(args: &AnalyzeArgs) -> Result<Report> {
    let design = load_design(&args.design)?;
    let file = std::fs::File::open(&args.data).map_err(|e| Error::Io(format!("{}: {e}", args.data.display())))?;
    let obs = read_observations(file, &design)?;
    let k_max = design.num_stages();
    let target = args.stage.unwrap_or(k_max);
    if target == 0 || target > k_max {
        return Err(Error::StageOverrun { stage: target, max: k_max });
    }
    let by_stage = group_by_stage(&obs, k_max)?;
    let names = design.names().to_vec();
    let opts = MonitorOptions {
        stop_on_reject: false,
        estimators: args.estimators,
    };
    let mut mon = TrialMonitor::new(design, opts)?;
    let mut ended = false;
    for (k, rows) in by_stage.iter().enumerate() {
        if rows.is_empty() || mon.state().is_finished() {
            ended = true;
        }
        if ended {
            if !rows.is_empty() {
                return Err(Error::Validation(format!(
                    "observations for stage {} follow the end of the trial",
                    k + 1
                )));
            }
            continue;
        }
        if k >= target {
            continue;
        }
        mon.submit_stage(rows, None)?;
        let stops: Vec<usize> = rows.iter().filter(|o| o.stopped).map(|o| o.hypothesis).collect();
        mon.decide(&stops)?;
    }
    let last = mon.reports().last().ok_or_else(|| Error::Validation("no observations for stage 1".into()))?;
    let stage = if args.stage.is_some() { target } else { last.stage };
    Ok(build(args, &names, last, stage))
}

fn build(args: &AnalyzeArgs, names: &[String], r: &StageReport, stage: usize) -> Report {
    let m = names.len();
    let contains = |set: &[usize], j: usize| set.contains(&(j + 1));
    let (rejected, lower, bracket): (Vec<bool>, &[f64], _) = match args.procedure {
        ProcedureArg::GsdR => ((0..m).map(|j| contains(&r.rejected_r, j)).collect(), &r.compatible_r, None),
        ProcedureArg::GsdS => ((0..m).map(|j| contains(&r.rejected_s, j)).collect(), &r.compatible_s, None),
        ProcedureArg::Adjust => ((0..m).map(|j| contains(&r.rejected_c, j)).collect(), &r.compatible_c, None),
        ProcedureArg::IsciR => (
            (0..m).map(|j| r.informative_r.lower[j] >= 0.0).collect(),
            &r.informative_r.lower,
            Some(&r.informative_r),
        ),
        ProcedureArg::IsciS => (
            (0..m).map(|j| r.informative_s.lower[j] >= 0.0).collect(),
            &r.informative_s.lower,
            Some(&r.informative_s),
        ),
        ProcedureArg::IsciAdjust => (
            (0..m).map(|j| contains(&r.informative_rejected_c, j)).collect(),
            &r.informative_c,
            None,
        ),
    };
    let (variant, lambda) = args.procedure.estimator();
    let est: Option<&EstimatorResult> = r
        .estimators
        .iter()
        .find(|e| e.variant == variant && (lambda.is_none() || e.lambda == lambda));
    let hypotheses = (0..m)
        .map(|j| HypothesisRow {
            name: names[j].clone(),
            data_stage: r.data_stages[j],
            collecting: r.collecting[j],
            rejected: rejected[j],
            lower: lower[j],
            upper: bracket.map(|b| serde_ext::ExtReal(b.upper[j])),
            estimate: est.map(|e| serde_ext::ExtReal(e.estimates[j])),
        })
        .collect();
    Report {
        procedure: args.procedure.name(),
        stage,
        analysed_stage: r.stage,
        frozen: stage > r.stage,
        hypotheses,
        gap: bracket.map(|b| serde_ext::ExtReal(b.gap)),
        converged: bracket.map(|b| b.converged).or(est.map(|e| e.converged)),
        estimator: est.map(|e| match e.lambda {
            Some(l) => format!("{}-{}", e.variant, lambda_tag(l)),
            None => e.variant.to_string(),
        }),
    }
}

fn lambda_tag(l: Lambda) -> &'static str {
    match l {
        Lambda::Repeated => "r",
        Lambda::Sequential => "s",
    }
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else if x > 0.0 {
        "inf".into()
    } else if x < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

pub fn render_text(r: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "procedure: {}", r.procedure);
    if r.frozen {
        let _ = writeln!(out, "stage: {} (trial ended at stage {}; results frozen)", r.stage, r.analysed_stage);
    } else {
        let _ = writeln!(out, "stage: {}", r.stage);
    }
    let with_upper = r.hypotheses.iter().any(|h| h.upper.is_some());
    let with_est = r.estimator.is_some();
    let width = r.hypotheses.iter().map(|h| h.name.len()).max().unwrap_or(0).max("hypothesis".len());
    let _ = write!(out, "{:<width$}  {:>10}  {:>8}  {:>12}", "hypothesis", "data_stage", "rejected", "lower");
    if with_upper {
        let _ = write!(out, "  {:>12}", "upper");
    }
    if with_est {
        let _ = write!(out, "  {:>12}", format!("est-{}", r.estimator.as_deref().unwrap_or("")));
    }
    out.push('\n');
    for h in &r.hypotheses {
        let stage = if h.collecting {
            h.data_stage.to_string()
        } else {
            format!("{}*", h.data_stage)
        };
        let _ = write!(
            out,
            "{:<width$}  {:>10}  {:>8}  {:>12}",
            h.name,
            stage,
            if h.rejected { "yes" } else { "no" },
            num(h.lower)
        );
        if let Some(u) = h.upper {
            let _ = write!(out, "  {:>12}", num(u.0));
        }
        if let Some(e) = h.estimate {
            let _ = write!(out, "  {:>12}", num(e.0));
        }
        out.push('\n');
    }
    if let Some(g) = r.gap {
        let gap = if g.0.is_finite() { format!("{:.3e}", g.0) } else { num(g.0) };
        let _ = writeln!(out, "gap: {gap}");
    }
    if r.converged == Some(false) {
        let _ = writeln!(out, "warning: iteration stopped before reaching the tolerance; bounds are conservative");
    }
    if r.hypotheses.iter().any(|h| !h.collecting) {
        let _ = writeln!(out, "* data collection stopped");
    }
    out
}
