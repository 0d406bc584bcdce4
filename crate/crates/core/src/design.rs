//! Design documents, stage observation files and shared boundary objects.

use crate::boundary::GsdBoundary;
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, ValidatedGraph};
use crate::informative::{default_delta0, IterationConfig};
use crate::spending::SpendingFunction;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignFile {
    pub alpha: f64,
    pub hypotheses: Vec<String>,
    pub initial_weights: Vec<f64>,
    /// Row-major, `transition[i][j]` is the weight of the arrow from `i` to `j`.
    pub transition: Vec<Vec<f64>>,
    pub exhaustion_weights: Vec<f64>,
    pub stages: usize,
    /// One spending function per hypothesis.
    pub spending: Vec<SpendingFunction>,
    /// Planned information fractions, shared by all hypotheses.
    pub information_fractions: Vec<f64>,
    pub q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn key_position(text: &str, key: &str) -> (Option<usize>, Option<usize>) {
    for (i, l) in text.lines().enumerate() {
        let t = l.trim_start();
        let t = t.strip_prefix('"').unwrap_or(t);
        if let Some(rest) = t.strip_prefix(key) {
            let rest = rest.trim_start_matches('"').trim_start();
            if rest.starts_with('=') || rest.starts_with(':') {
                return (Some(i + 1), Some(l.len() - l.trim_start().len() + 1));
            }
        }
    }
    (None, None)
}

/// Parses a document of the given format into `T`, mapping syntax errors to
/// [`Error::Parse`] with a 1-based position.
pub fn parse_document<T: for<'de> Deserialize<'de>>(text: &str, format: Format) -> Result<T> {
    match format {
        Format::Toml => toml::from_str(text).map_err(|e| {
            let (line, column) = match e.span() {
                Some(s) => {
                    let (l, c) = line_col(text, s.start);
                    (Some(l), Some(c))
                }
                None => (None, None),
            };
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        }),
        Format::Json => serde_json::from_str(text).map_err(|e| Error::Parse {
            line: Some(e.line()),
            column: Some(e.column()),
            message: e.to_string(),
        }),
    }
}

impl DesignFile {
    pub fn parse(text: &str, format: Format) -> Result<DesignFile> {
        let f: DesignFile = parse_document(text, format)?;
        f.check_shape(text)?;
        Ok(f)
    }

    /// Matrix shape problems are reported as parse errors at the `transition` key.
    fn check_shape(&self, text: &str) -> Result<()> {
        let m = self.hypotheses.len();
        let bad = if self.transition.len() != m {
            Some(format!("transition has {} rows, expected {m}", self.transition.len()))
        } else {
            self.transition
                .iter()
                .position(|r| r.len() != m)
                .map(|i| format!("transition row {} has {} entries, expected {m}", i + 1, self.transition[i].len()))
        };
        match bad {
            Some(message) => {
                let (line, column) = key_position(text, "transition");
                Err(Error::Parse { line, column, message })
            }
            None => Ok(()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn validate(self) -> Result<ValidatedDesign> {
        ValidatedDesign::new(self)
    }
}

pub fn load_design(path: &Path) -> Result<ValidatedDesign> {
    let text = std::fs::read_to_string(path)?;
    DesignFile::parse(&text, Format::from_path(path))?.validate()
}

/// Boundary objects shared between hypotheses and analyses, keyed by
/// spending function and information schedule.
#[derive(Debug, Default)]
pub struct BoundaryRegistry {
    map: Mutex<HashMap<(String, Vec<u64>), Arc<GsdBoundary>>>,
}

impl BoundaryRegistry {
    pub fn get(&self, spending: SpendingFunction, fractions: &[f64]) -> Result<Arc<GsdBoundary>> {
        let key = (
            format!("{spending:?}"),
            fractions.iter().map(|t| t.to_bits()).collect::<Vec<_>>(),
        );
        if let Some(b) = self.map.lock().get(&key) {
            return Ok(b.clone());
        }
        let b = Arc::new(GsdBoundary::new(spending, fractions.to_vec())?);
        Ok(self.map.lock().entry(key).or_insert(b).clone())
    }
}

#[derive(Debug, Clone)]
pub struct ValidatedDesign {
    file: DesignFile,
    graph: ValidatedGraph,
    registry: Arc<BoundaryRegistry>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl ValidatedDesign {
    pub fn new(file: DesignFile) -> Result<Self> {
        let m = file.hypotheses.len();
        if m == 0 {
            return Err(invalid("at least one hypothesis is required"));
        }
        for (i, n) in file.hypotheses.iter().enumerate() {
            if n.trim().is_empty() || file.hypotheses[..i].contains(n) {
                return Err(invalid(format!("hypothesis names must be unique and non-empty (`{n}`)")));
            }
        }
        if !(file.alpha > 0.0 && file.alpha < 1.0) {
            return Err(invalid(format!("alpha={} must lie in (0,1)", file.alpha)));
        }
        if file.initial_weights.len() != m || file.exhaustion_weights.len() != m || file.spending.len() != m {
            return Err(invalid(format!(
                "initial_weights, exhaustion_weights and spending need one entry per hypothesis ({m})"
            )));
        }
        if file.stages == 0 || file.information_fractions.len() != file.stages {
            return Err(invalid(format!(
                "information_fractions has {} entries for {} stages",
                file.information_fractions.len(),
                file.stages
            )));
        }
        if (file.information_fractions[file.stages - 1] - 1.0).abs() > 1e-12 {
            return Err(invalid("the last planned information fraction must be 1"));
        }
        let graph = ValidatedGraph::new(&GraphSpec {
            initial_weights: file.initial_weights.clone(),
            transition: file.transition.clone(),
            exhaustion_weights: file.exhaustion_weights.clone(),
        })?;
        let registry = Arc::new(BoundaryRegistry::default());
        for s in &file.spending {
            registry.get(*s, &file.information_fractions)?;
        }
        let d = ValidatedDesign { file, graph, registry };
        d.iteration_config().validate_for(d.alpha())?;
        Ok(d)
    }

    pub fn file(&self) -> &DesignFile {
        &self.file
    }

    pub fn graph(&self) -> &ValidatedGraph {
        &self.graph
    }

    pub fn alpha(&self) -> f64 {
        self.file.alpha
    }

    pub fn m(&self) -> usize {
        self.file.hypotheses.len()
    }

    pub fn num_stages(&self) -> usize {
        self.file.stages
    }

    pub fn names(&self) -> &[String] {
        &self.file.hypotheses
    }

    pub fn iteration_config(&self) -> IterationConfig {
        let mut c = IterationConfig::new(self.file.q, self.file.alpha);
        if let Some(e) = self.file.epsilon {
            c.epsilon = e;
        }
        c.delta0 = self.file.delta0.unwrap_or_else(|| default_delta0(self.file.alpha));
        if let Some(n) = self.file.max_iters {
            c.max_iters = n;
        }
        c
    }

    /// Looks a hypothesis up by name or by 1-based number.
    pub fn hypothesis_index(&self, key: &str) -> Option<usize> {
        let key = key.trim();
        if let Some(i) = self.file.hypotheses.iter().position(|n| n == key) {
            return Some(i);
        }
        key.parse::<usize>().ok().filter(|&i| i >= 1 && i <= self.m()).map(|i| i - 1)
    }

    /// Boundary of hypothesis `j` given the fractions realised so far. Later
    /// stages keep the planned fractions that exceed the last realised one.
    pub fn boundary_for(&self, j: usize, realized: &[f64]) -> Result<Arc<GsdBoundary>> {
        let planned = &self.file.information_fractions;
        let mut f = realized.to_vec();
        let last = f.last().copied().unwrap_or(0.0);
        f.extend(planned[realized.len().min(planned.len())..].iter().filter(|&&t| t > last));
        self.registry.get(self.file.spending[j], &f)
    }

    pub fn planned_boundary(&self, j: usize) -> Result<Arc<GsdBoundary>> {
        self.registry.get(self.file.spending[j], &self.file.information_fractions)
    }
}

impl PartialEq for ValidatedDesign {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
    }
}

/// One row of a stage data file. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageObservation {
    pub hypothesis: usize,
    pub stage: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub info_fraction: f64,
    /// Data collection for the hypothesis ends after this stage.
    #[serde(default)]
    pub stopped: bool,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    hypothesis: String,
    stage: usize,
    estimate: f64,
    std_error: f64,
    info_fraction: f64,
    stopped: String,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" | "" => Some(false),
        _ => None,
    }
}

/// Reads `hypothesis,stage,estimate,std_error,info_fraction,stopped` rows;
/// stages are 1-based in the file.
pub fn read_observations<R: std::io::Read>(reader: R, design: &ValidatedDesign) -> Result<Vec<StageObservation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let want = ["hypothesis", "stage", "estimate", "std_error", "info_fraction", "stopped"];
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse {
            line: Some(1),
            column: None,
            message: format!("expected header `{}`", want.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<CsvRow>() {
        let row = rec.map_err(csv_error)?;
        let j = design
            .hypothesis_index(&row.hypothesis)
            .ok_or_else(|| invalid(format!("unknown hypothesis `{}`", row.hypothesis)))?;
        if row.stage == 0 || row.stage > design.num_stages() {
            return Err(invalid(format!("stage {} outside 1..={}", row.stage, design.num_stages())));
        }
        let stopped = parse_bool(&row.stopped).ok_or_else(|| invalid(format!("bad boolean `{}`", row.stopped)))?;
        out.push(StageObservation {
            hypothesis: j,
            stage: row.stage - 1,
            estimate: row.estimate,
            std_error: row.std_error,
            info_fraction: row.info_fraction,
            stopped,
        });
    }
    if out.is_empty() {
        return Err(invalid("no observations"));
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    Error::Parse {
        line,
        column: None,
        message: e.to_string(),
    }
}

pub fn write_observations<W: std::io::Write>(w: W, design: &ValidatedDesign, obs: &[StageObservation]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    wr.write_record(["hypothesis", "stage", "estimate", "std_error", "info_fraction", "stopped"])
        .map_err(io)?;
    for o in obs {
        wr.write_record([
            design.names()[o.hypothesis].clone(),
            (o.stage + 1).to_string(),
            o.estimate.to_string(),
            o.std_error.to_string(),
            o.info_fraction.to_string(),
            o.stopped.to_string(),
        ])
        .map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

/// Groups observations by stage, checking for duplicates.
pub fn group_by_stage(obs: &[StageObservation], num_stages: usize) -> Result<Vec<Vec<StageObservation>>> {
    let mut out = vec![Vec::new(); num_stages];
    for o in obs {
        let g: &mut Vec<StageObservation> = &mut out[o.stage];
        if g.iter().any(|x| x.hypothesis == o.hypothesis) {
            return Err(invalid(format!(
                "duplicate observation for hypothesis {} at stage {}",
                o.hypothesis + 1,
                o.stage + 1
            )));
        }
        g.push(o.clone());
    }
    for g in &mut out {
        g.sort_by_key(|o| o.hypothesis);
    }
    Ok(out)
}
