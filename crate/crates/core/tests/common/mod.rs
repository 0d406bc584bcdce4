#![allow(dead_code)]

use seqgraph::boundary::GsdBoundary;
use seqgraph::design::{DesignFile, Format, ValidatedDesign};
use seqgraph::graph::{GraphSpec, ValidatedGraph};
use seqgraph::pvalue::HypothesisSeries;
use seqgraph::spending::SpendingFunction;
use std::sync::{Arc, OnceLock};

/// Normalises non-negative raw numbers to sum to `total`.
pub fn normalise(raw: &[f64], total: f64) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    if s <= 0.0 {
        let mut v = vec![0.0; raw.len()];
        v[0] = total;
        return v;
    }
    raw.iter().map(|x| x / s * total).collect()
}

/// Builds a graph from raw draws: `w` (m), `g` (m*m), `row_scale` (m) in [0,1],
/// `e` (m). Rows are scaled to sum to `row_scale`, diagonal forced to 0.
pub fn graph_from_raw(w: &[f64], g: &[f64], row_scale: &[f64], e: &[f64]) -> ValidatedGraph {
    let m = w.len();
    let mut transition = Vec::with_capacity(m);
    for i in 0..m {
        let mut row: Vec<f64> = (0..m).map(|j| if i == j { 0.0 } else { g[i * m + j] }).collect();
        if m > 1 {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x = *x / s * row_scale[i]);
            }
        }
        transition.push(row);
    }
    ValidatedGraph::new(&GraphSpec {
        initial_weights: normalise(w, 1.0),
        transition,
        exhaustion_weights: normalise(e, 1.0),
    })
    .expect("constructed graph is valid")
}

pub fn pocock3() -> Arc<GsdBoundary> {
    static B: OnceLock<Arc<GsdBoundary>> = OnceLock::new();
    B.get_or_init(|| Arc::new(GsdBoundary::new(SpendingFunction::PocockLike, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap()))
        .clone()
}

pub fn power2() -> Arc<GsdBoundary> {
    static B: OnceLock<Arc<GsdBoundary>> = OnceLock::new();
    B.get_or_init(|| Arc::new(GsdBoundary::new(SpendingFunction::Power { rho: 3.0 }, vec![0.4, 1.0]).unwrap()))
        .clone()
}

pub fn obf2() -> Arc<GsdBoundary> {
    static B: OnceLock<Arc<GsdBoundary>> = OnceLock::new();
    B.get_or_init(|| Arc::new(GsdBoundary::new(SpendingFunction::ObfLike, vec![0.5, 1.0]).unwrap()))
        .clone()
}

/// One of the shared boundaries by index.
pub fn boundary(i: usize) -> Arc<GsdBoundary> {
    match i % 3 {
        0 => pocock3(),
        1 => power2(),
        _ => obf2(),
    }
}

/// A series with `n` stages of z-statistics `z`, information 100 at the end.
pub fn series_from_z(b: Arc<GsdBoundary>, z: &[f64]) -> HypothesisSeries {
    let t = b.fractions().to_vec();
    let est: Vec<f64> = z.iter().zip(&t).map(|(z, t)| z / (100.0 * t).sqrt()).collect();
    let se: Vec<f64> = t.iter().take(z.len()).map(|t| 1.0 / (100.0 * t).sqrt()).collect();
    HypothesisSeries::new(b, est, se).unwrap()
}

pub fn design_toml(graph_lines: &str, k: usize, spending: &str, m: usize, q: f64) -> String {
    let fr: Vec<String> = (1..=k).map(|i| format!("{:?}", i as f64 / k as f64)).collect();
    let names: Vec<String> = (1..=m).map(|i| format!("\"H{i}\"")).collect();
    let sp = vec![spending; m].join(", ");
    format!(
        "alpha = 0.025\nhypotheses = [{}]\n{graph_lines}\nstages = {k}\ninformation_fractions = [{}]\nq = {q:?}\nspending = [{sp}]\n",
        names.join(", "),
        fr.join(", ")
    )
}

pub const HIER4_GRAPH: &str = "initial_weights = [1.0, 0.0, 0.0, 0.0]
transition = [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]]
exhaustion_weights = [0.0, 0.0, 0.0, 1.0]";

pub const GENERAL3_GRAPH: &str = "initial_weights = [0.5, 0.3, 0.2]
transition = [[0.0, 0.6, 0.4], [0.5, 0.0, 0.5], [0.7, 0.3, 0.0]]
exhaustion_weights = [0.5, 0.3, 0.2]";

pub fn hier4(k: usize, q: f64) -> ValidatedDesign {
    let t = design_toml(HIER4_GRAPH, k, "{ kind = \"pocock_like\" }", 4, q);
    DesignFile::parse(&t, Format::Toml).unwrap().validate().unwrap()
}

pub fn general3(k: usize, q: f64) -> ValidatedDesign {
    let t = design_toml(GENERAL3_GRAPH, k, "{ kind = \"power\", rho = 3.0 }", 3, q);
    DesignFile::parse(&t, Format::Toml).unwrap().validate().unwrap()
}
