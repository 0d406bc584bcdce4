//! Fixtures shared by the benchmarks.

use seqgraph::design::Format;
use seqgraph::{DesignFile, GsdBoundary, StageObservation, ValidatedDesign};

pub fn hier4(k: usize) -> ValidatedDesign {
    let fr: Vec<String> = (1..=k).map(|i| format!("{:?}", i as f64 / k as f64)).collect();
    let t = format!(
        r#"
alpha = 0.025
hypotheses = ["H1", "H2", "H3", "H4"]
initial_weights = [1.0, 0.0, 0.0, 0.0]
transition = [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]]
exhaustion_weights = [0.0, 0.0, 0.0, 1.0]
stages = {k}
information_fractions = [{}]
q = 0.5
spending = [{{ kind = "pocock_like" }}, {{ kind = "pocock_like" }}, {{ kind = "pocock_like" }}, {{ kind = "pocock_like" }}]
"#,
        fr.join(", ")
    );
    DesignFile::parse(&t, Format::Toml)
        .and_then(DesignFile::validate)
        .expect("fixture design is valid")
}

/// Stage `k` (0-based) of the two-stage worked example, with data chosen so the
/// repeated p-values are `p`.
pub fn example_stage(b: &GsdBoundary, k: usize, p: [f64; 4]) -> Vec<StageObservation> {
    let se = 0.2;
    (0..4)
        .map(|j| StageObservation {
            hypothesis: j,
            stage: k,
            estimate: b.z_boundaries(p[j]).expect("level in range")[k] * se,
            std_error: se,
            info_fraction: b.fractions()[k],
            stopped: false,
        })
        .collect()
}

pub const EXAMPLE_P: [[f64; 4]; 2] = [[0.02, 0.04, 0.02, 0.02], [0.03, 0.02, 0.03, 0.01]];
