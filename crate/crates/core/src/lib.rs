//! Graphical group sequential multiple testing with compatible and informative
//! simultaneous confidence bounds.

pub mod analysis;
pub mod boundary;
pub mod compatible;
pub mod design;
pub mod dual;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod informative;
pub mod normal;
pub mod pvalue;
pub mod roots;
pub mod serde_ext;
pub mod sim;
pub mod spending;

pub use error::{Error, Result};
pub use analysis::{MonitorOptions, StageReport, TrialMonitor};
pub use boundary::GsdBoundary;
pub use design::{load_design, DesignFile, StageObservation, ValidatedDesign};
pub use graph::{GraphSpec, ValidatedGraph};
pub use informative::{BoundsBracket, IterationConfig};
pub use pvalue::Lambda;
pub use spending::SpendingFunction;
