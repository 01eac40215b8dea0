//! Experiment orchestration: configs, presets, scheduling and output.
//!
//! A config is a TOML file. Its canonical re-serialization, with every
//! default filled in, is hashed and embedded in the output metadata so any
//! row can be re-run from the metadata alone.

pub mod config;
pub mod output;
pub mod presets;
pub mod run;

pub use config::{diagnose, ConfigPoint, ExperimentConfig, Mode, Protocol, TaskKind, ValidationReport};
pub use output::{read_curve_csv, read_metadata, write_output, Metadata, OutputRow, RunOutput, RunTable};
pub use run::{compare_rows, reproduce_row, run, Comparison, RunOptions};
