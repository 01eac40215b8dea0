//! Built-in experiment configs.

use crate::error::{Error, Result};

use super::config::ExperimentConfig;

const PRESETS: [(&str, &str); 6] = [
    ("exp1", include_str!("../../presets/exp1.toml")),
    ("exp2", include_str!("../../presets/exp2.toml")),
    ("exp3", include_str!("../../presets/exp3.toml")),
    ("exp4", include_str!("../../presets/exp4.toml")),
    ("curves", include_str!("../../presets/curves.toml")),
    ("regimes", include_str!("../../presets/regimes.toml")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// The preset's source text, comments included.
pub fn source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`; known: {}", names().join(", "))))
}

pub fn load(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(source(name)?)
}
