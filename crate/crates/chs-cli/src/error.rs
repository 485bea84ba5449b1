//! Error-to-category mapping for the single-line CLI failure format.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub struct CliError {
    category: &'static str,
    message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl fmt::Display) -> Self {
        Self { category, message: message.to_string() }
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self::new("data", message)
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |e| Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // One line, machine-parsable: error[category]: message
        let one_line = self.message.replace('\n', " ");
        write!(f, "error[{}]: {}", self.category, one_line)
    }
}

impl From<chs_core::config::ConfigError> for CliError {
    fn from(e: chs_core::config::ConfigError) -> Self {
        Self::new("config", e)
    }
}

impl From<chs_core::synth::SynthError> for CliError {
    fn from(e: chs_core::synth::SynthError) -> Self {
        Self::new("data", e)
    }
}

impl From<chs_core::density::DensityError> for CliError {
    fn from(e: chs_core::density::DensityError) -> Self {
        Self::new("data", e)
    }
}

impl From<chs_core::noise::NoiseError> for CliError {
    fn from(e: chs_core::noise::NoiseError) -> Self {
        Self::new("data", e)
    }
}

impl From<chs_core::model::ModelError> for CliError {
    fn from(e: chs_core::model::ModelError) -> Self {
        Self::new("model", e)
    }
}

impl From<chs_core::train::TrainError> for CliError {
    fn from(e: chs_core::train::TrainError) -> Self {
        Self::new("train", e)
    }
}

impl From<chs_core::eval::EvalError> for CliError {
    fn from(e: chs_core::eval::EvalError) -> Self {
        Self::new("eval", e)
    }
}

impl From<chs_core::checkpoint::CheckpointError> for CliError {
    fn from(e: chs_core::checkpoint::CheckpointError) -> Self {
        Self::new("checkpoint", e)
    }
}

impl From<chs_core::viz::VizError> for CliError {
    fn from(e: chs_core::viz::VizError) -> Self {
        Self::new("io", e)
    }
}
