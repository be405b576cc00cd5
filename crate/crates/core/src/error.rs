use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model: parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("model: invalid `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("regression: {message} (regime {regime}, step {step})")]
    Regression { regime: String, step: usize, message: String },

    #[error("riccati: blow-up |P| = {value:e} in regime {regime}, node {node}, t = {t}")]
    RiccatiBlowUp { regime: String, node: usize, t: f64, value: f64 },

    #[error("simulate: {0}")]
    Simulation(String),

    #[error("control: policy does not cover regime {0}")]
    UncoveredRegime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(key: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Validation { key: key.into(), message: message.into() }
    }

    /// True for errors caused by the configuration rather than by a solver.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Validation { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
