use thiserror::Error;

pub type Result<T, E = SlimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SlimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Model evaluation failed, e.g. the implicit-utility denominator vanished.
    #[error("model evaluation error: {0}")]
    Model(String),

    #[error("data generation error: {0}")]
    Generation(String),

    /// The iterate left the admissible region at step `t`.
    #[error("iteration diverged at t = {t}: theta = {theta:?}")]
    Divergence { t: usize, theta: Vec<f64> },

    #[error("learning-rate tuning error: {0}")]
    Tuning(String),

    #[error("refinement error: {0}")]
    Refinement(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("model is not overidentified (d = {d}, d_g = {d_g})")]
    NotOveridentified { d: usize, d_g: usize },

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl SlimError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SlimError::Config(msg.into())
    }

    pub(crate) fn dimension(what: &'static str, expected: usize, got: usize) -> Self {
        SlimError::Dimension {
            what,
            expected,
            got,
        }
    }
}
