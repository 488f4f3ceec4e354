use thiserror::Error;

/// Errors raised by the sampler, the diagnostics and the CLI plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate ensemble: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("particle {index} diverged (non-finite position)")]
    Diverged { index: usize },

    #[error("state diverged at time {time}")]
    DivergedAt { time: f64 },

    #[error("step too large: |det(I + eps J)| = {det:e} at particle {index}")]
    StepTooLarge { index: usize, det: f64 },

    #[error("density tracking is not enabled on this ensemble")]
    NotTracking,

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}", format_config_errors(.0))]
    ConfigErrors(Vec<Error>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_config_errors(errors: &[Error]) -> String {
    let lines: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
    lines.join("\n")
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
