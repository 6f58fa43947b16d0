use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("{what} {value} out of range [0, {bound})")]
    Range {
        what: &'static str,
        value: usize,
        bound: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty task: {0}")]
    EmptyTask(String),

    #[error("label {label} out of range for {num_labels} labels")]
    InvalidLabel { label: usize, num_labels: usize },

    #[error("out-of-order round for client {client}: got {round}, last recorded {last}")]
    Ordering {
        client: usize,
        round: usize,
        last: usize,
    },

    #[error("no task feature recorded for client {client} at round {round}")]
    MissingFeature { client: usize, round: usize },

    #[error("missing uploaded parameters: {0}")]
    MissingParams(String),

    #[error("nothing to evaluate: {0}")]
    EmptyEval(String),

    #[error("forgetting undefined for client {client} at round {round}: {tasks} task(s) seen")]
    UndefinedForgetting {
        client: usize,
        round: usize,
        tasks: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("client {client}, round {round}: {source}")]
    Context {
        client: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, got: usize) -> Self {
        Error::Dimension { expected, got }
    }

    /// Attaches the (client, round) coordinates of the failing step.
    pub fn in_context(self, client: usize, round: usize) -> Self {
        Error::Context {
            client,
            round,
            source: Box::new(self),
        }
    }

    /// Strips any (client, round) context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
