use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A vector whose norm is too small to normalize. Upstream this usually
    /// means the representation has collapsed.
    #[error("degenerate vector (norm {norm:e}) in {context}")]
    DegenerateVector { context: &'static str, norm: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no class has at least two samples; cannot build positive pairs")]
    EmptyPairing,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown predicate label(s): {}", format_offenders(.offenders))]
    UnknownLabels { offenders: Vec<(usize, String)> },

    #[error("invalid label table: {0}")]
    LabelTable(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("representation collapsed during {stage}: {source}")]
    Collapse {
        stage: String,
        /// Loss/diagnostics CSV of the epochs completed before the abort.
        history_csv: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_offenders(offenders: &[(usize, String)]) -> String {
    offenders
        .iter()
        .map(|(line, name)| format!("line {line}: {name:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True when the error signals a degenerate (collapsed) representation.
    pub fn is_collapse(&self) -> bool {
        matches!(
            self,
            Error::DegenerateVector { .. } | Error::Collapse { .. }
        )
    }
}
