use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: io error: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed header: {msg}", path.display())]
    Header { path: PathBuf, msg: String },

    #[error("{}: malformed row {row}: {msg}", path.display())]
    MalformedRow { path: PathBuf, row: usize, msg: String },

    #[error("non-positive SE at row {row} (column {column})")]
    NonPositiveSe { row: usize, column: String },

    #[error("non-finite value at row {row} (column {column})")]
    NonFinite { row: usize, column: String },

    #[error("duplicate snp_id '{id}' at row {row}")]
    DuplicateSnp { id: String, row: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("singular normal matrix (smallest singular value {smallest_singular_value:.3e})")]
    SingularNormal { smallest_singular_value: f64 },

    #[error("unidentified directions after projection: {}", format_directions(.directions))]
    Unidentified { directions: Vec<Vec<f64>> },

    #[error("singular LQA system at iteration {iteration}")]
    SingularLqa { iteration: usize },

    #[error("grouped design near-singular (grouped instrument strength {strength:.3e})")]
    GroupedSingular { strength: f64 },

    #[error("no tuning candidate produced a usable fit: {0}")]
    NoUsableCandidate(String),
}

impl Error {
    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Header { .. }
                | Error::MalformedRow { .. }
                | Error::NonPositiveSe { .. }
                | Error::NonFinite { .. }
                | Error::DuplicateSnp { .. }
                | Error::Dimension(_)
                | Error::Invalid(_)
        )
    }
}

fn format_directions(dirs: &[Vec<f64>]) -> String {
    dirs.iter()
        .map(|d| {
            let v: Vec<String> = d.iter().map(|x| format!("{x:.3}")).collect();
            format!("[{}]", v.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}
