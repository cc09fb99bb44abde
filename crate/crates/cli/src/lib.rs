//! Configuration, experiment orchestration and result output for `pstokes`.

pub mod cli;
pub mod config;
pub mod harness;
pub mod io;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] pstokes::Error),
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// 2 for solver breakdowns, 1 for everything the user can fix.
    pub fn exit_code(&self) -> i32 {
        use pstokes::Error as E;
        match self {
            Self::Core(
                E::NonConvergence { .. }
                | E::NotPositiveDefinite { .. }
                | E::DegenerateElement { .. }
                | E::Causality { .. },
            ) => 2,
            _ => 1,
        }
    }
}
