//! Library side of the `evifuse` command line: run configuration, the
//! `phantom` / `train` / `eval` / `report` subcommands and the evaluation
//! loop they share.

pub mod config;
pub mod report;
pub mod run;

pub use config::{RunConfig, RunMeta};
pub use report::{cmd_report, ReportOutcome};
pub use run::{cmd_eval, cmd_phantom, cmd_train, evaluate, select, Evaluation, Subset, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    /// 2 config, 3 IO (including unreadable or malformed input files),
    /// 4 runtime or compute.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<evifuse::Error> for CliError {
    fn from(e: evifuse::Error) -> Self {
        use evifuse::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Io(_) | E::Parse(_) | E::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub(crate) fn create_dir(path: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
