use std::path::PathBuf;

/// Failures surfaced by the command-line tool, each with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key {key}: {detail}")]
    Config { key: String, detail: String },
    #[error("{0}")]
    Usage(String),
    #[error("output directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("training diverged at step {step} ({what}); last good checkpoint: {last_good}")]
    Diverged { step: u64, what: String, last_good: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] flowcritic::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) | CliError::Locked(_) | CliError::Core(_) => 1,
            CliError::Diverged { .. } => 2,
            CliError::Io(_) | CliError::Csv(_) => 3,
            CliError::Checkpoint(e) => e.exit_code(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CheckpointError::Crc { .. } => 4,
            CheckpointError::Magic => 5,
            CheckpointError::Version(_) => 6,
            CheckpointError::Malformed(_) => 7,
            CheckpointError::Io(_) => 3,
        }
    }
}
