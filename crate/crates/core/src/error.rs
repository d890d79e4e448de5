use thiserror::Error;

/// Errors produced by the simulator and its experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty scale group {group}")]
    EmptyScaleGroup { group: usize },

    #[error("non-positive or non-finite scale {value} at group {group}")]
    InvalidScale { group: usize, value: f64 },

    #[error("group map index {index} out of range for {n_groups} groups")]
    GroupOutOfRange { index: usize, n_groups: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cell bits {cell} do not divide weight bits {bits}")]
    CellBitsMismatch { bits: u32, cell: u32 },

    #[error("code {code} outside the signed {bits}-bit range")]
    CodeOutOfRange { code: i64, bits: u32 },

    #[error("kernel does not fit array rows: {k}x{k} = {needed} > {rows}")]
    KernelTooLarge { k: usize, needed: usize, rows: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { loss: f64, step: u64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("truncated CIFAR-10 record at byte offset {offset} (file size {size})")]
    TruncatedRecord { offset: usize, size: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Validation failures are user errors in the configuration or inputs,
    /// as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::CellBitsMismatch { .. }
                | Error::KernelTooLarge { .. }
                | Error::InvalidScale { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
