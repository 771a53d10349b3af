use thiserror::Error;

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Core(#[from] desense_core::Error),
    #[error("numeric instability: non-finite values in {0}")]
    NumericInstability(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("class {0} has no training images")]
    EmptyClass(usize),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint payload length mismatch: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("checkpoint tensor {0} holds non-finite values")]
    NonFinitePayload(String),
    #[error("federated round {round} diverged: {source}")]
    Diverged {
        round: usize,
        #[source]
        source: Box<NetError>,
    },
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("empty pair list")]
    NoPairs,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NetError {
    /// True for errors caused by non-finite arithmetic.
    pub fn is_numeric(&self) -> bool {
        match self {
            NetError::NumericInstability(_) | NetError::NonFinitePayload(_) => true,
            NetError::Diverged { .. } => true,
            NetError::Core(desense_core::Error::NonFiniteObjective(_)) => true,
            _ => false,
        }
    }
}
