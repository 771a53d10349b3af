use crate::netpbm::NetpbmError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("size mismatch: expected {expected_w}x{expected_h}, got {actual_w}x{actual_h}")]
    SizeMismatch {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("mask ratio {0} lies outside the level bands (0.01, 0.6]")]
    OutOfBand(f64),
    #[error("no mask in band [{lo}, {hi}] after {attempts} attempts")]
    BandUnreachable { lo: f64, hi: f64, attempts: usize },
    #[error("non-finite objective for candidate {0}")]
    NonFiniteObjective(usize),
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn size(expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::SizeMismatch {
            expected_w: expected.0,
            expected_h: expected.1,
            actual_w: actual.0,
            actual_h: actual.1,
        }
    }
}
