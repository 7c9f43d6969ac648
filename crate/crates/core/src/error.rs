use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("division error: zero divisor at flat index {index}")]
    DivisionByZero { index: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("region error: {0}")]
    Region(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    /// `alpha == 0` leaves the merge denominator at zero wherever no mask is set.
    #[error(
        "merge-config error: alpha is 0 but pixel (x={x}, y={y}) is not covered by any object mask"
    )]
    UncoveredPixel { x: usize, y: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("numeric failure: non-finite value produced at step t={step}")]
    NumericFailure { step: usize },

    #[error("scene error at {path}: {message}")]
    Scene { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn scene(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Scene {
            path: path.into(),
            message: msg.into(),
        }
    }

    /// True for errors caused by the request itself rather than by the run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NumericFailure { .. } | Error::Io(_))
    }
}
