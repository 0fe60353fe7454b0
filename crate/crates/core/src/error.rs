use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch: {what} (expected {expected}, got {got})")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("too few keypoints: need at least {min}, got {got}")]
    TooFewPoints { min: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The normal matrix is numerically singular. Each entry of `directions` is a
    /// unit vector in parameter space (solution-vector order
    /// `[m1, m2, m3, m4, m5, m6, tx, ty]`) spanning the deficient subspace.
    #[error("rank-deficient system: {} deficient direction(s), condition {condition:.3e}", directions.len())]
    RankDeficient {
        directions: Vec<Vec<f64>>,
        condition: f64,
    },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },

    #[error("{path}:{line}: {field}: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(String),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::Diverged { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Degenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
