use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("observation references unknown view {0}")]
    UnknownView(u32),

    #[error("training state corrupt: gaussian {index} has a non-finite parameter")]
    TrainingStateCorrupt { index: usize },

    #[error("gradient overflow at gaussian {index}")]
    GradientOverflow { index: usize },

    #[error("non-finite optimizer update at gaussian {index}, parameter slot {slot}")]
    NonFiniteUpdate { index: usize, slot: usize },

    #[error("empty scene: {0}")]
    EmptyScene(String),

    #[error("empty depth prior: {0}")]
    EmptyPrior(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty evaluation mask")]
    EmptyEvaluation,
}

impl Error {
    pub(crate) fn shape(what: &str, expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::Shape(alloc::format!(
            "{what}: expected {}x{}, got {}x{}",
            expected.0,
            expected.1,
            got.0,
            got.1
        ))
    }
}
