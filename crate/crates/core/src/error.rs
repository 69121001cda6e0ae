use thiserror::Error;

pub type Result<T> = std::result::Result<T, OtterError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtterError {
    #[error("row {0} has zero norm")]
    ZeroRowNorm(usize),
    #[error("row {0} is not unit length")]
    NotNormalized(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("target needs at least two samples, got {0}")]
    DegenerateRow(usize),
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("unknown method `{0}`")]
    MethodUnknown(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<OtterError>,
    },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("format error at {location}: {message}")]
    FormatError { location: String, message: String },
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("k = {k} exceeds the number of classes ({classes})")]
    KTooLarge { k: usize, classes: usize },
    #[error("empty label set for image {0}")]
    EmptyLabelSet(usize),
    #[error("no sample pair shares at least {0} attributes")]
    NoEligiblePairs(usize),
    #[error("query {0} has an empty attribute set")]
    EmptyQuery(usize),
    #[error("io error: {0}")]
    Io(String),
    #[error("replayed artifacts differ from the recorded run: {0}")]
    ReplayMismatch(String),
}

impl From<std::io::Error> for OtterError {
    fn from(e: std::io::Error) -> Self {
        OtterError::Io(e.to_string())
    }
}

impl OtterError {
    pub(crate) fn at_step(self, step: usize) -> Self {
        OtterError::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
