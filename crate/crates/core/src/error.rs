use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("point {0} is at or behind the camera plane")]
    BehindCamera(usize),
    #[error("keypoint {0} coincides with the camera center")]
    DegenerateRay(usize),
    #[error("dataset of {items} items is too small for k = {k}")]
    DatasetTooSmall { items: usize, k: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("need at least {needed} annotations, got {got}")]
    InsufficientAnnotations { needed: usize, got: usize },
    #[error("no start converged (best mean residual {residual:.3} px)")]
    NoConvergence { residual: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("mesh has zero surface area")]
    ZeroArea,
    #[error("point configuration is rank deficient")]
    RankDeficient,
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("no triangle projects in front of the camera")]
    EmptyProjection,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
