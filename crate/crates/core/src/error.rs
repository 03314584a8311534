use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spline space: {0}")]
    InvalidSpace(String),
    #[error("total time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("time {t} outside spline domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("derivative order {order} exceeds spline degree {degree}")]
    OrderTooHigh { order: usize, degree: usize },
    #[error("least-squares fit needs {needed} distinct sample times, got {got}")]
    RankDeficient { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("singular rotation: thrust direction antiparallel to world z")]
    SingularThrust,
    #[error("relative acceleration xi vanishes")]
    ZeroXi,
    #[error("b1 is not a unit vector perpendicular to xi")]
    NotPerpendicular,
    #[error("observer and obstacle positions coincide")]
    CoincidentPoints,
    #[error("spline intervals do not match: {0}")]
    IntervalMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid epsilon {0}, expected 0 <= eps < 1")]
    InvalidEpsilon(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("normalizer has not been fitted")]
    UnfittedNormalizer,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
