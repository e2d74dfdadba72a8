//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty seed set")]
    EmptySeed,

    #[error("negative time not allowed: {0}")]
    NegativeTime(f64),

    #[error("delta {delta} exceeds eps {eps}")]
    DeltaExceedsEps { delta: f64, eps: f64 },

    #[error("observation ball not contained in X")]
    BallOutsideObservation,

    #[error("metric not positive")]
    MetricNotPositive,

    #[error("problem size {n} exceeds dense eigensolver cap {cap}")]
    EigenCapExceeded { n: usize, cap: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("evaluation time {t} beyond source horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },

    #[error("source atom `{0}` not supported inside the observation cylinder")]
    AtomOutsideObservation(String),

    #[error("time {t} outside the recorded trace horizon {horizon}")]
    OutsideTraceHorizon { t: f64, horizon: f64 },

    #[error("function not in the span of the recorded basis: {0}")]
    NotInBasis(String),

    #[error("singular normal equations; retry with regularization mu > 0")]
    SingularNormalEquations,

    #[error("no arrival within horizon; increase horizon")]
    NoArrival,

    #[error("probe geodesic exits the observation set")]
    GeodesicExitsObservation,

    #[error("radius {r} is at or beyond the estimated cut time {tau}")]
    BeyondCutTime { r: f64, tau: f64 },

    #[error("differential sample cone not open: {0}")]
    ConeNotOpen(String),

    #[error("control residual {residual:.3e} above ceiling {ceiling:.3e}")]
    ControlResidualTooLarge { residual: f64, ceiling: f64 },

    #[error("quotient sequence not converging: {0:?}")]
    QuotientNotCauchy(Vec<f64>),

    #[error("models are distinguishable; witness probe {probe} has trace defect {defect:.3e}")]
    ModelsDistinguishable { probe: usize, defect: f64 },

    #[error("curved metric not supported by the straight-line geodesic chart")]
    CurvedChart,

    #[error("{0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
