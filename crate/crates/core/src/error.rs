use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Trajectory norm exceeded the configured bound; carries the escape time.
    #[error("trajectory blew up at t = {time:.6}: |x| = {norm:.3e} > bound {bound:.3e}")]
    Blowup { time: f64, norm: f64, bound: f64 },

    #[error("non-finite state component at t = {time:.6}")]
    NonFiniteState { time: f64 },

    #[error("projective grids are built for RP^1 and RP^2 only (got d = {0})")]
    UnsupportedDimension(usize),

    #[error("grid resolution must be at least 4 (got {0})")]
    ResolutionTooSmall(usize),

    #[error(
        "no exponential separation: singular-exponent gap {gap:.4} < threshold {threshold:.4}"
    )]
    NoSeparation { gap: f64, threshold: f64 },

    #[error("degenerate frame: smallest singular value {min_sv:.3e}")]
    FrameDegenerate { min_sv: f64 },

    #[error("empty survivor set from step {step}")]
    EmptySurvivorSet { step: usize },

    #[error("all Monte Carlo samples escaped by step {step}; only an upper bound is available")]
    DegenerateSample { step: usize },

    #[error("subgraph contains no directed cycle")]
    NoCycle,

    #[error("cell {witness} of K is kept by no control and the kept volume is zero")]
    Uncoverable { witness: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("stage `{stage}` failed: {message}")]
    StageFailed { stage: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
