use thiserror::Error;

#[derive(Debug, Error)]
pub enum SphKvError {
    #[error("invalid tier table: {0}")]
    InvalidTierTable(String),

    #[error("tier {0} is not calibrated")]
    Uncalibrated(u8),

    #[error("operation is undefined for the drop tier")]
    DropTier,

    #[error("radius scale {scale} is smaller than radius {radius}")]
    ScaleTooSmall { scale: f64, radius: f64 },

    #[error("code {code} does not fit in {bits} bits")]
    CodeOutOfRange { code: u64, bits: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("protected demand of {demand} bits exceeds budget of {budget} bits")]
    InfeasibleProtection { demand: u64, budget: u64 },

    #[error("minimum demand of {demand} bits exceeds budget of {budget} bits")]
    InfeasibleBudget { demand: u64, budget: u64 },

    #[error("missing state for layer {layer}, head {head}, token {token}")]
    MissingState { layer: usize, head: usize, token: usize },

    #[error("unknown head group (layer {layer}, head {head})")]
    UnknownHead { layer: usize, head: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid snapshot: {0}")]
    Snapshot(String),

    #[error("decode step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<SphKvError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SphKvError>;
