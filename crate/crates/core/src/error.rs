use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model function was evaluated outside its admissible range.
    #[error("domain error: {what} = {value:e}")]
    Domain { what: &'static str, value: f64 },

    /// The state left the admissible set during an unlimited run.
    #[error("negative density at node {node} (J*phi = {value:e}) after step {step}")]
    NegativeDensity { node: usize, value: f64, step: usize },

    #[error("time step {d_tau:e} exceeds the certified bound {bound:e}")]
    StepTooLarge { d_tau: f64, bound: f64 },

    #[error("time step collapsed to {d_tau:e} at t = {tau}")]
    Stalled { tau: f64, d_tau: f64 },

    #[error("degenerate stencil around node {node}: positions coincide")]
    DegenerateStencil { node: usize },

    #[error("limiter failure at node {node}: {reason}")]
    LimiterFailure { node: usize, reason: String },

    #[error("invalid initial data at node {node}: {reason}")]
    InvalidInitialData { node: usize, reason: String },

    #[error("empty grid")]
    EmptyGrid,

    #[error("need at least {needed} interior nodes near the road end, found {found}")]
    InsufficientNodes { needed: usize, found: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("road {road}: {source}")]
    Road {
        road: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64) -> Self {
        Error::Domain { what, value }
    }

    /// True for errors caused by the density leaving `(0, 1)` or becoming negative.
    pub fn is_negative_density(&self) -> bool {
        match self {
            Error::NegativeDensity { .. } => true,
            Error::Domain { what, value } => what.contains("phi") && *value <= 0.0,
            Error::Road { source, .. } => source.is_negative_density(),
            _ => false,
        }
    }
}
