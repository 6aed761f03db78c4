use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model quantity was evaluated outside the region where it is defined.
    #[error("domain error in {quantity}: {detail}")]
    Domain { quantity: &'static str, detail: String },

    /// Downstream distance lies inside the near wake (`x < x_c`).
    #[error("near-wake precondition violated: x = {x} m < core length {x_c} m")]
    NearWake { x: f64, x_c: f64 },

    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("turbine {turbine}: {source}")]
    Turbine {
        turbine: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{kind} surrogate max relative error {error:.4} exceeds {limit}")]
    FitQuality { kind: String, error: f64, limit: f64 },

    #[error("no surrogate fitted for pair ({upstream}, {downstream})")]
    MissingSurrogate { upstream: usize, downstream: usize },

    #[error("erf argument `{variable}` has bounds [{lo}, {hi}] outside the PWA domain [{domain_lo}, {domain_hi}]")]
    PwaDomain {
        variable: String,
        lo: f64,
        hi: f64,
        domain_lo: f64,
        domain_hi: f64,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("variable `{0}` missing from solution")]
    MissingVariable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(quantity: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            quantity,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_turbine(self, turbine: usize) -> Self {
        Error::Turbine {
            turbine,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// Whether the fault lies in the caller's input rather than in the
    /// numerics.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::InvalidParameter { .. }
            | Error::Config(_)
            | Error::Dimension(_)
            | Error::MissingSurrogate { .. }
            | Error::PwaDomain { .. }
            | Error::Parse { .. }
            | Error::MissingVariable(_)
            | Error::Io(_) => true,
            Error::Turbine { source, .. } | Error::Step { source, .. } => source.is_user_error(),
            Error::Domain { .. }
            | Error::NearWake { .. }
            | Error::FitQuality { .. }
            | Error::Infeasible(_)
            | Error::Csv(_) => false,
        }
    }
}
