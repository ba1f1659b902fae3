use thiserror::Error;

/// Errors raised by library operations. `code()` gives a stable machine-readable tag.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corrupted Clifford representation: {0}")]
    CorruptRep(String),
    #[error("repeated index {0} in gamma product")]
    RepeatedIndex(usize),
    #[error("metric is not positive definite")]
    NotPositiveDefinite,
    #[error("insufficient jet order: need {needed}, have {available} ({what})")]
    InsufficientOrder { what: String, needed: usize, available: usize },
    #[error("near chiral spectrum: condition number {0:.3e}")]
    NearSpectrum(f64),
    #[error("near Dirichlet spectrum: condition number {0:.3e}")]
    NearDirichletSpectrum(f64),
    #[error("ill-conditioned fit: {0}")]
    IllConditionedFit(String),
    #[error("rank deficient extraction: {0}")]
    RankDeficient(String),
    #[error("conformal gauge ambiguity: {0}")]
    ConformalGaugeAmbiguity(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "E_INVALID_INPUT",
            Error::CorruptRep(_) => "E_CORRUPT_REP",
            Error::RepeatedIndex(_) => "E_REPEATED_INDEX",
            Error::NotPositiveDefinite => "E_NOT_POSITIVE_DEFINITE",
            Error::InsufficientOrder { .. } => "E_INSUFFICIENT_ORDER",
            Error::NearSpectrum(_) => "E_NEAR_SPECTRUM",
            Error::NearDirichletSpectrum(_) => "E_NEAR_DIRICHLET_SPECTRUM",
            Error::IllConditionedFit(_) => "E_ILL_CONDITIONED_FIT",
            Error::RankDeficient(_) => "E_RANK_DEFICIENT",
            Error::ConformalGaugeAmbiguity(_) => "E_CONFORMAL_GAUGE_AMBIGUITY",
            Error::Unsupported(_) => "E_UNSUPPORTED",
            Error::Parse(_) => "E_PARSE",
            Error::Io(_) => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
