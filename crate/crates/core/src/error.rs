use thiserror::Error;

/// Every failure mode of the laboratory, one variant per distinct condition.
#[derive(Debug, Error)]
pub enum HypoError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("degenerate weight: stationary state {value:e} below floor at cell ({x_cell}, {v_cell}) where the field is nonzero")]
    DegenerateWeight { x_cell: usize, v_cell: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("CFL violation: dt = {dt:e} exceeds limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("no convergence in {method} after {iterations} iterations (residual {residual:e})")]
    NoConvergence { method: &'static str, iterations: usize, residual: f64 },
    #[error("stationary eigenvector is not sign-definite (most negative relative entry {0:e})")]
    NegativeState(f64),
    #[error("degenerate stationary state: c_inf = {0:e}")]
    DegenerateState(f64),
    #[error("spectral failure: {0}")]
    SpectralFailure(String),
    #[error("singular moment matrix at x-cell {x_cell} (condition number {condition:e})")]
    SingularMoment { x_cell: usize, condition: f64 },
    #[error("trajectory dissipation integral vanishes; bound ratios undefined")]
    ZeroDissipation,
    #[error("certificate vacuous: measured ratio {measured:e} exceeds assembled constant {constant:e}")]
    CertificateVacuous { measured: f64, constant: f64 },
    #[error("compatibility violation: source integrates to {0:e}")]
    CompatibilityViolation(f64),
    #[error("patch {0} is too small for a local divergence solve")]
    PatchSingular(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("bisection failed at step {0}")]
    BisectionFailure(usize),
    #[error("matrix too large for dense assembly: {0} states")]
    TooLarge(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HypoError {
    /// Stable machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            HypoError::InvalidGrid(_) => "InvalidGrid",
            HypoError::InvalidModel(_) => "InvalidModel",
            HypoError::DegenerateWeight { .. } => "DegenerateWeight",
            HypoError::DimensionMismatch(_) => "DimensionMismatch",
            HypoError::CflViolation { .. } => "CflViolation",
            HypoError::NoConvergence { .. } => "NoConvergence",
            HypoError::NegativeState(_) => "NegativeState",
            HypoError::DegenerateState(_) => "DegenerateState",
            HypoError::SpectralFailure(_) => "SpectralFailure",
            HypoError::SingularMoment { .. } => "SingularMoment",
            HypoError::ZeroDissipation => "ZeroDissipation",
            HypoError::CertificateVacuous { .. } => "CertificateVacuous",
            HypoError::CompatibilityViolation(_) => "CompatibilityViolation",
            HypoError::PatchSingular(_) => "PatchSingular",
            HypoError::InsufficientData(_) => "InsufficientData",
            HypoError::BisectionFailure(_) => "BisectionFailure",
            HypoError::TooLarge(_) => "TooLarge",
            HypoError::Format(_) => "Format",
            HypoError::Config(_) => "Config",
            HypoError::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, HypoError>;
