//! Crate-wide error type and exit-code classes.

use thiserror::Error;

/// Broad failure class, used by the CLI to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or malformed configuration (exit 1).
    Usage,
    /// Inconsistent or corrupt data (exit 2).
    Data,
    /// Numerical failure: non-finite state, divergence, instability (exit 3).
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum GemError {
    #[error("grid dimensions too small: nlat={nlat}, nlon={nlon} (need nlat >= 4, nlon >= 8, nlon even)")]
    DimensionTooSmall { nlat: usize, nlon: usize },

    #[error("grid-mismatch: {0}")]
    GridMismatch(String),

    #[error("channel count or name mismatch: {0}")]
    ChannelMismatch(String),

    #[error("mask selects no cells")]
    EmptyMask,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("diffusion {diffusion} cells^2/day unstable at dt={dt_days} days (limit {limit})")]
    UnstableDiffusion {
        diffusion: f64,
        dt_days: f64,
        limit: f64,
    },

    #[error("record does not span a full day ({hours} h available)")]
    PartialDay { hours: f64 },

    #[error("dimensions not divisible: {0}")]
    IndivisibleDims(String),

    #[error("neighborhood ({k_h}x{k_w}) exceeds latent grid ({nlat}x{nlon})")]
    NeighborhoodExceedsGrid {
        k_h: usize,
        k_w: usize,
        nlat: usize,
        nlon: usize,
    },

    #[error("ensemble too small: S={s} (need S >= {min})")]
    EnsembleTooSmall { s: usize, min: usize },

    #[error("quantile level tau={0} outside (0, 1)")]
    InvalidTau(f64),

    #[error("reference score {0} is not positive")]
    NonpositiveReference(f64),

    #[error("insufficient climatology candidates: {available} available, {needed} needed")]
    InsufficientCandidates { available: usize, needed: usize },

    #[error("rolling window of {window} days exceeds series length {len}")]
    WindowTooLong { window: usize, len: usize },

    #[error("channel {0:?} not found")]
    MissingChannel(String),

    #[error("degenerate base rate s={0} (need 0 < s < 1)")]
    DegenerateBaseRate(f64),

    #[error("all spectral degrees degenerate (truth power below threshold)")]
    DegenerateSpectra,

    #[error("missing calendar entry for day-of-year {0}")]
    MissingCalendarEntry(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint incompatible with model config: {0}")]
    CfgMismatch(String),

    #[error("sub-daily samples must include both day endpoints ({0})")]
    EndpointMissing(String),

    #[error("non-finite state in member {member} at lead {lead}")]
    NonFiniteState { member: usize, lead: usize },

    #[error("training diverged: loss {loss} above {threshold} for {steps} consecutive steps")]
    Diverged { loss: f64, threshold: f64, steps: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GemError {
    /// Machine-parsable error token used on stderr as `E:<exit>:<token>`.
    pub fn token(&self) -> &'static str {
        match self {
            GemError::DimensionTooSmall { .. } => "dimension-too-small",
            GemError::GridMismatch(_) => "grid-mismatch",
            GemError::ChannelMismatch(_) => "channel-mismatch",
            GemError::EmptyMask => "empty-mask",
            GemError::NonFinite { .. } => "non-finite",
            GemError::BadMagic { .. } => "bad-magic",
            GemError::VersionMismatch { .. } => "version-mismatch",
            GemError::MalformedHeader(_) => "malformed-header",
            GemError::Truncated { .. } => "truncated",
            GemError::UnstableDiffusion { .. } => "unstable-diffusion",
            GemError::PartialDay { .. } => "partial-day",
            GemError::IndivisibleDims(_) => "indivisible-dims",
            GemError::NeighborhoodExceedsGrid { .. } => "neighborhood-exceeds-grid",
            GemError::EnsembleTooSmall { .. } => "ensemble-too-small",
            GemError::InvalidTau(_) => "invalid-tau",
            GemError::NonpositiveReference(_) => "nonpositive-reference",
            GemError::InsufficientCandidates { .. } => "insufficient-candidates",
            GemError::WindowTooLong { .. } => "window-too-long",
            GemError::MissingChannel(_) => "missing-channel",
            GemError::DegenerateBaseRate(_) => "degenerate-base-rate",
            GemError::DegenerateSpectra => "degenerate-spectra",
            GemError::MissingCalendarEntry(_) => "missing-calendar-entry",
            GemError::ShapeMismatch(_) => "shape-mismatch",
            GemError::CfgMismatch(_) => "cfg-mismatch",
            GemError::EndpointMissing(_) => "endpoint-missing",
            GemError::NonFiniteState { .. } => "non-finite-state",
            GemError::Diverged { .. } => "diverged",
            GemError::Config(_) => "config",
            GemError::Io(_) => "io",
            GemError::Json(_) => "json",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            GemError::Config(_) | GemError::InvalidTau(_) => ErrorClass::Usage,
            GemError::NonFinite { .. }
            | GemError::UnstableDiffusion { .. }
            | GemError::NonFiniteState { .. }
            | GemError::Diverged { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, GemError>;
