use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    // geometry / mesh
    #[error("inclusion touches or comes within one element of the cell boundary")]
    InclusionTouchesBoundary,
    #[error("resolution too coarse: {0}")]
    ResolutionTooCoarse(String),
    #[error("1/eps = {0} does not tile the domain with whole cells")]
    NonTilingEpsilon(f64),
    #[error("point ({0}, {1}) lies outside the meshed domain")]
    PointOutsideDomain(f64, f64),
    #[error("mesh format error at line {line}: {msg}")]
    MeshFormat { line: usize, msg: String },

    // assembly
    #[error("unsupported element order: {0}")]
    UnsupportedOrder(String),
    #[error("no tensor supplied for phase {0}")]
    PhaseFieldMissing(String),
    #[error("periodic constraint requested but the mesh has no periodic pairs")]
    MissingPeriodicPairs,
    #[error("dirichlet constraint requested but the mesh has no boundary nodes")]
    EmptyBoundary,
    #[error("non-finite sample at node {0}")]
    NonFiniteSample(usize),

    // solvers
    #[error("right-hand side is not consistent with the kernel (defect {0:e})")]
    NotConsistent(f64),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("MINRES stagnated at residual {0:e}")]
    Stagnation(f64),
    #[error("constraint block is rank deficient beyond the constant pressure mode")]
    RankDeficientB,
    #[error("inner solve failed: {0}")]
    InnerSolveFailure(String),
    #[error("eigensolver found {found} of {wanted} requested pairs")]
    NotConverged { found: usize, wanted: usize },
    #[error("zero pivot in LDL^T factorization at column {0}")]
    ZeroPivot(usize),

    // homogenization
    #[error("cell right-hand side violates the solvability condition (|<F,z>| = {0:e})")]
    ConsistencyViolation(f64),
    #[error("coupled macro operator lost definiteness")]
    CouplingSingular,
    #[error("inputs are incompatible: {0}")]
    IncompatibleInputs(String),
    #[error("spectral window contains no points")]
    EmptyWindow,

    // config / io
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
