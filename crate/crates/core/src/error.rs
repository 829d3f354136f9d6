use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("quadrature degree {degree} exceeds supported maximum {max}")]
    UnsupportedQuadrature { degree: usize, max: usize },
    #[error("unknown facet id {0}")]
    UnknownFacet(usize),
    #[error("permeability is not SPD at ({x}, {y}) in cell {cell}")]
    NonSpdPermeability { cell: usize, x: f64, y: f64 },
    #[error("invalid problem data: {0}")]
    InvalidData(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("constraint conflict: {0}")]
    ConstraintConflict(String),
    #[error("singular local block in cell {cell}")]
    SingularLocalBlock { cell: usize },
    #[error("sparse factorization failed: {0} (check the pressure constraint mode and the penalty parameter)")]
    SingularSystem(String),
    #[error("linear solve failed in Picard iteration {iteration}: {source}")]
    PicardLinearSolve {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
