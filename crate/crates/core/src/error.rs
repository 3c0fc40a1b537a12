use thiserror::Error;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcfError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what}")]
    NonFiniteInput { what: &'static str },

    /// Raised when a forward or backward pass produces NaN/inf. `layer` is
    /// 1-based for the convex network and 1-based for psi (`stage == "psi"`).
    #[error("non-finite intermediate in {stage} layer {layer}")]
    NonFiniteIntermediate { stage: &'static str, layer: usize },

    #[error("invalid label {0}: classification labels must be -1 or +1")]
    InvalidLabel(f64),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("all {0} starts failed to produce a finite objective")]
    FitFailed(usize),

    #[error("model selection failed: every lambda candidate was dropped")]
    SelectionFailed,

    #[error("model file error at {pointer}: {message}")]
    ModelFile { pointer: String, message: String },

    #[error("emission error: template has no snippet for node kinds [{}]", .0.join(", "))]
    MissingTemplateKinds(Vec<String>),

    #[error("template error: {0}")]
    Template(String),

    #[error("graph is not convexity-certified: {0}")]
    NotCertified(String),

    #[error("data file error: {0}")]
    DataFile(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("1-D minimization failed: {0}")]
    Bracket(String),
}

impl From<std::io::Error> for PcfError {
    fn from(e: std::io::Error) -> Self {
        PcfError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PcfError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(PcfError::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_finite(what: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(PcfError::NonFiniteInput { what })
    }
}
