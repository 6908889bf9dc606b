use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// H_g is numerically singular; the listed gradient components are
    /// (nearly) linearly dependent, usually because a parameter has no effect.
    #[error(
        "projection matrix is singular (condition number {condition:.3e}); near-dependent gradient components: {components:?}"
    )]
    SingularProjection {
        condition: f64,
        components: Vec<usize>,
    },

    #[error("projected kernel matrix is singular with zero nugget; use a positive eta2")]
    Regularization,

    #[error("surrogate regression is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("kernel matrix factorization failed ({context}); try a larger nugget {hint}")]
    IllConditioned {
        context: &'static str,
        hint: &'static str,
    },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error(
        "coordinate descent did not converge after {sweeps} sweeps (duality gap {duality_gap:.3e}, max step {max_step:.3e})"
    )]
    NonConvergence {
        sweeps: usize,
        duality_gap: f64,
        max_step: f64,
    },

    #[error("model output has zero variance; sensitivity indices are undefined")]
    DegenerateModel,

    #[error("target {target} lies outside the measured range [{lo}, {hi}]; extrapolation is not permitted")]
    Extrapolation { target: f64, lo: f64, hi: f64 },

    #[error("{path}: line {line}, column `{column}`: {message}")]
    Csv {
        path: String,
        line: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("study failed: {failed} of {total} replicates failed (first error: {first})")]
    Study {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input) map to CLI exit code 2.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularProjection { .. }
            | Error::Regularization
            | Error::RankDeficient { .. }
            | Error::IllConditioned { .. }
            | Error::NonConvergence { .. }
            | Error::DegenerateModel
            | Error::Study { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
