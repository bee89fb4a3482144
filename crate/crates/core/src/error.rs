use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("duplicate key (individual {id}, wave {year}) at rows {first} and {second}")]
    DuplicateKey {
        id: i64,
        year: i32,
        first: usize,
        second: usize,
    },

    #[error("non-numeric value `{value}` in column `{column}` at row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("domain violation in column `{column}` at rows {rows:?}: {rule}")]
    Domain {
        column: String,
        rows: Vec<usize>,
        rule: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("zero total weight")]
    ZeroWeight,

    #[error("rank deficient design; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("fixed-effect absorption did not converge in {sweeps} sweeps (max residual group mean {max_residual:e})")]
    AbsorbNoConvergence { sweeps: usize, max_residual: f64 },

    #[error("{estimator} did not converge in {iterations} iterations (gradient norm {gradient:e})")]
    NoConvergence {
        estimator: &'static str,
        iterations: usize,
        gradient: f64,
    },

    #[error("complete separation detected in logit fit (max |linear predictor| {0:.1})")]
    Separation(f64),

    #[error("under-identified: {0}")]
    UnderIdentified(String),

    #[error("need at least 2 clusters, found {0}")]
    TooFewClusters(usize),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("missing coefficient `{0}`")]
    MissingCoefficient(String),

    #[error("policy record {state}-{year}: {rule}")]
    PolicyInvariant {
        state: String,
        year: i32,
        rule: String,
    },

    #[error("missing prerequisite {}: run `{stage}` first", path.display())]
    Dependency { stage: String, path: PathBuf },

    #[error("monte carlo aborted: {0}")]
    MonteCarlo(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// Stable snake-case name of the variant, looking through stage wrappers.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
            Error::MissingColumn(_) => "missing_column",
            Error::UnknownColumn(_) => "unknown_column",
            Error::DuplicateKey { .. } => "duplicate_key",
            Error::NonNumeric { .. } => "non_numeric",
            Error::Domain { .. } => "domain",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Empty(_) => "empty",
            Error::ZeroWeight => "zero_weight",
            Error::RankDeficient(_) => "rank_deficient",
            Error::AbsorbNoConvergence { .. } => "absorb_no_convergence",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Separation(_) => "separation",
            Error::UnderIdentified(_) => "under_identified",
            Error::TooFewClusters(_) => "too_few_clusters",
            Error::ZeroVariance(_) => "zero_variance",
            Error::MissingCoefficient(_) => "missing_coefficient",
            Error::PolicyInvariant { .. } => "policy_invariant",
            Error::Dependency { .. } => "dependency",
            Error::MonteCarlo(_) => "monte_carlo",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Stage name if the error carries stage attribution.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
