use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("reference map contains no samples")]
    EmptyRfm,
    #[error("cell index {cell} out of range (have {cells} cells)")]
    BadCell { cell: usize, cells: usize },
    #[error("m = {m} out of range 1..={cells}")]
    BadM { m: usize, cells: usize },
    #[error("location ({x}, {y}) lies outside the region of interest")]
    OutsideRoi { x: f64, y: f64 },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("error list is empty")]
    EmptyErrors,
    #[error("fingerprint shares no feature with the selected subregions")]
    NoCommonFeatures,
    #[error("need {needed} reference points, selected cells hold {available}")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("every candidate location has zero posterior probability")]
    DegeneratePosterior,
    #[error("invalid region of interest: {0}")]
    BadRoi(String),
    #[error("invalid RSS value {value} for feature {feature}")]
    BadRss { feature: String, value: f64 },
    #[error("invalid feature id: {0:?}")]
    BadFeatureId(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bundle format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch in {}", .0.display())]
    ChecksumMismatch(PathBuf),
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("cell {cell}: {source}")]
    InCell {
        cell: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short code for the error kind, suitable for scripts and logs.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyRfm => "empty-rfm",
            Error::BadCell { .. } => "bad-cell",
            Error::BadM { .. } => "bad-m",
            Error::OutsideRoi { .. } => "outside-roi",
            Error::EmptyValidation => "empty-validation",
            Error::EmptyErrors => "empty-errors",
            Error::NoCommonFeatures => "no-common-features",
            Error::InsufficientCandidates { .. } => "insufficient-candidates",
            Error::DegeneratePosterior => "degenerate-posterior",
            Error::BadRoi(_) => "bad-roi",
            Error::BadRss { .. } => "bad-rss",
            Error::BadFeatureId(_) => "bad-feature-id",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::ChecksumMismatch(_) => "checksum-mismatch",
            Error::CorruptBundle(_) => "corrupt-bundle",
            Error::InCell { source, .. } => source.code(),
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Csv(_) => "csv",
        }
    }

    /// True for errors caused by the environment or the command line rather
    /// than by the computation itself.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Csv(_) | Error::InvalidParameter(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_cell(cell: usize, source: Error) -> Self {
        Error::InCell {
            cell,
            source: Box::new(source),
        }
    }
}
