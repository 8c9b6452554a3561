use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length error: {0}")]
    Length(String),

    #[error("shape error: expected {expected}, got {got:?}")]
    Shape { expected: String, got: Vec<usize> },

    #[error("state error: {0}")]
    State(String),

    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Range { what: &'static str, value: f64, lo: f64, hi: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate noise pair: sigma_lo = sigma_hi = {0}")]
    DegeneratePair(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("sample rate mismatch: {path} is {found} Hz, expected {expected} Hz (pass the resample flag to convert)")]
    SampleRate { path: PathBuf, found: u32, expected: u32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at iteration {iteration}: {diagnostic}")]
    NonFinite { iteration: u64, diagnostic: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl Into<String>, got: &[usize]) -> Self {
        Self::Shape { expected: expected.into(), got: got.to_vec() }
    }

    pub(crate) fn range(what: &'static str, value: f64, lo: f64, hi: f64) -> Self {
        Self::Range { what, value, lo, hi }
    }
}
