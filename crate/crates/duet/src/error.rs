use thiserror::Error;

/// Errors produced by every subsystem of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("step index {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("empty spatial condition: {0}")]
    EmptyCondition(String),

    #[error("spatial branch called without a condition")]
    MissingCondition,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("layout response could not be parsed: {message}; raw text: {raw:?}")]
    LayoutParse { message: String, raw: String },

    #[error("endpoint request failed after retries: {0}")]
    Endpoint(String),

    #[error("unsupported file format: {0}")]
    FileFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 2 for usage/config problems, 1 for failed checks
    /// and everything else that happens after a valid invocation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Io(_) | Error::TomlDe(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn ensure_same_shape(
    context: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{a:?}"),
            got: format!("{b:?}"),
        });
    }
    Ok(())
}
