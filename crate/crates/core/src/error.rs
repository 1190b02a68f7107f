use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes shared by every module. The CLI maps each class onto a
/// distinct process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation in {op}: {detail}")]
    Contract { op: String, detail: String },
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: String, detail: String },
    /// An offset or direction too small to normalize; callers may perturb
    /// and retry.
    #[error("degenerate offset in {op}: {detail}")]
    Degenerate { op: String, detail: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Contract { op: op.into(), detail: detail.into() }
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { op: op.into(), detail: detail.into() }
    }

    pub fn format(detail: impl Into<String>) -> Self {
        Error::Format(detail.into())
    }

    /// Process exit code for this failure: 1 for contract and format
    /// errors, 2 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::Degenerate { .. } => 2,
            _ => 1,
        }
    }

    pub fn is_contract(&self) -> bool {
        matches!(self, Error::Contract { .. })
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::Degenerate { .. })
    }
}

macro_rules! ensure {
    ($cond:expr, $op:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract($op, format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
