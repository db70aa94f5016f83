use std::fmt;

/// Exit status for usage and configuration problems.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for runtime and numeric failures.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }

    pub fn context(self, ctx: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            code: self.code,
            error: self.error.context(ctx),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<stgnf::Error> for CliError {
    fn from(e: stgnf::Error) -> Self {
        use stgnf::Error::*;
        match e {
            Numeric { .. } | SingularMix { .. } | UndefinedMetric(_) => Self::runtime(e),
            Io { .. } | Parse { .. } | Schema(_) | Config(_) | Bounds(_) | Json(_) | Csv(_) => {
                Self::usage(e)
            }
        }
    }
}

pub fn usage_msg(msg: impl fmt::Display) -> CliError {
    CliError::usage(anyhow::anyhow!("{msg}"))
}
