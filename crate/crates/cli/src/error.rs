use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("startup error: cannot bind {what} on port {port}: {reason}")]
    Startup {
        what: &'static str,
        port: u16,
        reason: String,
    },
    #[error("connect failed: {target} unreachable after {attempts} attempts ({last})")]
    ConnectFailed {
        target: String,
        attempts: u32,
        last: String,
    },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] fleet_core::Error),
}

impl CliError {
    /// 0 success, 2 config error, 3 runtime failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(fleet_core::Error::Config(_)) => 2,
            _ => 3,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(fleet_core::Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(fleet_core::Error::AuthFailed("u".into())).exit_code(), 3);
        let e = CliError::Startup {
            what: "master",
            port: 11311,
            reason: "in use".into(),
        };
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("11311"));
    }
}
