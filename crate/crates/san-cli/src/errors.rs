//! Command errors mapped onto process exit codes:
//! 0 success, 1 check failure, 2 usage/config error, 3 I/O or corruption.

use std::fmt;

#[derive(Debug)]
pub enum CmdError {
    /// Exit 1: a verification the command ran did not pass.
    Check(String),
    /// Exit 2: bad flags, bad config, inconsistent inputs.
    Usage(String),
    /// Exit 3: missing/corrupt files, lock conflicts, write failures.
    Io(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Check(_) => 1,
            CmdError::Usage(_) => 2,
            CmdError::Io(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CmdError::Usage(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CmdError::Io(msg.into())
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Check(m) => write!(f, "check failed: {m}"),
            CmdError::Usage(m) => write!(f, "{m}"),
            CmdError::Io(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CmdError {}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        // A path the user pointed at but that does not exist is a usage
        // problem; everything else (permissions, short reads, ...) is I/O.
        if e.kind() == std::io::ErrorKind::NotFound {
            CmdError::Usage(e.to_string())
        } else {
            CmdError::Io(e.to_string())
        }
    }
}

impl From<san_core::Error> for CmdError {
    fn from(e: san_core::Error) -> Self {
        CmdError::Usage(e.to_string())
    }
}

pub type CmdResult<T> = Result<T, CmdError>;
