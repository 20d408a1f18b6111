//! Exit codes and the error type every command returns.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | usage or configuration error |
//! | 3 | data error: suite, fixture, script or run log missing, corrupt or truncated |
//! | 4 | gateway failure: cassette unavailable, or a completion could not be obtained |
//! | 5 | sandbox failure: the guest could not be started or did not answer |
//! | 6 | output could not be written |
//! | 7 | a replay produced a different run log |

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Internal,
    Config,
    Data,
    Gateway,
    Sandbox,
    Output,
    ReplayDiverged,
}

impl ExitKind {
    pub const ALL: [ExitKind; 7] = [
        ExitKind::Internal,
        ExitKind::Config,
        ExitKind::Data,
        ExitKind::Gateway,
        ExitKind::Sandbox,
        ExitKind::Output,
        ExitKind::ReplayDiverged,
    ];

    pub fn code(self) -> u8 {
        match self {
            ExitKind::Internal => 1,
            ExitKind::Config => 2,
            ExitKind::Data => 3,
            ExitKind::Gateway => 4,
            ExitKind::Sandbox => 5,
            ExitKind::Output => 6,
            ExitKind::ReplayDiverged => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitKind::Internal => "internal error",
            ExitKind::Config => "configuration error",
            ExitKind::Data => "data error",
            ExitKind::Gateway => "gateway failure",
            ExitKind::Sandbox => "sandbox failure",
            ExitKind::Output => "output error",
            ExitKind::ReplayDiverged => "replay diverged",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: ExitKind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn msg(kind: ExitKind, message: impl fmt::Display) -> Self {
        Self::new(kind, anyhow::anyhow!("{message}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:#}", self.kind.name(), self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Tags any error with the exit code it should produce.
pub trait OrExit<T> {
    fn or_exit(self, kind: ExitKind) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, kind: ExitKind) -> CliResult<T> {
        self.map_err(|e| Failure::new(kind, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_and_nonzero() {
        let mut codes: Vec<u8> = ExitKind::ALL.iter().map(|k| k.code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), ExitKind::ALL.len());
        assert!(!codes.contains(&0));
    }
}
