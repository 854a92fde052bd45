//! Command implementations for the `ela` executable.

pub mod bench;
pub mod commands;
pub mod figures;
pub mod svg;
pub mod sweep;

use std::fmt;
use std::str::FromStr;

/// Environment variable selecting the working precision.
pub const PRECISION_VAR: &str = "ELA_PRECISION";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = UsageError;
    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(UsageError(format!("precision must be f32 or f64, got '{s}'"))),
        }
    }
}

impl Precision {
    /// `ELA_PRECISION` if set, else `default`.
    pub fn from_env(default: Precision) -> Result<Precision, UsageError> {
        match std::env::var(PRECISION_VAR) {
            Ok(v) if !v.is_empty() => v.parse(),
            _ => Ok(default),
        }
    }
}

/// Bad flags or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Result of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

pub const EXIT_PASS: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Usage errors (including invalid configuration and input) map to 2,
/// everything else to 1.
pub fn exit_code(result: &anyhow::Result<Status>) -> u8 {
    match result {
        Ok(Status::Pass) => EXIT_PASS,
        Ok(Status::Fail) => EXIT_FAIL,
        Err(e) => {
            let usage = e.chain().any(|c| {
                c.is::<UsageError>()
                    || matches!(
                        c.downcast_ref::<ela_core::Error>(),
                        Some(ela_core::Error::Config(_) | ela_core::Error::Input(_))
                    )
            });
            if usage {
                EXIT_USAGE
            } else {
                EXIT_FAIL
            }
        }
    }
}
