//! Error classification driving the process exit code: configuration
//! problems exit 2, numerical or domain failures exit 3, filesystem and
//! file-format failures exit 4.

use std::fmt;

use eit_core::forward::ForwardError;
use eit_core::mesh::MeshError;
use eit_core::phantom::PhantomError;
use eit_core::recon::ReconError;
use eit_core::sensitivity::SensitivityError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Compute(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Prefix the message with the pipeline stage that failed.
    pub fn stage(self, stage: &str) -> CliError {
        match self {
            CliError::Config(m) => CliError::Config(format!("{stage}: {m}")),
            CliError::Compute(m) => CliError::Compute(format!("{stage}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{stage}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Compute(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> CliError {
        match e {
            MeshError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Compute(other.to_string()),
        }
    }
}

impl From<ForwardError> for CliError {
    fn from(e: ForwardError) -> CliError {
        match e {
            ForwardError::Io(io) => CliError::Io(io.to_string()),
            ForwardError::Cache(m) => CliError::Io(m),
            ForwardError::Mesh(m) => CliError::from(m),
            other => CliError::Compute(other.to_string()),
        }
    }
}

impl From<SensitivityError> for CliError {
    fn from(e: SensitivityError) -> CliError {
        match e {
            SensitivityError::Io(io) => CliError::Io(io.to_string()),
            SensitivityError::Cache(m) => CliError::Io(m),
            other => CliError::Compute(other.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> CliError {
        match e {
            PhantomError::Io(io) => CliError::Io(io.to_string()),
            PhantomError::Format(m) => CliError::Io(m),
            PhantomError::Forward(fwd) => CliError::from(fwd),
            PhantomError::Mesh(m) => CliError::from(m),
            other => CliError::Compute(other.to_string()),
        }
    }
}

impl From<ReconError> for CliError {
    fn from(e: ReconError) -> CliError {
        match e {
            ReconError::Forward(fwd) => CliError::from(fwd),
            other => CliError::Compute(other.to_string()),
        }
    }
}

/// Shorthand for attaching a stage label while converting an error.
pub fn at_stage<E: Into<CliError>>(stage: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| e.into().stage(stage)
}
