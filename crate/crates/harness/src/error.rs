// SPDX-License-Identifier: MIT OR Apache-2.0

//! One error type for every harness stage, classified for exit codes.

use std::fmt;

use desksteer::corpus::CorpusError;
use desksteer::debias::DebiasError;
use desksteer::explain::ExplainError;
use desksteer::model::ModelError;
use desksteer::probing::ProbeError;
use desksteer::steering::SteeringError;
use desksteer::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessError {
    pub kind: ErrorKind,
    pub stage: Option<String>,
    pub message: String,
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            stage: None,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Numeric, message)
    }

    /// Attaches a stage name unless one is already set.
    pub fn in_stage(mut self, stage: &str) -> Self {
        if self.stage.is_none() {
            self.stage = Some(stage.to_string());
        }
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// `error[<kind>] stage=<stage>: <message>` on one line.
impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]", self.kind.tag())?;
        if let Some(stage) = &self.stage {
            write!(f, " stage={stage}")?;
        }
        let message = self.message.replace(['\n', '\r'], " ");
        write!(f, ": {message}")
    }
}

impl std::error::Error for HarnessError {}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        Self::data(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(format!("json: {e}"))
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        Self::data(format!("csv: {e}"))
    }
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            ModelError::Length { .. } | ModelError::TokenId { .. } | ModelError::Empty(_) => Self::data(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<CorpusError> for HarnessError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ProbeError> for HarnessError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Model(m) => m.into(),
            ProbeError::Data(_) => Self::data(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<DebiasError> for HarnessError {
    fn from(e: DebiasError) -> Self {
        match e {
            DebiasError::Tensor(t) => t.into(),
            DebiasError::Model(m) => m.into(),
            DebiasError::Probe(p) => p.into(),
            DebiasError::Numeric(_) => Self::numeric(e.to_string()),
            DebiasError::Data(_) | DebiasError::Segmentation(_) => Self::data(e.to_string()),
            DebiasError::Config(_) => Self::config(e.to_string()),
        }
    }
}

impl From<SteeringError> for HarnessError {
    fn from(e: SteeringError) -> Self {
        match e {
            SteeringError::Model(m) => m.into(),
            SteeringError::Singular(_) => Self::numeric(e.to_string()),
            SteeringError::Alignment(_) | SteeringError::Data(_) => Self::data(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<ExplainError> for HarnessError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Model(m) => m.into(),
            ExplainError::Contract(_) | ExplainError::Json(_) => Self::data(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}
