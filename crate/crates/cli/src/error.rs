use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Why a pipeline run failed. Every failure lands in exactly one bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCategory {
    GraspGeneration,
    Planning,
    Perception,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 3] = [Self::GraspGeneration, Self::Planning, Self::Perception];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GraspGeneration => "grasp-generation",
            Self::Planning => "planning",
            Self::Perception => "perception",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCategory {
    /// Malformed or inconsistent input files.
    Input,
    Io,
    GraspGeneration,
    Planning,
    Perception,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Io => "io",
            Self::GraspGeneration => "grasp-generation",
            Self::Planning => "planning",
            Self::Perception => "perception",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Self::Input | Self::Io => 2,
            _ => 3,
        }
    }

    pub fn failure(self) -> Option<FailureCategory> {
        match self {
            Self::GraspGeneration => Some(FailureCategory::GraspGeneration),
            Self::Planning => Some(FailureCategory::Planning),
            Self::Perception => Some(FailureCategory::Perception),
            Self::Input | Self::Io => None,
        }
    }
}

impl From<FailureCategory> for ErrorCategory {
    fn from(f: FailureCategory) -> Self {
        match f {
            FailureCategory::GraspGeneration => Self::GraspGeneration,
            FailureCategory::Planning => Self::Planning,
            FailureCategory::Perception => Self::Perception,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Machine-readable error, printed as `{"error": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{category}: {message}")]
pub struct CliError {
    pub category: ErrorCategory,
    pub message: String,
    /// File the error refers to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    /// JSON path inside `file`, for schema errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl CliError {
    pub fn new(category: ErrorCategory, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
            file: None,
            path: None,
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(ErrorCategory::Input, message)
    }

    pub fn io(file: &Path, err: impl fmt::Display) -> Self {
        Self::new(ErrorCategory::Io, err.to_string()).in_file(file)
    }

    pub fn stage(category: FailureCategory, message: impl Into<String>) -> Self {
        Self::new(category.into(), message)
    }

    pub fn in_file(mut self, file: &Path) -> Self {
        self.file = Some(file.display().to_string());
        self
    }

    pub fn at_path(mut self, path: impl Into<String>) -> Self {
        self.path = Some(path.into());
        self
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: &'a CliError,
        }
        let mut s =
            serde_json::to_string_pretty(&Wrapper { error: self }).expect("error serializes");
        s.push('\n');
        s
    }
}
