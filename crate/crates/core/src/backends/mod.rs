//! Model backends: wire protocol, HTTP transport with retry and rate limiting,
//! an HTTP server shell and the deterministic synthetic-world mock.

pub mod http;
pub mod limiter;
pub mod mock;
pub mod protocol;
pub mod server;
pub mod world;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::MockBackend;
pub use protocol::*;
pub use world::{NoiseModel, SyntheticWorld, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendRole {
    Detect,
    Generate,
    Review,
    Train,
}

impl std::fmt::Display for BackendRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BackendRole::Detect => "detect",
            BackendRole::Generate => "generate",
            BackendRole::Review => "review",
            BackendRole::Train => "train",
        };
        f.write_str(s)
    }
}

fn default_timeout_ms() -> u64 {
    120_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub role: BackendRole,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Optional sustained request rate; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl BackendEndpoint {
    pub fn new(role: BackendRole, base_url: impl Into<String>) -> Self {
        BackendEndpoint {
            role,
            base_url: base_url.into(),
            auth_env: None,
            timeout_ms: default_timeout_ms(),
            // reviewer calls get a single retry: a resample would be a new judgment
            max_retries: if role == BackendRole::Review { 1 } else { default_max_retries() },
            max_in_flight: default_in_flight(),
            requests_per_second: None,
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be positive".into()));
        }
        if matches!(self.requests_per_second, Some(r) if !r.is_finite() || r <= 0.0) {
            return Err(BackendError::Config("requests_per_second must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed backend payload: {0}")]
    Malformed(String),
    #[error("backend rejected request ({status} {code:?}): {message}")]
    Protocol { status: u16, code: ErrorCode, message: String },
    #[error("endpoint serves role `{actual}`, `{expected}` requested")]
    RoleMismatch { expected: BackendRole, actual: BackendRole },
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("job `{job_id}` failed: {message}")]
    JobFailed { job_id: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Protocol { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Protocol error code a server should answer with for this failure.
    pub fn code(&self) -> ErrorCode {
        match self {
            BackendError::Protocol { code, .. } => *code,
            BackendError::UnknownJob(_) => ErrorCode::NotFound,
            BackendError::Malformed(_) | BackendError::RoleMismatch { .. } | BackendError::Config(_) => ErrorCode::BadRequest,
            BackendError::Transport(_) | BackendError::JobFailed { .. } => ErrorCode::Internal,
        }
    }
}

pub trait Detector: Send + Sync {
    fn detect(&self, req: &DetectRequest) -> Result<DetectResponse, BackendError>;
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError>;
}

pub trait Reviewer: Send + Sync {
    fn review(&self, req: &ReviewRequest) -> Result<ReviewResponse, BackendError>;
}

pub trait Trainer: Send + Sync {
    fn train(&self, req: &TrainRequest) -> Result<TrainResponse, BackendError>;
    fn poll(&self, job_id: &str) -> Result<JobStatus, BackendError>;
}

/// A backend able to serve every role; what the HTTP server wraps.
pub trait ModelBackend: Detector + Generator + Reviewer + Trainer {}

impl<T: Detector + Generator + Reviewer + Trainer> ModelBackend for T {}

/// Polls a job until it leaves the queued/running states.
pub fn wait_for_job(trainer: &dyn Trainer, job_id: &str, interval: Duration, max_polls: u32) -> Result<JobStatus, BackendError> {
    for _ in 0..max_polls.max(1) {
        let status = trainer.poll(job_id)?;
        match status.state {
            JobState::Succeeded => return Ok(status),
            JobState::Failed => {
                return Err(BackendError::JobFailed { job_id: job_id.to_string(), message: status.message.unwrap_or_default() })
            }
            JobState::Queued | JobState::Running => std::thread::sleep(interval),
        }
    }
    Err(BackendError::Transport(format!("job `{job_id}` did not finish in time")))
}

/// One backend handle per role.
#[derive(Clone)]
pub struct BackendSet {
    pub detect: Arc<dyn Detector>,
    pub generate: Arc<dyn Generator>,
    pub review: Arc<dyn Reviewer>,
    pub train: Arc<dyn Trainer>,
}

impl BackendSet {
    pub fn uniform<B: ModelBackend + 'static>(backend: Arc<B>) -> Self {
        BackendSet { detect: backend.clone(), generate: backend.clone(), review: backend.clone(), train: backend }
    }
}
