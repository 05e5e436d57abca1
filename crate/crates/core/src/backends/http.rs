//! Blocking JSON-over-HTTP client for remote backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::limiter::{InFlightLimiter, TokenBucket};
use super::protocol::*;
use super::{BackendEndpoint, BackendError, BackendRole, Detector, Generator, Reviewer, Trainer};

pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

/// Backoff ceiling between retries.
const MAX_BACKOFF: Duration = Duration::from_secs(10);

pub struct HttpBackend {
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
    in_flight: InFlightLimiter,
    bucket: Option<TokenBucket>,
    token: Option<String>,
}

/// Deterministic idempotency key: identical requests share a key, so a retried
/// request is recognisable server-side.
pub fn idempotency_key(path: &str, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(path.as_bytes());
    h.update([0u8]);
    h.update(body.as_bytes());
    hex::encode(&h.finalize()[..16])
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        endpoint.validate()?;
        let token = match &endpoint.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable `{var}` for {} token is not set", endpoint.role))
            })?),
            None => None,
        };
        let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout()).build();
        Ok(HttpBackend {
            in_flight: InFlightLimiter::new(endpoint.max_in_flight),
            bucket: endpoint.requests_per_second.map(|r| TokenBucket::new(r, endpoint.max_in_flight as f64)),
            agent,
            token,
            endpoint,
        })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    fn require(&self, role: BackendRole) -> Result<(), BackendError> {
        if self.endpoint.role != role {
            return Err(BackendError::RoleMismatch { expected: role, actual: self.endpoint.role });
        }
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), path)
    }

    fn once(&self, method: &str, path: &str, body: Option<&str>, key: &str) -> Result<String, BackendError> {
        let _permit = self.in_flight.acquire();
        if let Some(b) = &self.bucket {
            b.take();
        }
        let mut req =
            self.agent.request(method, &self.url(path)).set("Content-Type", "application/json").set(IDEMPOTENCY_HEADER, key);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let result = match body {
            Some(b) => req.send_string(b),
            None => req.call(),
        };
        match result {
            Ok(resp) => resp.into_string().map_err(|e| BackendError::Transport(format!("reading response body: {e}"))),
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
                    Ok(b) => (b.error.code, b.error.message),
                    Err(_) => (if status >= 500 { ErrorCode::Internal } else { ErrorCode::BadRequest }, text),
                };
                Err(BackendError::Protocol { status, code, message })
            }
            Err(ureq::Error::Transport(t)) => Err(BackendError::Transport(t.to_string())),
        }
    }

    fn send<Resp: DeserializeOwned>(&self, method: &str, path: &str, body: Option<String>) -> Result<Resp, BackendError> {
        let key = idempotency_key(path, body.as_deref().unwrap_or(""));
        let mut attempt = 0;
        loop {
            match self.once(method, path, body.as_deref(), &key) {
                Ok(text) => {
                    return serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{path}: {e}")));
                }
                Err(e) if e.is_retryable() && attempt < self.endpoint.max_retries => {
                    let delay = Duration::from_millis(self.endpoint.backoff_ms.saturating_mul(1 << attempt.min(16)));
                    log::warn!("{} {path} failed ({e}); retry {} in {delay:?}", self.endpoint.role, attempt + 1);
                    std::thread::sleep(delay.min(MAX_BACKOFF));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp, BackendError> {
        let body = serde_json::to_string(req).map_err(|e| BackendError::Malformed(e.to_string()))?;
        self.send("POST", path, Some(body))
    }
}

impl Detector for HttpBackend {
    fn detect(&self, req: &DetectRequest) -> Result<DetectResponse, BackendError> {
        self.require(BackendRole::Detect)?;
        self.post("/detect", req)
    }
}

impl Generator for HttpBackend {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.require(BackendRole::Generate)?;
        self.post("/generate", req)
    }
}

impl Reviewer for HttpBackend {
    fn review(&self, req: &ReviewRequest) -> Result<ReviewResponse, BackendError> {
        self.require(BackendRole::Review)?;
        self.post("/review", req)
    }
}

impl Trainer for HttpBackend {
    fn train(&self, req: &TrainRequest) -> Result<TrainResponse, BackendError> {
        self.require(BackendRole::Train)?;
        self.post("/train", req)
    }

    fn poll(&self, job_id: &str) -> Result<JobStatus, BackendError> {
        self.require(BackendRole::Train)?;
        self.send("GET", &format!("/jobs/{job_id}"), None)
    }
}
