//! Shared plumbing for embedding and chat provider ports: errors, retry
//! policy, HTTP settings, and reachability probes.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum ProviderError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no recorded fixture for request {key}")]
    ReplayMiss { key: String },
    #[error("provider not configured: {0}")]
    NotConfigured(String),
    #[error("{0}")]
    Injected(String),
}

impl ProviderError {
    /// Transient failures worth retrying: connection errors, 429 and 5xx.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport { .. } | ProviderError::Injected(_) => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, initial_backoff: Duration::from_millis(500), multiplier: 2.0 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_attempts: 1, initial_backoff: Duration::ZERO, multiplier: 1.0 }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor)
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// policy's attempts are exhausted. Transport errors report the attempt count.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, ProviderError>,
) -> Result<T, ProviderError> {
    let attempts = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < attempts => {
                log::warn!("provider attempt {attempt}/{attempts} failed: {e}");
                std::thread::sleep(policy.backoff(attempt));
                attempt += 1;
            }
            Err(ProviderError::Transport { message, .. }) => {
                return Err(ProviderError::Transport { message, attempts: attempt })
            }
            Err(e) => return Err(e),
        }
    }
}

/// Live, mock, or replay-from-fixture backing for a provider port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Live,
    Mock,
    Replay,
}

impl std::str::FromStr for ProviderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ProviderMode::Live),
            "mock" => Ok(ProviderMode::Mock),
            "replay" => Ok(ProviderMode::Replay),
            other => Err(format!("unknown provider mode {other:?} (expected live, mock or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum Reachability {
    Reachable,
    Unreachable(String),
    /// Offline implementations (mock, replay) never touch the network.
    Offline,
}

/// Connection settings for an OpenAI-compatible HTTP endpoint.
#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpSettings {
    pub(crate) fn client(&self) -> Result<reqwest::blocking::Client, ProviderError> {
        reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ProviderError::NotConfigured(format!("http client: {e}")))
    }

    pub(crate) fn post_json(
        &self,
        client: &reqwest::blocking::Client,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, ProviderError> {
        with_retry(&self.retry, |_| {
            let mut req = client.post(&self.endpoint).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .map_err(|e| ProviderError::Transport { message: e.to_string(), attempts: 1 })?;
            let status = resp.status();
            let text = resp
                .text()
                .map_err(|e| ProviderError::Transport { message: e.to_string(), attempts: 1 })?;
            if !status.is_success() {
                return Err(ProviderError::Http { status: status.as_u16(), body: truncate(&text, 512) });
            }
            serde_json::from_str(&text)
                .map_err(|e| ProviderError::Protocol(format!("response is not JSON: {e}")))
        })
    }

    /// Cheap reachability check: any HTTP response counts as reachable.
    pub(crate) fn probe(&self) -> Reachability {
        let client = match reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(3))
            .build()
        {
            Ok(c) => c,
            Err(e) => return Reachability::Unreachable(e.to_string()),
        };
        match client.get(&self.endpoint).send() {
            Ok(_) => Reachability::Reachable,
            Err(e) => Reachability::Unreachable(e.to_string()),
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &s[..end])
}

pub(crate) mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn fast(attempts: u32) -> RetryPolicy {
        RetryPolicy { max_attempts: attempts, initial_backoff: Duration::ZERO, multiplier: 2.0 }
    }

    #[test]
    fn default_policy_is_three_attempts_from_500ms() {
        let p = RetryPolicy::default();
        assert_eq!(p.max_attempts, 3);
        assert_eq!(p.backoff(1), Duration::from_millis(500));
        assert_eq!(p.backoff(2), Duration::from_millis(1000));
    }

    #[test]
    fn retries_transient_errors_then_succeeds() {
        let calls = Cell::new(0);
        let out = with_retry(&fast(3), |_| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(ProviderError::Http { status: 503, body: String::new() })
            } else {
                Ok(7)
            }
        });
        assert_eq!(out.unwrap(), 7);
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn gives_up_with_attempt_count() {
        let err = with_retry::<()>(&fast(3), |_| {
            Err(ProviderError::Transport { message: "refused".into(), attempts: 1 })
        })
        .unwrap_err();
        assert!(matches!(err, ProviderError::Transport { attempts: 3, .. }));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let calls = Cell::new(0);
        let _ = with_retry::<()>(&fast(5), |_| {
            calls.set(calls.get() + 1);
            Err(ProviderError::Http { status: 400, body: String::new() })
        });
        assert_eq!(calls.get(), 1);
    }
}
