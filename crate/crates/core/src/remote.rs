//! Transport for remote solver and evolver backends: one request document in,
//! one reply document out.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub trait Transport: Send + Sync {
    /// Sends `request` to `route` and returns the parsed reply document.
    fn exchange(&self, route: &str, request: &Value) -> Result<Value, String>;
}

/// Connection settings for a remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// JSON over HTTP POST to `<base_url>/<route>`.
pub struct HttpTransport {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
                .build(),
        );
        Self { base_url: config.base_url.trim_end_matches('/').to_string(), agent }
    }
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport").field("base_url", &self.base_url).finish()
    }
}

impl Transport for HttpTransport {
    fn exchange(&self, route: &str, request: &Value) -> Result<Value, String> {
        let url = format!("{}/{route}", self.base_url);
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(request.to_string())
            .map_err(|e| format!("{url}: {e}"))?;
        let text = resp.body_mut().read_to_string().map_err(|e| format!("{url}: {e}"))?;
        serde_json::from_str(&text).map_err(|e| format!("{url}: reply is not JSON: {e}"))
    }
}

/// Replays fixed replies in order; used by tests and offline runs.
#[derive(Debug, Default)]
pub struct CannedTransport {
    replies: std::sync::Mutex<std::collections::VecDeque<Result<Value, String>>>,
    requests: std::sync::Mutex<Vec<(String, Value)>>,
}

impl CannedTransport {
    pub fn new(replies: impl IntoIterator<Item = Result<Value, String>>) -> Self {
        Self { replies: std::sync::Mutex::new(replies.into_iter().collect()), requests: Default::default() }
    }

    pub fn requests(&self) -> Vec<(String, Value)> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for CannedTransport {
    fn exchange(&self, route: &str, request: &Value) -> Result<Value, String> {
        self.requests.lock().unwrap().push((route.to_string(), request.clone()));
        self.replies.lock().unwrap().pop_front().unwrap_or_else(|| Err("no canned reply left".into()))
    }
}
