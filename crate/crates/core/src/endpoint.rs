//! JSON-over-HTTP client shared by the external judge, the external tool
//! simulator and the LLM pass-through stages of the data pipeline.

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EndpointError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("malformed reply: {0}")]
    Malformed(String),
}

/// Address and per-request timeout of a remote service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Requests allowed in flight at once; `None` means unbounded.
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl Endpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Sends one JSON request and returns the JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, endpoint: &Endpoint, body: &Value) -> Result<Value, EndpointError>;
}

/// Blocking HTTP transport.
#[derive(Default)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, endpoint: &Endpoint, body: &Value) -> Result<Value, EndpointError> {
        let response = self
            .client
            .post(&endpoint.url)
            .timeout(endpoint.timeout())
            .json(body)
            .send()
            .map_err(|e| EndpointError::Unavailable(e.to_string()))?;
        if !response.status().is_success() {
            return Err(EndpointError::Unavailable(format!(
                "HTTP {}",
                response.status()
            )));
        }
        response
            .json::<Value>()
            .map_err(|e| EndpointError::Malformed(e.to_string()))
    }
}

/// Counting semaphore enforcing `Endpoint::max_in_flight`.
#[derive(Default)]
struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self, limit: usize) {
        let mut n = self.count.lock().unwrap();
        while *n >= limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        *self.count.lock().unwrap() -= 1;
        self.freed.notify_one();
    }
}

/// An endpoint paired with the transport used to reach it.
#[derive(Clone)]
pub struct Client {
    pub endpoint: Endpoint,
    transport: Arc<dyn Transport>,
    in_flight: Arc<InFlight>,
}

impl Client {
    pub fn new(endpoint: Endpoint, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint,
            transport,
            in_flight: Arc::default(),
        }
    }

    pub fn http(endpoint: Endpoint) -> Self {
        Self::new(endpoint, Arc::new(HttpTransport::new()))
    }

    pub fn call<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        request: &Req,
    ) -> Result<Resp, EndpointError> {
        let body =
            serde_json::to_value(request).map_err(|e| EndpointError::Malformed(e.to_string()))?;
        let limit = self.endpoint.max_in_flight;
        if let Some(limit) = limit {
            self.in_flight.acquire(limit.max(1));
        }
        let reply = self.transport.post_json(&self.endpoint, &body);
        if limit.is_some() {
            self.in_flight.release();
        }
        serde_json::from_value(reply?).map_err(|e| EndpointError::Malformed(e.to_string()))
    }
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("endpoint", &self.endpoint)
            .finish_non_exhaustive()
    }
}
