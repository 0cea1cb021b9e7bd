//! Blocking JSON-over-HTTP helpers shared by the chain adapter, the client
//! node and the CLI.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    /// Could not reach the peer or read its reply.
    #[error("transport error: {0}")]
    Transport(String),
    /// The peer answered with a non-2xx status.
    #[error("api error ({status}): {body}")]
    Api { status: u16, body: serde_json::Value },
}

impl HttpError {
    /// The `error` field of an API error body, if any.
    pub fn api_message(&self) -> Option<String> {
        match self {
            HttpError::Api { body, .. } => body
                .get("error")
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .or_else(|| Some(body.to_string())),
            HttpError::Transport(_) => None,
        }
    }
}

#[derive(Clone)]
pub struct JsonHttp {
    agent: ureq::Agent,
    base: String,
}

impl JsonHttp {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        let base = base_url.into().trim_end_matches('/').to_string();
        Self { agent, base }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, HttpError> {
        let mut req = self.agent.get(format!("{}{}", self.base, path));
        for (k, v) in query {
            req = req.query(*k, v);
        }
        let resp = req.call().map_err(|e| HttpError::Transport(e.to_string()))?;
        read(resp)
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, HttpError> {
        let resp = self
            .agent
            .post(format!("{}{}", self.base, path))
            .send_json(body)
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        read(resp)
    }

    /// Posts raw bytes and parses a JSON reply.
    pub fn post_bytes<T: DeserializeOwned>(&self, path: &str, body: &[u8]) -> Result<T, HttpError> {
        let resp = self
            .agent
            .post(format!("{}{}", self.base, path))
            .header("content-type", "application/octet-stream")
            .send(body)
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        read(resp)
    }
}

fn read<T: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> Result<T, HttpError> {
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(1 << 30)
        .read_to_string()
        .map_err(|e| HttpError::Transport(e.to_string()))?;
    if !(200..300).contains(&status) {
        let body = serde_json::from_str(&text).unwrap_or(serde_json::Value::String(text));
        return Err(HttpError::Api { status, body });
    }
    serde_json::from_str(&text).map_err(|e| HttpError::Transport(format!("bad response body: {e}")))
}
