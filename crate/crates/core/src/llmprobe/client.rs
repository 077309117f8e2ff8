// SPDX-License-Identifier: MIT OR Apache-2.0

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Minimal chat-completions client.
pub struct ChatClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
}

/// Outcome of one request after retries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Text(String),
    /// Permanent failure (auth, quota after retries, malformed reply).
    Failed(String),
}

fn transient(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl ChatClient {
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
        max_retries: u32,
        backoff: Duration,
    ) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        ChatClient { agent, endpoint: endpoint.to_string(), model: model.to_string(), api_key, max_retries, backoff }
    }

    fn once(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| (true, format!("reading body: {e}")))?;
        if status != 200 {
            let snippet: String = text.chars().take(200).collect();
            return Err((transient(status), format!("HTTP {status}: {snippet}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| (false, format!("invalid JSON reply: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| (false, "reply has no choices[0].message.content".to_string()))
    }

    /// Send one user message at temperature 0, retrying transient failures
    /// with exponential backoff.
    pub fn complete(&self, prompt: &str) -> Reply {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut attempt = 0;
        loop {
            match self.once(&body) {
                Ok(t) => return Reply::Text(t),
                Err((true, _)) if attempt < self.max_retries => {
                    thread::sleep(self.backoff * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
                Err((_, msg)) => return Reply::Failed(format!("after {} attempt(s): {msg}", attempt + 1)),
            }
        }
    }
}

/// Read the API key from the named environment variable.
pub fn api_key_from_env(var: &str) -> Result<String> {
    std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))
}
