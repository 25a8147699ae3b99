//! Blocking JSON-over-HTTP client with bounded retries and an admission gate.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Generator, PromptSpec};
use crate::error::{RarError, Result};

const BODY_SNIPPET: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSettings {
    pub base_url: String,
    /// Name of the environment variable holding the API key. Empty means no
    /// authentication header is sent.
    pub api_key_env: String,
    pub auth_header: String,
    pub auth_scheme: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_concurrency: usize,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            base_url: "http://localhost:8000/v1".into(),
            api_key_env: "RAR_API_KEY".into(),
            auth_header: "Authorization".into(),
            auth_scheme: "Bearer".into(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_base_ms: 500,
            max_concurrency: 4,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    Retryable(String),
    Fatal(RarError),
}

pub struct HttpClient {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
    gate: Gate,
}

fn snippet(body: &str) -> String {
    body.chars().take(BODY_SNIPPET).collect()
}

impl HttpClient {
    pub fn new(settings: HttpSettings) -> Result<Self> {
        if settings.timeout_ms == 0 {
            return Err(RarError::invalid("timeout_ms must be positive"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(settings.timeout_ms))
            .build()
            .map_err(|e| RarError::invalid(format!("http client: {e}")))?;
        Ok(HttpClient {
            gate: Gate::new(settings.max_concurrency),
            settings,
            client,
        })
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    fn api_key(&self) -> Result<Option<String>> {
        if self.settings.api_key_env.is_empty() {
            return Ok(None);
        }
        std::env::var(&self.settings.api_key_env)
            .map(Some)
            .map_err(|_| RarError::invalid(format!("environment variable {} is not set", self.settings.api_key_env)))
    }

    fn attempt(&self, url: &str, body: &Value, key: Option<&str>) -> std::result::Result<Value, Failure> {
        let _permit = self.gate.acquire();
        let mut req = self.client.post(url).json(body);
        if let Some(key) = key {
            let value = if self.settings.auth_scheme.is_empty() {
                key.to_string()
            } else {
                format!("{} {}", self.settings.auth_scheme, key)
            };
            req = req.header(self.settings.auth_header.as_str(), value);
        }
        let resp = req.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Retryable(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(RarError::Protocol {
                message: format!("status {status}"),
                body: snippet(&text),
            }));
        }
        serde_json::from_str(&text).map_err(|e| {
            Failure::Fatal(RarError::Protocol {
                message: format!("invalid JSON: {e}"),
                body: snippet(&text),
            })
        })
    }

    /// POSTs `body` to `{base_url}/{path}`. Returns the parsed response and
    /// the number of attempts made.
    pub fn post_json(&self, path: &str, body: &Value) -> Result<(Value, usize)> {
        let url = format!("{}/{}", self.settings.base_url.trim_end_matches('/'), path);
        let key = self.api_key()?;
        let mut attempts = 0usize;
        loop {
            attempts += 1;
            match self.attempt(&url, body, key.as_deref()) {
                Ok(v) => return Ok((v, attempts)),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(message)) => {
                    log::debug!("POST {url} attempt {attempts} failed: {message}");
                    if attempts > self.settings.max_retries as usize {
                        return Err(RarError::Transport { attempts, message });
                    }
                    let base = self.settings.backoff_base_ms.saturating_mul(1 << (attempts - 1).min(16));
                    let jitter = rand::rng().random_range(0..=base / 2);
                    std::thread::sleep(Duration::from_millis(base + jitter));
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorEndpoint {
    #[serde(flatten)]
    pub http: HttpSettings,
    pub model_name: String,
    /// Extra top-level request fields (e.g. reasoning controls), merged into
    /// the body verbatim.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thinking_passthrough: Option<Value>,
}

impl Default for GeneratorEndpoint {
    fn default() -> Self {
        GeneratorEndpoint {
            http: HttpSettings::default(),
            model_name: "gpt-5-mini".into(),
            thinking_passthrough: None,
        }
    }
}

pub struct HttpGenerator {
    endpoint: GeneratorEndpoint,
    client: HttpClient,
}

impl HttpGenerator {
    pub fn new(endpoint: GeneratorEndpoint) -> Result<Self> {
        Ok(HttpGenerator {
            client: HttpClient::new(endpoint.http.clone())?,
            endpoint,
        })
    }

    pub fn request_body(&self, prompt: &PromptSpec) -> Value {
        let mut body = serde_json::json!({
            "model": self.endpoint.model_name,
            "messages": [{ "role": "user", "content": prompt.render() }],
        });
        if let (Some(Value::Object(extra)), Value::Object(map)) = (&self.endpoint.thinking_passthrough, &mut body) {
            for (k, v) in extra {
                map.insert(k.clone(), v.clone());
            }
        }
        body
    }

    /// Sends the prompt and returns the assistant text plus attempt count.
    pub fn generate_counted(&self, prompt: &PromptSpec) -> Result<(String, usize)> {
        let (resp, attempts) = self.client.post_json("chat/completions", &self.request_body(prompt))?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| RarError::Protocol {
                message: "response lacks choices[0].message.content".into(),
                body: snippet(&resp.to_string()),
            })?;
        Ok((text.to_string(), attempts))
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, prompt: &PromptSpec) -> Result<String> {
        self.generate_counted(prompt).map(|(t, _)| t)
    }
}

/// Convenience wrapper matching the single-call shape.
pub fn http_generate(endpoint: &GeneratorEndpoint, prompt: &PromptSpec) -> Result<String> {
    HttpGenerator::new(endpoint.clone())?.generate(prompt)
}
