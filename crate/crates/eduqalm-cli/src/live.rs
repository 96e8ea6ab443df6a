//! Live completion client, compiled only with the `live` feature.
//!
//! Credentials and endpoint come from the environment:
//! `EDUQALM_COMPLETIONS_URL` (an OpenAI-style completions endpoint) and
//! `EDUQALM_API_KEY`. Tests never use this path; CI runs the scripted mock.

use eduqalm::error::{Error, Result};
use eduqalm::pipeline::{ClientError, CompletionClient};

pub const URL_VAR: &str = "EDUQALM_COMPLETIONS_URL";
pub const KEY_VAR: &str = "EDUQALM_API_KEY";

pub struct HttpCompletionClient {
    url: String,
    api_key: String,
    model: String,
    http: reqwest::blocking::Client,
}

pub fn client_from_env() -> Result<HttpCompletionClient> {
    let url = std::env::var(URL_VAR).map_err(|_| missing_credentials())?;
    let api_key = std::env::var(KEY_VAR).map_err(|_| missing_credentials())?;
    let model = std::env::var("EDUQALM_MODEL").unwrap_or_else(|_| "gpt-3.5-turbo-instruct".into());
    Ok(HttpCompletionClient {
        url,
        api_key,
        model,
        http: reqwest::blocking::Client::new(),
    })
}

fn missing_credentials() -> Error {
    Error::Config(format!(
        "live mode needs {URL_VAR} and {KEY_VAR} in the environment; \
         for offline runs use --mock with a script file"
    ))
}

impl CompletionClient for HttpCompletionClient {
    fn send(&self, prompt: &str, timeout_ms: u64) -> std::result::Result<String, ClientError> {
        let body = serde_json::json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 512,
        });
        let response = self
            .http
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .timeout(std::time::Duration::from_millis(timeout_ms))
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    ClientError::Timeout
                } else {
                    ClientError::Malformed(e.to_string())
                }
            })?;
        if response.status().as_u16() == 429 || response.status().is_server_error() {
            return Err(ClientError::Timeout);
        }
        if !response.status().is_success() {
            return Err(ClientError::Refusal(format!("http {}", response.status())));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        value["choices"][0]["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Malformed("no choices[0].text in response".into()))
    }
}
