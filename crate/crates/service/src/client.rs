//! Blocking HTTP client for a running model runner.

use std::time::Duration;

use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::{Client, Response};
use serde_json::Value as JsonValue;
use thiserror::Error;

use crate::http::EPOCH_HEADER;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {detail}")]
    Transport { url: String, detail: String },
    #[error("server answered {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

pub struct RunnerClient {
    base: String,
    http: Client,
}

/// Body and epoch header of a data endpoint response.
#[derive(Debug)]
pub struct DataResponse {
    pub body: Vec<u8>,
    pub epoch: Option<u64>,
}

impl RunnerClient {
    pub fn new(base_url: &str) -> Self {
        let http = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("HTTP client builds");
        RunnerClient { base: base_url.trim_end_matches('/').to_string(), http }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn transport(&self, e: reqwest::Error) -> ClientError {
        ClientError::Transport { url: self.base.clone(), detail: e.to_string() }
    }

    fn check(&self, response: Response) -> Result<Response, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let body = response.text().unwrap_or_default();
        Err(ClientError::Http { status: status.as_u16(), body })
    }

    /// POSTs the named multipart parts; `operation` goes into the query string.
    pub fn post_parts(&self, path: &str, operation: Option<&str>, parts: Vec<(&str, Vec<u8>)>) -> Result<DataResponse, ClientError> {
        let mut form = Form::new();
        for (name, bytes) in parts {
            form = form.part(name.to_string(), Part::bytes(bytes).file_name(name.to_string()));
        }
        let mut request = self.http.post(self.url(path)).multipart(form);
        if let Some(op) = operation {
            request = request.query(&[("operation", op)]);
        }
        let response = self.check(request.send().map_err(|e| self.transport(e))?)?;
        let epoch = response
            .headers()
            .get(EPOCH_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        let body = response.bytes().map_err(|e| self.transport(e))?.to_vec();
        Ok(DataResponse { body, epoch })
    }

    /// POSTs to a swap endpoint and returns the new epoch.
    pub fn swap(&self, path: &str, part: &str, bytes: Vec<u8>) -> Result<u64, ClientError> {
        let response = self.post_parts(path, None, vec![(part, bytes)])?;
        let body: JsonValue = serde_json::from_slice(&response.body).map_err(|e| ClientError::Decode(e.to_string()))?;
        body["epoch"].as_u64().ok_or_else(|| ClientError::Decode(format!("no epoch in {body}")))
    }

    pub fn status(&self) -> Result<JsonValue, ClientError> {
        let response = self.check(self.http.get(self.url("/status")).send().map_err(|e| self.transport(e))?)?;
        let body = response.bytes().map_err(|e| self.transport(e))?;
        serde_json::from_slice(&body).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn proto(&self) -> Result<String, ClientError> {
        let response = self.check(self.http.get(self.url("/proto")).send().map_err(|e| self.transport(e))?)?;
        response.text().map_err(|e| self.transport(e))
    }
}
