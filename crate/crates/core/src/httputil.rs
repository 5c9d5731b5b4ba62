//! Small HTTP helper shared by the remote embedder, completion backend,
//! and description provider: 30 s timeout, up to 2 retries with
//! exponential backoff.

use std::time::Duration;

use serde::de::DeserializeOwned;

use crate::{Error, Result};

pub const DEFAULT_TIMEOUT_SECS: u64 = 30;
pub const MAX_RETRIES: usize = 2;
const INITIAL_BACKOFF_MS: u64 = 250;

pub struct RetryClient {
    client: reqwest::blocking::Client,
}

impl RetryClient {
    pub fn new() -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(DEFAULT_TIMEOUT_SECS))
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(RetryClient { client })
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T>) -> Result<T> {
        let mut backoff = Duration::from_millis(INITIAL_BACKOFF_MS);
        let mut last_err = None;
        for i in 0..=MAX_RETRIES {
            match attempt() {
                Ok(value) => return Ok(value),
                Err(e) => {
                    last_err = Some(e);
                    if i < MAX_RETRIES {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Http("request failed".into())))
    }

    pub fn post_json<T: DeserializeOwned>(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<T> {
        self.with_retries(|| {
            let mut request = self.client.post(url).json(body);
            if let Some(key) = api_key {
                request = request.bearer_auth(key);
            }
            let response = request.send().map_err(|e| Error::Http(e.to_string()))?;
            let status = response.status();
            if !status.is_success() {
                return Err(Error::Http(format!("{url}: status {status}")));
            }
            response.json::<T>().map_err(|e| Error::Http(e.to_string()))
        })
    }

    pub fn get_json<T: DeserializeOwned>(&self, url: &str, api_key: Option<&str>) -> Result<T> {
        self.with_retries(|| {
            let mut request = self.client.get(url);
            if let Some(key) = api_key {
                request = request.bearer_auth(key);
            }
            let response = request.send().map_err(|e| Error::Http(e.to_string()))?;
            let status = response.status();
            if !status.is_success() {
                return Err(Error::Http(format!("{url}: status {status}")));
            }
            response.json::<T>().map_err(|e| Error::Http(e.to_string()))
        })
    }
}
