use std::time::Duration;

use soi_core::ingest::atlas::{HttpResponse, Transport, TransportError};

/// Blocking HTTP transport for the live API.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> anyhow::Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("soi/", env!("CARGO_PKG_VERSION")))
            .build()?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str, query: &[(String, String)], api_key: Option<&str>) -> Result<HttpResponse, TransportError> {
        let mut req = self.client.get(url).query(query);
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Key {key}"));
        }
        let resp = req.send().map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}
