//! HTTP estimator backend.
//!
//! Wire contract (JSON, UTF-8):
//! - `POST <endpoint>/estimate` body `{"image": "<base64 PNG>"}` →
//!   `{"age": <number>}`
//! - `POST <endpoint>/verify` body `{"image_a": "...", "image_b": "..."}` →
//!   `{"confidence": <number in [0, 100]>}`
//!
//! Transport and 5xx failures retry with exponential backoff (3 attempts);
//! errors carry the request context and are never silently replaced by
//! fallback values.

use std::time::Duration;

use base64::Engine;
use serde::Deserialize;

use super::EstimatorBackend;
use crate::data::{to_rgb8, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub timeout: Duration,
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            timeout: Duration::from_secs(10),
            attempts: 3,
            initial_backoff: Duration::from_millis(100),
        }
    }
}

pub struct RemoteBackend {
    endpoint: String,
    agent: ureq::Agent,
    opts: RemoteOptions,
}

/// Build a backend that talks to a remote estimator service.
pub fn remote_estimator_client(endpoint: &str, opts: RemoteOptions) -> RemoteBackend {
    let agent = ureq::AgentBuilder::new()
        .timeout(opts.timeout)
        .build();
    RemoteBackend {
        endpoint: endpoint.trim_end_matches('/').to_string(),
        agent,
        opts,
    }
}

#[derive(Deserialize)]
struct EstimateResponse {
    age: f64,
}

#[derive(Deserialize)]
struct VerifyResponse {
    confidence: f64,
}

impl RemoteBackend {
    fn png_base64(image: &Image) -> Result<String> {
        let rgb = to_rgb8(image);
        let mut png = Vec::new();
        rgb.write_to(
            &mut std::io::Cursor::new(&mut png),
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Backend(format!("png encode: {e}")))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(png))
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String> {
        let url = format!("{}{}", self.endpoint, path);
        let payload = body.to_string();
        let mut backoff = self.opts.initial_backoff;
        let mut last_err = String::new();
        for attempt in 1..=self.opts.attempts {
            match self
                .agent
                .post(&url)
                .set("content-type", "application/json")
                .send_string(&payload)
            {
                Ok(resp) => {
                    return resp.into_string().map_err(|e| Error::Http {
                        url: url.clone(),
                        msg: format!("reading body: {e}"),
                    });
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    last_err = format!("status {code}: {body}");
                    // Client errors are not retryable.
                    if code < 500 {
                        return Err(Error::Http {
                            url,
                            msg: last_err,
                        });
                    }
                }
                Err(e) => {
                    last_err = format!("transport: {e}");
                }
            }
            if attempt < self.opts.attempts {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(Error::Http {
            url,
            msg: format!("{last_err} (after {} attempts)", self.opts.attempts),
        })
    }
}

impl EstimatorBackend for RemoteBackend {
    fn estimate_age(&self, image: &Image) -> Result<f64> {
        let body = serde_json::json!({ "image": Self::png_base64(image)? });
        let text = self.post("/estimate", body)?;
        let parsed: EstimateResponse = serde_json::from_str(&text).map_err(|e| Error::Http {
            url: format!("{}/estimate", self.endpoint),
            msg: format!("parsing field 'age': {e}; body was {text:?}"),
        })?;
        Ok(parsed.age)
    }

    fn verify(&self, a: &Image, b: &Image) -> Result<f64> {
        let body = serde_json::json!({
            "image_a": Self::png_base64(a)?,
            "image_b": Self::png_base64(b)?,
        });
        let text = self.post("/verify", body)?;
        let parsed: VerifyResponse = serde_json::from_str(&text).map_err(|e| Error::Http {
            url: format!("{}/verify", self.endpoint),
            msg: format!("parsing field 'confidence': {e}; body was {text:?}"),
        })?;
        Ok(parsed.confidence)
    }
}
