//! Caption providers: a deterministic template stub and an HTTP client for an
//! external captioning service.

use std::time::Duration;

use reqwest::blocking::{multipart, Client};
use serde::{Deserialize, Serialize};

use super::msi::BandInfo;
use crate::error::{Error, Result};

/// Spatial and spectral attributes forwarded to the captioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetadata {
    pub id: String,
    pub labels: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub bands: Vec<BandInfo>,
}

pub struct CaptionRequest<'a> {
    pub metadata: &'a CaptionMetadata,
    /// RGB composite as PNG; present only when the provider asks for it.
    pub png: Option<&'a [u8]>,
}

pub trait CaptionProvider: Sync {
    fn name(&self) -> &str;

    fn needs_image(&self) -> bool {
        false
    }

    fn caption(&self, req: &CaptionRequest<'_>) -> Result<String>;
}

/// "forest", "forest and lake", "forest, lake and sea"
pub fn join_labels(labels: &[String]) -> String {
    match labels {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StubCaptioner;

impl StubCaptioner {
    pub fn render(meta: &CaptionMetadata) -> String {
        let mut text = format!(
            "A satellite scene containing {}. The tile is {}x{} pixels with {} spectral bands",
            join_labels(&meta.labels),
            meta.width,
            meta.height,
            meta.bands.len()
        );
        let wl: Vec<f32> = meta
            .bands
            .iter()
            .map(|b| b.wavelength_nm)
            .filter(|&w| w > 0.0)
            .collect();
        if let (Some(lo), Some(hi)) = (wl.iter().copied().reduce(f32::min), wl.iter().copied().reduce(f32::max)) {
            text.push_str(&format!(" spanning {lo:.0} to {hi:.0} nm"));
        }
        text.push('.');
        text
    }
}

impl CaptionProvider for StubCaptioner {
    fn name(&self) -> &str {
        "stub"
    }

    fn caption(&self, req: &CaptionRequest<'_>) -> Result<String> {
        Ok(Self::render(req.metadata))
    }
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

/// POSTs `image` (PNG) and `metadata` (JSON) as multipart form fields and
/// expects `{"caption": "..."}` back.
pub struct RemoteCaptioner {
    endpoint: String,
    client: Client,
    attempts: u32,
    backoff: Duration,
}

impl RemoteCaptioner {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::CaptionTransport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            client,
            attempts: 3,
            backoff: Duration::from_millis(250),
        })
    }

    /// Total attempts (≥ 1) and the first backoff delay, doubled per retry.
    pub fn with_retry(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    fn once(&self, req: &CaptionRequest<'_>) -> Result<String> {
        let png = req
            .png
            .ok_or_else(|| Error::CaptionTransport("remote captioner needs the RGB image".into()))?;
        let meta = serde_json::to_string(req.metadata)?;
        let form = multipart::Form::new()
            .part(
                "image",
                multipart::Part::bytes(png.to_vec())
                    .file_name(format!("{}.png", req.metadata.id))
                    .mime_str("image/png")
                    .map_err(|e| Error::CaptionTransport(e.to_string()))?,
            )
            .part(
                "metadata",
                multipart::Part::text(meta)
                    .mime_str("application/json")
                    .map_err(|e| Error::CaptionTransport(e.to_string()))?,
            );
        let resp = self.client.post(&self.endpoint).multipart(form).send().map_err(|e| {
            if e.is_timeout() {
                Error::CaptionTimeout
            } else {
                Error::CaptionTransport(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::CaptionStatus(status.as_u16()));
        }
        let body = resp.bytes().map_err(|e| {
            if e.is_timeout() {
                Error::CaptionTimeout
            } else {
                Error::CaptionTransport(e.to_string())
            }
        })?;
        let parsed: CaptionResponse =
            serde_json::from_slice(&body).map_err(|e| Error::CaptionMalformed(e.to_string()))?;
        Ok(parsed.caption)
    }
}

/// Timeouts, transport failures, 429 and 5xx are worth another try; other
/// client errors and malformed bodies are not.
fn retryable(e: &Error) -> bool {
    match e {
        Error::CaptionTimeout | Error::CaptionTransport(_) => true,
        Error::CaptionStatus(code) => *code == 429 || *code >= 500,
        _ => false,
    }
}

impl CaptionProvider for RemoteCaptioner {
    fn name(&self) -> &str {
        "remote"
    }

    fn needs_image(&self) -> bool {
        true
    }

    fn caption(&self, req: &CaptionRequest<'_>) -> Result<String> {
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            match self.once(req) {
                Ok(text) => return Ok(text),
                Err(e) if !retryable(&e) => return Err(e),
                Err(e) if attempt >= self.attempts => {
                    return Err(Error::RetryExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => {
                    log::warn!(
                        "caption {} attempt {attempt} failed: {e}; retrying in {delay:?}",
                        req.metadata.id
                    );
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}
