//! JSON + base64 PNG client for a remote enhancer.

use std::collections::BTreeMap;
use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Backend, EnhanceRequest, GatewayError};

pub const ENDPOINT_ENV: &str = "DW_ENHANCER_URL";

pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    kind: &'a str,
    prompt: &'a str,
    seed: u64,
    images: BTreeMap<&'static str, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metadata: Option<&'a serde_json::Value>,
}

#[derive(Deserialize)]
struct WireResponse {
    image: String,
}

fn encode_png(img: DynamicImage) -> Result<String, GatewayError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| GatewayError::InvalidRequest(format!("png encoding failed: {e}")))?;
    Ok(STANDARD.encode(buf.into_inner()))
}

fn decode_png(data: &str) -> Result<RgbImage, GatewayError> {
    let bytes = STANDARD
        .decode(data.trim())
        .map_err(|e| GatewayError::Malformed(format!("image is not base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| GatewayError::Malformed(format!("image is not a PNG: {e}")))?;
    Ok(img.to_rgb8())
}

enum Attempt {
    Done(RgbImage),
    Retry(GatewayError),
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>) -> Result<Self, GatewayError> {
        let endpoint = endpoint.into().trim_end_matches('/').to_string();
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(GatewayError::Config(format!(
                "endpoint must be an http(s) URL, got {endpoint:?}"
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpBackend { endpoint, client })
    }

    /// Reads the endpoint from `DW_ENHANCER_URL`.
    pub fn from_env() -> Result<Self, GatewayError> {
        match std::env::var(ENDPOINT_ENV) {
            Ok(url) if !url.trim().is_empty() => Self::new(url),
            _ => Err(GatewayError::Config(format!("{ENDPOINT_ENV} is not set"))),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn body(request: &EnhanceRequest) -> Result<String, GatewayError> {
        let mut images = BTreeMap::new();
        let imgs = &request.images;
        if let Some(i) = &imgs.normals {
            images.insert("normals", encode_png(DynamicImage::ImageRgb8(i.clone()))?);
        }
        if let Some(i) = &imgs.partial_rgb {
            images.insert(
                "partial_rgb",
                encode_png(DynamicImage::ImageRgb8(i.clone()))?,
            );
        }
        if let Some(i) = &imgs.mask {
            images.insert("mask", encode_png(DynamicImage::ImageLuma8(i.clone()))?);
        }
        if let Some(i) = &imgs.reference {
            images.insert("reference", encode_png(DynamicImage::ImageRgb8(i.clone()))?);
        }
        let wire = WireRequest {
            kind: request.kind.as_str(),
            prompt: &request.prompt,
            seed: request.seed,
            images,
            metadata: request.metadata.as_ref(),
        };
        serde_json::to_string(&wire).map_err(|e| GatewayError::InvalidRequest(e.to_string()))
    }

    fn attempt(&self, request: &EnhanceRequest, body: &str) -> Result<Attempt, GatewayError> {
        let sent = self
            .client
            .post(format!("{}/v1/enhance", self.endpoint))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .timeout(request.timeout)
            .body(body.to_string())
            .send();
        let resp = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Ok(Attempt::Retry(GatewayError::Timeout(request.timeout)))
            }
            Err(e) => return Ok(Attempt::Retry(GatewayError::Transport(e.to_string()))),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => {
                return Ok(Attempt::Retry(GatewayError::Timeout(request.timeout)))
            }
            Err(e) => return Ok(Attempt::Retry(GatewayError::Transport(e.to_string()))),
        };
        if status.is_server_error() {
            return Ok(Attempt::Retry(GatewayError::Service {
                status: status.as_u16(),
                body: text,
            }));
        }
        if !status.is_success() {
            return Err(GatewayError::Service {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Malformed(format!("bad JSON body: {e}")))?;
        Ok(Attempt::Done(decode_png(&parsed.image)?))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    /// One retry, with the same seed, on timeouts, transport errors and 5xx.
    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError> {
        let body = Self::body(request)?;
        match self.attempt(request, &body)? {
            Attempt::Done(img) => Ok(img),
            Attempt::Retry(first) => {
                log::warn!("enhancer request failed ({first}); retrying once");
                match self.attempt(request, &body)? {
                    Attempt::Done(img) => Ok(img),
                    Attempt::Retry(e) => Err(e),
                }
            }
        }
    }
}
