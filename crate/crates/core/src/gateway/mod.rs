//! Seam to external image-to-image models for normal enhancement and
//! mask-conditioned texture inpainting.

mod http;
mod standins;

use std::time::Duration;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, ENDPOINT_ENV};
pub use standins::{
    push_pull, sharpen_normals, ConstantFill, Identity, OfflineBackend, PushPullFill,
    UnsharpNormals,
};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("enhancer timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("enhancer returned status {status}: {body}")]
    Service { status: u16, body: String },
    #[error("malformed enhancer response: {0}")]
    Malformed(String),
    #[error("invalid enhance request: {0}")]
    InvalidRequest(String),
    #[error("enhancer configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceKind {
    NormalEnhance,
    TextureInpaint,
}

impl EnhanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnhanceKind::NormalEnhance => "normal_enhance",
            EnhanceKind::TextureInpaint => "texture_inpaint",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnhanceImages {
    pub normals: Option<RgbImage>,
    pub partial_rgb: Option<RgbImage>,
    /// Nonzero where the backend may paint.
    pub mask: Option<GrayImage>,
    pub reference: Option<RgbImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceRequest {
    pub kind: EnhanceKind,
    pub images: EnhanceImages,
    pub prompt: String,
    pub seed: u64,
    pub timeout: Duration,
    pub metadata: Option<serde_json::Value>,
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

impl EnhanceRequest {
    pub fn normal_enhance(normals: RgbImage, prompt: impl Into<String>, seed: u64) -> Self {
        EnhanceRequest {
            kind: EnhanceKind::NormalEnhance,
            images: EnhanceImages {
                normals: Some(normals),
                ..Default::default()
            },
            prompt: prompt.into(),
            seed,
            timeout: DEFAULT_TIMEOUT,
            metadata: None,
        }
    }

    pub fn texture_inpaint(
        normals: RgbImage,
        partial_rgb: RgbImage,
        mask: GrayImage,
        reference: RgbImage,
        prompt: impl Into<String>,
        seed: u64,
    ) -> Self {
        EnhanceRequest {
            kind: EnhanceKind::TextureInpaint,
            images: EnhanceImages {
                normals: Some(normals),
                partial_rgb: Some(partial_rgb),
                mask: Some(mask),
                reference: Some(reference),
            },
            prompt: prompt.into(),
            seed,
            timeout: DEFAULT_TIMEOUT,
            metadata: None,
        }
    }

    /// The image the response replaces: normals or the partial texture.
    pub fn primary(&self) -> Option<&RgbImage> {
        match self.kind {
            EnhanceKind::NormalEnhance => self.images.normals.as_ref(),
            EnhanceKind::TextureInpaint => self.images.partial_rgb.as_ref(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let missing = |name: &str| {
            GatewayError::InvalidRequest(format!("{} needs a {name} image", self.kind.as_str()))
        };
        let normals = self
            .images
            .normals
            .as_ref()
            .ok_or_else(|| missing("normals"))?;
        if self.kind == EnhanceKind::TextureInpaint {
            let partial = self
                .images
                .partial_rgb
                .as_ref()
                .ok_or_else(|| missing("partial_rgb"))?;
            let mask = self.images.mask.as_ref().ok_or_else(|| missing("mask"))?;
            self.images
                .reference
                .as_ref()
                .ok_or_else(|| missing("reference"))?;
            if partial.dimensions() != normals.dimensions()
                || mask.dimensions() != normals.dimensions()
            {
                return Err(GatewayError::InvalidRequest(format!(
                    "normals {:?}, partial_rgb {:?} and mask {:?} differ in size",
                    normals.dimensions(),
                    partial.dimensions(),
                    mask.dimensions()
                )));
            }
        }
        if normals.width() == 0 || normals.height() == 0 {
            return Err(GatewayError::InvalidRequest("empty image".into()));
        }
        Ok(())
    }
}

/// A model endpoint or local stand-in.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError>;
}

/// Validates the request, calls the backend, checks the response size and,
/// for inpainting, keeps every unmasked pixel of the partial texture.
pub fn enhance(request: &EnhanceRequest, backend: &dyn Backend) -> Result<RgbImage, GatewayError> {
    request.validate()?;
    let primary = request.primary().expect("validated");
    let response = backend.call(request)?;
    if response.dimensions() != primary.dimensions() {
        return Err(GatewayError::Malformed(format!(
            "expected {}x{} image, got {}x{}",
            primary.width(),
            primary.height(),
            response.width(),
            response.height()
        )));
    }
    Ok(match request.kind {
        EnhanceKind::NormalEnhance => response,
        EnhanceKind::TextureInpaint => composite(
            primary,
            &response,
            request.images.mask.as_ref().expect("validated"),
        ),
    })
}

/// `mask ? response : base` per pixel, with mask values above 127 set.
pub fn composite(base: &RgbImage, response: &RgbImage, mask: &GrayImage) -> RgbImage {
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        if mask.get_pixel(x, y).0[0] > 127 {
            *response.get_pixel(x, y)
        } else {
            *base.get_pixel(x, y)
        }
    })
}

/// Tries `primary` and, on any gateway error, `fallback`.
pub struct WithFallback {
    pub primary: Box<dyn Backend>,
    pub fallback: Box<dyn Backend>,
}

impl Backend for WithFallback {
    fn name(&self) -> &str {
        self.primary.name()
    }

    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError> {
        self.primary.call(request).or_else(|e| {
            log::warn!(
                "{} failed ({e}); using {}",
                self.primary.name(),
                self.fallback.name()
            );
            self.fallback.call(request)
        })
    }
}

/// Serializable backend selection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendSpec {
    Identity,
    Constant {
        rgb: [u8; 3],
    },
    Unsharp,
    PushPull,
    /// Unsharp normals and push-pull inpainting.
    Offline,
    Http {
        endpoint: String,
        fallback_offline: bool,
    },
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn Backend>, GatewayError> {
        Ok(match self {
            BackendSpec::Identity => Box::new(Identity),
            BackendSpec::Constant { rgb } => Box::new(ConstantFill(*rgb)),
            BackendSpec::Unsharp => Box::new(UnsharpNormals::default()),
            BackendSpec::PushPull => Box::new(PushPullFill),
            BackendSpec::Offline => Box::new(OfflineBackend::default()),
            BackendSpec::Http {
                endpoint,
                fallback_offline,
            } => {
                let http = Box::new(HttpBackend::new(endpoint)?);
                if *fallback_offline {
                    Box::new(WithFallback {
                        primary: http,
                        fallback: Box::new(OfflineBackend::default()),
                    })
                } else {
                    http
                }
            }
        })
    }
}
