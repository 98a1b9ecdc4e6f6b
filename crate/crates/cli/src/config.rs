//! Run configuration: defaults, then a TOML file, then flags, then env.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use voxweave::gateway::BackendSpec;

use crate::CliError;

pub const ENV_ENDPOINT: &str = voxweave::gateway::ENDPOINT_ENV;
pub const ENV_SEED: &str = "DW_SEED";
pub const ENV_THREADS: &str = "DW_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub threads: Option<usize>,
    pub sdf: SdfConfig,
    pub views: ViewConfig,
    pub fusion: FusionConfig,
    pub optimize: OptimizeConfig,
    pub texture: TextureConfig,
    pub gateway: GatewayConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdfConfig {
    pub resolution: usize,
    pub padding: f64,
}

impl Default for SdfConfig {
    fn default() -> Self {
        SdfConfig {
            resolution: 256,
            padding: voxweave::mesh::DEFAULT_PADDING,
        }
    }
}

/// Orbit cameras around the object's inside-voxel bounding box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub count: usize,
    pub step_deg: f64,
    pub elevation_deg: f64,
    /// Camera distance as a multiple of the bounding box's largest side.
    pub radius_factor: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            count: 8,
            step_deg: 45.0,
            elevation_deg: 0.0,
            radius_factor: 2.5,
            fov_deg: 40.0,
            width: 256,
            height: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub samples_per_ray: usize,
    pub band_voxels: f64,
    pub fill_iterations: usize,
    /// Route each view's normals through the gateway before fusing.
    pub enhance: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            samples_per_ray: 256,
            band_voxels: 1.5,
            fill_iterations: 5,
            enhance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_n: f64,
    pub lambda_m: f64,
    pub lambda_e: f64,
    pub tau_voxels: f64,
    pub mask_samples: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        let p = voxweave::opt::OptimizeParams::default();
        OptimizeConfig {
            iterations: p.iterations,
            lr: p.lr,
            lambda_n: p.weights.lambda_n,
            lambda_m: p.weights.lambda_m,
            lambda_e: p.weights.lambda_e,
            tau_voxels: p.tau_voxels,
            mask_samples: p.mask_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    pub views: usize,
    pub radius: usize,
    pub confidence_threshold: f32,
    pub reference_beta: f64,
    pub view_beta: f64,
    pub gap_fill_iterations: usize,
    pub gap_band_voxels: f64,
    pub render_steps: usize,
    pub prompt: String,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            views: 8,
            radius: 1,
            confidence_threshold: 0.03,
            reference_beta: 2.0,
            view_beta: 1.0,
            gap_fill_iterations: 5,
            gap_band_voxels: 1.5,
            render_steps: 512,
            prompt: String::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Offline,
    Identity,
    Constant,
    PushPull,
    Unsharp,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    /// With the http backend, fall back to the offline stand-ins on errors.
    pub fallback_offline: bool,
    pub constant_rgb: [u8; 3],
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::Offline,
            endpoint: None,
            timeout_secs: 120.0,
            fallback_offline: false,
            constant_rgb: [128, 128, 128],
        }
    }
}

impl GatewayConfig {
    pub fn spec(&self) -> Result<BackendSpec, CliError> {
        Ok(match self.backend {
            BackendKind::Offline => BackendSpec::Offline,
            BackendKind::Identity => BackendSpec::Identity,
            BackendKind::Constant => BackendSpec::Constant {
                rgb: self.constant_rgb,
            },
            BackendKind::PushPull => BackendSpec::PushPull,
            BackendKind::Unsharp => BackendSpec::Unsharp,
            BackendKind::Http => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .filter(|e| !e.trim().is_empty())
                    .ok_or_else(|| {
                        CliError::Config(format!(
                        "the http backend needs an endpoint: set {ENV_ENDPOINT} or gateway.endpoint"
                    ))
                    })?;
                BackendSpec::Http {
                    endpoint,
                    fallback_offline: self.fallback_offline,
                }
            }
        })
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

impl Config {
    pub fn from_toml_file(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `DW_ENHANCER_URL`, `DW_SEED` and `DW_THREADS` from `env`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        if let Some(url) = env(ENV_ENDPOINT).filter(|u| !u.trim().is_empty()) {
            self.gateway.endpoint = Some(url);
        }
        if let Some(s) = env(ENV_SEED) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_SEED} is not an integer: {s:?}")))?;
        }
        if let Some(t) = env(ENV_THREADS) {
            self.threads = Some(t.trim().parse().map_err(|_| {
                CliError::Config(format!("{ENV_THREADS} is not an integer: {t:?}"))
            })?);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.sdf.resolution < 16 {
            return bad(format!(
                "sdf.resolution must be at least 16, got {}",
                self.sdf.resolution
            ));
        }
        if !(self.sdf.padding >= 0.0) {
            return bad(format!(
                "sdf.padding must be >= 0, got {}",
                self.sdf.padding
            ));
        }
        let v = &self.views;
        if v.count == 0 || v.width == 0 || v.height == 0 {
            return bad("views.count, views.width and views.height must be positive".into());
        }
        if !(v.fov_deg > 0.0 && v.fov_deg < 180.0) || !(v.radius_factor > 0.0) {
            return bad(format!(
                "views.fov_deg must be in (0, 180) and views.radius_factor > 0, got {} and {}",
                v.fov_deg, v.radius_factor
            ));
        }
        if self.texture.views == 0 {
            return bad("texture.views must be positive".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        let o = &self.optimize;
        for (name, x) in [
            ("lr", o.lr),
            ("lambda_n", o.lambda_n),
            ("lambda_m", o.lambda_m),
            ("lambda_e", o.lambda_e),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return bad(format!("optimize.{name} must be finite and >= 0, got {x}"));
            }
        }
        if !(o.tau_voxels > 0.0) || o.mask_samples < 2 {
            return bad("optimize.tau_voxels must be > 0 and optimize.mask_samples >= 2".into());
        }
        self.gateway.spec()?;
        Ok(())
    }
}
