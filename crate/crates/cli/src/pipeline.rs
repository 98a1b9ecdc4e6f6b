//! Stage runners shared by the subcommands and the full pipeline.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use voxweave::camera::{orbit_camera, Camera};
use voxweave::fusion::{self, FusionParams, FusionReport};
use voxweave::gateway::{self, Backend, EnhanceRequest};
use voxweave::grid::{self, ColorGrid3, ScalarGrid3, VectorGrid3};
use voxweave::mesh::{self, PlyEncoding, TriMesh};
use voxweave::opt::{self, LossWeights, OptimizeParams, Refinement};
use voxweave::raster::{self, RgbMap, ScalarMap};
use voxweave::texture::{self, ProjectionParams, Weave, WeaveParams};
use voxweave::trace::{self, ViewRender};

use crate::config::{Config, ViewConfig};
use crate::CliError;

type StageResult<T> = Result<T, CliError>;

fn in_stage<T>(stage: &'static str, r: voxweave::Result<T>) -> StageResult<T> {
    r.map_err(|source| CliError::Stage { stage, source })
}

fn io_err(path: &Path, e: std::io::Error) -> voxweave::Error {
    voxweave::Error::io(path, e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub name: String,
    pub seconds: f64,
}

#[derive(Default)]
pub struct Timer {
    pub stages: Vec<StageTime>,
}

impl Timer {
    pub fn run<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce() -> StageResult<T>,
    ) -> StageResult<T> {
        log::info!("stage {name}");
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTime {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Ring of orbit cameras around the object's inside voxels.
pub fn view_cameras(
    sdf: &ScalarGrid3,
    views: &ViewConfig,
    count: usize,
) -> voxweave::Result<Vec<Camera>> {
    let (center, extent) = trace::inside_bounds(sdf).ok_or_else(|| {
        voxweave::Error::InvalidInput("grid has no inside voxels to look at".into())
    })?;
    (0..count)
        .map(|k| {
            orbit_camera(
                views.step_deg * k as f64,
                views.elevation_deg,
                views.radius_factor * extent,
                center,
                (views.width, views.height),
                views.fov_deg,
            )
        })
        .collect()
}

/// Front camera (azimuth 0, elevation 0) for the reference photo.
pub fn reference_camera(sdf: &ScalarGrid3, views: &ViewConfig) -> voxweave::Result<Camera> {
    let front = ViewConfig {
        step_deg: 0.0,
        elevation_deg: 0.0,
        ..views.clone()
    };
    Ok(view_cameras(sdf, &front, 1)?.remove(0))
}

/// Loads a reference photo resampled to the camera size.
pub fn load_reference(path: &Path, camera: &Camera) -> voxweave::Result<RgbMap> {
    let img = raster::load_rgb(path)?;
    let (w, h) = (camera.width as u32, camera.height as u32);
    let img = if img.dimensions() == (w, h) {
        img
    } else {
        image::imageops::resize(&img, w, h, FilterType::Triangle)
    };
    Ok(raster::image_to_rgb(&img))
}

pub fn mesh2sdf(mesh_path: &Path, cfg: &Config) -> voxweave::Result<ScalarGrid3> {
    let m = mesh::load_mesh(mesh_path)?;
    mesh::mesh_to_sdf(&m, cfg.sdf.resolution, cfg.sdf.padding)
}

pub fn render_views(sdf: &ScalarGrid3, cameras: &[Camera]) -> Vec<ViewRender> {
    cameras
        .iter()
        .map(|c| trace::sphere_trace(sdf, c))
        .collect()
}

pub fn save_renders(
    renders: &[ViewRender],
    cameras: &[Camera],
    dir: &Path,
) -> voxweave::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (k, r) in renders.iter().enumerate() {
        r.save(dir, &format!("view_{k:02}"))?;
    }
    let path = dir.join("cameras.json");
    let f = File::create(&path).map_err(|e| io_err(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), cameras)
        .map_err(|e| voxweave::Error::Format(e.to_string()))
}

/// Sends a render's normal map through the gateway and decodes the result
/// back onto the hit pixels.
pub fn enhance_render(
    render: &ViewRender,
    backend: &dyn Backend,
    cfg: &Config,
    view: usize,
) -> voxweave::Result<ViewRender> {
    let mut req = EnhanceRequest::normal_enhance(
        raster::normals_to_image(&render.normal_cam),
        cfg.texture.prompt.clone(),
        cfg.seed.wrapping_add(view as u64),
    );
    req.timeout = cfg.gateway.timeout();
    let img = gateway::enhance(&req, backend)?;
    let mut out = render.clone();
    for (i, px) in img.pixels().enumerate() {
        if render.is_hit(i) {
            let n = raster::decode_normal(px.0);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 1e-6 {
                out.normal_cam.data[i] = n.map(|c| c / len);
            }
        }
    }
    Ok(out)
}

pub fn fuse(
    sdf: &ScalarGrid3,
    cameras: &[Camera],
    renders: &[ViewRender],
    backend: Option<&dyn Backend>,
    cfg: &Config,
) -> voxweave::Result<FusionReport> {
    let mut views = Vec::with_capacity(cameras.len());
    for (k, (c, r)) in cameras.iter().zip(renders).enumerate() {
        let r = match backend {
            Some(b) => enhance_render(r, b, cfg, k)?,
            None => r.clone(),
        };
        views.push((c.clone(), r));
    }
    let params = FusionParams {
        samples_per_ray: cfg.fusion.samples_per_ray,
        band_voxels: cfg.fusion.band_voxels,
        fill_iterations: cfg.fusion.fill_iterations,
    };
    let report = fusion::fuse_views(sdf, &views, &params)?;
    if report.degenerate > 0 {
        log::warn!(
            "{} voxels had cancelling normals and were dropped",
            report.degenerate
        );
    }
    Ok(report)
}

pub fn optimize_params(cfg: &Config) -> OptimizeParams {
    let o = &cfg.optimize;
    OptimizeParams {
        weights: LossWeights {
            lambda_n: o.lambda_n,
            lambda_m: o.lambda_m,
            lambda_e: o.lambda_e,
        },
        iterations: o.iterations,
        lr: o.lr,
        tau_voxels: o.tau_voxels,
        mask_samples: o.mask_samples,
    }
}

pub fn optimize(
    sdf: &ScalarGrid3,
    target: &VectorGrid3,
    views: &[(Camera, ScalarMap)],
    cfg: &Config,
) -> voxweave::Result<Refinement> {
    if cfg.optimize.iterations == 0 {
        return Ok(Refinement {
            grid: sdf.clone(),
            history: Vec::new(),
        });
    }
    opt::optimize_sdf(sdf, target, views, &optimize_params(cfg))
}

pub fn weave_params(cfg: &Config, dump_dir: Option<PathBuf>) -> WeaveParams {
    let t = &cfg.texture;
    WeaveParams {
        projection: ProjectionParams {
            radius: t.radius,
            confidence_threshold: t.confidence_threshold,
            beta: t.view_beta,
            render_steps: t.render_steps,
        },
        reference_beta: t.reference_beta,
        view_beta: t.view_beta,
        gap_fill_iterations: t.gap_fill_iterations,
        gap_band_voxels: t.gap_band_voxels,
        prompt: t.prompt.clone(),
        seed: cfg.seed,
        timeout: cfg.gateway.timeout(),
        dump_dir,
    }
}

pub fn weave(
    sdf: &ScalarGrid3,
    reference_path: &Path,
    backend: &dyn Backend,
    cfg: &Config,
    dump_dir: Option<PathBuf>,
) -> voxweave::Result<Weave> {
    let ref_cam = reference_camera(sdf, &cfg.views)?;
    let reference = load_reference(reference_path, &ref_cam)?;
    let step = 360.0 / cfg.texture.views as f64;
    let ring = ViewConfig {
        step_deg: step,
        ..cfg.views.clone()
    };
    let cameras = view_cameras(sdf, &ring, cfg.texture.views)?;
    texture::weave_texture(
        sdf,
        (&ref_cam, &reference),
        &cameras,
        backend,
        &weave_params(cfg, dump_dir),
    )
}

/// Color renders of the textured surface around the configured ring.
pub fn turntable(
    sdf: &ScalarGrid3,
    color: &ColorGrid3,
    cfg: &Config,
    dir: &Path,
) -> voxweave::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let cameras = view_cameras(sdf, &cfg.views, cfg.views.count)?;
    let show_all = ProjectionParams {
        confidence_threshold: 0.0,
        ..ProjectionParams::default()
    };
    let mut out = Vec::new();
    for (k, cam) in cameras.iter().enumerate() {
        let p = texture::render_partial_texture(color, sdf, cam, &show_all)?;
        let path = dir.join(format!("turntable_{k:02}.png"));
        raster::save_png_rgb(&raster::rgb_to_image(&p.rgb), &path)?;
        out.push(path);
    }
    Ok(out)
}

pub fn save_colored_mesh(mesh: &TriMesh, color: &ColorGrid3, path: &Path) -> voxweave::Result<()> {
    let colors = texture::vertex_colors(color, mesh);
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    mesh::save_ply_colored_to(
        mesh,
        &colors,
        BufWriter::new(f),
        PlyEncoding::BinaryLittleEndian,
    )
    .map_err(|e| io_err(path, e))
}

pub fn write_csv(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> voxweave::Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| io_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInputs {
    pub mesh: PathBuf,
    pub reference: PathBuf,
}

/// Everything needed to replay a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub inputs: ManifestInputs,
    pub seed: u64,
    pub config: Config,
    pub stages: Vec<StageTime>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Runs every stage, writing intermediates into `out` and finishing with
/// `manifest.json`.
pub fn run_pipeline(
    mesh_path: &Path,
    reference: &Path,
    out: &Path,
    cfg: &Config,
    dump_partials: bool,
) -> StageResult<Manifest> {
    cfg.validate()?;
    let backend = cfg
        .gateway
        .spec()
        .and_then(|s| s.build().map_err(|e| CliError::Config(e.to_string())))?;
    in_stage(
        "setup",
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e)),
    )?;
    let mut timer = Timer::default();
    let mut outputs = Vec::new();
    let record = |p: PathBuf, outputs: &mut Vec<PathBuf>| {
        outputs.push(p.strip_prefix(out).unwrap_or(&p).to_path_buf())
    };

    let sdf = timer.run("mesh2sdf", || {
        let g = in_stage("mesh2sdf", mesh2sdf(mesh_path, cfg))?;
        in_stage("mesh2sdf", grid::write_grid(&g, out.join("sdf.dwgrid")))?;
        Ok(g)
    })?;
    record(out.join("sdf.dwgrid"), &mut outputs);

    let (cameras, renders) = timer.run("render", || {
        let cams = in_stage("render", view_cameras(&sdf, &cfg.views, cfg.views.count))?;
        let renders = render_views(&sdf, &cams);
        in_stage(
            "render",
            save_renders(&renders, &cams, &out.join("renders")),
        )?;
        Ok((cams, renders))
    })?;
    record(out.join("renders"), &mut outputs);

    let field = timer.run("fuse", || {
        let b = cfg.fusion.enhance.then_some(backend.as_ref());
        let report = in_stage("fuse", fuse(&sdf, &cameras, &renders, b, cfg))?;
        in_stage(
            "fuse",
            grid::write_grid(&report.field, out.join("normals.dwgrid")),
        )?;
        Ok(report.field)
    })?;
    record(out.join("normals.dwgrid"), &mut outputs);

    let refined = timer.run("optimize", || {
        let views: Vec<(Camera, ScalarMap)> = cameras
            .iter()
            .cloned()
            .zip(renders.iter().map(|r| r.mask.clone()))
            .collect();
        let r = in_stage("optimize", optimize(&sdf, &field, &views, cfg))?;
        in_stage(
            "optimize",
            grid::write_grid(&r.grid, out.join("refined.dwgrid")),
        )?;
        let csv = out.join("loss_history.csv");
        in_stage(
            "optimize",
            write_csv(&csv, |w| opt::write_history_csv(w, &r.history)),
        )?;
        Ok(r.grid)
    })?;
    record(out.join("refined.dwgrid"), &mut outputs);
    record(out.join("loss_history.csv"), &mut outputs);

    let surface = timer.run("extract", || {
        let m = mesh::marching_cubes(&refined, 0.0);
        in_stage("extract", mesh::save_mesh(&m, out.join("mesh.ply")))?;
        Ok(m)
    })?;
    record(out.join("mesh.ply"), &mut outputs);

    let woven = timer.run("texture", || {
        let dump = dump_partials.then(|| out.join("texture_views"));
        let w = in_stage(
            "texture",
            weave(&refined, reference, backend.as_ref(), cfg, dump),
        )?;
        in_stage(
            "texture",
            grid::write_grid(&w.color, out.join("color.dwgrid")),
        )?;
        in_stage(
            "texture",
            write_csv(&out.join("texture_views.csv"), |f| {
                texture::write_diagnostics_csv(f, &w.diagnostics)
            }),
        )?;
        in_stage(
            "texture",
            save_colored_mesh(&surface, &w.color, &out.join("mesh_colored.ply")),
        )?;
        Ok(w)
    })?;
    for f in ["color.dwgrid", "texture_views.csv", "mesh_colored.ply"] {
        record(out.join(f), &mut outputs);
    }

    let renders = timer.run("turntable", || {
        in_stage(
            "turntable",
            turntable(&refined, &woven.color, cfg, &out.join("turntable")),
        )
    })?;
    for p in renders {
        record(p, &mut outputs);
    }

    let manifest = Manifest {
        tool: "voxweave".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        inputs: ManifestInputs {
            mesh: absolute(mesh_path),
            reference: absolute(reference),
        },
        seed: cfg.seed,
        config: cfg.clone(),
        stages: timer.stages,
        outputs,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    in_stage(
        "manifest",
        std::fs::write(&path, text).map_err(|e| io_err(&path, e)),
    )?;
    Ok(manifest)
}
