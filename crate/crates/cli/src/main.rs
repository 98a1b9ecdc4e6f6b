use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxweave::camera::Camera;
use voxweave::grid::{self, ScalarGrid3, VectorGrid3};
use voxweave::mesh;
use voxweave::opt;
use voxweave::raster::{self, ScalarMap};
use voxweave::texture;
use voxweave_cli::config::{BackendKind, Config};
use voxweave_cli::pipeline::{self, Manifest};
use voxweave_cli::{exit, CliError};

#[derive(Parser, Debug)]
#[command(
    name = "voxweave",
    version,
    about = "Refine and texture SDF grids from multi-view normals"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Enhancer base URL for the http backend.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Enhancer request timeout in seconds.
    #[arg(long, global = true)]
    timeout: Option<f64>,
    /// Fill color for the constant backend, as r,g,b.
    #[arg(long, global = true, value_parser = parse_rgb)]
    constant_rgb: Option<[u8; 3]>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ViewArgs {
    /// Camera elevation in degrees.
    #[arg(long)]
    elevation: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    fov: Option<f64>,
    /// Camera distance in multiples of the object's largest side.
    #[arg(long)]
    radius_factor: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct OptArgs {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_n: Option<f64>,
    #[arg(long)]
    lambda_m: Option<f64>,
    #[arg(long)]
    lambda_e: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct TexArgs {
    /// Tube radius in voxels.
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    conf_threshold: Option<f32>,
    #[arg(long)]
    prompt: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a closed mesh (OBJ or PLY) to a signed distance grid.
    Mesh2sdf {
        mesh: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        padding: Option<f64>,
    },
    /// Write normal, depth and mask renders around a grid.
    Render {
        grid: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Fuse multi-view normals into a per-voxel target field.
    Fuse {
        grid: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
        /// Route each view's normals through the enhancer first.
        #[arg(long)]
        enhance: bool,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Refine a grid against a fused normal field and view masks.
    Optimize {
        grid: PathBuf,
        normal_field: PathBuf,
        /// Target masks, one per view in ring order.
        masks: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        step: Option<f64>,
        #[command(flatten)]
        opt: OptArgs,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Extract the zero level set as a triangle mesh.
    Extract {
        grid: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        iso: f32,
    },
    /// Weave a color field from a reference photo and inpainted views.
    Texture {
        grid: PathBuf,
        reference: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        /// Per-view diagnostics CSV.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        /// Directory for partial renders, masks and completions.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[command(flatten)]
        tex: TexArgs,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Run every stage and write all artifacts plus a manifest.
    Pipeline {
        #[arg(required_unless_present = "from_manifest")]
        mesh: Option<PathBuf>,
        #[arg(required_unless_present = "from_manifest")]
        reference: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Replay the inputs and configuration of an earlier run.
        #[arg(long, conflicts_with_all = ["mesh", "reference"])]
        from_manifest: Option<PathBuf>,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        texture_views: Option<usize>,
        #[arg(long)]
        no_enhance: bool,
        #[arg(long)]
        dump_partials: bool,
        #[command(flatten)]
        opt: OptArgs,
        #[command(flatten)]
        tex: TexArgs,
        #[command(flatten)]
        view: ViewArgs,
    },
}

fn parse_rgb(s: &str) -> Result<[u8; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [r, g, b] = parts.as_slice() else {
        return Err(format!("expected r,g,b, got {s:?}"));
    };
    let c = |v: &str| v.trim().parse::<u8>().map_err(|e| format!("{v:?}: {e}"));
    Ok([c(r)?, c(g)?, c(b)?])
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ViewArgs {
    fn apply(&self, c: &mut Config) {
        set(&mut c.views.elevation_deg, self.elevation);
        set(&mut c.views.width, self.width);
        set(&mut c.views.height, self.height);
        set(&mut c.views.fov_deg, self.fov);
        set(&mut c.views.radius_factor, self.radius_factor);
    }
}

impl OptArgs {
    fn apply(&self, c: &mut Config) {
        set(&mut c.optimize.iterations, self.iters);
        set(&mut c.optimize.lr, self.lr);
        set(&mut c.optimize.lambda_n, self.lambda_n);
        set(&mut c.optimize.lambda_m, self.lambda_m);
        set(&mut c.optimize.lambda_e, self.lambda_e);
    }
}

impl TexArgs {
    fn apply(&self, c: &mut Config) {
        set(&mut c.texture.radius, self.radius);
        set(&mut c.texture.confidence_threshold, self.conf_threshold);
        set(&mut c.texture.prompt, self.prompt.clone());
    }
}

fn base_config(cli: &Cli) -> Result<Config, CliError> {
    let mut c = match &cli.config {
        Some(p) => Config::from_toml_file(p)?,
        None => Config::default(),
    };
    set(&mut c.seed, cli.seed);
    if cli.threads.is_some() {
        c.threads = cli.threads;
    }
    set(&mut c.gateway.backend, cli.backend);
    if cli.endpoint.is_some() {
        c.gateway.endpoint = cli.endpoint.clone();
    }
    set(&mut c.gateway.timeout_secs, cli.timeout);
    set(&mut c.gateway.constant_rgb, cli.constant_rgb);
    Ok(c)
}

fn finish(mut c: Config) -> Result<Config, CliError> {
    c.apply_env(|k| std::env::var(k).ok())?;
    c.validate()?;
    Ok(c)
}

fn stage<T>(name: &'static str, r: voxweave::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Stage {
        stage: name,
        source,
    })
}

fn ring(c: &Config, views: Option<usize>, step: Option<f64>) -> Config {
    let mut c = c.clone();
    set(&mut c.views.count, views);
    set(&mut c.views.step_deg, step);
    c
}

fn load_sdf(stage_name: &'static str, p: &Path) -> Result<ScalarGrid3, CliError> {
    stage(stage_name, grid::read_grid(p))
}

fn backend(c: &Config) -> Result<Box<dyn voxweave::gateway::Backend>, CliError> {
    c.gateway
        .spec()?
        .build()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let base = base_config(&cli)?;
    match cli.command {
        Command::Mesh2sdf {
            mesh,
            output,
            res,
            padding,
        } => {
            let mut c = base;
            set(&mut c.sdf.resolution, res);
            set(&mut c.sdf.padding, padding);
            let c = finish(c)?;
            voxweave::exec::with_threads(c.threads, || {
                let g = stage("mesh2sdf", pipeline::mesh2sdf(&mesh, &c))?;
                stage("mesh2sdf", grid::write_grid(&g, &output))
            })
        }
        Command::Render {
            grid,
            output,
            views,
            step,
            view,
        } => {
            let mut c = ring(&base, views, step);
            view.apply(&mut c);
            let c = finish(c)?;
            voxweave::exec::with_threads(c.threads, || {
                let g = load_sdf("render", &grid)?;
                let cams = stage(
                    "render",
                    pipeline::view_cameras(&g, &c.views, c.views.count),
                )?;
                let renders = pipeline::render_views(&g, &cams);
                stage("render", pipeline::save_renders(&renders, &cams, &output))
            })
        }
        Command::Fuse {
            grid,
            output,
            views,
            step,
            enhance,
            view,
        } => {
            let mut c = ring(&base, views, step);
            view.apply(&mut c);
            c.fusion.enhance = enhance;
            let c = finish(c)?;
            let b = if enhance { Some(backend(&c)?) } else { None };
            voxweave::exec::with_threads(c.threads, || {
                let g = load_sdf("fuse", &grid)?;
                let cams = stage("fuse", pipeline::view_cameras(&g, &c.views, c.views.count))?;
                let renders = pipeline::render_views(&g, &cams);
                let report = stage(
                    "fuse",
                    pipeline::fuse(&g, &cams, &renders, b.as_deref(), &c),
                )?;
                stage("fuse", grid::write_grid(&report.field, &output))
            })
        }
        Command::Optimize {
            grid,
            normal_field,
            masks,
            output,
            history,
            step,
            opt: o,
            view,
        } => {
            let mut c = ring(&base, (!masks.is_empty()).then_some(masks.len()), step);
            view.apply(&mut c);
            o.apply(&mut c);
            let c = finish(c)?;
            voxweave::exec::with_threads(c.threads, || {
                let g = load_sdf("optimize", &grid)?;
                let field: VectorGrid3 = stage("optimize", grid::read_grid(&normal_field))?;
                let views: Vec<(Camera, ScalarMap)> = if masks.is_empty() {
                    Vec::new()
                } else {
                    let cams = stage(
                        "optimize",
                        pipeline::view_cameras(&g, &c.views, masks.len()),
                    )?;
                    let mut v = Vec::new();
                    for (cam, m) in cams.into_iter().zip(&masks) {
                        let img = stage("optimize", raster::load_gray(m))?;
                        v.push((cam, raster::gray_to_scalar(&img)));
                    }
                    v
                };
                let r = stage("optimize", pipeline::optimize(&g, &field, &views, &c))?;
                stage("optimize", grid::write_grid(&r.grid, &output))?;
                if let Some(h) = history {
                    stage(
                        "optimize",
                        pipeline::write_csv(&h, |w| opt::write_history_csv(w, &r.history)),
                    )?;
                }
                Ok(())
            })
        }
        Command::Extract { grid, output, iso } => {
            let c = finish(base)?;
            voxweave::exec::with_threads(c.threads, || {
                let g = load_sdf("extract", &grid)?;
                stage(
                    "extract",
                    mesh::save_mesh(&mesh::marching_cubes(&g, iso), &output),
                )
            })
        }
        Command::Texture {
            grid,
            reference,
            output,
            views,
            diagnostics,
            dump_dir,
            tex,
            view,
        } => {
            let mut c = base;
            set(&mut c.texture.views, views);
            tex.apply(&mut c);
            view.apply(&mut c);
            let c = finish(c)?;
            let b = backend(&c)?;
            voxweave::exec::with_threads(c.threads, || {
                let g = load_sdf("texture", &grid)?;
                let w = stage(
                    "texture",
                    pipeline::weave(&g, &reference, b.as_ref(), &c, dump_dir),
                )?;
                stage("texture", grid::write_grid(&w.color, &output))?;
                if let Some(d) = diagnostics {
                    stage(
                        "texture",
                        pipeline::write_csv(&d, |f| {
                            texture::write_diagnostics_csv(f, &w.diagnostics)
                        }),
                    )?;
                }
                Ok(())
            })
        }
        Command::Pipeline {
            mesh,
            reference,
            output,
            from_manifest,
            res,
            views,
            texture_views,
            no_enhance,
            dump_partials,
            opt: o,
            tex,
            view,
        } => {
            let (mesh, reference, c) = match from_manifest {
                Some(m) => {
                    let m = Manifest::load(&m)?;
                    (m.inputs.mesh, m.inputs.reference, m.config)
                }
                None => {
                    let mut c = ring(&base, views, None);
                    set(&mut c.sdf.resolution, res);
                    set(&mut c.texture.views, texture_views);
                    if no_enhance {
                        c.fusion.enhance = false;
                    }
                    o.apply(&mut c);
                    tex.apply(&mut c);
                    view.apply(&mut c);
                    (
                        mesh.expect("required"),
                        reference.expect("required"),
                        finish(c)?,
                    )
                }
            };
            c.validate()?;
            voxweave::exec::with_threads(c.threads, || {
                pipeline::run_pipeline(&mesh, &reference, &output, &c, dump_partials).map(|_| ())
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("voxweave: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
