//! Sphere tracing of SDF grids and fixed-step ray marching.

use std::path::Path;

use glam::DVec3;

use crate::camera::Camera;
use crate::error::Result;
use crate::exec;
use crate::grid::{GridHeader, ScalarGrid3};
use crate::raster::{self, Raster};

/// Sphere-tracing thresholds, in units of the voxel size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceParams {
    pub hit_epsilon: f64,
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for TraceParams {
    fn default() -> Self {
        TraceParams {
            hit_epsilon: 0.5,
            min_step: 0.25,
            max_steps: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RayOutcome {
    Hit {
        t: f64,
        point: DVec3,
    },
    /// Left the grid box (or never entered it).
    Miss,
    /// Ran out of steps while still inside the grid box.
    Exhausted,
}

/// Parametric interval where the ray `o + t d` is inside the box, clipped to `t >= 0`.
pub fn ray_box(o: DVec3, d: DVec3, lo: DVec3, hi: DVec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut n, mut f) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
        if n > f {
            std::mem::swap(&mut n, &mut f);
        }
        t0 = t0.max(n);
        t1 = t1.min(f);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Look-ahead after an epsilon hit, in voxels, while searching for the
/// zero crossing.
const CROSSING_LOOKAHEAD: f64 = 8.0;
const BISECTION_STEPS: usize = 30;

/// Marches `t <- t + max(phi, min_step)` from the grid entry point until
/// `phi < hit_epsilon`, then locates the zero crossing past that point by
/// bisection. A ray that comes within epsilon of the surface without
/// crossing it is a miss.
pub fn trace_ray(grid: &ScalarGrid3, o: DVec3, d: DVec3, params: &TraceParams) -> RayOutcome {
    let (lo, hi) = grid.header().bounds();
    let Some((t0, t1)) = ray_box(o, d, lo, hi) else {
        return RayOutcome::Miss;
    };
    let h = grid.header().h();
    let (eps, min_step) = (params.hit_epsilon * h, params.min_step * h);
    let mut t = t0;
    let mut prev: Option<f64> = None;
    for _ in 0..params.max_steps {
        if t > t1 {
            return RayOutcome::Miss;
        }
        let phi = grid.sample_world(o + d * t);
        if phi < eps {
            return match zero_crossing(grid, o, d, prev, t, phi, t1, min_step) {
                Some(t) => RayOutcome::Hit {
                    t,
                    point: o + d * t,
                },
                None => RayOutcome::Miss,
            };
        }
        prev = Some(t);
        t += phi.max(min_step);
    }
    if t > t1 {
        RayOutcome::Miss
    } else {
        RayOutcome::Exhausted
    }
}

/// First `t` with `phi = 0` at or after an epsilon hit at `t`. `prev` is the
/// last marched position, where phi was still above epsilon.
#[allow(clippy::too_many_arguments)]
fn zero_crossing(
    grid: &ScalarGrid3,
    o: DVec3,
    d: DVec3,
    prev: Option<f64>,
    t: f64,
    phi: f64,
    t1: f64,
    step: f64,
) -> Option<f64> {
    let at = |t: f64| grid.sample_world(o + d * t);
    let (mut a, mut b) = if phi <= 0.0 {
        match prev {
            Some(p) => (p, t),
            None => return Some(t),
        }
    } else {
        let limit = (t + CROSSING_LOOKAHEAD * grid.header().h() / d.length()).min(t1);
        let mut b = t;
        loop {
            if b >= limit {
                return None;
            }
            let a = b;
            b = (b + step).min(limit);
            if at(b) <= 0.0 {
                break (a, b);
            }
        }
    };
    for _ in 0..BISECTION_STEPS {
        let m = 0.5 * (a + b);
        if at(m) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    Some(b)
}

/// Unit surface normal from the trilinearly blended voxel gradients, or
/// `fallback` where the gradient vanishes.
pub fn surface_normal(grid: &ScalarGrid3, p: DVec3, fallback: DVec3) -> DVec3 {
    let g = grid.gradient_world(p);
    let len = g.length();
    if len > 1e-12 {
        g / len
    } else {
        fallback
    }
}

/// Per-view sphere-tracing output. Misses store a zero normal, infinite
/// depth, zero mask and a zero hit point.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    pub normal_cam: Raster<[f32; 3]>,
    pub depth: Raster<f32>,
    pub mask: Raster<f32>,
    pub hits: Raster<[f32; 3]>,
}

impl ViewRender {
    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    #[inline]
    pub fn is_hit(&self, pixel: usize) -> bool {
        self.mask.data[pixel] > 0.5
    }

    pub fn hit_count(&self) -> usize {
        (0..self.mask.data.len())
            .filter(|&i| self.is_hit(i))
            .count()
    }

    /// Writes `<stem>_normal.png`, `<stem>_depth.pfm` and `<stem>_mask.png`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        raster::save_png_rgb(
            &raster::normals_to_image(&self.normal_cam),
            dir.join(format!("{stem}_normal.png")),
        )?;
        raster::write_pfm(&self.depth, dir.join(format!("{stem}_depth.pfm")))?;
        raster::save_png_gray(
            &raster::scalar_to_gray(&self.mask),
            dir.join(format!("{stem}_mask.png")),
        )
    }
}

struct PixelSample {
    normal: [f32; 3],
    depth: f32,
    mask: f32,
    hit: [f32; 3],
}

pub fn sphere_trace(grid: &ScalarGrid3, camera: &Camera) -> ViewRender {
    sphere_trace_with(grid, camera, &TraceParams::default())
}

pub fn sphere_trace_with(grid: &ScalarGrid3, camera: &Camera, params: &TraceParams) -> ViewRender {
    let (w, h) = (camera.width, camera.height);
    let rows = exec::map_range(h, |py| {
        (0..w)
            .map(|px| {
                let d = camera.ray_dir(px, py);
                match trace_ray(grid, camera.position, d, params) {
                    RayOutcome::Hit { t, point } => {
                        let n = surface_normal(grid, point, -d);
                        let nc = camera.world_to_camera(n);
                        PixelSample {
                            normal: [nc.x as f32, nc.y as f32, nc.z as f32],
                            depth: t as f32,
                            mask: 1.0,
                            hit: [point.x as f32, point.y as f32, point.z as f32],
                        }
                    }
                    _ => PixelSample {
                        normal: [0.0; 3],
                        depth: f32::INFINITY,
                        mask: 0.0,
                        hit: [0.0; 3],
                    },
                }
            })
            .collect::<Vec<_>>()
    });
    let px: Vec<PixelSample> = rows.into_iter().flatten().collect();
    ViewRender {
        normal_cam: Raster {
            width: w,
            height: h,
            data: px.iter().map(|p| p.normal).collect(),
        },
        depth: Raster {
            width: w,
            height: h,
            data: px.iter().map(|p| p.depth).collect(),
        },
        mask: Raster {
            width: w,
            height: h,
            data: px.iter().map(|p| p.mask).collect(),
        },
        hits: Raster {
            width: w,
            height: h,
            data: px.iter().map(|p| p.hit).collect(),
        },
    }
}

/// One ray passing through the near-surface band of one voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emission {
    /// Row-major pixel index of the emitting ray.
    pub pixel: u32,
    pub voxel: u32,
    /// How many band crossings the ray completed before this one (0 = first surface).
    pub segment: u16,
}

/// Voxel emissions of every pixel ray of one view, in pixel order and
/// front-to-back along each ray. A ray emits a given voxel at most once.
#[derive(Clone, Debug, PartialEq)]
pub struct RayEmissions {
    pub width: usize,
    pub height: usize,
    pub grid_dims: [usize; 3],
    pub entries: Vec<Emission>,
}

impl RayEmissions {
    /// Ray counts per voxel, sorted by voxel index.
    pub fn voxel_weights(&self) -> Vec<(usize, u32)> {
        let mut voxels: Vec<u32> = self.entries.iter().map(|e| e.voxel).collect();
        voxels.sort_unstable();
        let mut out: Vec<(usize, u32)> = Vec::new();
        for v in voxels {
            match out.last_mut() {
                Some((last, c)) if *last == v as usize => *c += 1,
                _ => out.push((v as usize, 1)),
            }
        }
        out
    }

    /// Concatenates another view's emissions of the same size (for ray-count additivity).
    pub fn merged(&self, other: &RayEmissions) -> RayEmissions {
        let mut entries = self.entries.clone();
        entries.extend_from_slice(&other.entries);
        RayEmissions {
            entries,
            ..self.clone()
        }
    }
}

/// Samples every pixel ray at `samples_per_ray` equidistant points across
/// the grid box; samples with `|phi| <= band` (world units) emit the voxel
/// nearest to them.
pub fn ray_march_accumulate(
    grid: &ScalarGrid3,
    camera: &Camera,
    samples_per_ray: usize,
    band: f64,
) -> RayEmissions {
    let samples = samples_per_ray.max(2);
    let hd: GridHeader = *grid.header();
    let (lo, hi) = hd.bounds();
    let (w, h) = (camera.width, camera.height);
    let rows = exec::map_range(h, |py| {
        let mut out = Vec::new();
        for px in 0..w {
            let pixel = (py * w + px) as u32;
            let d = camera.ray_dir(px, py);
            let Some((t0, t1)) = ray_box(camera.position, d, lo, hi) else {
                continue;
            };
            let first = out.len();
            let mut segment = 0u16;
            let mut in_band = false;
            for k in 0..samples {
                let t = t0 + (t1 - t0) * k as f64 / (samples - 1) as f64;
                let g = hd.world_to_grid(camera.position + d * t);
                let phi = grid.sample_trilinear(g);
                if phi.abs() <= band {
                    in_band = true;
                    if let Some(v) = hd.nearest_voxel(g) {
                        let v = v as u32;
                        if !out[first..].iter().any(|e: &Emission| e.voxel == v) {
                            out.push(Emission {
                                pixel,
                                voxel: v,
                                segment,
                            });
                        }
                    }
                } else if in_band {
                    in_band = false;
                    segment = segment.saturating_add(1);
                }
            }
        }
        out
    });
    RayEmissions {
        width: w,
        height: h,
        grid_dims: hd.dims,
        entries: rows.into_iter().flatten().collect(),
    }
}

/// Bounding box of all voxels with `phi < 0` (center and largest side), or
/// `None` when nothing is inside.
pub fn inside_bounds(grid: &ScalarGrid3) -> Option<(DVec3, f64)> {
    let hd = grid.header();
    let mut lo = DVec3::splat(f64::INFINITY);
    let mut hi = DVec3::splat(f64::NEG_INFINITY);
    for (i, v) in grid.data().iter().enumerate() {
        if *v < 0.0 {
            let p = hd.voxel_center(i);
            lo = lo.min(p);
            hi = hi.max(p);
        }
    }
    lo.x.is_finite()
        .then(|| ((lo + hi) * 0.5, (hi - lo).max_element() + hd.h()))
}
