//! Sequential volumetric texturing: spiral view order, partial renders with
//! incompleteness masks, inpainting through the gateway, tube projection
//! and gap filling.

use std::io::Write;
use std::path::PathBuf;

use glam::DVec3;
use image::{GrayImage, Luma, RgbImage};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec;
use crate::gateway::{self, Backend, EnhanceRequest};
use crate::grid::{ColorGrid3, ColorVoxel, ScalarGrid3};
use crate::mesh::TriMesh;
use crate::raster::{self, Raster, RgbMap, ScalarMap};
use crate::trace::{surface_normal, trace_ray, RayOutcome, TraceParams};

/// Gray written into pixels that still need content.
pub const NEUTRAL_GRAY: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProjectionParams {
    /// Tube radius and half-depth in voxels.
    pub radius: usize,
    pub confidence_threshold: f32,
    pub beta: f64,
    /// Step cap for rendering rays.
    pub render_steps: usize,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            radius: 1,
            confidence_threshold: 0.03,
            beta: 1.0,
            render_steps: 512,
        }
    }
}

impl ProjectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold >= 0.0) || !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidInput(format!(
                "projection needs threshold >= 0 and finite beta >= 0, got {} and {}",
                self.confidence_threshold, self.beta
            )));
        }
        Ok(())
    }
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

const ANGLE_TIE: f64 = 1e-9;

/// Greedy farthest-azimuth order. The first view is the one closest to
/// `reference`; each next view maximizes its smallest circular distance to
/// the views already chosen. Ties go to the smaller azimuth.
pub fn spiral_order(azimuths: &[f64], reference: f64) -> Vec<usize> {
    let n = azimuths.len();
    if n == 0 {
        return Vec::new();
    }
    let az: Vec<f64> = azimuths.iter().map(|a| a.rem_euclid(360.0)).collect();
    let better = |score: f64, i: usize, best: Option<(f64, usize)>, maximize: bool| match best {
        None => true,
        Some((s, j)) => {
            let diff = if maximize { score - s } else { s - score };
            diff > ANGLE_TIE || (diff.abs() <= ANGLE_TIE && az[i] < az[j])
        }
    };
    let mut best = None;
    for i in 0..n {
        let d = circular_distance(az[i], reference);
        if better(d, i, best, false) {
            best = Some((d, i));
        }
    }
    let mut order = vec![best.unwrap().1];
    let mut used = vec![false; n];
    used[order[0]] = true;
    while order.len() < n {
        let mut best = None;
        for i in (0..n).filter(|&i| !used[i]) {
            let d = order
                .iter()
                .map(|&j| circular_distance(az[i], az[j]))
                .fold(f64::INFINITY, f64::min);
            if better(d, i, best, true) {
                best = Some((d, i));
            }
        }
        let pick = best.unwrap().1;
        used[pick] = true;
        order.push(pick);
    }
    order
}

/// Current texture as seen from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialTexture {
    /// Rendered colors; incomplete pixels hold neutral gray, background black.
    pub rgb: RgbMap,
    /// 1 where the view still needs content.
    pub incomplete: ScalarMap,
    /// 1 on the object silhouette (hits and exhausted rays).
    pub occupancy: ScalarMap,
    /// Camera-space surface normals, zero off the surface.
    pub normals: Raster<[f32; 3]>,
    /// World-space hit points.
    pub hits: Raster<[f32; 3]>,
    /// 1 where the ray hit the surface.
    pub hit_mask: ScalarMap,
}

impl PartialTexture {
    pub fn silhouette_pixels(&self) -> usize {
        self.occupancy.data.iter().filter(|v| **v > 0.5).count()
    }

    pub fn incomplete_pixels(&self) -> usize {
        self.incomplete.data.iter().filter(|v| **v > 0.5).count()
    }
}

fn check_aligned(color: &ColorGrid3, sdf: &ScalarGrid3) -> Result<()> {
    color.header().check_same_lattice(sdf.header())
}

/// Sphere-traces every pixel and reads the color field at the hit.
pub fn render_partial_texture(
    color: &ColorGrid3,
    sdf: &ScalarGrid3,
    camera: &Camera,
    params: &ProjectionParams,
) -> Result<PartialTexture> {
    check_aligned(color, sdf)?;
    let tp = TraceParams {
        max_steps: params.render_steps,
        ..TraceParams::default()
    };
    let hd = *sdf.header();
    let (w, h) = (camera.width, camera.height);
    struct Px {
        rgb: [f32; 3],
        incomplete: f32,
        occupied: f32,
        normal: [f32; 3],
        hit: [f32; 3],
        is_hit: f32,
    }
    let rows = exec::map_range(h, |py| {
        (0..w)
            .map(|px| {
                let d = camera.ray_dir(px, py);
                match trace_ray(sdf, camera.position, d, &tp) {
                    RayOutcome::Hit { point, .. } => {
                        let n = camera.world_to_camera(surface_normal(sdf, point, -d));
                        let nearest = hd.nearest_voxel(hd.world_to_grid(point));
                        let conf = nearest.map_or(0.0, |v| color.data()[v].w);
                        let (rgb, _) = color.sample_world(point);
                        let incomplete = conf < params.confidence_threshold;
                        Px {
                            rgb: if incomplete { [NEUTRAL_GRAY; 3] } else { rgb },
                            incomplete: incomplete as u8 as f32,
                            occupied: 1.0,
                            normal: [n.x as f32, n.y as f32, n.z as f32],
                            hit: [point.x as f32, point.y as f32, point.z as f32],
                            is_hit: 1.0,
                        }
                    }
                    RayOutcome::Exhausted => Px {
                        rgb: [NEUTRAL_GRAY; 3],
                        incomplete: 1.0,
                        occupied: 1.0,
                        normal: [0.0; 3],
                        hit: [0.0; 3],
                        is_hit: 0.0,
                    },
                    RayOutcome::Miss => Px {
                        rgb: [0.0; 3],
                        incomplete: 0.0,
                        occupied: 0.0,
                        normal: [0.0; 3],
                        hit: [0.0; 3],
                        is_hit: 0.0,
                    },
                }
            })
            .collect::<Vec<_>>()
    });
    let px: Vec<Px> = rows.into_iter().flatten().collect();
    let raster = |f: &dyn Fn(&Px) -> f32| Raster {
        width: w,
        height: h,
        data: px.iter().map(f).collect(),
    };
    let raster3 = |f: &dyn Fn(&Px) -> [f32; 3]| Raster {
        width: w,
        height: h,
        data: px.iter().map(f).collect(),
    };
    Ok(PartialTexture {
        rgb: raster3(&|p| p.rgb),
        incomplete: raster(&|p| p.incomplete),
        occupancy: raster(&|p| p.occupied),
        normals: raster3(&|p| p.normal),
        hits: raster3(&|p| p.hit),
        hit_mask: raster(&|p| p.is_hit),
    })
}

/// Linear falloff over the tube: 1 at the hit, reaching 0 one voxel beyond `r`.
pub fn w_blend(depth_offset: i64, radial_offset: usize, r: usize) -> f64 {
    let r1 = (r + 1) as f64;
    (1.0 - depth_offset.unsigned_abs() as f64 / r1) * (1.0 - radial_offset as f64 / r1)
}

/// View confidence: alignment of normal and view ray, view priority, and
/// falloff with camera distance.
pub fn w_conf(normal: DVec3, view_dir: DVec3, beta: f64, distance: f64) -> f64 {
    normal.dot(view_dir).abs() * beta / (1.0 + distance)
}

/// Offsets of the discretized tube: `(depth, radial, direction)` where
/// direction 0 is the axis and 1..=4 are `+u, -u, +w, -w`.
pub fn tube_offsets(r: usize) -> Vec<(i64, usize, usize)> {
    let mut out = Vec::new();
    for dd in -(r as i64)..=(r as i64) {
        out.push((dd, 0, 0));
        for dr in 1..=r {
            for dir in 1..=4 {
                out.push((dd, dr, dir));
            }
        }
    }
    out
}

fn perpendicular_basis(v: DVec3) -> (DVec3, DVec3) {
    let helper = if v.x.abs() < 0.9 { DVec3::X } else { DVec3::Y };
    let u = v.cross(helper).normalize();
    (u, v.cross(u))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Distinct voxels whose color changed.
    pub updated_voxels: usize,
    /// Updates dropped because the voxel was already confident.
    pub protected_hits: usize,
}

/// Projects `completed` colors of the pixels in `fill_mask` into the field.
pub fn project_view(
    color: &ColorGrid3,
    sdf: &ScalarGrid3,
    camera: &Camera,
    partial: &PartialTexture,
    completed: &RgbMap,
    fill_mask: &ScalarMap,
    params: &ProjectionParams,
) -> Result<(ColorGrid3, ProjectionStats)> {
    check_aligned(color, sdf)?;
    params.validate()?;
    let size = (camera.width, camera.height);
    for (name, s) in [
        ("completed image", completed.size()),
        ("fill mask", fill_mask.size()),
        ("partial render", partial.hit_mask.size()),
    ] {
        if s != size {
            return Err(Error::mismatch(
                format!("{}x{}", size.0, size.1),
                format!("{name} {}x{}", s.0, s.1),
            ));
        }
    }
    let hd = *sdf.header();
    let h = hd.h();
    let offsets = tube_offsets(params.radius);
    let snapshot = color.data();
    let threshold = params.confidence_threshold;
    let rows = exec::map_range(camera.height, |py| {
        let mut out: Vec<(u32, [f32; 3], f64)> = Vec::new();
        let mut protected = 0usize;
        for px in 0..camera.width {
            let pixel = py * camera.width + px;
            if fill_mask.data[pixel] <= 0.5 || partial.hit_mask.data[pixel] <= 0.5 {
                continue;
            }
            let hit = partial.hits.data[pixel];
            let p = DVec3::new(hit[0] as f64, hit[1] as f64, hit[2] as f64);
            let v = camera.ray_dir(px, py);
            let (u, w) = perpendicular_basis(v);
            let dirs = [DVec3::ZERO, u, -u, w, -w];
            let rgb = completed.data[pixel];
            let start = out.len();
            for &(dd, dr, dir) in &offsets {
                let q = p + v * (dd as f64 * h) + dirs[dir] * (dr as f64 * h);
                let Some(x) = hd.nearest_voxel(hd.world_to_grid(q)) else {
                    continue;
                };
                if snapshot[x].w >= threshold {
                    protected += 1;
                    continue;
                }
                let g = sdf.gradient_at_index(x);
                if g.length() < 1e-12 {
                    continue;
                }
                let weight = w_blend(dd, dr, params.radius)
                    * w_conf(
                        g.normalize(),
                        v,
                        params.beta,
                        (hd.voxel_center(x) - camera.position).length(),
                    );
                if weight <= 0.0 {
                    continue;
                }
                match out[start..].iter_mut().find(|e| e.0 == x as u32) {
                    Some(e) => e.2 = e.2.max(weight),
                    None => out.push((x as u32, rgb, weight)),
                }
            }
        }
        (out, protected)
    });
    let mut updates = Vec::new();
    let mut stats = ProjectionStats::default();
    for (u, p) in rows {
        updates.extend(u);
        stats.protected_hits += p;
    }
    exec::stable_sort_by_key(&mut updates, |e| e.0);
    let mut data = snapshot.to_vec();
    let mut i = 0;
    while i < updates.len() {
        let voxel = updates[i].0 as usize;
        let old = data[voxel];
        let mut acc = [0.0f64; 3];
        let mut wsum = old.w as f64;
        for c in 0..3 {
            acc[c] = old.rgb[c] as f64 * old.w as f64;
        }
        while i < updates.len() && updates[i].0 as usize == voxel {
            let (_, rgb, w) = updates[i];
            for c in 0..3 {
                acc[c] += rgb[c] as f64 * w;
            }
            wsum += w;
            i += 1;
        }
        data[voxel] = ColorVoxel {
            rgb: acc.map(|a| (a / wsum) as f32),
            w: wsum as f32,
        };
        stats.updated_voxels += 1;
    }
    Ok((color.with_data(data)?, stats))
}

/// Jacobi rounds: an empty voxel with `|phi| <= band` and colored face
/// neighbors takes their confidence-weighted mean color and mean confidence.
pub fn fill_color_gaps(
    color: &ColorGrid3,
    sdf: &ScalarGrid3,
    band: f64,
    iterations: usize,
) -> Result<ColorGrid3> {
    check_aligned(color, sdf)?;
    let hd = *color.header();
    let phi = sdf.data();
    let mut cur = color.data().to_vec();
    for _ in 0..iterations {
        let prev = cur.clone();
        exec::fill_indexed(&mut cur, |i| {
            let v = prev[i];
            if v.w > 0.0 || (phi[i] as f64).abs() > band {
                return v;
            }
            let mut acc = [0.0f64; 3];
            let mut wsum = 0.0f64;
            let mut count = 0usize;
            for j in hd.neighbors6(i) {
                let nb = prev[j];
                if nb.w > 0.0 {
                    for c in 0..3 {
                        acc[c] += nb.w as f64 * nb.rgb[c] as f64;
                    }
                    wsum += nb.w as f64;
                    count += 1;
                }
            }
            if count == 0 {
                return v;
            }
            ColorVoxel {
                rgb: acc.map(|a| (a / wsum) as f32),
                w: (wsum / count as f64) as f32,
            }
        });
    }
    color.with_data(cur)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeaveParams {
    pub projection: ProjectionParams,
    pub reference_beta: f64,
    pub view_beta: f64,
    pub gap_fill_iterations: usize,
    /// Gap-fill band half-width in voxels.
    pub gap_band_voxels: f64,
    pub prompt: String,
    pub seed: u64,
    pub timeout: std::time::Duration,
    /// Where to write partial renders and masks, if anywhere.
    pub dump_dir: Option<PathBuf>,
}

impl Default for WeaveParams {
    fn default() -> Self {
        WeaveParams {
            projection: ProjectionParams::default(),
            reference_beta: 2.0,
            view_beta: 1.0,
            gap_fill_iterations: 5,
            gap_band_voxels: 1.5,
            prompt: String::new(),
            seed: 0,
            timeout: gateway::DEFAULT_TIMEOUT,
            dump_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewDiagnostics {
    /// Position in processing order; the reference view is 0.
    pub step: usize,
    /// Index into the camera list, `None` for the reference view.
    pub view: Option<usize>,
    pub azimuth: f64,
    /// Incomplete share of the silhouette before projection, in percent.
    pub incomplete_pct: f64,
    pub updated_voxels: usize,
}

#[derive(Clone, Debug)]
pub struct Weave {
    pub color: ColorGrid3,
    pub diagnostics: Vec<ViewDiagnostics>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_image(map: &RgbMap) -> RgbImage {
    raster::rgb_to_image(map)
}

fn mask_image(mask: &ScalarMap) -> GrayImage {
    GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if *mask.at(x as usize, y as usize) > 0.5 {
            255
        } else {
            0
        }])
    })
}

fn dump(
    dir: &Option<PathBuf>,
    stem: &str,
    partial: &PartialTexture,
    completed: &RgbMap,
) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    raster::save_png_rgb(
        &rgb_image(&partial.rgb),
        dir.join(format!("{stem}_partial.png")),
    )?;
    raster::save_png_gray(
        &mask_image(&partial.incomplete),
        dir.join(format!("{stem}_mask.png")),
    )?;
    raster::save_png_rgb(
        &rgb_image(completed),
        dir.join(format!("{stem}_completed.png")),
    )
}

/// Textures an empty field; see [`weave_into`].
pub fn weave_texture(
    sdf: &ScalarGrid3,
    reference: (&Camera, &RgbMap),
    cameras: &[Camera],
    backend: &dyn Backend,
    params: &WeaveParams,
) -> Result<Weave> {
    let empty = ColorGrid3::filled(*sdf.header(), ColorVoxel::default());
    weave_into(empty, sdf, reference, cameras, backend, params)
}

/// Seeds `color` with the reference image on its occupied pixels, visits
/// `cameras` in spiral order starting next to the reference azimuth
/// (render, inpaint, project), then fills remaining gaps.
pub fn weave_into(
    color: ColorGrid3,
    sdf: &ScalarGrid3,
    reference: (&Camera, &RgbMap),
    cameras: &[Camera],
    backend: &dyn Backend,
    params: &WeaveParams,
) -> Result<Weave> {
    weave_observed(
        color,
        sdf,
        reference,
        cameras,
        backend,
        params,
        &mut |_, _, _| {},
    )
}

/// Field states seen by a weave observer: before and after one view.
pub type WeaveObserver<'a> = dyn FnMut(&ViewDiagnostics, &ColorGrid3, &ColorGrid3) + 'a;

/// [`weave_into`] that reports the field before and after every projection.
pub fn weave_observed(
    color: ColorGrid3,
    sdf: &ScalarGrid3,
    reference: (&Camera, &RgbMap),
    cameras: &[Camera],
    backend: &dyn Backend,
    params: &WeaveParams,
    observe: &mut WeaveObserver,
) -> Result<Weave> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput("no views configured".into()));
    }
    params.projection.validate()?;
    let (ref_cam, ref_img) = reference;
    let mut color = color;
    let mut diagnostics = Vec::new();

    let seed_params = ProjectionParams {
        beta: params.reference_beta,
        ..params.projection.clone()
    };
    let partial = render_partial_texture(&color, sdf, ref_cam, &seed_params)?;
    let (seeded, stats) = project_view(
        &color,
        sdf,
        ref_cam,
        &partial,
        ref_img,
        &partial.hit_mask,
        &seed_params,
    )?;
    dump(&params.dump_dir, "reference", &partial, ref_img)?;
    diagnostics.push(ViewDiagnostics {
        step: 0,
        view: None,
        azimuth: ref_cam.azimuth_deg(),
        incomplete_pct: pct(&partial),
        updated_voxels: stats.updated_voxels,
    });
    observe(&diagnostics[0], &color, &seeded);
    color = seeded;

    let reference_rgb = rgb_image(ref_img);
    let azimuths: Vec<f64> = cameras.iter().map(|c| c.azimuth_deg()).collect();
    let view_params = ProjectionParams {
        beta: params.view_beta,
        ..params.projection.clone()
    };
    for (step, &vi) in spiral_order(&azimuths, ref_cam.azimuth_deg())
        .iter()
        .enumerate()
    {
        let cam = &cameras[vi];
        let partial = render_partial_texture(&color, sdf, cam, &view_params)?;
        let mut request = EnhanceRequest::texture_inpaint(
            raster::normals_to_image(&partial.normals),
            rgb_image(&partial.rgb),
            mask_image(&partial.incomplete),
            reference_rgb.clone(),
            params.prompt.clone(),
            params.seed.wrapping_add(vi as u64),
        );
        request.timeout = params.timeout;
        let completed = raster::image_to_rgb(&gateway::enhance(&request, backend)?);
        dump(
            &params.dump_dir,
            &format!("view{vi:02}"),
            &partial,
            &completed,
        )?;
        let (next, stats) = project_view(
            &color,
            sdf,
            cam,
            &partial,
            &completed,
            &partial.incomplete,
            &view_params,
        )?;
        log::info!(
            "texture view {vi} (az {:.1}): {:.1}% incomplete, {} voxels updated",
            azimuths[vi],
            pct(&partial),
            stats.updated_voxels
        );
        diagnostics.push(ViewDiagnostics {
            step: step + 1,
            view: Some(vi),
            azimuth: azimuths[vi],
            incomplete_pct: pct(&partial),
            updated_voxels: stats.updated_voxels,
        });
        observe(diagnostics.last().unwrap(), &color, &next);
        color = next;
    }
    let band = params.gap_band_voxels * sdf.header().h();
    let color = fill_color_gaps(&color, sdf, band, params.gap_fill_iterations)?;
    Ok(Weave { color, diagnostics })
}

fn pct(p: &PartialTexture) -> f64 {
    let s = p.silhouette_pixels();
    if s == 0 {
        0.0
    } else {
        100.0 * p.incomplete_pixels() as f64 / s as f64
    }
}

pub fn write_diagnostics_csv<W: Write>(
    mut w: W,
    diagnostics: &[ViewDiagnostics],
) -> std::io::Result<()> {
    writeln!(w, "step,view,azimuth,incomplete_pct,updated_voxels")?;
    for d in diagnostics {
        let view = d.view.map_or("reference".to_string(), |v| v.to_string());
        writeln!(
            w,
            "{},{},{},{},{}",
            d.step, view, d.azimuth, d.incomplete_pct, d.updated_voxels
        )?;
    }
    Ok(())
}

/// Colors sampled from the field at each mesh vertex.
pub fn vertex_colors(color: &ColorGrid3, mesh: &TriMesh) -> Vec<[u8; 3]> {
    mesh.vertices
        .iter()
        .map(|v| {
            let (rgb, _) = color.sample_world(DVec3::new(v[0] as f64, v[1] as f64, v[2] as f64));
            rgb.map(to_u8)
        })
        .collect()
}
