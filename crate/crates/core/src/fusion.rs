//! Multi-view normal fusion into a per-voxel target normal field.
//!
//! Each view contributes, for every voxel its pixel rays pass through near
//! the first visible surface, that pixel's world-space normal with weight 1
//! per ray. Sums are kept in 2^-40 fixed point so that the fused field does
//! not depend on the order in which views (or pixels) are added.

use std::collections::HashMap;

use glam::DVec3;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{GridHeader, NormalVoxel, ScalarGrid3, VectorGrid3};
use crate::trace::{self, RayEmissions, ViewRender};

const FIXED_SCALE: f64 = (1u64 << 40) as f64;
/// Sums shorter than this are treated as cancelled out.
pub const DEGENERATE_NORM: f64 = 1e-6;

#[inline]
fn to_fixed(x: f64) -> i64 {
    (x * FIXED_SCALE).round() as i64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Acc {
    sum: [i64; 3],
    weight: i64,
}

/// Running sums of weighted world normals per voxel.
#[derive(Clone, Debug)]
pub struct NormalAccumulator {
    header: GridHeader,
    cells: HashMap<u32, Acc>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccumulateStats {
    /// Emissions that contributed a normal.
    pub used: usize,
    /// Emissions behind the first surface or from pixels without a hit.
    pub skipped: usize,
}

impl NormalAccumulator {
    pub fn new(header: GridHeader) -> Self {
        NormalAccumulator {
            header,
            cells: HashMap::new(),
        }
    }

    pub fn header(&self) -> &GridHeader {
        &self.header
    }

    pub fn touched_voxels(&self) -> usize {
        self.cells.len()
    }

    /// Adds `weight * n` to voxel `voxel`.
    pub fn add(&mut self, voxel: usize, n: DVec3, weight: f64) {
        let acc = self.cells.entry(voxel as u32).or_default();
        for a in 0..3 {
            acc.sum[a] += to_fixed(weight * n[a]);
        }
        acc.weight += to_fixed(weight);
    }

    /// Adds one view: every first-surface emission of a hit pixel adds
    /// `view_weight * R^T n_cam(pixel)` and `view_weight` to its voxel.
    pub fn accumulate_view(
        &mut self,
        render: &ViewRender,
        camera: &Camera,
        emissions: &RayEmissions,
        view_weight: f64,
    ) -> Result<AccumulateStats> {
        if emissions.grid_dims != self.header.dims {
            return Err(Error::mismatch(
                format!("{:?}", self.header.dims),
                format!("{:?}", emissions.grid_dims),
            ));
        }
        let size = (render.width(), render.height());
        if (emissions.width, emissions.height) != size || (camera.width, camera.height) != size {
            return Err(Error::mismatch(
                format!("{}x{}", size.0, size.1),
                format!(
                    "emissions {}x{}, camera {}x{}",
                    emissions.width, emissions.height, camera.width, camera.height
                ),
            ));
        }
        let mut stats = AccumulateStats::default();
        for e in &emissions.entries {
            let pixel = e.pixel as usize;
            if e.segment != 0 || !render.is_hit(pixel) {
                stats.skipped += 1;
                continue;
            }
            let nc = render.normal_cam.data[pixel];
            let nw = camera.camera_to_world(DVec3::new(nc[0] as f64, nc[1] as f64, nc[2] as f64));
            self.add(e.voxel as usize, nw, view_weight);
            stats.used += 1;
        }
        Ok(stats)
    }

    /// Unnormalized field: `n` holds the weighted sum, `w` the total weight.
    pub fn to_field(&self) -> VectorGrid3 {
        let mut field = VectorGrid3::filled(self.header, NormalVoxel::default());
        let data = field.data_mut();
        for (&v, acc) in &self.cells {
            data[v as usize] = NormalVoxel {
                n: acc.sum.map(|s| (s as f64 / FIXED_SCALE) as f32),
                w: (acc.weight as f64 / FIXED_SCALE) as f32,
            };
        }
        field
    }
}

/// Normalizes every voxel with positive weight. Voxels whose summed vector
/// is shorter than [`DEGENERATE_NORM`] are reset to zero weight; their count
/// is returned alongside the field.
pub fn finalize_fusion(field: &VectorGrid3) -> (VectorGrid3, usize) {
    let src = field.data();
    let mut out = vec![NormalVoxel::default(); src.len()];
    exec::fill_indexed(&mut out, |i| {
        let v = src[i];
        if v.w <= 0.0 {
            return NormalVoxel { n: v.n, w: 0.0 };
        }
        let n = DVec3::new(v.n[0] as f64, v.n[1] as f64, v.n[2] as f64);
        let len = n.length();
        if len > DEGENERATE_NORM {
            let u = n / len;
            NormalVoxel {
                n: [u.x as f32, u.y as f32, u.z as f32],
                w: v.w,
            }
        } else {
            NormalVoxel::default()
        }
    });
    let degenerate = src
        .iter()
        .zip(out.iter())
        .filter(|(a, b)| a.w > 0.0 && b.w == 0.0)
        .count();
    (field.with_data(out).expect("same size"), degenerate)
}

/// Jacobi hole filling: each round, every empty voxel with `|phi| <= band`
/// and at least one weighted face neighbor takes the normalized mean of the
/// neighbors' normals and their mean weight.
pub fn fill_normal_holes(
    field: &VectorGrid3,
    sdf: &ScalarGrid3,
    band: f64,
    iterations: usize,
) -> Result<VectorGrid3> {
    field.header().check_same_lattice(sdf.header())?;
    let hd = *field.header();
    let phi = sdf.data();
    let mut cur = field.data().to_vec();
    for _ in 0..iterations {
        let prev = cur.clone();
        exec::fill_indexed(&mut cur, |i| {
            let v = prev[i];
            if v.w > 0.0 || (phi[i] as f64).abs() > band {
                return v;
            }
            let mut sum = DVec3::ZERO;
            let mut wsum = 0.0f64;
            let mut count = 0usize;
            for j in hd.neighbors6(i) {
                let nb = prev[j];
                if nb.w > 0.0 {
                    sum += DVec3::new(nb.n[0] as f64, nb.n[1] as f64, nb.n[2] as f64);
                    wsum += nb.w as f64;
                    count += 1;
                }
            }
            let len = sum.length();
            if count == 0 || len <= DEGENERATE_NORM {
                return v;
            }
            let u = sum / len;
            NormalVoxel {
                n: [u.x as f32, u.y as f32, u.z as f32],
                w: (wsum / count as f64) as f32,
            }
        });
    }
    field.with_data(cur)
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub samples_per_ray: usize,
    /// Surface band half-width in voxels.
    pub band_voxels: f64,
    pub fill_iterations: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            samples_per_ray: 256,
            band_voxels: 1.5,
            fill_iterations: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionReport {
    pub field: VectorGrid3,
    pub degenerate: usize,
    pub views: Vec<AccumulateStats>,
}

/// Full fusion over `views`: ray-march each camera, accumulate its
/// (possibly enhanced) normal render, normalize, then fill holes.
pub fn fuse_views(
    sdf: &ScalarGrid3,
    views: &[(Camera, ViewRender)],
    params: &FusionParams,
) -> Result<FusionReport> {
    let band = params.band_voxels * sdf.header().h();
    let mut acc = NormalAccumulator::new(*sdf.header());
    let mut stats = Vec::with_capacity(views.len());
    for (camera, render) in views {
        let emissions = trace::ray_march_accumulate(sdf, camera, params.samples_per_ray, band);
        stats.push(acc.accumulate_view(render, camera, &emissions, 1.0)?);
    }
    let (field, degenerate) = finalize_fusion(&acc.to_field());
    let field = fill_normal_holes(&field, sdf, band, params.fill_iterations)?;
    Ok(FusionReport {
        field,
        degenerate,
        views: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::orbit_camera;
    use crate::trace::{ray_march_accumulate, sphere_trace};

    fn hd(n: usize) -> GridHeader {
        GridHeader::new([n; 3], [-1.0; 3], 2.0 / (n - 1) as f32).unwrap()
    }

    fn one_view() -> (ScalarGrid3, Camera, ViewRender, RayEmissions) {
        let g = ScalarGrid3::from_world_fn(hd(32), |p| (p.length() - 0.5) as f32);
        let cam = orbit_camera(30.0, 0.0, 3.0, DVec3::ZERO, (24, 24), 40.0).unwrap();
        let r = sphere_trace(&g, &cam);
        let e = ray_march_accumulate(&g, &cam, 128, 1.5 * g.header().h());
        (g, cam, r, e)
    }

    #[test]
    fn single_view_weights_are_first_surface_ray_counts() {
        let (g, cam, r, e) = one_view();
        let mut acc = NormalAccumulator::new(*g.header());
        acc.accumulate_view(&r, &cam, &e, 1.0).unwrap();
        let field = acc.to_field();
        let mut expect = vec![0u32; g.header().len()];
        for x in &e.entries {
            if x.segment == 0 && r.is_hit(x.pixel as usize) {
                expect[x.voxel as usize] += 1;
            }
        }
        for (v, c) in field.data().iter().zip(expect) {
            assert_eq!(v.w, c as f32);
        }
    }

    #[test]
    fn repeated_view_doubles_exactly() {
        let (g, cam, r, e) = one_view();
        let mut once = NormalAccumulator::new(*g.header());
        once.accumulate_view(&r, &cam, &e, 1.0).unwrap();
        let mut twice = once.clone();
        twice.accumulate_view(&r, &cam, &e, 1.0).unwrap();
        for (a, b) in once.to_field().data().iter().zip(twice.to_field().data()) {
            assert_eq!(2.0 * a.w, b.w);
            for c in 0..3 {
                assert_eq!(2.0 * a.n[c], b.n[c]);
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (_, cam, r, e) = one_view();
        let mut acc = NormalAccumulator::new(hd(16));
        assert!(matches!(
            acc.accumulate_view(&r, &cam, &e, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mirrored_views_with_equal_normals_add() {
        let mut acc = NormalAccumulator::new(hd(4));
        let n = DVec3::new(0.0, 0.6, 0.8);
        let k = 3.0;
        acc.add(5, n, k);
        acc.add(5, n, k);
        let v = acc.to_field().data()[5];
        let len = v.n.iter().map(|c| (*c as f64).powi(2)).sum::<f64>().sqrt();
        assert!((len - 2.0 * k).abs() < 1e-6);
        assert_eq!(v.w, 6.0);
    }

    #[test]
    fn finalize_examples() {
        let mut field = VectorGrid3::filled(hd(4), NormalVoxel::default());
        field.data_mut()[0] = NormalVoxel {
            n: [0.0, 0.0, 3.0],
            w: 3.0,
        };
        let mut acc = NormalAccumulator::new(hd(4));
        acc.add(1, DVec3::Z, 2.0);
        acc.add(1, -DVec3::Z, 2.0);
        acc.add(2, DVec3::X, 2.0);
        acc.add(2, DVec3::Y, 1.0);
        let summed = acc.to_field();
        field.data_mut()[1] = summed.data()[1];
        field.data_mut()[2] = summed.data()[2];

        let (out, degenerate) = finalize_fusion(&field);
        assert_eq!(out.data()[0].n, [0.0, 0.0, 1.0]);
        assert_eq!(out.data()[1].w, 0.0);
        assert_eq!(degenerate, 1);
        let s5 = 5f32.sqrt();
        let v = out.data()[2].n;
        assert!((v[0] - 2.0 / s5).abs() < 1e-7 && (v[1] - 1.0 / s5).abs() < 1e-7 && v[2] == 0.0);
        for v in out.data() {
            if v.w > 0.0 {
                let len = v.n.iter().map(|c| c * c).sum::<f32>().sqrt();
                assert!((len - 1.0).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn hole_filling_examples() {
        let hd = hd(5);
        let sdf = ScalarGrid3::filled(hd, 0.0);
        let c = hd.index(2, 2, 2);
        let n = [0.0f32, 0.6, 0.8];

        let mut surrounded = VectorGrid3::filled(hd, NormalVoxel::default());
        for j in hd.neighbors6(c) {
            surrounded.data_mut()[j] = NormalVoxel { n, w: 2.0 };
        }
        let out = fill_normal_holes(&surrounded, &sdf, 0.1, 1).unwrap();
        assert_eq!(out.data()[c].n, n);
        assert_eq!(out.data()[c].w, 2.0);

        let mut two = VectorGrid3::filled(hd, NormalVoxel::default());
        two.data_mut()[hd.index(3, 2, 2)] = NormalVoxel {
            n: [1.0, 0.0, 0.0],
            w: 1.0,
        };
        two.data_mut()[hd.index(2, 3, 2)] = NormalVoxel {
            n: [0.0, 1.0, 0.0],
            w: 1.0,
        };
        let out = fill_normal_holes(&two, &sdf, 0.1, 1).unwrap();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let v = out.data()[c].n;
        assert!((v[0] - s).abs() < 1e-7 && (v[1] - s).abs() < 1e-7 && v[2] == 0.0);

        let full = VectorGrid3::filled(hd, NormalVoxel { n, w: 1.0 });
        assert_eq!(fill_normal_holes(&full, &sdf, 0.1, 5).unwrap(), full);
    }

    #[test]
    fn single_view_fusion_stores_the_view_normals() {
        let (g, cam, r, e) = one_view();
        let mut acc = NormalAccumulator::new(*g.header());
        acc.accumulate_view(&r, &cam, &e, 1.0).unwrap();
        let (field, _) = finalize_fusion(&acc.to_field());
        for x in e
            .entries
            .iter()
            .filter(|x| x.segment == 0 && r.is_hit(x.pixel as usize))
        {
            let stored = field.data()[x.voxel as usize];
            if stored.w != 1.0 {
                continue;
            }
            let nc = r.normal_cam.data[x.pixel as usize];
            let nw = cam.camera_to_world(DVec3::new(nc[0] as f64, nc[1] as f64, nc[2] as f64));
            for a in 0..3 {
                assert!((stored.n[a] as f64 - nw[a]).abs() < 1e-6);
            }
        }
    }
}
