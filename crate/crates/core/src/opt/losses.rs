//! Objective terms over an SDF lattice with analytic gradients.
//!
//! Every function takes the raw lattice values generically so the same code
//! can be checked in double precision against finite differences.

use glam::DVec3;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{gradient_at, GridHeader, NormalVoxel, Scalar};
use crate::raster::ScalarMap;
use crate::trace::ray_box;

/// Gradients shorter than this are treated as undefined.
pub const MIN_GRADIENT_NORM: f64 = 1e-8;
/// Probability clamp used by the mask cross-entropy.
pub const BCE_EPS: f64 = 1e-6;
pub const DEFAULT_MASK_SAMPLES: usize = 128;
/// Softmin weights below this fraction of the largest one are dropped.
const SOFTMIN_CUTOFF: f64 = 1e-12;

/// Loss value with its gradient with respect to every lattice value.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Chain rule through the finite-difference stencil: given dl/dg at every
/// voxel, returns dl/dphi at every voxel. Each output gathers from the
/// voxel itself and its face neighbors in a fixed order.
fn stencil_backprop(hd: &GridHeader, dl_dg: &[DVec3]) -> Vec<f64> {
    let mut out = vec![0.0; hd.len()];
    let strides = [1, hd.dims[0], hd.dims[0] * hd.dims[1]];
    exec::fill_indexed(&mut out, |j| {
        let cj = hd.coords(j);
        let mut acc = 0.0;
        for a in 0..3 {
            let mut sources = [None; 3];
            sources[0] = Some(j);
            if cj[a] > 0 {
                sources[1] = Some(j - strides[a]);
            }
            if cj[a] + 1 < hd.dims[a] {
                sources[2] = Some(j + strides[a]);
            }
            for x in sources.into_iter().flatten() {
                let d = dl_dg[x][a];
                if d == 0.0 {
                    continue;
                }
                let (p, m, coef) = hd.axis_stencil(hd.coords(x), a);
                if p == j {
                    acc += d * coef;
                }
                if m == j {
                    acc -= d * coef;
                }
            }
        }
        acc
    });
    out
}

fn check_len<T>(hd: &GridHeader, values: &[T]) -> Result<()> {
    if values.len() != hd.len() {
        return Err(Error::mismatch(
            hd.len().to_string(),
            values.len().to_string(),
        ));
    }
    Ok(())
}

/// Mean cosine distance between the lattice gradient direction and the
/// target normal over voxels with positive target weight.
pub fn loss_normal<T: Scalar>(
    hd: &GridHeader,
    phi: &[T],
    target: &[NormalVoxel],
) -> Result<LossEval> {
    check_len(hd, phi)?;
    check_len(hd, target)?;
    if !target.iter().any(|t| t.w > 0.0) {
        return Err(Error::InvalidInput(
            "normal target has no weighted voxels".into(),
        ));
    }
    let mut dl_dg = vec![DVec3::ZERO; hd.len()];
    let mut terms = vec![(0.0f64, 0u8); hd.len()];
    exec::fill_indexed(&mut terms, |i| {
        let t = target[i];
        if t.w <= 0.0 {
            return (0.0, 0);
        }
        let g = gradient_at(hd, phi, hd.coords(i));
        if g.length() < MIN_GRADIENT_NORM {
            return (0.0, 0);
        }
        let n = DVec3::new(t.n[0] as f64, t.n[1] as f64, t.n[2] as f64);
        (1.0 - g.normalize().dot(n), 1)
    });
    let count: usize = terms.iter().map(|t| t.1 as usize).sum();
    if count == 0 {
        return Err(Error::InvalidInput(
            "normal target covers only flat voxels".into(),
        ));
    }
    let inv = 1.0 / count as f64;
    exec::fill_indexed(&mut dl_dg, |i| {
        if terms[i].1 == 0 {
            return DVec3::ZERO;
        }
        let t = target[i];
        let n = DVec3::new(t.n[0] as f64, t.n[1] as f64, t.n[2] as f64);
        let g = gradient_at(hd, phi, hd.coords(i));
        let len = g.length();
        let u = g / len;
        -(n - n.dot(u) * u) / len * inv
    });
    let value = exec::sum_chunked(terms.len(), |r| terms[r].iter().map(|t| t.0).sum()) * inv;
    Ok(LossEval {
        value,
        grad: stencil_backprop(hd, &dl_dg),
    })
}

/// Mean of `(|grad phi| - 1)^2` over interior voxels.
pub fn loss_eikonal<T: Scalar>(hd: &GridHeader, phi: &[T]) -> Result<LossEval> {
    check_len(hd, phi)?;
    let interior = (0..3).map(|a| hd.dims[a] - 2).product::<usize>();
    let mut terms = vec![(0.0f64, DVec3::ZERO); hd.len()];
    exec::fill_indexed(&mut terms, |i| {
        let c = hd.coords(i);
        if !hd.is_interior(c) {
            return (0.0, DVec3::ZERO);
        }
        let g = gradient_at(hd, phi, c);
        let len = g.length();
        if len < MIN_GRADIENT_NORM {
            return (1.0, DVec3::ZERO);
        }
        let r = len - 1.0;
        (r * r, 2.0 * r * g / len / interior as f64)
    });
    let value =
        exec::sum_chunked(terms.len(), |r| terms[r].iter().map(|t| t.0).sum()) / interior as f64;
    let dl_dg: Vec<DVec3> = terms.iter().map(|t| t.1).collect();
    Ok(LossEval {
        value,
        grad: stencil_backprop(hd, &dl_dg),
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
struct RayScratch {
    points: Vec<DVec3>,
    vals: Vec<f64>,
    weights: Vec<f64>,
}

/// Soft occupancy of one pixel ray: `sigmoid(-s / tau)` where `s` is the
/// softmax(-phi/tau)-weighted mean of `samples` trilinear values along the
/// chord of the ray through the lattice box. Returns `(occupancy, s)`, or
/// `None` for rays that miss the box.
fn soft_occupancy<T: Scalar>(
    hd: &GridHeader,
    phi: &[T],
    origin: DVec3,
    dir: DVec3,
    samples: usize,
    tau: f64,
    scratch: &mut RayScratch,
) -> Option<(f64, f64)> {
    let (lo, hi) = hd.bounds();
    let (t0, t1) = ray_box(origin, dir, lo, hi)?;
    let RayScratch {
        points,
        vals,
        weights,
    } = scratch;
    points.clear();
    vals.clear();
    weights.clear();
    let g0 = hd.world_to_grid(origin + dir * t0);
    let step = (hd.world_to_grid(origin + dir * t1) - g0) / (samples - 1) as f64;
    for k in 0..samples {
        let g = g0 + step * k as f64;
        vals.push(hd.trilinear(g).blend(phi));
        points.push(g);
    }
    let vmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let cutoff = -SOFTMIN_CUTOFF.ln();
    weights.extend(vals.iter().map(|v| {
        let e = (v - vmin) / tau;
        if e > cutoff {
            0.0
        } else {
            (-e).exp()
        }
    }));
    let z: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= z;
    }
    let s: f64 = weights.iter().zip(vals.iter()).map(|(w, v)| w * v).sum();
    Some((sigmoid(-s / tau), s))
}

fn occupancy_backprop(
    hd: &GridHeader,
    scratch: &RayScratch,
    occ: f64,
    s: f64,
    tau: f64,
    scale: f64,
    out: &mut Vec<(u32, f64)>,
) {
    let docc_ds = -occ * (1.0 - occ) / tau;
    for ((&g, &w), &v) in scratch
        .points
        .iter()
        .zip(&scratch.weights)
        .zip(&scratch.vals)
    {
        if w == 0.0 {
            continue;
        }
        let tri = hd.trilinear(g);
        let coef = scale * docc_ds * w * (1.0 - (v - s) / tau);
        for c in 0..8 {
            if tri.weights[c] != 0.0 {
                out.push((tri.indices[c] as u32, coef * tri.weights[c]));
            }
        }
    }
}

/// Soft occupancy image for one camera, as used by the mask loss.
pub fn soft_mask<T: Scalar>(
    hd: &GridHeader,
    phi: &[T],
    camera: &Camera,
    samples: usize,
    tau: f64,
) -> ScalarMap {
    let (w, h) = (camera.width, camera.height);
    let rows = exec::map_range(h, |py| {
        let mut scratch = RayScratch::default();
        (0..w)
            .map(|px| {
                soft_occupancy(
                    hd,
                    phi,
                    camera.position,
                    camera.ray_dir(px, py),
                    samples,
                    tau,
                    &mut scratch,
                )
                .map_or(0.0, |(occ, _)| occ) as f32
            })
            .collect::<Vec<_>>()
    });
    ScalarMap::from_vec(w, h, rows.into_iter().flatten().collect()).expect("size")
}

fn bce_and_slope(p: f64, m: f64) -> (f64, f64) {
    let clamped = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(m * clamped.ln() + (1.0 - m) * (1.0 - clamped).ln());
    let slope = if p == clamped {
        -m / clamped + (1.0 - m) / (1.0 - clamped)
    } else {
        0.0
    };
    (loss, slope)
}

/// Mean binary cross-entropy between soft occupancy renders and target
/// masks over all pixels of all views.
pub fn loss_mask<T: Scalar>(
    hd: &GridHeader,
    phi: &[T],
    views: &[(Camera, ScalarMap)],
    samples: usize,
    tau: f64,
) -> Result<LossEval> {
    check_len(hd, phi)?;
    if !(tau > 0.0) || samples < 2 {
        return Err(Error::InvalidInput(format!(
            "mask loss needs tau > 0 and at least 2 samples, got {tau} and {samples}"
        )));
    }
    for (cam, mask) in views {
        if mask.size() != (cam.width, cam.height) {
            return Err(Error::mismatch(
                format!("{}x{}", cam.width, cam.height),
                format!("{}x{}", mask.width, mask.height),
            ));
        }
    }
    let pixels: usize = views.iter().map(|(c, _)| c.pixel_count()).sum();
    let mut grad = vec![0.0; hd.len()];
    if pixels == 0 {
        return Ok(LossEval { value: 0.0, grad });
    }
    let inv = 1.0 / pixels as f64;
    let mut total = 0.0;
    for (cam, mask) in views {
        let rows = exec::map_range(cam.height, |py| {
            let mut loss = 0.0;
            let mut contrib: Vec<(u32, f64)> = Vec::new();
            let mut scratch = RayScratch::default();
            for px in 0..cam.width {
                let m = *mask.at(px, py) as f64;
                let dir = cam.ray_dir(px, py);
                match soft_occupancy(hd, phi, cam.position, dir, samples, tau, &mut scratch) {
                    Some((occ, s)) => {
                        let (l, slope) = bce_and_slope(occ, m);
                        loss += l;
                        if slope != 0.0 {
                            occupancy_backprop(
                                hd,
                                &scratch,
                                occ,
                                s,
                                tau,
                                slope * inv,
                                &mut contrib,
                            );
                        }
                    }
                    None => loss += bce_and_slope(0.0, m).0,
                }
            }
            (loss, contrib)
        });
        for (loss, contrib) in rows {
            total += loss;
            for (v, d) in contrib {
                grad[v as usize] += d;
            }
        }
    }
    Ok(LossEval {
        value: total * inv,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::orbit_camera;
    use crate::grid::ScalarGrid3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hd(n: usize) -> GridHeader {
        GridHeader::new([n; 3], [-1.0; 3], 2.0 / (n - 1) as f32).unwrap()
    }

    fn plane(hd: &GridHeader, scale: f64) -> Vec<f64> {
        let n = DVec3::new(1.0, 2.0, 2.0) / 3.0;
        (0..hd.len())
            .map(|i| scale * (hd.voxel_center(i).dot(n) - 0.1))
            .collect()
    }

    #[test]
    fn plane_normal_loss_is_zero_or_two() {
        let hd = hd(12);
        let phi = plane(&hd, 1.0);
        let n = [1.0f32 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let target = vec![NormalVoxel { n, w: 1.0 }; hd.len()];
        let l = loss_normal(&hd, &phi, &target).unwrap();
        assert!(l.value.abs() < 1e-7);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-6));
        let flipped = vec![
            NormalVoxel {
                n: n.map(|c| -c),
                w: 1.0
            };
            hd.len()
        ];
        assert!((loss_normal(&hd, &phi, &flipped).unwrap().value - 2.0).abs() < 1e-6);
    }

    #[test]
    fn empty_target_is_an_error() {
        let hd = hd(8);
        let target = vec![NormalVoxel::default(); hd.len()];
        assert!(loss_normal(&hd, &plane(&hd, 1.0), &target).is_err());
    }

    #[test]
    fn eikonal_plane_values() {
        let hd = hd(12);
        assert!(loss_eikonal(&hd, &plane(&hd, 1.0)).unwrap().value < 1e-10);
        assert!((loss_eikonal(&hd, &plane(&hd, 2.0)).unwrap().value - 1.0).abs() < 1e-6);
        let flat = vec![0.0f64; hd.len()];
        let l = loss_eikonal(&hd, &flat).unwrap();
        assert_eq!(l.value, 1.0);
        assert!(l.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn all_ones_mask_against_empty_grid_hits_the_clamp() {
        let hd = hd(8);
        let phi = vec![10.0f64; hd.len()];
        let cam = orbit_camera(0.0, 0.0, 3.0, DVec3::ZERO, (4, 4), 30.0).unwrap();
        let mask = ScalarMap::filled(4, 4, 1.0);
        let l = loss_mask(&hd, &phi, &[(cam, mask)], 128, hd.h()).unwrap();
        assert!((l.value - (-(BCE_EPS.ln()))).abs() < 1e-9);
        assert!((l.value - 13.8155).abs() < 1e-3);
    }

    #[test]
    fn mask_size_mismatch_is_rejected() {
        let hd = hd(8);
        let phi = vec![1.0f64; hd.len()];
        let cam = orbit_camera(0.0, 0.0, 3.0, DVec3::ZERO, (4, 4), 30.0).unwrap();
        let mask = ScalarMap::filled(5, 4, 1.0);
        assert!(matches!(
            loss_mask(&hd, &phi, &[(cam, mask)], 128, 0.1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn self_consistent_masks_give_small_loss() {
        // 3x3 pixels: the center ray crosses the sphere, the others pass
        // at least 6 voxels outside it
        let hd = hd(64);
        let g = ScalarGrid3::from_world_fn(hd, |p| (p.length() - 0.35) as f32);
        let tau = hd.h();
        let views: Vec<_> = (0..4)
            .map(|k| {
                let cam =
                    orbit_camera(90.0 * k as f64, 10.0, 3.0, DVec3::ZERO, (3, 3), 30.0).unwrap();
                let soft = soft_mask(&hd, g.data(), &cam, 128, tau);
                let hard = soft.map(|v| if *v > 0.5 { 1.0 } else { 0.0 });
                assert_eq!(hard.data.iter().filter(|v| **v > 0.5).count(), 1);
                (cam, hard)
            })
            .collect();
        let l = loss_mask(&hd, g.data(), &views, 128, tau).unwrap();
        assert!(l.value < 0.01, "{}", l.value);
    }

    #[test]
    fn stencil_backprop_matches_a_brute_force_scatter() {
        let hd = GridHeader::new([4, 5, 3], [0.0; 3], 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dl: Vec<DVec3> = (0..hd.len())
            .map(|_| DVec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let mut brute = vec![0.0; hd.len()];
        for (x, d) in dl.iter().enumerate() {
            for a in 0..3 {
                let (p, m, coef) = hd.axis_stencil(hd.coords(x), a);
                brute[p] += d[a] * coef;
                brute[m] -= d[a] * coef;
            }
        }
        let got = stencil_backprop(&hd, &dl);
        for (a, b) in got.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
