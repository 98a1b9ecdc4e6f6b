//! SDF refinement against a fused normal field and occupancy masks.

mod adam;
pub mod losses;

use std::io::Write;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grid::{ScalarGrid3, VectorGrid3};
use crate::raster::ScalarMap;

pub use adam::AdamState;
pub use losses::{loss_eikonal, loss_mask, loss_normal, soft_mask, LossEval};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_m: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_n: 0.3,
            lambda_m: 1.0,
            lambda_e: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_n", self.lambda_n),
            ("lambda_m", self.lambda_m),
            ("lambda_e", self.lambda_e),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeParams {
    pub weights: LossWeights,
    pub iterations: usize,
    pub lr: f64,
    /// Soft-min temperature in voxels.
    pub tau_voxels: f64,
    pub mask_samples: usize,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        OptimizeParams {
            weights: LossWeights::default(),
            iterations: 50,
            lr: 2e-4,
            tau_voxels: 1.0,
            mask_samples: losses::DEFAULT_MASK_SAMPLES,
        }
    }
}

/// Loss terms evaluated at the start of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub normal: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub grid: ScalarGrid3,
    pub history: Vec<LossRecord>,
}

/// Evaluates all three terms and the weighted gradient at `phi`.
pub fn evaluate(
    sdf: &ScalarGrid3,
    target: &VectorGrid3,
    views: &[(Camera, ScalarMap)],
    params: &OptimizeParams,
    iteration: usize,
) -> Result<(LossRecord, Vec<f64>)> {
    let hd = sdf.header();
    target.header().check_same_lattice(hd)?;
    let w = params.weights;
    let ln = loss_normal(hd, sdf.data(), target.data())?;
    let lm = loss_mask(
        hd,
        sdf.data(),
        views,
        params.mask_samples,
        params.tau_voxels * hd.h(),
    )?;
    let le = loss_eikonal(hd, sdf.data())?;
    let total = w.lambda_n * ln.value + w.lambda_m * lm.value + w.lambda_e * le.value;
    let grad: Vec<f64> = (0..hd.len())
        .map(|i| w.lambda_n * ln.grad[i] + w.lambda_m * lm.grad[i] + w.lambda_e * le.grad[i])
        .collect();
    let record = LossRecord {
        iteration,
        normal: ln.value,
        mask: lm.value,
        eikonal: le.value,
        total,
    };
    Ok((record, grad))
}

/// Runs `params.iterations` full-batch Adam steps on the weighted objective.
pub fn optimize_sdf(
    sdf: &ScalarGrid3,
    target: &VectorGrid3,
    views: &[(Camera, ScalarMap)],
    params: &OptimizeParams,
) -> Result<Refinement> {
    params.weights.validate()?;
    if !(params.lr.is_finite() && params.lr >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "learning rate must be finite and >= 0, got {}",
            params.lr
        )));
    }
    let mut grid = sdf.clone();
    let mut adam = AdamState::new(grid.header().len(), params.lr);
    let mut history = Vec::with_capacity(params.iterations);
    for it in 0..params.iterations {
        let (record, grad) = evaluate(&grid, target, views, params, it)?;
        if !record.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                value: record.total,
            });
        }
        log::debug!(
            "iter {it}: normal {:.6} mask {:.6} eikonal {:.6} total {:.6}",
            record.normal,
            record.mask,
            record.eikonal,
            record.total
        );
        history.push(record);
        adam.step(grid.data_mut(), &grad)?;
    }
    Ok(Refinement { grid, history })
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "iteration,l_normal,l_mask,l_eikonal,l_total")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration, r.normal, r.mask, r.eikonal, r.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridHeader, NormalVoxel};
    use glam::DVec3;

    fn plane_setup(scale: f64) -> (ScalarGrid3, VectorGrid3) {
        let hd = GridHeader::new([12; 3], [-1.0; 3], 2.0 / 11.0).unwrap();
        let n = DVec3::new(0.0, 0.6, 0.8);
        let g = ScalarGrid3::from_world_fn(hd, |p| (scale * p.dot(n)) as f32);
        let t = VectorGrid3::filled(
            hd,
            NormalVoxel {
                n: [0.0, 0.6, 0.8],
                w: 1.0,
            },
        );
        (g, t)
    }

    #[test]
    fn zero_weights_return_the_input_bitwise() {
        let (g, t) = plane_setup(1.7);
        let params = OptimizeParams {
            weights: LossWeights {
                lambda_n: 0.0,
                lambda_m: 0.0,
                lambda_e: 0.0,
            },
            iterations: 5,
            ..Default::default()
        };
        let out = optimize_sdf(&g, &t, &[], &params).unwrap();
        assert_eq!(out.grid, g);
        assert_eq!(out.history.len(), 5);
    }

    #[test]
    fn eikonal_only_shrinks_the_residual_of_a_scaled_plane() {
        let (g, t) = plane_setup(2.0);
        let params = OptimizeParams {
            weights: LossWeights {
                lambda_n: 0.0,
                lambda_m: 0.0,
                lambda_e: 1.0,
            },
            ..Default::default()
        };
        let out = optimize_sdf(&g, &t, &[], &params).unwrap();
        let decreasing = out
            .history
            .windows(2)
            .filter(|w| w[1].eikonal < w[0].eikonal)
            .count();
        let last = loss_eikonal(out.grid.header(), out.grid.data())
            .unwrap()
            .value;
        let decreasing = decreasing + usize::from(last < out.history[49].eikonal);
        assert!(decreasing >= 45, "{decreasing}");
        assert_eq!(out.grid.header(), g.header());
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let (mut g, t) = plane_setup(1.0);
        g.data_mut()[700] = f32::NAN;
        let err = optimize_sdf(&g, &t, &[], &OptimizeParams::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 0, .. }));
    }

    #[test]
    fn negative_weight_is_rejected() {
        let (g, t) = plane_setup(1.0);
        let params = OptimizeParams {
            weights: LossWeights {
                lambda_n: -1.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(
            optimize_sdf(&g, &t, &[], &params),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn history_csv_layout() {
        let rec = LossRecord {
            iteration: 0,
            normal: 0.5,
            mask: 0.25,
            eikonal: 1.0,
            total: 1.75,
        };
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,l_normal,l_mask,l_eikonal,l_total\n0,0.5,0.25,1,1.75\n"
        );
    }
}
