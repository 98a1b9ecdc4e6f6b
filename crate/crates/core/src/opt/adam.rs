use crate::error::{Error, Result};
use crate::exec;

/// First-order Adam state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f32], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::mismatch(
                self.m.len().to_string(),
                format!("params {}, grad {}", params.len(), grad.len()),
            ));
        }
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.lr);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut packed: Vec<(f32, f32, f32)> = vec![(0.0, 0.0, 0.0); params.len()];
        let (m, v) = (&self.m, &self.v);
        let p_ref: &[f32] = params;
        exec::fill_indexed(&mut packed, |i| {
            let g = grad[i];
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            if mi == 0.0 {
                return (p_ref[i], mi as f32, vi as f32);
            }
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            ((p_ref[i] as f64 - update) as f32, mi as f32, vi as f32)
        });
        for (i, (p, mi, vi)) in packed.into_iter().enumerate() {
            params[i] = p;
            self.m[i] = mi;
            self.v[i] = vi;
        }
        Ok(())
    }
}
