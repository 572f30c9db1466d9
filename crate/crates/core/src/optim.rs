use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Bias-corrected Adam state for one parameter matrix.
#[derive(Clone, Debug)]
pub struct Adam {
    m: DenseMatrix,
    v: DenseMatrix,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(rows: usize, cols: usize) -> Self {
        Adam {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: m,v track the gradient moments, the bias-corrected
    /// ratio scales the step.
    pub fn step(&mut self, params: &mut DenseMatrix, grads: &DenseMatrix, lr: f64) -> Result<()> {
        if params.shape() != grads.shape() || params.shape() != self.m.shape() {
            return Err(Error::Shape(format!(
                "adam step: params {:?}, grads {:?}, moments {:?}",
                params.shape(),
                grads.shape(),
                self.m.shape()
            )));
        }
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (ms, vs, ps, gs) = (
            self.m.values_mut(),
            self.v.values_mut(),
            params.values_mut(),
            grads.values(),
        );
        for i in 0..gs.len() {
            let g = gs[i];
            ms[i] = b1 * ms[i] + (1.0 - b1) * g;
            vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
            let m_hat = ms[i] / bc1;
            let v_hat = vs[i] / bc2;
            ps[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
