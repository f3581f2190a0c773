//! Adam with standard moment defaults. Updates network weights only; the
//! center bank has its own rule.

use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update over a fixed parameter list. Parameters without an
    /// accumulated gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        debug_assert_eq!(self.m.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad_vec();
            let g = grad.as_deref().unwrap_or(&[]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_values(|w| {
                for j in 0..w.len() {
                    let gj = if g.is_empty() { 0.0 } else { g[j] };
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
    }
}
