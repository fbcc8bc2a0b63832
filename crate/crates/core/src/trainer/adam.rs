//! Adam with bias-corrected moments and decoupled weight decay.

/// Optimizer state; one slot per trainable scalar.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One update. Weight decay is decoupled and applied as a direct
    /// multiplicative shrinkage, independent of the learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let shrink = 1.0 - weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut p = params[i];
            if weight_decay != 0.0 {
                p *= shrink;
            }
            params[i] = p - lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}
