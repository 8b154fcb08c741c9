//! Adam optimizer with bias correction.

use ndarray::ArrayD;

use super::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
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

    /// One update over `params` using their accumulated gradients, then
    /// clears the gradients. Parameter order must be stable across calls.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer/param count changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|pv, &g, mv, vv| {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.zero_grad();
        }
    }

    /// Flatten optimizer state for checkpointing: (t, moment arrays in
    /// param order, second-moment arrays in param order).
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
