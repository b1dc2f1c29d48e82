//! First-order adaptive-moment updates over flat parameter vectors.

/// Adam with bias correction. Each parameter carries its own step size so
/// differently scaled groups can share one state.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: Vec<f64>) -> Self {
        let n = lr.len();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn uniform(n: usize, lr: f64) -> Self {
        Self::new(vec![lr; n])
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr[i] * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Same update for `f32` storage; moments stay in `f64`.
    pub fn step_f32(&mut self, params: &mut [f32], grads: &[f64]) {
        let mut p: Vec<f64> = params.iter().map(|&x| x as f64).collect();
        self.step(&mut p, grads);
        for (dst, src) in params.iter_mut().zip(p) {
            *dst = src as f32;
        }
    }
}
