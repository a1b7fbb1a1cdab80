//! Adam and an exponential moving average of the parameters.

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Parameter EMA with the usual `(1 + n) / (10 + n)` warm-up of the decay.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    shadow: Vec<f64>,
    updates: u64,
}

impl Ema {
    pub fn new(params: &[f64], decay: f64) -> Self {
        Self { decay, shadow: params.to_vec(), updates: 0 }
    }

    pub fn update(&mut self, params: &[f64]) {
        self.updates += 1;
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn first_adam_step_moves_by_the_learning_rate() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Adam::new(2, 0.01);
        opt.step(&mut p, &[5.0, -0.1]);
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn ema_tracks_a_constant() {
        let mut ema = Ema::new(&[0.0], 0.99);
        for _ in 0..2000 {
            ema.update(&[1.0]);
        }
        assert!((ema.params()[0] - 1.0).abs() < 1e-6);
    }
}
