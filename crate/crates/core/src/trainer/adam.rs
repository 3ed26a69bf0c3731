use crate::tensor::Mat;

/// Adam with bias correction, constant step size, no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.rows, g.cols)).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Mat::from_vec(1, 2, vec![1.0, -1.0]);
        let g = Mat::from_vec(1, 2, vec![0.3, -5.0]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p], &[g]);
        assert!((p.data[0] - 0.99).abs() < 1e-6);
        assert!((p.data[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Mat::from_vec(1, 1, vec![3.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.scaled(2.0);
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p.data[0].abs() < 1e-2);
    }
}
