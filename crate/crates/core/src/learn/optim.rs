//! Adam optimiser and the cosine learning-rate schedule.

use super::scalar::Scalar;

/// Adam with bias correction. Moment buffers are laid out to match the
/// parameter slice order handed to [`Adam::step`], which must be identical
/// on every call.
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update over matched (parameter, gradient) slices.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + self.eps);
                p[i] = T::from_f64(p[i].as_f64() - delta);
            }
        }
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Cosine annealing from `lr_init` at epoch 0 towards zero at `total`.
pub fn cosine_lr(lr_init: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let progress = (epoch as f64 / total as f64).min(1.0);
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-12);
        assert!(cosine_lr(1e-3, 100, 100) < 1e-18);
        // monotone decreasing
        let lrs: Vec<f64> = (0..=20).map(|e| cosine_lr(1.0, e, 20)).collect();
        assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimise (x-3)^2 + (y+1)^2
        let mut x = vec![0.0f64, 0.0];
        let mut adam = Adam::<f64>::new();
        for _ in 0..500 {
            let g = vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)];
            let mut p: Vec<&mut [f64]> = vec![&mut x];
            adam.step(0.05, &mut p, &[&g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "x {x:?}");
        assert!((x[1] + 1.0).abs() < 1e-2, "x {x:?}");
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut x = vec![1.5f64, -2.5];
        let orig = x.clone();
        let mut adam = Adam::<f64>::new();
        let g = vec![1.0, 1.0];
        let mut p: Vec<&mut [f64]> = vec![&mut x];
        adam.step(0.0, &mut p, &[&g]);
        assert_eq!(x, orig);
    }
}
