//! Adam and global gradient-norm clipping over flat parameter vectors.

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Bias-corrected update `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam: parameter/gradient length mismatch");
        assert_eq!(
            params.len(),
            self.m.len(),
            "adam: moment buffers sized for another model"
        );
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut a = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut p = [0.0];
        a.step(&mut p, &[1.0], 0.1);
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = [1.5, -2.0];
        for _ in 0..5 {
            a.step(&mut p, &[0.0, 0.0], 0.1);
        }
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn matches_scalar_recursion() {
        let grads = [0.3, -1.2, 0.7, 0.7, 2.0];
        let (b1, b2, eps, lr) = (0.8, 0.95, 1e-6, 0.05);
        let mut a = Adam::new(1, b1, b2, eps);
        let mut p = [0.4];
        for &g in &grads {
            a.step(&mut p, &[g], lr);
        }
        // reference: expand the moment recursions as explicit sums
        let mut theta = 0.4;
        for t in 1..=grads.len() {
            let m: f64 = (1..=t)
                .map(|k| (1.0 - b1) * b1.powi((t - k) as i32) * grads[k - 1])
                .sum();
            let v: f64 = (1..=t)
                .map(|k| (1.0 - b2) * b2.powi((t - k) as i32) * grads[k - 1] * grads[k - 1])
                .sum();
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - theta).abs() < 1e-13);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(g in proptest::collection::vec(-1e3f64..1e3, 1..50), clip in 0.1f64..100.0) {
            let mut g = g;
            let before = clip_grad_norm(&mut g, clip);
            let after = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(after <= clip + 1e-12);
            if before <= clip {
                prop_assert_eq!(after, before);
            }
        }
    }
}
