//! Adaptive-moment optimizer shared by all trainers.

use super::{Param, Scalar};
use ndarray::ArrayD;

/// Adam with the usual defaults (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
///
/// Moment buffers are kept inside the optimizer, indexed by parameter order,
/// so the same optimizer instance must always be stepped with the same
/// parameter list.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
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

    /// Apply one update using the gradients currently stored in `params`,
    /// then clear them.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "optimizer stepped with a different parameter list"
        );
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        let scale = self.lr * bias2.sqrt() / bias1;
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g.as_f64();
                    let mf = m.as_f64() * b1 + (1.0 - b1) * g;
                    let vf = v.as_f64() * b2 + (1.0 - b2) * g * g;
                    *m = F::from_f64(mf);
                    *v = F::from_f64(vf);
                    *w = F::from_f64(w.as_f64() - scale * mf / (vf.sqrt() + self.eps));
                });
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Adam on a convex quadratic must drive the parameter to the optimum.
    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::new("x", array![5.0f64, -3.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..2000 {
            let g = p.value.mapv(|x| 2.0 * (x - 1.0));
            p.grad.assign(&g);
            opt.step(&mut [&mut p]);
        }
        assert!((p.value[[0]] - 1.0).abs() < 1e-3);
        assert!((p.value[[1]] - 1.0).abs() < 1e-3);
    }

    /// First step of Adam moves each coordinate by ~lr regardless of gradient
    /// scale (sign-like behaviour of the bias-corrected update).
    #[test]
    fn first_step_has_unit_scale() {
        let mut p = Param::new("x", array![0.0f64]);
        p.grad.assign(&array![123.0]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]);
        assert!((p.value[[0]] + 0.01).abs() < 1e-9);
    }
}
