//! Fully connected layer.

use super::{he_init, uniform_init, Param, Scalar};
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

/// Dense layer `y = x W^T + b` with weight shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<F: Scalar> Linear<F> {
    /// He initialization, for layers followed by a ReLU.
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = he_init::<F>(&[out_dim, in_dim], in_dim, rng);
        Self::from_weight(name, weight, in_dim, out_dim)
    }

    /// Small-uniform initialization, for output heads (keeps initial policies
    /// near uniform and initial values near zero).
    pub fn new_head(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt() * 0.01;
        let weight = uniform_init::<F>(&[out_dim, in_dim], bound, rng);
        Self::from_weight(name, weight, in_dim, out_dim)
    }

    fn from_weight(
        name: &str,
        weight: ndarray::ArrayD<F>,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Linear {
            weight: Param {
                name: format!("{name}.weight"),
                grad: ndarray::ArrayD::zeros(weight.raw_dim()),
                value: weight,
            },
            bias: Param::new(&format!("{name}.bias"), Array1::<F>::zeros(out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn weight2(&self) -> ndarray::ArrayView2<F> {
        self.weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    pub fn bias1(&self) -> ndarray::ArrayView1<F> {
        self.bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    }

    /// `x`: [n, in] -> [n, out]
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight2().t());
        y += &self.bias1();
        y
    }

    /// Accumulates parameter gradients, returns gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Array2<F>, grad_out: &Array2<F>) -> Array2<F> {
        let gw = grad_out.t().dot(x);
        self.weight
            .grad
            .zip_mut_with(&gw.into_dyn(), |g, &d| *g = *g + d);
        let gb = grad_out.sum_axis(Axis(0));
        self.bias
            .grad
            .zip_mut_with(&gb.into_dyn(), |g, &d| *g = *g + d);
        grad_out.dot(&self.weight2())
    }
}
