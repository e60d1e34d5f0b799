//! Minimal neural-network substrate used by every agent in the lab.
//!
//! Layers are hand-rolled on top of `ndarray` with explicit forward and
//! backward passes. That is a deliberate choice: the attribution module needs
//! named access to convolutional activation maps, their gradients, and the
//! full layer list with weights, which autodiff frameworks tend to hide.
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient checks and relevance propagation run in `f64`.

pub mod adam;
pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod losses;
pub mod serialize;

pub use adam::Adam;
pub use attention::{EncoderLayer, LayerNorm, MultiHeadAttention};
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;

use ndarray::{ArrayD, Dimension, NdFloat};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Floating-point element type of a network. Implemented for `f32` and `f64`.
pub trait Scalar:
    NdFloat + num_traits::FromPrimitive + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A named tensor parameter together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new<D: Dimension>(name: &str, value: ndarray::Array<F, D>) -> Self {
        let value = value.into_dyn();
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.to_string(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Convert the parameter to another scalar type (used to run attribution
    /// in double precision on nets trained in single precision).
    pub fn cast<G: Scalar>(&self) -> Param<G> {
        Param {
            name: self.name.clone(),
            value: self.value.mapv(|x| G::from_f64(x.as_f64())),
            grad: ArrayD::zeros(self.value.raw_dim()),
        }
    }
}

/// Anything that owns trainable parameters.
pub trait HasParams<F: Scalar> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Deterministic RNG used for every weight initialization in the lab.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal sample via Box-Muller. Keeps initialization byte-stable
/// across `rand` crate upgrades.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// He-style fan-in initialization for an arbitrary-shaped tensor.
pub fn he_init<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| F::from_f64(gaussian(rng) * std))
}

/// Uniform(-bound, bound) initialization, the usual choice for linear heads.
pub fn uniform_init<F: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    ArrayD::from_shape_fn(shape, |_| {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        F::from_f64((2.0 * u - 1.0) * bound)
    })
}

/// Elementwise ReLU.
pub fn relu<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Backward of ReLU given the layer input and upstream gradient.
pub fn relu_backward<F: Scalar, D: Dimension>(
    input: &ndarray::Array<F, D>,
    grad_out: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(input).for_each(|g, &x| {
        if x <= F::zero() {
            *g = F::zero();
        }
    });
    g
}
