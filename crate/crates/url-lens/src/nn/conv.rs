//! Convolution and transposed convolution via im2col + GEMM.
//!
//! The same column gather/scatter pair drives both directions: a transposed
//! convolution forward is exactly the column scatter used by the convolution
//! backward-data pass, which keeps the adjoint relationship airtight.

use super::{he_init, Param, Scalar};
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand_chacha::ChaCha8Rng;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gather sliding windows of `x` ([n, c, h, w]) into a matrix of shape
/// `[c*kh*kw, n*oh*ow]`. Out-of-bounds (padded) taps read as zero.
pub fn im2col<F: Scalar>(
    x: ArrayView4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<F>::zeros((c * kh * kw, n * oh * ow));
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                let mut row_view = cols.row_mut(row);
                for ni in 0..n {
                    let plane = x.index_axis(Axis(0), ni);
                    let plane = plane.index_axis(Axis(0), ci);
                    for i in 0..oh {
                        let ih = (i * stride + a) as isize - pad as isize;
                        let base = (ni * oh + i) * ow;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let iw = (j * stride + b) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                row_view[base + j] = plane[(ih as usize, iw as usize)];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image of shape
/// `[n, c, h, w]`.
pub fn col2im<F: Scalar>(
    cols: ArrayView2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    assert_eq!(cols.dim(), (c * kh * kw, n * oh * ow));
    let mut x = Array4::<F>::zeros((n, c, h, w));
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = cols.row((ci * kh + a) * kw + b);
                for ni in 0..n {
                    for i in 0..oh {
                        let ih = (i * stride + a) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (ni * oh + i) * ow;
                        for j in 0..ow {
                            let iw = (j * stride + b) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                x[(ni, ci, ih as usize, iw as usize)] =
                                    x[(ni, ci, ih as usize, iw as usize)] + row[base + j];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution layer. Weight layout `[out_c, in_c, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = he_init::<F>(&[out_c, in_c, kernel, kernel], fan_in, rng);
        Conv2d {
            weight: Param {
                name: format!("{name}.weight"),
                grad: ndarray::ArrayD::zeros(weight.raw_dim()),
                value: weight,
            },
            bias: Param::new(&format!("{name}.bias"), Array1::<F>::zeros(out_c)),
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_len(h, self.kernel, self.stride, self.pad),
            conv_out_len(w, self.kernel, self.stride, self.pad),
        )
    }

    fn weight_mat(&self) -> Array2<F> {
        let k = self.in_c * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_c, k))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_spatial(h, w);
        let cols = im2col(x.view(), self.kernel, self.kernel, self.stride, self.pad);
        let out_mat = self.weight_mat().dot(&cols);
        let mut out = Array4::<F>::zeros((n, self.out_c, oh, ow));
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for ni in 0..n {
            for o in 0..self.out_c {
                let b = bias[o];
                let mut plane = out.index_axis_mut(Axis(0), ni);
                let mut plane = plane.index_axis_mut(Axis(0), o);
                for i in 0..oh {
                    for j in 0..ow {
                        plane[(i, j)] = out_mat[(o, (ni * oh + i) * ow + j)] + b;
                    }
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients and return the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Array4<F>, grad_out: &Array4<F>) -> Array4<F> {
        let (n, _, h, w) = x.dim();
        let (gn, go, oh, ow) = grad_out.dim();
        assert_eq!(gn, n);
        assert_eq!(go, self.out_c);
        // [out_c, n*oh*ow] view of the upstream gradient
        let mut g_mat = Array2::<F>::zeros((self.out_c, n * oh * ow));
        for ni in 0..n {
            for o in 0..self.out_c {
                for i in 0..oh {
                    for j in 0..ow {
                        g_mat[(o, (ni * oh + i) * ow + j)] = grad_out[(ni, o, i, j)];
                    }
                }
            }
        }
        let cols = im2col(x.view(), self.kernel, self.kernel, self.stride, self.pad);
        let grad_w = g_mat.dot(&cols.t());
        let k = self.in_c * self.kernel * self.kernel;
        self.weight.grad.zip_mut_with(
            &grad_w
                .into_shape_with_order((self.out_c, self.in_c, self.kernel, self.kernel))
                .unwrap()
                .into_dyn(),
            |g, &d| *g = *g + d,
        );
        let grad_b = g_mat.sum_axis(Axis(1));
        self.bias
            .grad
            .zip_mut_with(&grad_b.into_dyn(), |g, &d| *g = *g + d);
        let w_mat = self.weight_mat();
        debug_assert_eq!(w_mat.dim(), (self.out_c, k));
        let grad_cols = w_mat.t().dot(&g_mat);
        col2im(
            grad_cols.view(),
            n,
            self.in_c,
            h,
            w,
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
        )
    }
}

/// Transposed 2-D convolution. Weight layout `[in_c, out_c, kh, kw]`;
/// output spatial size is `(h - 1) * stride - 2 * pad + kernel`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = he_init::<F>(&[in_c, out_c, kernel, kernel], fan_in, rng);
        ConvTranspose2d {
            weight: Param {
                name: format!("{name}.weight"),
                grad: ndarray::ArrayD::zeros(weight.raw_dim()),
                value: weight,
            },
            bias: Param::new(&format!("{name}.bias"), Array1::<F>::zeros(out_c)),
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.pad,
            (w - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    fn weight_mat(&self) -> Array2<F> {
        let k = self.out_c * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_c, k))
            .unwrap()
            .to_owned()
    }

    /// [in_c, n*h*w] matrix view of the input.
    fn input_mat(x: &Array4<F>) -> Array2<F> {
        let (n, c, h, w) = x.dim();
        let mut m = Array2::<F>::zeros((c, n * h * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        m[(ci, (ni * h + i) * w + j)] = x[(ni, ci, i, j)];
                    }
                }
            }
        }
        m
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv-transpose input channels");
        let (oh, ow) = self.out_spatial(h, w);
        let x_mat = Self::input_mat(x);
        let cols = self.weight_mat().t().dot(&x_mat);
        let mut out = col2im(
            cols.view(),
            n,
            self.out_c,
            oh,
            ow,
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
        );
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for o in 0..self.out_c {
            let b = bias[o];
            out.index_axis_mut(Axis(1), o).mapv_inplace(|v| v + b);
        }
        out
    }

    pub fn backward(&mut self, x: &Array4<F>, grad_out: &Array4<F>) -> Array4<F> {
        let (n, _, h, w) = x.dim();
        let grad_cols = im2col(
            grad_out.view(),
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
        );
        let x_mat = Self::input_mat(x);
        // forward was cols = W^T x, so dW = x . dcols^T and dx = W . dcols
        let grad_w = x_mat.dot(&grad_cols.t());
        self.weight.grad.zip_mut_with(
            &grad_w
                .into_shape_with_order((self.in_c, self.out_c, self.kernel, self.kernel))
                .unwrap()
                .into_dyn(),
            |g, &d| *g = *g + d,
        );
        let grad_b = grad_out.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
        self.bias
            .grad
            .zip_mut_with(&grad_b.into_dyn(), |g, &d| *g = *g + d);
        let grad_x_mat = self.weight_mat().dot(&grad_cols);
        let mut grad_x = Array4::<F>::zeros((n, self.in_c, h, w));
        for ni in 0..n {
            for ci in 0..self.in_c {
                for i in 0..h {
                    for j in 0..w {
                        grad_x[(ni, ci, i, j)] = grad_x_mat[(ci, (ni * h + i) * w + j)];
                    }
                }
            }
        }
        grad_x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::nn::init_rng;
    use ndarray::{array, Array4};

    #[test]
    fn conv_known_values_single_channel() {
        let mut rng = init_rng(0);
        let mut conv = Conv2d::<f64>::new("c", 1, 1, 2, 1, 0, &mut rng);
        conv.weight
            .value
            .assign(&array![[[[1.0, 0.0], [0.0, 1.0]]]].into_dyn());
        conv.bias.value.assign(&array![0.5].into_dyn());
        let x =
            Array4::from_shape_vec((1, 1, 3, 3), (1..=9).map(|v| v as f64).collect()).unwrap();
        let y = conv.forward(&x);
        // windows: [1,2;4,5] -> 1+5, [2,3;5,6] -> 2+6, ...
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[(0, 0, 0, 0)], 6.5);
        assert_eq!(y[(0, 0, 0, 1)], 8.5);
        assert_eq!(y[(0, 0, 1, 0)], 12.5);
        assert_eq!(y[(0, 0, 1, 1)], 14.5);
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut rng = init_rng(1);
        let t = ConvTranspose2d::<f64>::new("t", 3, 2, 4, 2, 1, &mut rng);
        let x = Array4::<f64>::zeros((2, 3, 8, 8));
        assert_eq!(t.forward(&x).dim(), (2, 2, 16, 16));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = init_rng(2);
        let x = Array4::from_shape_fn((2, 3, 5, 5), |_| crate::nn::gaussian(&mut rng));
        let cols_shape = im2col(x.view(), 3, 3, 2, 1).dim();
        let c = ndarray::Array2::from_shape_fn(cols_shape, |_| crate::nn::gaussian(&mut rng));
        let lhs: f64 = (&im2col(x.view(), 3, 3, 2, 1) * &c).sum();
        let back = col2im(c.view(), 2, 3, 5, 5, 3, 3, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = init_rng(3);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| crate::nn::gaussian(&mut rng));
        let target = Array4::from_shape_fn((2, 3, 3, 3), |_| crate::nn::gaussian(&mut rng));
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 2, 2, 1, &mut rng);
        let loss_of = |c: &Conv2d<f64>| {
            let y = c.forward(&x);
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };

        let y = conv.forward(&x);
        let g = &y - &target;
        conv.weight.zero_grad();
        conv.bias.zero_grad();
        let grad_x = conv.backward(&x, &g);
        let analytic = vec![conv.weight.grad.clone(), conv.bias.grad.clone()];

        let numeric = gradcheck::fd_param_grads(
            &mut conv,
            &mut |c| vec![&mut c.weight, &mut c.bias],
            &mut |c| loss_of(c),
            1e-6,
        );
        assert!(gradcheck::rel_error(&analytic, &numeric) < 1e-8);

        let mut xd = x.clone().into_dyn();
        let fd_x = gradcheck::fd_input_grad(
            &mut xd,
            &mut |xv| {
                let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                loss_of_input(&conv, &x4.to_owned(), &target)
            },
            1e-6,
        );
        assert!(
            gradcheck::rel_error(&[grad_x.into_dyn()], &[fd_x]) < 1e-8,
            "conv input gradient mismatch"
        );

        fn loss_of_input(
            c: &Conv2d<f64>,
            x: &Array4<f64>,
            target: &Array4<f64>,
        ) -> f64 {
            let y = c.forward(x);
            0.5 * (&y - target).mapv(|v| v * v).sum()
        }
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut rng = init_rng(4);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| crate::nn::gaussian(&mut rng));
        let mut t = ConvTranspose2d::<f64>::new("t", 3, 2, 4, 2, 1, &mut rng);
        let (oh, ow) = t.out_spatial(4, 4);
        let target = Array4::from_shape_fn((2, 2, oh, ow), |_| crate::nn::gaussian(&mut rng));

        let y = t.forward(&x);
        let g = &y - &target;
        t.weight.zero_grad();
        t.bias.zero_grad();
        let grad_x = t.backward(&x, &g);
        let analytic = vec![t.weight.grad.clone(), t.bias.grad.clone()];

        let numeric = gradcheck::fd_param_grads(
            &mut t,
            &mut |t| vec![&mut t.weight, &mut t.bias],
            &mut |t| {
                let y = t.forward(&x);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-6,
        );
        assert!(gradcheck::rel_error(&analytic, &numeric) < 1e-8);

        let mut xd = x.clone().into_dyn();
        let fd_x = gradcheck::fd_input_grad(
            &mut xd,
            &mut |xv| {
                let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
                let y = t.forward(&x4);
                0.5 * (&y - &target).mapv(|v| v * v).sum()
            },
            1e-6,
        );
        assert!(gradcheck::rel_error(&[grad_x.into_dyn()], &[fd_x]) < 1e-8);
    }
}
