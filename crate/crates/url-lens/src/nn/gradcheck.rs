//! Central finite-difference verification of analytic gradients.
//!
//! Used throughout the test suites: every layer and every training loss in
//! this crate is checked against the numeric gradient in double precision.

use super::Param;
use ndarray::ArrayD;

/// Numeric gradient of `loss` w.r.t. every parameter produced by `params_of`.
///
/// `params_of` must yield the parameters in a stable order. Central
/// differences with step `h` are used; the object is restored to its original
/// state afterwards.
pub fn fd_param_grads<T>(
    obj: &mut T,
    params_of: &mut dyn FnMut(&mut T) -> Vec<&mut Param<f64>>,
    loss: &mut dyn FnMut(&T) -> f64,
    h: f64,
) -> Vec<ArrayD<f64>> {
    let shapes: Vec<_> = params_of(obj)
        .iter()
        .map(|p| p.value.raw_dim())
        .collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (pi, shape) in shapes.iter().enumerate() {
        let mut g = ArrayD::<f64>::zeros(shape.clone());
        let len = g.len();
        let gs = g.as_slice_mut().unwrap();
        for k in 0..len {
            nudge(obj, params_of, pi, k, h);
            let lp = loss(obj);
            nudge(obj, params_of, pi, k, -2.0 * h);
            let lm = loss(obj);
            nudge(obj, params_of, pi, k, h);
            gs[k] = (lp - lm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

fn nudge<T>(
    obj: &mut T,
    params_of: &mut dyn FnMut(&mut T) -> Vec<&mut Param<f64>>,
    pi: usize,
    k: usize,
    delta: f64,
) {
    let mut ps = params_of(obj);
    let s = ps[pi]
        .value
        .as_slice_mut()
        .expect("parameters must be contiguous");
    s[k] += delta;
}

/// Norm-relative error between two gradient lists:
/// `||a - n||_2 / max(||n||_2, floor)` over the concatenated components.
pub fn rel_error(analytic: &[ArrayD<f64>], numeric: &[ArrayD<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&av, &nv) in a.iter().zip(n.iter()) {
            diff += (av - nv) * (av - nv);
            norm += nv * nv;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

/// Numeric gradient w.r.t. a standalone input array.
pub fn fd_input_grad(
    x: &mut ArrayD<f64>,
    loss: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    h: f64,
) -> ArrayD<f64> {
    let mut g = ArrayD::<f64>::zeros(x.raw_dim());
    let len = g.len();
    let gs = g.as_slice_mut().unwrap();
    for k in 0..len {
        {
            let s = x.as_slice_mut().unwrap();
            s[k] += h;
        }
        let lp = loss(x);
        {
            let s = x.as_slice_mut().unwrap();
            s[k] -= 2.0 * h;
        }
        let lm = loss(x);
        {
            let s = x.as_slice_mut().unwrap();
            s[k] += h;
        }
        gs[k] = (lp - lm) / (2.0 * h);
    }
    g
}
