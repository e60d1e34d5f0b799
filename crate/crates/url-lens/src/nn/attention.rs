//! Transformer building blocks: layer norm, multi-head self-attention and a
//! post-norm encoder layer. Shapes are `[batch, tokens, dim]` throughout.
//!
//! Attention weights are recorded on the forward tape, both for training
//! backward passes and for extraction by the attribution pipeline.

use super::{relu, relu_backward, Linear, Param, Scalar};
use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gain: Param<F>,
    pub shift: Param<F>,
    pub dim: usize,
}

pub struct LayerNormTape<F> {
    normalized: Array3<F>,
    inv_std: Array2<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(&format!("{name}.gain"), Array1::<F>::ones(dim)),
            shift: Param::new(&format!("{name}.shift"), Array1::<F>::zeros(dim)),
            dim,
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, LayerNormTape<F>) {
        let (n, t, d) = x.dim();
        let eps = F::from_f64(LN_EPS);
        let mut normalized = Array3::<F>::zeros((n, t, d));
        let mut inv_std = Array2::<F>::zeros((n, t));
        let gain = self.gain.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let shift = self.shift.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array3::<F>::zeros((n, t, d));
        let dd = F::from_f64(d as f64);
        for ni in 0..n {
            for ti in 0..t {
                let row = x.slice(ndarray::s![ni, ti, ..]);
                let mean = row.sum() / dd;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dd;
                let istd = F::one() / (var + eps).sqrt();
                inv_std[(ni, ti)] = istd;
                for di in 0..d {
                    let xh = (row[di] - mean) * istd;
                    normalized[(ni, ti, di)] = xh;
                    out[(ni, ti, di)] = xh * gain[di] + shift[di];
                }
            }
        }
        (out, LayerNormTape { normalized, inv_std })
    }

    pub fn backward(&mut self, tape: &LayerNormTape<F>, grad_out: &Array3<F>) -> Array3<F> {
        let (n, t, d) = grad_out.dim();
        let gain = self.gain.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut grad_x = Array3::<F>::zeros((n, t, d));
        let mut g_gain = Array1::<F>::zeros(d);
        let mut g_shift = Array1::<F>::zeros(d);
        let dd = F::from_f64(d as f64);
        for ni in 0..n {
            for ti in 0..t {
                let istd = tape.inv_std[(ni, ti)];
                // accumulate per-vector sums for the normalization backward
                let mut sum_dxh = F::zero();
                let mut sum_dxh_xh = F::zero();
                for di in 0..d {
                    let go = grad_out[(ni, ti, di)];
                    let xh = tape.normalized[(ni, ti, di)];
                    g_gain[di] = g_gain[di] + go * xh;
                    g_shift[di] = g_shift[di] + go;
                    let dxh = go * gain[di];
                    sum_dxh = sum_dxh + dxh;
                    sum_dxh_xh = sum_dxh_xh + dxh * xh;
                }
                for di in 0..d {
                    let go = grad_out[(ni, ti, di)];
                    let xh = tape.normalized[(ni, ti, di)];
                    let dxh = go * gain[di];
                    grad_x[(ni, ti, di)] =
                        istd * (dxh - sum_dxh / dd - xh * sum_dxh_xh / dd);
                }
            }
        }
        self.gain
            .grad
            .zip_mut_with(&g_gain.into_dyn(), |g, &v| *g = *g + v);
        self.shift
            .grad
            .zip_mut_with(&g_shift.into_dyn(), |g, &v| *g = *g + v);
        grad_x
    }
}

/// Multi-head self-attention with learned Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionTape<F> {
    x_flat: Array2<F>,
    q: Array3<F>,
    k: Array3<F>,
    v: Array3<F>,
    /// Attention weights per sample: `[n, heads, tokens, tokens]`, rows sum to 1.
    pub weights: ndarray::Array4<F>,
    concat: Array2<F>,
}

fn to_flat<F: Scalar>(x: &Array3<F>) -> Array2<F> {
    let (n, t, d) = x.dim();
    x.to_owned()
        .into_shape_with_order((n * t, d))
        .unwrap()
}

fn to_tokens<F: Scalar>(x: Array2<F>, n: usize, t: usize) -> Array3<F> {
    let d = x.ncols();
    x.into_shape_with_order((n, t, d)).unwrap()
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, rng),
            dim,
            heads,
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, AttentionTape<F>) {
        let (n, t, d) = x.dim();
        let dh = d / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let x_flat = to_flat(x);
        let q = to_tokens(self.wq.forward(&x_flat), n, t);
        let k = to_tokens(self.wk.forward(&x_flat), n, t);
        let v = to_tokens(self.wv.forward(&x_flat), n, t);
        let mut weights = ndarray::Array4::<F>::zeros((n, self.heads, t, t));
        let mut concat = Array2::<F>::zeros((n * t, d));
        for ni in 0..n {
            for h in 0..self.heads {
                let lo = h * dh;
                let qh = q.slice(ndarray::s![ni, .., lo..lo + dh]);
                let kh = k.slice(ndarray::s![ni, .., lo..lo + dh]);
                let vh = v.slice(ndarray::s![ni, .., lo..lo + dh]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                let attn = super::losses::softmax(&scores);
                let oh = attn.dot(&vh);
                weights
                    .slice_mut(ndarray::s![ni, h, .., ..])
                    .assign(&attn);
                concat
                    .slice_mut(ndarray::s![ni * t..(ni + 1) * t, lo..lo + dh])
                    .assign(&oh);
            }
        }
        let out = to_tokens(self.wo.forward(&concat), n, t);
        (
            out,
            AttentionTape {
                x_flat,
                q,
                k,
                v,
                weights,
                concat,
            },
        )
    }

    pub fn backward(&mut self, tape: &AttentionTape<F>, grad_out: &Array3<F>) -> Array3<F> {
        let (n, t, d) = grad_out.dim();
        let dh = d / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let g_flat = to_flat(grad_out);
        let g_concat = self.wo.backward(&tape.concat, &g_flat);
        let mut gq = Array3::<F>::zeros((n, t, d));
        let mut gk = Array3::<F>::zeros((n, t, d));
        let mut gv = Array3::<F>::zeros((n, t, d));
        for ni in 0..n {
            for h in 0..self.heads {
                let lo = h * dh;
                let g_oh = g_concat
                    .slice(ndarray::s![ni * t..(ni + 1) * t, lo..lo + dh])
                    .to_owned();
                let attn = tape.weights.slice(ndarray::s![ni, h, .., ..]).to_owned();
                let qh = tape.q.slice(ndarray::s![ni, .., lo..lo + dh]);
                let kh = tape.k.slice(ndarray::s![ni, .., lo..lo + dh]);
                let vh = tape.v.slice(ndarray::s![ni, .., lo..lo + dh]);
                let g_attn = g_oh.dot(&vh.t());
                gv.slice_mut(ndarray::s![ni, .., lo..lo + dh])
                    .assign(&attn.t().dot(&g_oh));
                // softmax backward per row
                let mut g_scores = Array2::<F>::zeros((t, t));
                for r in 0..t {
                    let dot = (0..t)
                        .map(|c| attn[(r, c)] * g_attn[(r, c)])
                        .sum::<F>();
                    for c in 0..t {
                        g_scores[(r, c)] = attn[(r, c)] * (g_attn[(r, c)] - dot) * scale;
                    }
                }
                gq.slice_mut(ndarray::s![ni, .., lo..lo + dh])
                    .assign(&g_scores.dot(&kh));
                gk.slice_mut(ndarray::s![ni, .., lo..lo + dh])
                    .assign(&g_scores.t().dot(&qh));
            }
        }
        let mut g_x = self.wq.backward(&tape.x_flat, &to_flat(&gq));
        g_x += &self.wk.backward(&tape.x_flat, &to_flat(&gk));
        g_x += &self.wv.backward(&tape.x_flat, &to_flat(&gv));
        to_tokens(g_x, n, t)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![
            &self.wq.weight,
            &self.wq.bias,
            &self.wk.weight,
            &self.wk.bias,
            &self.wv.weight,
            &self.wv.bias,
            &self.wo.weight,
            &self.wo.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![
            &mut self.wq.weight,
            &mut self.wq.bias,
            &mut self.wk.weight,
            &mut self.wk.bias,
            &mut self.wv.weight,
            &mut self.wv.bias,
            &mut self.wo.weight,
            &mut self.wo.bias,
        ]
    }
}

/// Post-norm transformer encoder layer:
/// `out = LN2(h + MLP(h))` with `h = LN1(x + Attn(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer<F> {
    pub attn: MultiHeadAttention<F>,
    pub ln1: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
    pub ln2: LayerNorm<F>,
}

pub struct EncoderTape<F> {
    pub attn: AttentionTape<F>,
    ln1: LayerNormTape<F>,
    /// Post-LN1 hidden state, input to the MLP and the second residual.
    pub hidden: Array3<F>,
    ff1_in: Array2<F>,
    ff1_out: Array2<F>,
    ln2: LayerNormTape<F>,
    /// Residual sums kept for relevance propagation.
    pub residual1: Array3<F>,
    pub attn_out: Array3<F>,
    pub mlp_out: Array3<F>,
    pub residual2: Array3<F>,
    pub x: Array3<F>,
}

impl<F: Scalar> EncoderLayer<F> {
    pub fn new(name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            ff1: Linear::new(&format!("{name}.ff1"), dim, ffn, rng),
            ff2: Linear::new(&format!("{name}.ff2"), ffn, dim, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, EncoderTape<F>) {
        let (n, t, _d) = x.dim();
        let (attn_out, attn_tape) = self.attn.forward(x);
        let residual1 = x + &attn_out;
        let (hidden, ln1_tape) = self.ln1.forward(&residual1);
        let ff1_in = to_flat(&hidden);
        let ff1_out = self.ff1.forward(&ff1_in);
        let act = relu(&ff1_out);
        let mlp_flat = self.ff2.forward(&act);
        let mlp_out = to_tokens(mlp_flat, n, t);
        let residual2 = &hidden + &mlp_out;
        let (out, ln2_tape) = self.ln2.forward(&residual2);
        (
            out,
            EncoderTape {
                attn: attn_tape,
                ln1: ln1_tape,
                hidden,
                ff1_in,
                ff1_out,
                ln2: ln2_tape,
                residual1,
                attn_out,
                mlp_out,
                residual2,
                x: x.clone(),
            },
        )
    }

    pub fn backward(&mut self, tape: &EncoderTape<F>, grad_out: &Array3<F>) -> Array3<F> {
        let (n, t, _d) = grad_out.dim();
        let g_r2 = self.ln2.backward(&tape.ln2, grad_out);
        // residual2 = hidden + mlp(hidden)
        let g_mlp = to_flat(&g_r2);
        let act = relu(&tape.ff1_out);
        let g_act = self.ff2.backward(&act, &g_mlp);
        let g_ff1 = relu_backward(&tape.ff1_out, &g_act);
        let g_hidden_mlp = self.ff1.backward(&tape.ff1_in, &g_ff1);
        let g_hidden = &g_r2 + &to_tokens(g_hidden_mlp, n, t);
        let g_r1 = self.ln1.backward(&tape.ln1, &g_hidden);
        // residual1 = x + attn(x)
        let g_x_attn = self.attn.backward(&tape.attn, &g_r1);
        &g_r1 + &g_x_attn
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut ps = self.attn.params();
        ps.extend([
            &self.ln1.gain,
            &self.ln1.shift,
            &self.ff1.weight,
            &self.ff1.bias,
            &self.ff2.weight,
            &self.ff2.bias,
            &self.ln2.gain,
            &self.ln2.shift,
        ]);
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut ps = self.attn.params_mut();
        ps.extend([
            &mut self.ln1.gain,
            &mut self.ln1.shift,
            &mut self.ff1.weight,
            &mut self.ff1.bias,
            &mut self.ff2.weight,
            &mut self.ff2.bias,
            &mut self.ln2.gain,
            &mut self.ln2.shift,
        ]);
        ps
    }
}
