//! Forward/backward kernels for the building blocks. All activations are
//! row-major `(tokens, features)` matrices.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W^T + b`, weight stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    /// Parameter gradients only.
    pub fn backward_params(x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / dim;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *inv;
        }
        let mut y = &normalized * &self.gain;
        y += &self.shift;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let dim = dy.ncols() as f64;
        let mut dx = &dy * &self.gain;
        for ((mut row, xhat), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / dim;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / dim;
            Zip::from(&mut row).and(&xhat).for_each(|d, &h| {
                *d = inv * (*d - mean_d - h * mean_dx);
            });
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Multi-head self-attention over one sequence. No masking is needed inside:
/// callers pass only the non-padding positions.
pub struct AttentionCache {
    pub probs: Vec<Array2<f64>>,
}

pub fn attention_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, AttentionCache) {
    let (n, dim) = q.dim();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut context = Array2::zeros((n, dim));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores);
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (context, AttentionCache { probs })
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    cache: &AttentionCache,
    dcontext: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, dim) = q.dim();
    let heads = cache.probs.len();
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Array2::zeros((n, dim));
    let mut dk = Array2::zeros((n, dim));
    let mut dv = Array2::zeros((n, dim));
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let dout = dcontext.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout));
        let dp = dout.dot(&v.slice(cols).t());
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = row.sum();
            Zip::from(&mut row).and(&prow).for_each(|d, &pp| *d -= pp * dot);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `max(z, 0) - z t + ln(1 + exp(-|z|))`.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}
