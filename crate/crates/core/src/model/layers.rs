use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::AttentionParams;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(super) fn gelu_backward(pre: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
    let mut out = d_out.clone();
    Zip::from(&mut out).and(pre).for_each(|d, &x| *d *= gelu_grad(x));
    out
}

/// Numerically stable row softmax, in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V`; also returns the `N x N` attention map.
pub fn attention(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let dk = q.ncols() as f64;
    let mut scores = q.dot(&k.t()) / dk.sqrt();
    softmax_rows(&mut scores);
    (scores.dot(v), scores)
}

/// Gradients of `attention` w.r.t. `(Q, K, V)` given the saved probabilities.
pub(super) fn attention_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    probs: &Array2<f64>,
    d_out: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let d_probs = d_out.dot(&v.t());
    let d_v = probs.t().dot(d_out);
    let mut d_scores = d_probs;
    for (mut ds, p) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
        let dot = ds.dot(&p);
        Zip::from(&mut ds).and(&p).for_each(|d, &pi| *d = pi * (*d - dot));
    }
    d_scores *= scale;
    let d_q = d_scores.dot(k);
    let d_k = d_scores.t().dot(q);
    (d_q, d_k, d_v)
}

pub(super) struct MhaCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

pub(super) fn mha_forward(x: &Array2<f64>, p: &AttentionParams, n_heads: usize) -> (Array2<f64>, MhaCache) {
    let q = x.dot(&p.w_q);
    let k = x.dot(&p.w_k);
    let v = x.dot(&p.w_v);
    let d = q.ncols();
    let dk = d / n_heads;
    let mut concat = Array2::zeros((x.nrows(), d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let (o, pm) = attention(&q.slice(cols), &k.slice(cols), &v.slice(cols));
        concat.slice_mut(cols).assign(&o);
        probs.push(pm);
    }
    let out = concat.dot(&p.w_o);
    (
        out,
        MhaCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

pub(super) fn mha_backward(
    cache: &MhaCache,
    p: &AttentionParams,
    n_heads: usize,
    d_out: &Array2<f64>,
) -> (Array2<f64>, AttentionParams) {
    let w_o = cache.concat.t().dot(d_out);
    let d_concat = d_out.dot(&p.w_o.t());
    let d = cache.q.ncols();
    let dk = d / n_heads;
    let n = cache.x.nrows();
    let mut dq = Array2::zeros((n, d));
    let mut dk_all = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..n_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let (gq, gk, gv) = attention_backward(
            &cache.q.slice(cols),
            &cache.k.slice(cols),
            &cache.v.slice(cols),
            &cache.probs[h],
            &d_concat.slice(cols),
        );
        dq.slice_mut(cols).assign(&gq);
        dk_all.slice_mut(cols).assign(&gk);
        dv.slice_mut(cols).assign(&gv);
    }
    let xt = cache.x.t();
    let grads = AttentionParams {
        w_q: xt.dot(&dq),
        w_k: xt.dot(&dk_all),
        w_v: xt.dot(&dv),
        w_o,
    };
    let dx = dq.dot(&p.w_q.t()) + dk_all.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());
    (dx, grads)
}

pub(super) struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Row-wise layer normalization with affine parameters.
pub(super) fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let out = &xhat * &gamma.view().insert_axis(Axis(0)) + beta.view().insert_axis(Axis(0));
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(super) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d_gamma = (d_out * &cache.xhat).sum_axis(Axis(0));
    let d_beta = d_out.sum_axis(Axis(0));
    let mut dx = d_out * &gamma.view().insert_axis(Axis(0));
    let d = dx.ncols() as f64;
    for ((mut row, xh), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xh) / d;
        Zip::from(&mut row).and(&xh).for_each(|g, &h| *g = inv * (*g - mean_d - h * mean_dx));
    }
    (dx, d_gamma, d_beta)
}
