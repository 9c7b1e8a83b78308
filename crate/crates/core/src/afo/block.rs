//! Forward and backward passes of one pre-norm transformer block over a
//! `tokens × dim` matrix.

use ndarray::{Array1, Array2, Axis};

use super::params::BlockParams;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

pub(crate) struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * *r);
    }
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, rstd })
}

/// Returns the input gradient and accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for t in 0..dy.nrows() {
        let g = dxhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let r = cache.rstd[t];
        for c in 0..dy.ncols() {
            dx[[t, c]] = r * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub(crate) fn block_forward(x: &Array2<f64>, p: &BlockParams) -> (Array2<f64>, BlockCache) {
    let scale = 1.0 / (x.ncols() as f64).sqrt();
    let (h1, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = h1.dot(&p.w_query);
    let k = h1.dot(&p.w_key);
    let v = h1.dot(&p.w_value);
    let mut attn = q.dot(&k.t()) * scale;
    softmax_rows(&mut attn);
    let x1 = x + &attn.dot(&v);

    let (h2, ln2) = layer_norm(&x1, &p.ln2_gain, &p.ln2_bias);
    let u = h2.dot(&p.mlp_w1) + &p.mlp_b1;
    let g = u.mapv(gelu);
    let out = &x1 + &(g.dot(&p.mlp_w2) + &p.mlp_b2);
    (
        out,
        BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            ln2,
            h2,
            u,
            g,
        },
    )
}

/// Back-propagates `dout` through the block, accumulating into `grads`.
pub(crate) fn block_backward(
    dout: &Array2<f64>,
    cache: &BlockCache,
    p: &BlockParams,
    grads: &mut BlockParams,
) -> Array2<f64> {
    let scale = 1.0 / (dout.ncols() as f64).sqrt();

    // MLP branch
    grads.mlp_w2 += &cache.g.t().dot(dout);
    grads.mlp_b2 += &dout.sum_axis(Axis(0));
    let dg = dout.dot(&p.mlp_w2.t());
    let du = &dg * &cache.u.mapv(gelu_grad);
    grads.mlp_w1 += &cache.h2.t().dot(&du);
    grads.mlp_b1 += &du.sum_axis(Axis(0));
    let dh2 = du.dot(&p.mlp_w1.t());
    let dx1 = dout
        + &layer_norm_backward(
            &dh2,
            &cache.ln2,
            &p.ln2_gain,
            &mut grads.ln2_gain,
            &mut grads.ln2_bias,
        );

    // attention branch
    let dattn = dx1.dot(&cache.v.t());
    let dv = cache.attn.t().dot(&dx1);
    let mut ds = &dattn * &cache.attn;
    let row_dot = ds.sum_axis(Axis(1));
    for (mut row, (a_row, rd)) in ds
        .rows_mut()
        .into_iter()
        .zip(cache.attn.rows().into_iter().zip(row_dot.iter()))
    {
        row.zip_mut_with(&a_row, |s, &a| *s -= a * rd);
    }
    ds *= scale;
    let dq = ds.dot(&cache.k);
    let dk = ds.t().dot(&cache.q);
    grads.w_query += &cache.h1.t().dot(&dq);
    grads.w_key += &cache.h1.t().dot(&dk);
    grads.w_value += &cache.h1.t().dot(&dv);
    let dh1 = dq.dot(&p.w_query.t()) + dk.dot(&p.w_key.t()) + dv.dot(&p.w_value.t());
    dx1 + layer_norm_backward(
        &dh1,
        &cache.ln1,
        &p.ln1_gain,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    )
}
