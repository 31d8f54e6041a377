//! Forward and backward passes for the building blocks of the network.
//!
//! Every forward function returns its output and a cache holding what the
//! matching backward function needs. Backward functions accumulate into
//! parameter gradients (`+=`) and return the gradient with respect to their
//! input. Sequences of a batch are packed row-wise into one matrix; attention
//! is restricted to each sequence's [`Segment`].

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

pub(crate) type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

/// Row range of one sequence inside a packed matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    fn range(self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

pub(crate) fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.dot(w);
    y += b;
    y
}

pub(crate) fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, gw: &mut Mat, gb: &mut Mat) -> Mat {
    general_mat_mul(1.0, &x.t(), dy, 1.0, gw);
    *gb += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct LayerNormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Mat, gamma: &Mat, beta: &Mat) -> (Mat, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let mut y = &xhat * gamma;
    y += beta;
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Mat,
    dy: &Mat,
    ggamma: &mut Mat,
    gbeta: &mut Mat,
) -> Mat {
    *ggamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *gbeta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gamma;
    for ((mut row, xhat), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let sum = row.sum();
        let dot = row.dot(&xhat);
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = inv * (*g - sum / d - xh * dot / d));
    }
    dx
}

pub(crate) struct FeedForwardCache {
    x: Mat,
    hidden: Mat,
}

pub(crate) fn feed_forward(x: &Mat, w1: &Mat, b1: &Mat, w2: &Mat, b2: &Mat) -> (Mat, FeedForwardCache) {
    let mut hidden = linear(x, w1, b1);
    hidden.mapv_inplace(|v| v.max(0.0));
    let y = linear(&hidden, w2, b2);
    (y, FeedForwardCache { x: x.clone(), hidden })
}

pub(crate) struct FeedForwardGrads<'a> {
    pub w1: &'a mut Mat,
    pub b1: &'a mut Mat,
    pub w2: &'a mut Mat,
    pub b2: &'a mut Mat,
}

pub(crate) fn feed_forward_backward(
    cache: &FeedForwardCache,
    w1: &Mat,
    w2: &Mat,
    dy: &Mat,
    grads: FeedForwardGrads<'_>,
) -> Mat {
    let mut dhidden = linear_backward(&cache.hidden, w2, dy, grads.w2, grads.b2);
    Zip::from(&mut dhidden).and(&cache.hidden).for_each(|g, &h| {
        if h <= 0.0 {
            *g = 0.0;
        }
    });
    linear_backward(&cache.x, w1, &dhidden, grads.w1, grads.b1)
}

pub(crate) struct AttentionWeights<'a> {
    pub wq: &'a Mat,
    pub bq: &'a Mat,
    pub wk: &'a Mat,
    pub bk: &'a Mat,
    pub wv: &'a Mat,
    pub bv: &'a Mat,
    pub wo: &'a Mat,
    pub bo: &'a Mat,
}

pub(crate) struct AttentionGrads<'a> {
    pub wq: &'a mut Mat,
    pub bq: &'a mut Mat,
    pub wk: &'a mut Mat,
    pub bk: &'a mut Mat,
    pub wv: &'a mut Mat,
    pub bv: &'a mut Mat,
    pub wo: &'a mut Mat,
    pub bo: &'a mut Mat,
}

pub(crate) struct AttentionCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    ctx: Mat,
    /// Attention probabilities, indexed `segment * heads + head`.
    probs: Vec<Mat>,
    q_segs: Vec<Segment>,
    kv_segs: Vec<Segment>,
    heads: usize,
}

/// Multi-head scaled dot-product attention. Query segment `i` attends only
/// to key/value segment `i`; with `causal`, row `r` of a segment sees keys
/// `0..=r` of the same segment.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention(
    w: &AttentionWeights<'_>,
    xq: &Mat,
    xkv: &Mat,
    q_segs: &[Segment],
    kv_segs: &[Segment],
    heads: usize,
    causal: bool,
) -> (Mat, AttentionCache) {
    debug_assert_eq!(q_segs.len(), kv_segs.len());
    let q = linear(xq, w.wq, w.bq);
    let k = linear(xkv, w.wk, w.bk);
    let v = linear(xkv, w.wv, w.bv);
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Mat::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(q_segs.len() * heads);
    for (&qs, &ks) in q_segs.iter().zip(kv_segs) {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qs.range(), cols.clone()]);
            let kh = k.slice(s![ks.range(), cols.clone()]);
            let vh = v.slice(s![ks.range(), cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            if causal {
                for ((r, c), val) in scores.indexed_iter_mut() {
                    if c > r {
                        *val = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows_inplace(&mut scores);
            ctx.slice_mut(s![qs.range(), cols]).assign(&scores.dot(&vh));
            probs.push(scores);
        }
    }
    let out = linear(&ctx, w.wo, w.bo);
    (
        out,
        AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            ctx,
            probs,
            q_segs: q_segs.to_vec(),
            kv_segs: kv_segs.to_vec(),
            heads,
        },
    )
}

/// Returns `(d xq, d xkv)`.
pub(crate) fn attention_backward(
    cache: &AttentionCache,
    w: &AttentionWeights<'_>,
    dout: &Mat,
    grads: AttentionGrads<'_>,
) -> (Mat, Mat) {
    let dctx = linear_backward(&cache.ctx, w.wo, dout, grads.wo, grads.bo);
    let d = cache.q.ncols();
    let heads = cache.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(cache.q.raw_dim());
    let mut dk = Mat::zeros(cache.k.raw_dim());
    let mut dv = Mat::zeros(cache.v.raw_dim());
    for (si, (&qs, &ks)) in cache.q_segs.iter().zip(&cache.kv_segs).enumerate() {
        for h in 0..heads {
            let p = &cache.probs[si * heads + h];
            let cols = h * dh..(h + 1) * dh;
            let qh = cache.q.slice(s![qs.range(), cols.clone()]);
            let kh = cache.k.slice(s![ks.range(), cols.clone()]);
            let vh = cache.v.slice(s![ks.range(), cols.clone()]);
            let dctx_h = dctx.slice(s![qs.range(), cols.clone()]);

            let mut dv_h = dv.slice_mut(s![ks.range(), cols.clone()]);
            general_mat_mul(1.0, &p.t(), &dctx_h, 1.0, &mut dv_h);

            let dp = dctx_h.dot(&vh.t());
            let ds = softmax_backward(p, dp.view()) * scale;

            let mut dq_h = dq.slice_mut(s![qs.range(), cols.clone()]);
            general_mat_mul(1.0, &ds, &kh, 1.0, &mut dq_h);
            let mut dk_h = dk.slice_mut(s![ks.range(), cols]);
            general_mat_mul(1.0, &ds.t(), &qh, 1.0, &mut dk_h);
        }
    }
    let dxq = linear_backward(&cache.xq, w.wq, &dq, grads.wq, grads.bq);
    let mut dxkv = linear_backward(&cache.xkv, w.wk, &dk, grads.wk, grads.bk);
    dxkv += &linear_backward(&cache.xkv, w.wv, &dv, grads.wv, grads.bv);
    (dxq, dxkv)
}

/// Gradient through a row-wise softmax with output `p`.
fn softmax_backward(p: &Mat, dp: ArrayView2<'_, f64>) -> Mat {
    let mut ds = p * &dp;
    for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
        let dot = row.sum();
        Zip::from(&mut row).and(&prow).for_each(|g, &pv| *g -= pv * dot);
    }
    ds
}

pub(crate) fn softmax_rows_inplace(x: &mut Mat) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Inverted dropout. Returns the scaled mask so backward can reapply it.
pub(crate) fn dropout<R: Rng>(x: &mut Mat, rate: f64, rng: Option<&mut R>) -> Option<Mat> {
    let rng = rng.filter(|_| rate > 0.0)?;
    let keep = 1.0 - rate;
    let mask = Mat::from_shape_simple_fn(
        x.raw_dim(),
        || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        },
    );
    *x *= &mask;
    Some(mask)
}

pub(crate) fn dropout_backward(dy: &Mat, mask: &Option<Mat>) -> Mat {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

/// Softmax cross-entropy summed over rows. Returns the summed loss and the
/// gradient of `scale * loss` with respect to the logits.
pub(crate) fn cross_entropy(logits: &Mat, targets: &[u32], scale: f64) -> (f64, Mat) {
    let mut probs = logits.clone();
    softmax_rows_inplace(&mut probs);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        // log-softmax from the logits directly for accuracy on peaked rows
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t as usize];
        probs[[r, t as usize]] -= 1.0;
    }
    probs *= scale;
    (loss, probs)
}
