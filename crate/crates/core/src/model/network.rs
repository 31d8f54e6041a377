//! Pre-norm encoder-decoder transformer over packed batches.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    self, AttentionCache, AttentionGrads, AttentionWeights, FeedForwardCache, FeedForwardGrads, LayerNormCache, Mat,
    Segment,
};
use super::ModelConfig;
use crate::corpus::TokenId;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct LnIds {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayerIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ff: FfIds,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayerIds {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross_attn: AttnIds,
    ln3: LnIds,
    ff: FfIds,
}

/// Index of every parameter tensor. Built deterministically from the
/// config so checkpoints only need to store tensors in order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub specs: Vec<TensorSpec>,
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderLayerIds>,
    enc_ln: LnIds,
    decoder: Vec<DecoderLayerIds>,
    dec_ln: LnIds,
    out_w: usize,
    out_b: usize,
    heads: usize,
    dropout: f64,
}

struct Builder {
    specs: Vec<TensorSpec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(TensorSpec { name, rows, cols, init });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            gamma: self.add(format!("{prefix}.gamma"), 1, d, Init::Ones),
            beta: self.add(format!("{prefix}.beta"), 1, d, Init::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, gain: f64) -> (usize, usize) {
        let std = gain / (din as f64).sqrt();
        (
            self.add(format!("{prefix}.weight"), din, dout, Init::Normal(std)),
            self.add(format!("{prefix}.bias"), 1, dout, Init::Zeros),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize, out_gain: f64) -> AttnIds {
        let (wq, bq) = self.linear(&format!("{prefix}.query"), d, d, 1.0);
        let (wk, bk) = self.linear(&format!("{prefix}.key"), d, d, 1.0);
        let (wv, bv) = self.linear(&format!("{prefix}.value"), d, d, 1.0);
        let (wo, bo) = self.linear(&format!("{prefix}.output"), d, d, out_gain);
        AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, hidden: usize, out_gain: f64) -> FfIds {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, hidden, 2f64.sqrt());
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), hidden, d, out_gain);
        FfIds { w1, b1, w2, b2 }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.embed_dim;
        let mut b = Builder { specs: Vec::new() };
        // Residual branches are scaled down with depth.
        let out_gain = 1.0 / ((2 * cfg.layers) as f64).sqrt();
        let tok_emb = b.add("token_embedding".into(), vocab_size, d, Init::Normal(1.0));
        let enc_pos = b.add("encoder.position".into(), cfg.max_input_len, d, Init::Normal(0.5));
        let dec_pos = b.add("decoder.position".into(), cfg.max_input_len, d, Init::Normal(0.5));
        let encoder = (0..cfg.layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayerIds {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.self_attn"), d, out_gain),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    ff: b.ff(&format!("{p}.ff"), d, cfg.feedforward_dim, out_gain),
                }
            })
            .collect();
        let enc_ln = b.ln("encoder.final_ln", d);
        let decoder = (0..cfg.layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayerIds {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d, out_gain),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d, out_gain),
                    ln3: b.ln(&format!("{p}.ln3"), d),
                    ff: b.ff(&format!("{p}.ff"), d, cfg.feedforward_dim, out_gain),
                }
            })
            .collect();
        let dec_ln = b.ln("decoder.final_ln", d);
        // A zero head makes the untrained model predict the uniform distribution.
        let out_w = b.add("lm_head.weight".into(), d, vocab_size, Init::Zeros);
        let out_b = b.add("lm_head.bias".into(), 1, vocab_size, Init::Zeros);
        Self {
            specs: b.specs,
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            enc_ln,
            decoder,
            dec_ln,
            out_w,
            out_b,
            heads: cfg.heads,
            dropout: cfg.dropout,
        }
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Mat> {
        self.specs
            .iter()
            .map(|spec| match spec.init {
                Init::Zeros => Mat::zeros((spec.rows, spec.cols)),
                Init::Ones => Mat::ones((spec.rows, spec.cols)),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    Mat::from_shape_simple_fn((spec.rows, spec.cols), || normal.sample(rng))
                }
            })
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Mat> {
        self.specs.iter().map(|s| Mat::zeros((s.rows, s.cols))).collect()
    }
}

/// One packed batch of encoder inputs, decoder inputs and decoder targets.
#[derive(Debug, Clone, Default)]
pub(crate) struct Batch {
    pub enc_ids: Vec<TokenId>,
    pub enc_segs: Vec<Segment>,
    pub dec_ids: Vec<TokenId>,
    pub dec_segs: Vec<Segment>,
    pub targets: Vec<TokenId>,
}

impl Batch {
    pub fn push(&mut self, input: &[TokenId], dec_in: &[TokenId], targets: &[TokenId]) {
        debug_assert_eq!(dec_in.len(), targets.len());
        self.enc_segs.push(Segment {
            start: self.enc_ids.len(),
            len: input.len(),
        });
        self.enc_ids.extend_from_slice(input);
        self.dec_segs.push(Segment {
            start: self.dec_ids.len(),
            len: dec_in.len(),
        });
        self.dec_ids.extend_from_slice(dec_in);
        self.targets.extend_from_slice(targets);
    }
}

fn attn_weights<'a>(p: &'a [Mat], ids: &AttnIds) -> AttentionWeights<'a> {
    AttentionWeights {
        wq: &p[ids.wq],
        bq: &p[ids.bq],
        wk: &p[ids.wk],
        bk: &p[ids.bk],
        wv: &p[ids.wv],
        bv: &p[ids.bv],
        wo: &p[ids.wo],
        bo: &p[ids.bo],
    }
}

/// Disjoint mutable borrows of several gradient tensors.
fn many_mut<const N: usize>(g: &mut [Mat], ids: [usize; N]) -> [&mut Mat; N] {
    g.get_disjoint_mut(ids).expect("distinct parameter ids")
}

fn attn_grads<'a>(g: &'a mut [Mat], ids: &AttnIds) -> AttentionGrads<'a> {
    let [wq, bq, wk, bk, wv, bv, wo, bo] =
        many_mut(g, [ids.wq, ids.bq, ids.wk, ids.bk, ids.wv, ids.bv, ids.wo, ids.bo]);
    AttentionGrads {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

fn ff_forward(p: &[Mat], ids: &FfIds, x: &Mat) -> (Mat, FeedForwardCache) {
    layers::feed_forward(x, &p[ids.w1], &p[ids.b1], &p[ids.w2], &p[ids.b2])
}

fn ff_backward(p: &[Mat], g: &mut [Mat], ids: &FfIds, cache: &FeedForwardCache, dy: &Mat) -> Mat {
    let [w1, b1, w2, b2] = many_mut(g, [ids.w1, ids.b1, ids.w2, ids.b2]);
    layers::feed_forward_backward(cache, &p[ids.w1], &p[ids.w2], dy, FeedForwardGrads { w1, b1, w2, b2 })
}

fn ln_forward(p: &[Mat], ids: &LnIds, x: &Mat) -> (Mat, LayerNormCache) {
    layers::layer_norm(x, &p[ids.gamma], &p[ids.beta])
}

fn ln_backward(p: &[Mat], g: &mut [Mat], ids: &LnIds, cache: &LayerNormCache, dy: &Mat) -> Mat {
    let [gg, gb] = many_mut(g, [ids.gamma, ids.beta]);
    layers::layer_norm_backward(cache, &p[ids.gamma], dy, gg, gb)
}

struct EncoderLayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    drop1: Option<Mat>,
    ln2: LayerNormCache,
    ff: FeedForwardCache,
    drop2: Option<Mat>,
}

struct DecoderLayerCache {
    ln1: LayerNormCache,
    self_attn: AttentionCache,
    drop1: Option<Mat>,
    ln2: LayerNormCache,
    cross_attn: AttentionCache,
    drop2: Option<Mat>,
    ln3: LayerNormCache,
    ff: FeedForwardCache,
    drop3: Option<Mat>,
}

pub(crate) struct EncoderCache {
    layers: Vec<EncoderLayerCache>,
    final_ln: LayerNormCache,
}

pub(crate) struct DecoderCache {
    layers: Vec<DecoderLayerCache>,
    final_ln: LayerNormCache,
    pub hidden: Mat,
}

fn embed(p: &[Mat], tok: usize, pos: usize, ids: &[TokenId], segs: &[Segment]) -> Mat {
    let table = &p[tok];
    let positions = &p[pos];
    let mut x = Mat::zeros((ids.len(), table.ncols()));
    for seg in segs {
        for offset in 0..seg.len {
            let r = seg.start + offset;
            let mut row = x.row_mut(r);
            row.assign(&table.row(ids[r] as usize));
            row += &positions.row(offset);
        }
    }
    x
}

fn embed_backward(g: &mut [Mat], tok: usize, pos: usize, ids: &[TokenId], segs: &[Segment], dx: &Mat) {
    for seg in segs {
        for offset in 0..seg.len {
            let r = seg.start + offset;
            let mut trow = g[tok].row_mut(ids[r] as usize);
            trow += &dx.row(r);
            let mut prow = g[pos].row_mut(offset);
            prow += &dx.row(r);
        }
    }
}

impl Layout {
    pub fn encode<R: Rng>(
        &self,
        p: &[Mat],
        ids: &[TokenId],
        segs: &[Segment],
        mut rng: Option<&mut R>,
    ) -> (Mat, EncoderCache) {
        let mut x = embed(p, self.tok_emb, self.enc_pos, ids, segs);
        let mut caches = Vec::with_capacity(self.encoder.len());
        for l in &self.encoder {
            let (h, ln1) = ln_forward(p, &l.ln1, &x);
            let (mut a, attn) = layers::attention(&attn_weights(p, &l.attn), &h, &h, segs, segs, self.heads, false);
            let drop1 = layers::dropout(&mut a, self.dropout, rng.as_deref_mut());
            x += &a;
            let (h, ln2) = ln_forward(p, &l.ln2, &x);
            let (mut f, ff) = ff_forward(p, &l.ff, &h);
            let drop2 = layers::dropout(&mut f, self.dropout, rng.as_deref_mut());
            x += &f;
            caches.push(EncoderLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ff,
                drop2,
            });
        }
        let (out, final_ln) = ln_forward(p, &self.enc_ln, &x);
        (
            out,
            EncoderCache {
                layers: caches,
                final_ln,
            },
        )
    }

    /// Runs the decoder and returns its final hidden states (before the
    /// output head).
    #[allow(clippy::too_many_arguments)]
    pub fn decode<R: Rng>(
        &self,
        p: &[Mat],
        enc_out: &Mat,
        enc_segs: &[Segment],
        ids: &[TokenId],
        segs: &[Segment],
        mut rng: Option<&mut R>,
    ) -> DecoderCache {
        let mut x = embed(p, self.tok_emb, self.dec_pos, ids, segs);
        let mut caches = Vec::with_capacity(self.decoder.len());
        for l in &self.decoder {
            let (h, ln1) = ln_forward(p, &l.ln1, &x);
            let (mut a, self_attn) =
                layers::attention(&attn_weights(p, &l.self_attn), &h, &h, segs, segs, self.heads, true);
            let drop1 = layers::dropout(&mut a, self.dropout, rng.as_deref_mut());
            x += &a;
            let (h, ln2) = ln_forward(p, &l.ln2, &x);
            let (mut c, cross_attn) = layers::attention(
                &attn_weights(p, &l.cross_attn),
                &h,
                enc_out,
                segs,
                enc_segs,
                self.heads,
                false,
            );
            let drop2 = layers::dropout(&mut c, self.dropout, rng.as_deref_mut());
            x += &c;
            let (h, ln3) = ln_forward(p, &l.ln3, &x);
            let (mut f, ff) = ff_forward(p, &l.ff, &h);
            let drop3 = layers::dropout(&mut f, self.dropout, rng.as_deref_mut());
            x += &f;
            caches.push(DecoderLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross_attn,
                drop2,
                ln3,
                ff,
                drop3,
            });
        }
        let (hidden, final_ln) = ln_forward(p, &self.dec_ln, &x);
        DecoderCache {
            layers: caches,
            final_ln,
            hidden,
        }
    }

    pub fn logits(&self, p: &[Mat], hidden: &Mat) -> Mat {
        layers::linear(hidden, &p[self.out_w], &p[self.out_b])
    }

    /// Logits for the last row of `hidden` only.
    pub fn last_logits(&self, p: &[Mat], hidden: &Mat) -> Vec<f64> {
        let last = hidden.slice(s![hidden.nrows() - 1..hidden.nrows(), ..]).to_owned();
        self.logits(p, &last).into_raw_vec_and_offset().0
    }

    /// Mean token cross-entropy of the batch; gradients (of the mean) are
    /// accumulated into `grads` when given.
    pub fn loss<R: Rng>(&self, p: &[Mat], batch: &Batch, mut rng: Option<&mut R>, grads: Option<&mut [Mat]>) -> f64 {
        let (enc_out, enc_cache) = self.encode(p, &batch.enc_ids, &batch.enc_segs, rng.as_deref_mut());
        let dec_cache = self.decode(p, &enc_out, &batch.enc_segs, &batch.dec_ids, &batch.dec_segs, rng);
        let logits = self.logits(p, &dec_cache.hidden);
        let n = batch.targets.len() as f64;
        let (sum, dlogits) = layers::cross_entropy(&logits, &batch.targets, 1.0 / n);
        if let Some(g) = grads {
            self.backward(p, g, batch, &enc_cache, &dec_cache, &dlogits);
        }
        sum / n
    }

    fn backward(
        &self,
        p: &[Mat],
        g: &mut [Mat],
        batch: &Batch,
        enc_cache: &EncoderCache,
        dec_cache: &DecoderCache,
        dlogits: &Mat,
    ) {
        let dhidden = {
            let [gw, gb] = many_mut(g, [self.out_w, self.out_b]);
            layers::linear_backward(&dec_cache.hidden, &p[self.out_w], dlogits, gw, gb)
        };
        let mut dx = ln_backward(p, g, &self.dec_ln, &dec_cache.final_ln, &dhidden);
        let mut denc: Option<Mat> = None;
        for (l, c) in self.decoder.iter().zip(&dec_cache.layers).rev() {
            let df = layers::dropout_backward(&dx, &c.drop3);
            let dh = ff_backward(p, g, &l.ff, &c.ff, &df);
            dx += &ln_backward(p, g, &l.ln3, &c.ln3, &dh);

            let dc = layers::dropout_backward(&dx, &c.drop2);
            let (dq, dkv) = layers::attention_backward(
                &c.cross_attn,
                &attn_weights(p, &l.cross_attn),
                &dc,
                attn_grads(g, &l.cross_attn),
            );
            match denc.as_mut() {
                Some(d) => *d += &dkv,
                None => denc = Some(dkv),
            }
            dx += &ln_backward(p, g, &l.ln2, &c.ln2, &dq);

            let da = layers::dropout_backward(&dx, &c.drop1);
            let (dq, dkv) = layers::attention_backward(
                &c.self_attn,
                &attn_weights(p, &l.self_attn),
                &da,
                attn_grads(g, &l.self_attn),
            );
            let dh = dq + dkv;
            dx += &ln_backward(p, g, &l.ln1, &c.ln1, &dh);
        }
        embed_backward(g, self.tok_emb, self.dec_pos, &batch.dec_ids, &batch.dec_segs, &dx);

        let denc = denc.unwrap_or_else(|| Array2::zeros((batch.enc_ids.len(), p[self.tok_emb].ncols())));
        let mut dx = ln_backward(p, g, &self.enc_ln, &enc_cache.final_ln, &denc);
        for (l, c) in self.encoder.iter().zip(&enc_cache.layers).rev() {
            let df = layers::dropout_backward(&dx, &c.drop2);
            let dh = ff_backward(p, g, &l.ff, &c.ff, &df);
            dx += &ln_backward(p, g, &l.ln2, &c.ln2, &dh);

            let da = layers::dropout_backward(&dx, &c.drop1);
            let (dq, dkv) = layers::attention_backward(&c.attn, &attn_weights(p, &l.attn), &da, attn_grads(g, &l.attn));
            let dh = dq + dkv;
            dx += &ln_backward(p, g, &l.ln1, &c.ln1, &dh);
        }
        embed_backward(g, self.tok_emb, self.enc_pos, &batch.enc_ids, &batch.enc_segs, &dx);
    }
}
