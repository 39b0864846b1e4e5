//! Encoder internals: parameter layout, forward pass, and manual
//! backpropagation.
//!
//! The model is a small post-layer-norm transformer encoder over the token
//! sequence, read out at the leading CLS position through a two-layer head
//! into a single logit. Parameters live in one flat `Vec<f64>`; [`Layout`]
//! assigns each tensor a range so the optimizer can treat the whole model
//! as one vector (for clipping, decay, and finite-difference checks) while
//! the forward pass views slices as matrices.
//!
//! Everything is `f64` and per-sample; batching is a loop with gradient
//! accumulation. At this scale (vocabulary 27, model width 32, sequences
//! under 128) that is fast enough and keeps the backward pass auditable.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::ops::Range;

use super::{CLS_TOKEN, PAD_TOKEN, VOCAB_SIZE};

/// Encoder shape. `d_model` must be divisible by `n_heads` and even.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 32, n_heads: 2, n_layers: 2, d_ff: 64, max_len: 128 }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) {
        assert!(self.d_model % self.n_heads == 0, "d_model must divide into heads");
        assert!(self.d_model % 2 == 0, "d_model must be even for the head bottleneck");
        assert!(self.max_len >= 12, "sequence layout needs at least 12 positions");
    }
}

/// Per-layer parameter ranges.
#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
}

/// Flat-vector layout of every tensor in the model.
#[derive(Debug, Clone)]
pub struct Layout {
    pub emb: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub head_w1: Range<usize>,
    pub head_b1: Range<usize>,
    pub head_w2: Range<usize>,
    pub head_b2: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn of(cfg: &ModelConfig) -> Layout {
        cfg.validate();
        let d = cfg.d_model;
        let half = d / 2;
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let emb = take(VOCAB_SIZE * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln1_g: take(d),
                ln1_b: take(d),
                w1: take(d * cfg.d_ff),
                b1: take(cfg.d_ff),
                w2: take(cfg.d_ff * d),
                b2: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
            })
            .collect();
        let head_w1 = take(d * half);
        let head_b1 = take(half);
        let head_w2 = take(half);
        let head_b2 = take(1);
        Layout { emb, layers, head_w1, head_b1, head_w2, head_b2, total: cursor }
    }
}

fn mat<'a>(params: &'a [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &params[r.clone()]).expect("layout shape")
}

fn vec1(params: &[f64], r: &Range<usize>) -> Array1<f64> {
    Array1::from_iter(params[r.clone()].iter().copied())
}

/// Sinusoidal positional encoding table, `max_len x d`.
pub fn positional_encoding(max_len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_len, d));
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    pe
}

/// Random initialization: Xavier-scaled weights, embeddings with unit-order
/// row norms so token identity is not drowned out by the positional
/// encoding, zero biases, identity layer norms.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let layout = Layout::of(cfg);
    let d = cfg.d_model;
    let half = d / 2;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.total];
    let mut fill_normal = |r: &Range<usize>, std: f64, params: &mut Vec<f64>| {
        for p in &mut params[r.clone()] {
            // Box-Muller from two uniforms keeps us off distribution crates.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *p = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    };
    let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
    fill_normal(&layout.emb, 1.0 / (d as f64).sqrt(), &mut params);
    for l in &layout.layers {
        for r in [&l.wq, &l.wk, &l.wv, &l.wo] {
            fill_normal(r, xavier(d, d), &mut params);
        }
        fill_normal(&l.w1, xavier(d, cfg.d_ff), &mut params);
        fill_normal(&l.w2, xavier(cfg.d_ff, d), &mut params);
        for i in l.ln1_g.clone().chain(l.ln2_g.clone()) {
            params[i] = 1.0;
        }
    }
    fill_normal(&layout.head_w1, xavier(d, half), &mut params);
    fill_normal(&layout.head_w2, xavier(half, 1), &mut params);
    params
}

const LN_EPS: f64 = 1e-5;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (x[[i, j]] - mean) * is;
            xhat[[i, j]] = h;
            out[[i, j]] = g[j] * h + b[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dyv = dy[[i, j]];
            dg[j] += dyv * cache.xhat[[i, j]];
            db[j] += dyv;
            let dxh = dyv * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * cache.xhat[[i, j]];
        }
        let inv_n = 1.0 / d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = cache.inv_std[i]
                * (dxh - inv_n * sum_dxhat - cache.xhat[[i, j]] * inv_n * sum_dxhat_xhat);
        }
    }
    dx
}

/// `y = x W + b` for row-major x (n x din), W (din x dout).
fn linear(x: &Array2<f64>, w: &ArrayView2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    for mut row in y.rows_mut() {
        row += b;
    }
    y
}

fn linear_backward(
    x: &Array2<f64>,
    w: &ArrayView2<f64>,
    dy: &Array2<f64>,
    dw: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let dwm = x.t().dot(dy);
    for (slot, v) in dw.iter_mut().zip(dwm.iter()) {
        *slot += v;
    }
    for (j, slot) in db.iter_mut().enumerate() {
        *slot += dy.column(j).sum();
    }
    dy.dot(&w.t())
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln1: LnCache,
    x1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_hidden: Array2<f64>,
    drop2: Option<Array2<f64>>,
    ln2: LnCache,
}

struct HeadCache {
    cls: Array1<f64>,
    pre: Array1<f64>,
    hidden: Array1<f64>,
}

/// Full forward cache, consumed by [`backward`].
pub struct Cache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    head: HeadCache,
    pub logit: f64,
    pub score: f64,
}

/// Forward pass. `dropout` is `(probability, rng)` during training; pass
/// `None` for deterministic evaluation. Padded positions are masked out of
/// every attention's key axis.
pub fn forward(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[f64],
    tokens: &[usize],
    mut dropout: Option<(f64, &mut dyn FnMut() -> f64)>,
) -> Cache {
    let d = cfg.d_model;
    let n = tokens.len();
    assert!(n <= cfg.max_len);
    assert_eq!(tokens[0], CLS_TOKEN);
    let emb = mat(params, &layout.emb, VOCAB_SIZE, d);
    let pe = positional_encoding(cfg.max_len, d);
    let mut x = Array2::zeros((n, d));
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = emb[[t, j]] + pe[[i, j]];
        }
    }
    let key_masked: Vec<bool> = tokens.iter().map(|&t| t == PAD_TOKEN).collect();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let take_mask = |n: usize, d: usize, dropout: &mut Option<(f64, &mut dyn FnMut() -> f64)>| {
        dropout.as_mut().map(|(p, gen)| {
            let keep = 1.0 - *p;
            Array2::from_shape_fn((n, d), |_| if gen() < keep { 1.0 / keep } else { 0.0 })
        })
    };
    for slots in &layout.layers {
        let q = linear(&x, &mat(params, &slots.wq, d, d), &vec1(params, &slots.bq));
        let k = linear(&x, &mat(params, &slots.wk, d, d), &vec1(params, &slots.bk));
        let v = linear(&x, &mat(params, &slots.wv, d, d), &vec1(params, &slots.bv));
        let mut concat = Array2::zeros((n, d));
        let mut attn = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            for (j, masked) in key_masked.iter().enumerate() {
                if *masked {
                    scores.column_mut(j).fill(f64::NEG_INFINITY);
                }
            }
            // Row softmax; fully masked rows cannot occur (CLS is never pad).
            let mut a = scores;
            for mut row in a.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            let ctx = a.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols]).assign(&ctx);
            attn.push(a);
        }
        let mut attn_out = linear(&concat, &mat(params, &slots.wo, d, d), &vec1(params, &slots.bo));
        let drop1 = take_mask(n, d, &mut dropout);
        if let Some(m) = &drop1 {
            attn_out *= m;
        }
        let r1 = &x + &attn_out;
        let (x1, ln1) = layer_norm(&r1, &vec1(params, &slots.ln1_g), &vec1(params, &slots.ln1_b));
        let ffn_pre = linear(&x1, &mat(params, &slots.w1, d, cfg.d_ff), &vec1(params, &slots.b1));
        let ffn_hidden = ffn_pre.mapv(|v| v.max(0.0));
        let mut ffn_out =
            linear(&ffn_hidden, &mat(params, &slots.w2, cfg.d_ff, d), &vec1(params, &slots.b2));
        let drop2 = take_mask(n, d, &mut dropout);
        if let Some(m) = &drop2 {
            ffn_out *= m;
        }
        let r2 = &x1 + &ffn_out;
        let (x2, ln2) = layer_norm(&r2, &vec1(params, &slots.ln2_g), &vec1(params, &slots.ln2_b));
        layers.push(LayerCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            concat,
            drop1,
            ln1,
            x1: x1.clone(),
            ffn_pre,
            ffn_hidden,
            drop2,
            ln2,
        });
        x = x2;
    }
    let half = d / 2;
    let cls = x.row(0).to_owned();
    let w1 = mat(params, &layout.head_w1, d, half);
    let b1 = vec1(params, &layout.head_b1);
    let pre = cls.dot(&w1) + &b1;
    let hidden = pre.mapv(|v| v.max(0.0));
    let w2 = vec1(params, &layout.head_w2);
    let logit = hidden.dot(&w2) + params[layout.head_b2.start];
    let score = 1.0 / (1.0 + (-logit).exp());
    Cache {
        tokens: tokens.to_vec(),
        layers,
        head: HeadCache { cls, pre, hidden },
        logit,
        score,
    }
}

/// Backward pass from `dlogit` (dL/dz); accumulates into `grads`, which
/// must have the layout's length.
pub fn backward(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[f64],
    cache: &Cache,
    dlogit: f64,
    grads: &mut [f64],
) {
    let d = cfg.d_model;
    let half = d / 2;
    let n = cache.tokens.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // Head.
    let w2 = vec1(params, &layout.head_w2);
    grads[layout.head_b2.start] += dlogit;
    let mut dhidden = Array1::zeros(half);
    for j in 0..half {
        grads[layout.head_w2.start + j] += dlogit * cache.head.hidden[j];
        dhidden[j] = dlogit * w2[j];
    }
    let dpre = Array1::from_shape_fn(half, |j| {
        if cache.head.pre[j] > 0.0 {
            dhidden[j]
        } else {
            0.0
        }
    });
    let w1 = mat(params, &layout.head_w1, d, half);
    let mut dcls = Array1::zeros(d);
    for i in 0..d {
        for j in 0..half {
            grads[layout.head_w1.start + i * half + j] += cache.head.cls[i] * dpre[j];
            dcls[i] += w1[[i, j]] * dpre[j];
        }
    }
    for j in 0..half {
        grads[layout.head_b1.start + j] += dpre[j];
    }

    // Only the CLS row of the final encoder output feeds the head.
    let mut dx = Array2::zeros((n, d));
    dx.row_mut(0).assign(&dcls);

    for (slots, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        // x2 = LN2(r2)
        let dr2 = {
            let g = vec1(params, &slots.ln2_g);
            let (dg, dbv) = (&slots.ln2_g, &slots.ln2_b);
            let mut dgbuf = vec![0.0; d];
            let mut dbbuf = vec![0.0; d];
            let dr = layer_norm_backward(&dx, &lc.ln2, &g, &mut dgbuf, &mut dbbuf);
            for (j, v) in dgbuf.into_iter().enumerate() {
                grads[dg.start + j] += v;
            }
            for (j, v) in dbbuf.into_iter().enumerate() {
                grads[dbv.start + j] += v;
            }
            dr
        };
        // r2 = x1 + drop2(ffn_out)
        let mut dffn_out = dr2.clone();
        if let Some(m) = &lc.drop2 {
            dffn_out *= m;
        }
        let mut dx1 = dr2;
        // ffn_out = relu(ffn_pre) W2 + b2
        let dhiddenm = {
            let mut dw = vec![0.0; cfg.d_ff * d];
            let mut db = vec![0.0; d];
            let dxm = linear_backward(
                &lc.ffn_hidden,
                &mat(params, &slots.w2, cfg.d_ff, d),
                &dffn_out,
                &mut dw,
                &mut db,
            );
            for (j, v) in dw.into_iter().enumerate() {
                grads[slots.w2.start + j] += v;
            }
            for (j, v) in db.into_iter().enumerate() {
                grads[slots.b2.start + j] += v;
            }
            dxm
        };
        let dffn_pre = Array2::from_shape_fn((n, cfg.d_ff), |(i, j)| {
            if lc.ffn_pre[[i, j]] > 0.0 {
                dhiddenm[[i, j]]
            } else {
                0.0
            }
        });
        {
            let mut dw = vec![0.0; d * cfg.d_ff];
            let mut db = vec![0.0; cfg.d_ff];
            let dxm = linear_backward(
                &lc.x1,
                &mat(params, &slots.w1, d, cfg.d_ff),
                &dffn_pre,
                &mut dw,
                &mut db,
            );
            for (j, v) in dw.into_iter().enumerate() {
                grads[slots.w1.start + j] += v;
            }
            for (j, v) in db.into_iter().enumerate() {
                grads[slots.b1.start + j] += v;
            }
            dx1 = dx1 + dxm;
        }
        // x1 = LN1(r1)
        let dr1 = {
            let g = vec1(params, &slots.ln1_g);
            let mut dgbuf = vec![0.0; d];
            let mut dbbuf = vec![0.0; d];
            let dr = layer_norm_backward(&dx1, &lc.ln1, &g, &mut dgbuf, &mut dbbuf);
            for (j, v) in dgbuf.into_iter().enumerate() {
                grads[slots.ln1_g.start + j] += v;
            }
            for (j, v) in dbbuf.into_iter().enumerate() {
                grads[slots.ln1_b.start + j] += v;
            }
            dr
        };
        // r1 = x + drop1(attn_out)
        let mut dattn_out = dr1.clone();
        if let Some(m) = &lc.drop1 {
            dattn_out *= m;
        }
        let mut dxl = dr1;
        // attn_out = concat Wo + bo
        let dconcat = {
            let mut dw = vec![0.0; d * d];
            let mut db = vec![0.0; d];
            let dxm = linear_backward(
                &lc.concat,
                &mat(params, &slots.wo, d, d),
                &dattn_out,
                &mut dw,
                &mut db,
            );
            for (j, v) in dw.into_iter().enumerate() {
                grads[slots.wo.start + j] += v;
            }
            for (j, v) in db.into_iter().enumerate() {
                grads[slots.bo.start + j] += v;
            }
            dxm
        };
        // Per-head attention backward.
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &lc.attn[h];
            let dctx = dconcat.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = lc.v.slice(ndarray::s![.., cols.clone()]);
            let da = dctx.dot(&vh.t());
            let dvh = a.t().dot(&dctx);
            dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&dvh);
            // softmax rows: ds = a * (da - rowdot(da, a))
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let dot: f64 = (0..n).map(|j| da[[i, j]] * a[[i, j]]).sum();
                for j in 0..n {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            let qh = lc.q.slice(ndarray::s![.., cols.clone()]);
            let kh = lc.k.slice(ndarray::s![.., cols.clone()]);
            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(ndarray::s![.., cols]).assign(&ds.t().dot(&qh));
        }
        for (dm, (w, b)) in [
            (&dq, (&slots.wq, &slots.bq)),
            (&dk, (&slots.wk, &slots.bk)),
            (&dv, (&slots.wv, &slots.bv)),
        ] {
            let mut dw = vec![0.0; d * d];
            let mut db = vec![0.0; d];
            let dxm = linear_backward(&lc.x, &mat(params, w, d, d), dm, &mut dw, &mut db);
            for (j, v) in dw.into_iter().enumerate() {
                grads[w.start + j] += v;
            }
            for (j, v) in db.into_iter().enumerate() {
                grads[b.start + j] += v;
            }
            dxl = dxl + dxm;
        }
        dx = dxl;
    }

    // Embedding rows; positional encoding is constant.
    for (i, &t) in cache.tokens.iter().enumerate() {
        for j in 0..d {
            grads[layout.emb.start + t * d + j] += dx[[i, j]];
        }
    }
}
