//! Full-sequence forward pass with an activation trace, and its exact backward pass.

use rand::Rng;

use super::params::{Block, LayerNorm, ParameterSet};
use super::ModelConfig;
use crate::tensor::{add_bias, add_col_sums, gemm_into, matmul, View};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

/// Row-wise layer norm over `d` features; returns output and the cache for backward.
fn layer_norm(x: &[f64], ln: &LayerNorm, d: usize) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..d {
            let h = (row[i] - mean) * s;
            xhat[r * d + i] = h;
            out[r * d + i] = h * ln.gain.data[i] + ln.bias.data[i];
        }
    }
    (out, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_row(x: &[f64], ln: &LayerNorm) -> Vec<f64> {
    layer_norm(x, ln, x.len()).0
}

/// Accumulates gain/bias grads and adds the input gradient into `dx`.
fn layer_norm_backward(dy: &[f64], cache: &NormCache, ln: &LayerNorm, grad: &mut LayerNorm, dx: &mut [f64]) {
    let d = ln.gain.len();
    let mut dxhat = vec![0.0; d];
    for (r, &s) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let (mut mean_d, mut mean_dx) = (0.0, 0.0);
        for i in 0..d {
            grad.gain.data[i] += dyr[i] * xh[i];
            grad.bias.data[i] += dyr[i];
            dxhat[i] = dyr[i] * ln.gain.data[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        for i in 0..d {
            dx[r * d + i] += s * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

struct BlockTrace {
    ln1: NormCache,
    a1: Vec<f64>,
    qkv: Vec<f64>,
    /// Per head `T x T`, zero above the diagonal.
    probs: Vec<f64>,
    y: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    ln2: NormCache,
    a2: Vec<f64>,
    pre_gelu: Vec<f64>,
    post_gelu: Vec<f64>,
    mlp_mask: Option<Vec<f64>>,
}

/// Activations of one sequence, kept for the backward pass.
pub struct Trace {
    ids: Vec<u32>,
    emb_mask: Option<Vec<f64>>,
    blocks: Vec<BlockTrace>,
    lnf: NormCache,
    /// Final normalized hidden states, `T x d_model`.
    pub hidden: Vec<f64>,
    /// `T x vocab_size`, present when requested.
    pub logits: Option<Vec<f64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Causal self-attention for one head. `qkv` is `T x 3d`; writes `T x hd` into `y`.
fn attention_head(qkv: &[f64], t: usize, d: usize, hd: usize, head: usize, probs: &mut [f64], y: &mut [f64]) {
    let scale = 1.0 / (hd as f64).sqrt();
    let q = View::cols(qkv, t, 3 * d, head * hd, hd);
    let k = View::cols(qkv, t, 3 * d, d + head * hd, hd);
    let v = View::cols(qkv, t, 3 * d, 2 * d + head * hd, hd);
    gemm_into(q, k.t(), 0.0, probs, t);
    for i in 0..t {
        let row = &mut probs[i * t..(i + 1) * t];
        let max = row[..=i].iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
        let mut sum = 0.0;
        for s in row[..=i].iter_mut() {
            *s = (*s * scale - max).exp();
            sum += *s;
        }
        for s in row[..=i].iter_mut() {
            *s /= sum;
        }
        row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
    }
    gemm_into(View::new(probs, t, t), v, 0.0, &mut y[head * hd..], d);
}

/// Runs the decoder on one sequence. Dropout is active only when `rng` is given
/// and the configured rate is positive.
pub(crate) fn forward_trace<R: Rng + ?Sized>(
    params: &ParameterSet,
    cfg: &ModelConfig,
    ids: &[u32],
    want_logits: bool,
    mut rng: Option<&mut R>,
) -> Trace {
    let (t, d, f) = (ids.len(), cfg.d_model, cfg.d_ff);
    let hd = d / cfg.n_heads;
    let p_drop = cfg.dropout;
    let mut mask = |n: usize| match rng.as_deref_mut() {
        Some(r) if p_drop > 0.0 => Some(dropout_mask(n, p_drop, r)),
        _ => None,
    };

    let mut x = vec![0.0; t * d];
    for (pos, &id) in ids.iter().enumerate() {
        let row = &mut x[pos * d..(pos + 1) * d];
        for ((v, e), p) in row.iter_mut().zip(params.wte.row(id as usize)).zip(params.wpe.row(pos)) {
            *v = e + p;
        }
    }
    let emb_mask = mask(t * d);
    apply_mask(&mut x, &emb_mask);

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (a1, ln1) = layer_norm(&x, &b.ln_1, d);
        let mut qkv = matmul(View::new(&a1, t, d), View::new(&b.attn_qkv_w.data, d, 3 * d));
        add_bias(&mut qkv, &b.attn_qkv_b.data);
        let mut probs = vec![0.0; cfg.n_heads * t * t];
        let mut y = vec![0.0; t * d];
        for h in 0..cfg.n_heads {
            attention_head(&qkv, t, d, hd, h, &mut probs[h * t * t..(h + 1) * t * t], &mut y);
        }
        let mut o = matmul(View::new(&y, t, d), View::new(&b.attn_proj_w.data, d, d));
        add_bias(&mut o, &b.attn_proj_b.data);
        let attn_mask = mask(t * d);
        apply_mask(&mut o, &attn_mask);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        let (a2, ln2) = layer_norm(&x, &b.ln_2, d);
        let mut pre = matmul(View::new(&a2, t, d), View::new(&b.mlp_fc_w.data, d, f));
        add_bias(&mut pre, &b.mlp_fc_b.data);
        let post: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let mut m = matmul(View::new(&post, t, f), View::new(&b.mlp_proj_w.data, f, d));
        add_bias(&mut m, &b.mlp_proj_b.data);
        let mlp_mask = mask(t * d);
        apply_mask(&mut m, &mlp_mask);
        x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);

        blocks.push(BlockTrace {
            ln1,
            a1,
            qkv,
            probs,
            y,
            attn_mask,
            ln2,
            a2,
            pre_gelu: pre,
            post_gelu: post,
            mlp_mask,
        });
    }

    let (hidden, lnf) = layer_norm(&x, &params.ln_f, d);
    let logits = want_logits
        .then(|| matmul(View::new(&hidden, t, d), View::new(&params.lm_head.data, d, cfg.vocab_size)));
    Trace {
        ids: ids.to_vec(),
        emb_mask,
        blocks,
        lnf,
        hidden,
        logits,
    }
}

fn block_backward(b: &Block, tr: &BlockTrace, g: &mut Block, cfg: &ModelConfig, dx: &mut [f64]) {
    let t = tr.y.len() / cfg.d_model;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let hd = d / cfg.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP branch
    let mut dm = dx.to_vec();
    apply_mask(&mut dm, &tr.mlp_mask);
    gemm_into(View::new(&tr.post_gelu, t, f).t(), View::new(&dm, t, d), 1.0, &mut g.mlp_proj_w.data, d);
    add_col_sums(&dm, &mut g.mlp_proj_b.data);
    let mut dpre = matmul(View::new(&dm, t, d), View::new(&b.mlp_proj_w.data, f, d).t());
    dpre.iter_mut().zip(&tr.pre_gelu).for_each(|(dv, &x)| *dv *= gelu_grad(x));
    gemm_into(View::new(&tr.a2, t, d).t(), View::new(&dpre, t, f), 1.0, &mut g.mlp_fc_w.data, f);
    add_col_sums(&dpre, &mut g.mlp_fc_b.data);
    let da2 = matmul(View::new(&dpre, t, f), View::new(&b.mlp_fc_w.data, d, f).t());
    layer_norm_backward(&da2, &tr.ln2, &b.ln_2, &mut g.ln_2, dx);

    // attention branch
    let mut dout = dx.to_vec();
    apply_mask(&mut dout, &tr.attn_mask);
    gemm_into(View::new(&tr.y, t, d).t(), View::new(&dout, t, d), 1.0, &mut g.attn_proj_w.data, d);
    add_col_sums(&dout, &mut g.attn_proj_b.data);
    let dy = matmul(View::new(&dout, t, d), View::new(&b.attn_proj_w.data, d, d).t());

    let mut dqkv = vec![0.0; t * 3 * d];
    let mut dp = vec![0.0; t * t];
    for h in 0..cfg.n_heads {
        let probs = &tr.probs[h * t * t..(h + 1) * t * t];
        let dyh = View::cols(&dy, t, d, h * hd, hd);
        let q = View::cols(&tr.qkv, t, 3 * d, h * hd, hd);
        let k = View::cols(&tr.qkv, t, 3 * d, d + h * hd, hd);
        let v = View::cols(&tr.qkv, t, 3 * d, 2 * d + h * hd, hd);
        // dV = P^T dY
        gemm_into(View::new(probs, t, t).t(), dyh, 0.0, &mut dqkv[2 * d + h * hd..], 3 * d);
        // dP = dY V^T, then softmax backward into dS (scaled)
        gemm_into(dyh, v.t(), 0.0, &mut dp, t);
        for i in 0..t {
            let pr = &probs[i * t..(i + 1) * t];
            let row = &mut dp[i * t..(i + 1) * t];
            let dot: f64 = (0..=i).map(|j| row[j] * pr[j]).sum();
            for j in 0..=i {
                row[j] = pr[j] * (row[j] - dot) * scale;
            }
            row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
        }
        // dQ = dS K, dK = dS^T Q
        gemm_into(View::new(&dp, t, t), k, 0.0, &mut dqkv[h * hd..], 3 * d);
        gemm_into(View::new(&dp, t, t).t(), q, 0.0, &mut dqkv[d + h * hd..], 3 * d);
    }
    gemm_into(View::new(&tr.a1, t, d).t(), View::new(&dqkv, t, 3 * d), 1.0, &mut g.attn_qkv_w.data, 3 * d);
    add_col_sums(&dqkv, &mut g.attn_qkv_b.data);
    let da1 = matmul(View::new(&dqkv, t, 3 * d), View::new(&b.attn_qkv_w.data, d, 3 * d).t());
    layer_norm_backward(&da1, &tr.ln1, &b.ln_1, &mut g.ln_1, dx);
}

/// Backpropagates gradients of a scalar objective given w.r.t. the logits and/or
/// the final hidden states, accumulating into `grads`.
pub(crate) fn backward(
    params: &ParameterSet,
    cfg: &ModelConfig,
    trace: &Trace,
    dlogits: Option<&[f64]>,
    dhidden: Option<&[f64]>,
    grads: &mut ParameterSet,
) {
    let (t, d, v) = (trace.len(), cfg.d_model, cfg.vocab_size);
    let mut dh = match dhidden {
        Some(dhid) => dhid.to_vec(),
        None => vec![0.0; t * d],
    };
    if let Some(dl) = dlogits {
        gemm_into(View::new(&trace.hidden, t, d).t(), View::new(dl, t, v), 1.0, &mut grads.lm_head.data, v);
        gemm_into(View::new(dl, t, v), View::new(&params.lm_head.data, d, v).t(), 1.0, &mut dh, d);
    }
    let mut dx = vec![0.0; t * d];
    layer_norm_backward(&dh, &trace.lnf, &params.ln_f, &mut grads.ln_f, &mut dx);

    for ((b, tr), g) in params.blocks.iter().zip(&trace.blocks).zip(grads.blocks.iter_mut()).rev() {
        block_backward(b, tr, g, cfg, &mut dx);
    }

    apply_mask(&mut dx, &trace.emb_mask);
    for (pos, &id) in trace.ids.iter().enumerate() {
        let row = &dx[pos * d..(pos + 1) * d];
        grads.wte.row_mut(id as usize).iter_mut().zip(row).for_each(|(g, r)| *g += r);
        grads.wpe.row_mut(pos).iter_mut().zip(row).for_each(|(g, r)| *g += r);
    }
}
