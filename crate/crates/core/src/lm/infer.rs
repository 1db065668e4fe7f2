//! Incremental decoding with a per-layer key/value cache.

use super::forward::{gelu, layer_norm_row};
use super::Transformer;
use crate::error::{Error, Result};

/// Cached keys and values of every position consumed so far.
#[derive(Debug, Clone)]
pub struct InferenceState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl InferenceState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn vec_mat(x: &[f64], w: &[f64], bias: Option<&[f64]>, n: usize) -> Vec<f64> {
    let mut out = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; n],
    };
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wv;
        }
    }
    out
}

impl Transformer {
    pub fn new_state(&self) -> InferenceState {
        let n = self.config.n_layers;
        InferenceState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Consumes one token and returns the next-token logits together with the
    /// final hidden state at that position.
    pub fn step_with_hidden(&self, state: &mut InferenceState, token: u32) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = &self.config;
        if state.len >= cfg.context_length {
            return Err(Error::SequenceTooLong {
                len: state.len + 1,
                context: cfg.context_length,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let hd = d / cfg.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = state.len;
        let t = pos + 1;
        let p = &self.params;

        let mut x: Vec<f64> = p.wte.row(token as usize).iter().zip(p.wpe.row(pos)).map(|(a, b)| a + b).collect();
        for (li, b) in p.blocks.iter().enumerate() {
            let a1 = layer_norm_row(&x, &b.ln_1);
            let qkv = vec_mat(&a1, &b.attn_qkv_w.data, Some(&b.attn_qkv_b.data), 3 * d);
            state.keys[li].extend_from_slice(&qkv[d..2 * d]);
            state.values[li].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&state.keys[li], &state.values[li]);
            let mut y = vec![0.0; d];
            let mut scores = vec![0.0; t];
            for h in 0..cfg.n_heads {
                let q = &qkv[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                    *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                crate::tensor::softmax_in_place(&mut scores);
                let yh = &mut y[h * hd..(h + 1) * hd];
                for (j, &w) in scores.iter().enumerate() {
                    let v = &values[j * d + h * hd..j * d + (h + 1) * hd];
                    yh.iter_mut().zip(v).for_each(|(o, vv)| *o += w * vv);
                }
            }
            let o = vec_mat(&y, &b.attn_proj_w.data, Some(&b.attn_proj_b.data), d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let a2 = layer_norm_row(&x, &b.ln_2);
            let hidden: Vec<f64> = vec_mat(&a2, &b.mlp_fc_w.data, Some(&b.mlp_fc_b.data), f)
                .into_iter()
                .map(gelu)
                .collect();
            let m = vec_mat(&hidden, &b.mlp_proj_w.data, Some(&b.mlp_proj_b.data), d);
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        }
        state.len = t;
        let hidden = layer_norm_row(&x, &p.ln_f);
        let logits = vec_mat(&hidden, &p.lm_head.data, None, cfg.vocab_size);
        Ok((logits, hidden))
    }

    pub fn step(&self, state: &mut InferenceState, token: u32) -> Result<Vec<f64>> {
        self.step_with_hidden(state, token).map(|(l, _)| l)
    }
}
