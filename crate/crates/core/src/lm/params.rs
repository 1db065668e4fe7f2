use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_1: LayerNorm,
    /// `[d_model, 3 * d_model]`, columns ordered query | key | value.
    pub attn_qkv_w: Tensor,
    pub attn_qkv_b: Tensor,
    pub attn_proj_w: Tensor,
    pub attn_proj_b: Tensor,
    pub ln_2: LayerNorm,
    pub mlp_fc_w: Tensor,
    pub mlp_fc_b: Tensor,
    pub mlp_proj_w: Tensor,
    pub mlp_proj_b: Tensor,
}

/// All learnable weights of the decoder. Matrices are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub wte: Tensor,
    pub wpe: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub lm_head: Tensor,
}

impl ParameterSet {
    /// Parameters with every array set to zero except layer-norm gains (one).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let block = Block {
            ln_1: LayerNorm::new(d),
            attn_qkv_w: Tensor::zeros(&[d, 3 * d]),
            attn_qkv_b: Tensor::zeros(&[3 * d]),
            attn_proj_w: Tensor::zeros(&[d, d]),
            attn_proj_b: Tensor::zeros(&[d]),
            ln_2: LayerNorm::new(d),
            mlp_fc_w: Tensor::zeros(&[d, f]),
            mlp_fc_b: Tensor::zeros(&[f]),
            mlp_proj_w: Tensor::zeros(&[f, d]),
            mlp_proj_b: Tensor::zeros(&[d]),
        };
        Self {
            wte: Tensor::zeros(&[cfg.vocab_size, d]),
            wpe: Tensor::zeros(&[cfg.context_length, d]),
            blocks: vec![block; cfg.n_layers],
            ln_f: LayerNorm::new(d),
            lm_head: Tensor::zeros(&[d, cfg.vocab_size]),
        }
    }

    /// GPT-2 initialization: weights ~ N(0, 0.02), biases zero, norm gains one.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |t: &mut Tensor| t.data.iter_mut().for_each(|x| *x = normal.sample(rng));
        fill(&mut p.wte);
        fill(&mut p.wpe);
        for b in &mut p.blocks {
            fill(&mut b.attn_qkv_w);
            fill(&mut b.attn_proj_w);
            fill(&mut b.mlp_fc_w);
            fill(&mut b.mlp_proj_w);
        }
        fill(&mut p.lm_head);
        p
    }

    /// Same shapes, all zeros (gain arrays included). Used for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        g
    }

    /// Arrays in a fixed order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("h.{i}.{s}");
            out.extend([
                (n("ln_1.weight"), &b.ln_1.gain),
                (n("ln_1.bias"), &b.ln_1.bias),
                (n("attn.c_attn.weight"), &b.attn_qkv_w),
                (n("attn.c_attn.bias"), &b.attn_qkv_b),
                (n("attn.c_proj.weight"), &b.attn_proj_w),
                (n("attn.c_proj.bias"), &b.attn_proj_b),
                (n("ln_2.weight"), &b.ln_2.gain),
                (n("ln_2.bias"), &b.ln_2.bias),
                (n("mlp.c_fc.weight"), &b.mlp_fc_w),
                (n("mlp.c_fc.bias"), &b.mlp_fc_b),
                (n("mlp.c_proj.weight"), &b.mlp_proj_w),
                (n("mlp.c_proj.bias"), &b.mlp_proj_b),
            ]);
        }
        out.extend([
            ("ln_f.weight".to_string(), &self.ln_f.gain),
            ("ln_f.bias".to_string(), &self.ln_f.bias),
            ("lm_head.weight".to_string(), &self.lm_head),
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable arrays in the same order as [`ParameterSet::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln_1.gain,
                &mut b.ln_1.bias,
                &mut b.attn_qkv_w,
                &mut b.attn_qkv_b,
                &mut b.attn_proj_w,
                &mut b.attn_proj_b,
                &mut b.ln_2.gain,
                &mut b.ln_2.bias,
                &mut b.mlp_fc_w,
                &mut b.mlp_fc_b,
                &mut b.mlp_proj_w,
                &mut b.mlp_proj_b,
            ]);
        }
        out.extend([&mut self.ln_f.gain, &mut self.ln_f.bias, &mut self.lm_head]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Rebuilds a parameter set from named arrays, checking every shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut arrays: std::collections::HashMap<String, Tensor>) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.into_iter().zip(p.tensors_mut()) {
            let t = arrays
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if t.shape != slot.shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: slot.shape.clone(),
                    found: t.shape,
                });
            }
            *slot = t;
        }
        Ok(p)
    }
}

/// A dense `in -> out` projection used for reward, value and classifier heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    /// Weights ~ N(0, 1/(d_in + 1)), zero bias.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / ((d_in + 1) as f64).sqrt()).expect("valid std");
        let mut l = Self::zeros(d_in, d_out);
        l.weight.data.iter_mut().for_each(|x| *x = normal.sample(rng));
        l
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.d_out();
        let mut out = self.bias.data.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.weight.data[i * n..(i + 1) * n];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    /// Accumulates parameter gradients for `dy` at input `x`; returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let n = self.d_out();
        for (gb, d) in grad.bias.data.iter_mut().zip(dy) {
            *gb += d;
        }
        let mut dx = vec![0.0; x.len()];
        for (i, xi) in x.iter().enumerate() {
            let row = &self.weight.data[i * n..(i + 1) * n];
            let grow = &mut grad.weight.data[i * n..(i + 1) * n];
            for j in 0..n {
                grow[j] += xi * dy[j];
                dx[i] += row[j] * dy[j];
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in(), self.d_out())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
}
