//! Decoder-only causal transformer (GPT-2 layout: learned positions, pre-norm
//! blocks, tanh-GELU MLP, untied output projection).

mod checkpoint;
mod forward;
mod infer;
mod lion;
mod params;

pub use checkpoint::{Checkpoint, MetricRecord, CHECKPOINT_VERSION};
pub use forward::Trace;
pub use infer::InferenceState;
pub use lion::{clip_grad_norm, LionConfig, LionState};
pub use params::{Block, LayerNorm, Linear, ParameterSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::log_sum_exp;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, 4 heads, width 128, 256-token context.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            context_length: 256,
            vocab_size,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// GPT-2 124M layout.
    pub fn gpt2_base(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            context_length: 1024,
            vocab_size,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// GPT-2 774M layout.
    pub fn gpt2_large(vocab_size: usize) -> Self {
        Self {
            n_layers: 36,
            n_heads: 20,
            d_model: 1280,
            d_ff: 5120,
            context_length: 1024,
            vocab_size,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "gpt2-base" | "base" => Ok(Self::gpt2_base(vocab_size)),
            "gpt2-large" | "large" => Ok(Self::gpt2_large(vocab_size)),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected tiny, gpt2-base or gpt2-large)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_length == 0 {
            return Err(Error::Config("context_length must be at least 1".into()));
        }
        if self.vocab_size == 0 || self.d_ff == 0 {
            return Err(Error::Config("vocab_size and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A configured decoder with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Transformer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ParameterSet::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let expected = ParameterSet::zeros(&config);
        for ((name, want), got) in expected.named().into_iter().zip(params.tensors()) {
            if want.shape != got.shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: want.shape.clone(),
                    found: got.shape.clone(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn context_length(&self) -> usize {
        self.config.context_length
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.context_length {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                context: self.config.context_length,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for every position of one sequence, `len x vocab_size`, dropout off.
    pub fn logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        let tr = forward::forward_trace::<ChaCha8Rng>(&self.params, &self.config, ids, true, None);
        Ok(tr.logits.expect("requested"))
    }

    /// Batched forward: one logit matrix per row.
    pub fn forward(&self, batch: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        batch.iter().map(|ids| self.logits(ids)).collect()
    }

    /// Final normalized hidden states, `len x d_model`.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        let tr = forward::forward_trace::<ChaCha8Rng>(&self.params, &self.config, ids, false, None);
        Ok(tr.hidden)
    }

    /// Forward pass that keeps activations for [`Transformer::backward`]. Dropout
    /// is applied when `rng` is given.
    pub fn trace<R: Rng + ?Sized>(&self, ids: &[u32], want_logits: bool, rng: Option<&mut R>) -> Result<Trace> {
        self.check_ids(ids)?;
        Ok(forward::forward_trace(&self.params, &self.config, ids, want_logits, rng))
    }

    /// Accumulates parameter gradients given upstream gradients w.r.t. the logits
    /// and/or the final hidden states of `trace`.
    pub fn backward(&self, trace: &Trace, dlogits: Option<&[f64]>, dhidden: Option<&[f64]>, grads: &mut ParameterSet) {
        forward::backward(&self.params, &self.config, trace, dlogits, dhidden, grads);
    }

    /// Mean next-token NLL of `batch` and its exact gradient. Dropout is applied
    /// when `rng` is given.
    pub fn gradients<R: Rng + ?Sized>(&self, batch: &[Example], mut rng: Option<&mut R>) -> Result<(f64, ParameterSet)> {
        let count = batch.iter().flat_map(|e| &e.targets).filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::InvalidInput("every target position is ignored".into()));
        }
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for ex in batch {
            ex.check()?;
            let tr = self.trace(&ex.inputs, true, rng.as_deref_mut())?;
            let logits = tr.logits.as_ref().expect("requested");
            let (sum, mut dl) = nll_sum_and_grad(logits, self.config.vocab_size, &ex.targets)?;
            total += sum;
            dl.iter_mut().for_each(|g| *g /= count as f64);
            self.backward(&tr, Some(&dl), None, &mut grads);
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((loss, grads))
    }

    /// Mean NLL of `batch` without gradients.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for ex in batch {
            ex.check()?;
            let logits = self.logits(&ex.inputs)?;
            let (sum, n) = nll_sum(&logits, self.config.vocab_size, &ex.targets)?;
            total += sum;
            count += n;
        }
        if count == 0 {
            return Err(Error::InvalidInput("every target position is ignored".into()));
        }
        Ok(total / count as f64)
    }
}

/// One training row: inputs and the next-token targets (`None` = ignored).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

impl Example {
    /// Standard shift-by-one example over a token window of length `n + 1`.
    pub fn from_window(window: &[u32]) -> Self {
        let n = window.len().saturating_sub(1);
        Self {
            inputs: window[..n].to_vec(),
            targets: window[1..].iter().map(|&t| Some(t)).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::InvalidInput(format!(
                "inputs ({}) and targets ({}) differ in length",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

fn nll_sum(logits: &[f64], vocab: usize, targets: &[Option<u32>]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    for (row, target) in logits.chunks(vocab).zip(targets) {
        if let Some(t) = *target {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab_size: vocab });
            }
            sum += log_sum_exp(row) - row[t as usize];
            count += 1;
        }
    }
    Ok((sum, count))
}

fn nll_sum_and_grad(logits: &[f64], vocab: usize, targets: &[Option<u32>]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for ((row, g), target) in logits.chunks(vocab).zip(grad.chunks_mut(vocab)).zip(targets) {
        let Some(t) = *target else { continue };
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab_size: vocab });
        }
        let lse = log_sum_exp(row);
        sum += lse - row[t as usize];
        for (gi, &l) in g.iter_mut().zip(row) {
            *gi = (l - lse).exp();
        }
        g[t as usize] -= 1.0;
    }
    Ok((sum, grad))
}

/// Mean negative log-likelihood of `targets` under row-major `logits`
/// (`positions x vocab`), skipping ignored positions.
pub fn nll_loss(logits: &[f64], vocab: usize, targets: &[Option<u32>]) -> Result<f64> {
    if logits.len() != targets.len() * vocab {
        return Err(Error::InvalidInput(format!(
            "{} logits do not cover {} positions of vocabulary {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let (sum, count) = nll_sum(logits, vocab, targets)?;
    if count == 0 {
        return Err(Error::InvalidInput("every target position is ignored".into()));
    }
    Ok(sum / count as f64)
}

/// Scalar reference of every parameter gradient by central differences. Slow;
/// meant for tiny models in tests.
pub fn finite_difference_gradients(model: &Transformer, batch: &[Example], step: f64) -> Result<ParameterSet> {
    let mut probe = model.clone();
    let mut out = model.params.zeros_like();
    let n_tensors = out.tensors().len();
    for ti in 0..n_tensors {
        let len = out.tensors()[ti].len();
        for i in 0..len {
            let orig = probe.params.tensors()[ti].data[i];
            probe.params.tensors_mut()[ti].data[i] = orig + step;
            let plus = probe.loss(batch)?;
            probe.params.tensors_mut()[ti].data[i] = orig - step;
            let minus = probe.loss(batch)?;
            probe.params.tensors_mut()[ti].data[i] = orig;
            out.tensors_mut()[ti].data[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn small_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 32,
            context_length: 6,
            vocab_size: vocab,
            dropout: 0.0,
            seed: 7,
        }
    }

    /// Moves every parameter (gains and biases included) to a random point so that
    /// all gradient paths are exercised.
    fn perturbed(cfg: ModelConfig, seed: u64, std: f64) -> Transformer {
        let mut m = Transformer::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).unwrap();
        for t in m.params.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        m
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(5);
        c.n_heads = 3;
        assert!(Transformer::new(c.clone()).is_err());
        c.n_heads = 2;
        c.dropout = 1.0;
        assert!(Transformer::new(c.clone()).is_err());
        c.dropout = 0.0;
        c.context_length = 0;
        assert!(Transformer::new(c).is_err());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = Transformer::new(small_config(5)).unwrap();
        assert!(matches!(m.logits(&[0; 7]), Err(Error::SequenceTooLong { len: 7, context: 6 })));
        assert!(matches!(m.logits(&[0, 5]), Err(Error::TokenOutOfRange { id: 5, .. })));
    }

    #[test]
    fn causal_mask_is_exact() {
        let m = perturbed(small_config(11), 1, 0.3);
        let a = m.logits(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.logits(&[1, 2, 3, 9, 0]).unwrap();
        assert_eq!(a[..3 * 11], b[..3 * 11]);
        assert_ne!(a[3 * 11..], b[3 * 11..]);
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let m = perturbed(small_config(11), 2, 0.3);
        let out = m.forward(&[vec![3, 1, 4], vec![3, 1, 4]]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let mut m = perturbed(small_config(11), 3, 0.3);
        m.params.lm_head.fill(0.0);
        let ex = Example::from_window(&[1, 2, 3, 4]);
        let loss = m.loss(&[ex]).unwrap();
        assert!((loss - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_loss_values() {
        let v = 100;
        let logits = vec![0.3; 2 * v];
        let l = nll_loss(&logits, v, &[Some(4), Some(99)]).unwrap();
        assert!((l - (100f64).ln()).abs() < 1e-12);
        assert!((l - 4.605_17).abs() < 1e-5);

        let mut sharp = vec![0.0; 3];
        sharp[1] = 200.0;
        assert!(nll_loss(&sharp, 3, &[Some(1)]).unwrap() < 1e-80);
        assert!(nll_loss(&logits, v, &[None, None]).is_err());
    }

    #[test]
    fn nll_loss_matches_brute_force_softmax() {
        // 2 x 3 positions over 5 classes, one position ignored
        let logits: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.37).collect();
        let targets = [Some(0), Some(4), None, Some(2), Some(1), Some(3)];
        let mut expected = 0.0;
        let mut n = 0.0;
        for (p, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &logits[p * 5..(p + 1) * 5];
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                expected += -(row[*t as usize].exp() / z).ln();
                n += 1.0;
            }
        }
        expected /= n;
        let got = nll_loss(&logits, 5, &targets).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = perturbed(small_config(7), 4, 0.3);
        let batch = vec![
            Example::from_window(&[1, 2, 3, 4, 5, 6, 0]),
            Example {
                inputs: vec![6, 5, 4],
                targets: vec![Some(1), None, Some(3)],
            },
        ];
        let (_, analytic) = m.gradients::<ChaCha8Rng>(&batch, None).unwrap();
        let numeric = finite_difference_gradients(&m, &batch, 1e-5).unwrap();
        let mut worst: f64 = 0.0;
        for ((name, a), n) in analytic.named().into_iter().zip(numeric.tensors()) {
            for (x, y) in a.data.iter().zip(&n.data) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}: analytic {x} vs numeric {y}");
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn unused_token_embedding_gets_no_gradient() {
        let m = perturbed(small_config(7), 5, 0.3);
        let (_, g) = m.gradients::<ChaCha8Rng>(&[Example::from_window(&[1, 2, 3])], None).unwrap();
        assert!(g.wte.row(6).iter().all(|&x| x == 0.0));
        assert!(g.wte.row(1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let m = perturbed(small_config(7), 6, 0.3);
        let ex = Example::from_window(&[1, 2, 3, 4]);
        let (l1, g1) = m.gradients::<ChaCha8Rng>(&[ex.clone()], None).unwrap();
        let (l2, g2) = m.gradients::<ChaCha8Rng>(&[ex.clone(), ex], None).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let mut cfg = small_config(7);
        cfg.dropout = 0.5;
        let m = perturbed(cfg, 8, 0.3);
        let ex = Example::from_window(&[1, 2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (with, _) = m.gradients(&[ex.clone()], Some(&mut rng)).unwrap();
        let (without, _) = m.gradients::<ChaCha8Rng>(&[ex.clone()], None).unwrap();
        assert_ne!(with, without);
        assert_eq!(without, m.loss(&[ex]).unwrap());
    }

    #[test]
    fn same_seed_same_model() {
        let a = Transformer::new(small_config(9)).unwrap();
        let b = Transformer::new(small_config(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits(&[1, 2]).unwrap(), b.logits(&[1, 2]).unwrap());
    }
}
