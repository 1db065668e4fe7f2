//! Next-token pretraining over a packed token stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{clip_grad_norm, Checkpoint, Example, LionConfig, LionState, MetricRecord, ModelConfig, Transformer};
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Tokens per training window (inputs; each window holds one extra target).
    pub seq_len: usize,
    pub optimizer: LionConfig,
    /// Evaluate and checkpoint every this many steps, in addition to every epoch end.
    pub eval_every: Option<u64>,
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 15,
            batch_size: 8,
            seq_len: 128,
            optimizer: LionConfig::default(),
            eval_every: None,
            grad_clip: Some(1.0),
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be at least 1".into()));
        }
        if self.seq_len == 0 || self.seq_len > model.context_length {
            return Err(Error::Config(format!(
                "seq_len {} must lie in 1..={}",
                self.seq_len, model.context_length
            )));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.optimizer.validate()
    }
}

/// Encodes documents into one stream, each followed by the end-of-text token
/// when the tokenizer has one.
pub fn tokenize_corpus<S: AsRef<str>>(tokenizer: &TokenizerModel, docs: &[S]) -> Vec<u32> {
    let eos = tokenizer.eos_id();
    let mut out = Vec::new();
    for d in docs {
        out.extend(tokenizer.encode(d.as_ref()));
        out.extend(eos);
    }
    out
}

/// Splits off the trailing `fraction` of the stream as validation data.
pub fn split_validation(tokens: &[u32], fraction: f64) -> (Vec<u32>, Vec<u32>) {
    let n_val = ((tokens.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let cut = tokens.len() - n_val;
    (tokens[..cut].to_vec(), tokens[cut..].to_vec())
}

/// Non-overlapping windows of `seq_len + 1` tokens sharing one boundary token,
/// so every token after the first is a target exactly once.
pub fn training_windows(tokens: &[u32], seq_len: usize) -> Vec<Example> {
    if tokens.len() < seq_len + 1 {
        return Vec::new();
    }
    (0..(tokens.len() - 1) / seq_len)
        .map(|i| Example::from_window(&tokens[i * seq_len..i * seq_len + seq_len + 1]))
        .collect()
}

/// `exp` of the mean next-token NLL over the stream, scored in windows of at
/// most the model context.
pub fn validation_perplexity(model: &Transformer, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidInput(
            "validation data needs at least two tokens after tokenization".into(),
        ));
    }
    let ctx = model.context_length();
    let mut batch = Vec::new();
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + ctx + 1).min(tokens.len());
        batch.push(Example::from_window(&tokens[start..end]));
        start = end - 1;
    }
    // weight windows by their target count
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in &batch {
        let n = ex.targets.len();
        total += model.loss(std::slice::from_ref(ex))? * n as f64;
        count += n;
    }
    Ok((total / count as f64).exp())
}

/// Everything a pretraining run produced.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Transformer,
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricRecord>,
}

/// Trains a fresh model and keeps every checkpoint in memory.
pub fn pretrain(train: &[u32], val: &[u32], model_config: &ModelConfig, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    let mut checkpoints = Vec::new();
    let (model, metrics) = pretrain_with(Transformer::new(model_config.clone())?, train, val, cfg, |c| {
        checkpoints.push(c);
        Ok(())
    })?;
    Ok(PretrainOutcome {
        model,
        checkpoints,
        metrics,
    })
}

/// Training loop. `on_checkpoint` receives a snapshot at every epoch end and
/// every `eval_every` steps. Validation perplexity is logged when `val` is
/// non-empty.
pub fn pretrain_with<F>(
    mut model: Transformer,
    train: &[u32],
    val: &[u32],
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<(Transformer, Vec<MetricRecord>)>
where
    F: FnMut(Checkpoint) -> Result<()>,
{
    cfg.validate(&model.config)?;
    let windows = training_windows(train, cfg.seq_len);
    if windows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "corpus has {} tokens, fewer than one training window of {}",
            train.len(),
            cfg.seq_len + 1
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let use_dropout = model.config.dropout > 0.0;
    let mut optim = LionState::new(cfg.optimizer, model.params.tensors());
    let mut metrics: Vec<MetricRecord> = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    let val_ppl = |m: &Transformer| -> Result<Option<f64>> {
        if val.len() < 2 {
            Ok(None)
        } else {
            validation_perplexity(m, val).map(Some)
        }
    };

    'epochs: for epoch in 0..cfg.max_epochs as u64 {
        order.shuffle(&mut shuffle_rng);
        let n_batches = order.len().div_ceil(cfg.batch_size);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let (loss, mut grads) = if use_dropout {
                model.gradients(&batch, Some(&mut dropout_rng))?
            } else {
                model.gradients::<ChaCha8Rng>(&batch, None)?
            };
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(grads.tensors_mut(), c);
            }
            optim.step(model.params.tensors_mut(), grads.tensors())?;
            step += 1;
            metrics.push(MetricRecord {
                step,
                epoch,
                train_loss: loss,
                val_ppl: None,
            });
            let stop = cfg.max_steps.is_some_and(|m| step >= m);
            let epoch_end = bi + 1 == n_batches;
            let scheduled = cfg.eval_every.is_some_and(|e| step % e == 0);
            if stop || epoch_end || scheduled {
                let ppl = val_ppl(&model)?;
                metrics.last_mut().expect("just pushed").val_ppl = ppl;
                log::info!(
                    "epoch {epoch} step {step} train_loss {loss:.4} val_ppl {}",
                    ppl.map_or("-".to_string(), |p| format!("{p:.3}"))
                );
                let mut ck = Checkpoint::from_model(&model);
                ck.optimizer = Some(optim.clone());
                ck.step = step;
                ck.epoch = epoch;
                ck.metrics = metrics.clone();
                on_checkpoint(ck)?;
            }
            if stop {
                break 'epochs;
            }
        }
    }
    Ok((model, metrics))
}

/// Index of the checkpoint with the highest mean score; ties go to the earliest.
pub fn select_checkpoint(scores: &[Vec<f64>]) -> Result<usize> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidInput("no checkpoints to select from".into()))?;
    if first.is_empty() || scores.iter().any(|s| s.len() != first.len()) {
        return Err(Error::InvalidInput(
            "every checkpoint needs the same, non-zero number of scores".into(),
        ));
    }
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for (i, s) in scores.iter().enumerate() {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        if mean.is_nan() {
            return Err(Error::NonFinite(format!("scores of checkpoint {i}")));
        }
        if mean > best_mean {
            best = i;
            best_mean = mean;
        }
    }
    Ok(best)
}

/// Writes the metric log as CSV with columns step, epoch, train_loss, val_ppl.
pub fn metrics_csv(metrics: &[MetricRecord]) -> String {
    let mut out = String::from("step,epoch,train_loss,val_ppl\n");
    for m in metrics {
        let ppl = m.val_ppl.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", m.step, m.epoch, m.train_loss, ppl));
    }
    out
}
