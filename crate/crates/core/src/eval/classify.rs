//! End-to-end fine-tuning of a linear classifier on the final-token state.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LionConfig, LionState, Linear, Transformer};
use crate::reward::{pooled_backward, pooled_trace, step_backbone_and_head};
use crate::tensor::{argmax, softmax};
use crate::tokenizer::TokenizerModel;

/// `{text, label}` or `{text_a, text_b, label}`; labels may be strings or numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: serde_json::Value,
}

impl LabeledExample {
    pub fn label_key(&self) -> String {
        match &self.label {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    /// Single text, or the two texts joined by a newline.
    pub fn input(&self) -> Result<String> {
        match (&self.text, &self.text_a, &self.text_b) {
            (Some(t), None, None) => Ok(t.clone()),
            (None, Some(a), Some(b)) => Ok(format!("{a}\n{b}")),
            _ => Err(Error::InvalidInput(
                "example needs either `text` or both `text_a` and `text_b`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: LionConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            optimizer: LionConfig {
                lr: 1e-4,
                ..LionConfig::default()
            },
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Accuracy of always predicting the most frequent training label.
    pub majority_accuracy: f64,
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Unweighted mean of per-class F1 over `n_classes` classes. A class that is
/// neither predicted nor present scores 0 and is excluded from the mean.
pub fn macro_f1(gold: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..n_classes {
        let tp = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count() as f64;
        let fp = gold.iter().zip(pred).filter(|(g, p)| **g != c && **p == c).count() as f64;
        let fn_ = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p != c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        total += 2.0 * tp / (2.0 * tp + fp + fn_);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn encode(tokenizer: &TokenizerModel, ctx: usize, ex: &LabeledExample) -> Result<Vec<u32>> {
    let mut ids = tokenizer.encode(&ex.input()?);
    if ids.is_empty() {
        return Err(Error::InvalidInput("example text is empty".into()));
    }
    if ids.len() > ctx {
        ids.drain(..ids.len() - ctx);
    }
    Ok(ids)
}

/// Fine-tunes `backbone` plus a fresh linear head on `train`, then reports
/// accuracy and macro-F1 on `eval`.
pub fn finetune_classifier(
    mut backbone: Transformer,
    tokenizer: &TokenizerModel,
    train: &[LabeledExample],
    eval: &[LabeledExample],
    cfg: &ClassifyConfig,
) -> Result<ClassifyReport> {
    cfg.optimizer.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    let classes: Vec<String> = train.iter().map(|e| e.label_key()).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "training data has {} class(es); at least two are needed",
            classes.len()
        )));
    }
    if eval.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let class_of = |e: &LabeledExample| classes.binary_search(&e.label_key()).ok();
    let ctx = backbone.context_length();
    let train_set: Vec<(Vec<u32>, usize)> = train
        .iter()
        .map(|e| Ok((encode(tokenizer, ctx, e)?, class_of(e).expect("training label"))))
        .collect::<Result<_>>()?;
    let eval_set: Vec<(Vec<u32>, Option<usize>)> = eval
        .iter()
        .map(|e| Ok((encode(tokenizer, ctx, e)?, class_of(e))))
        .collect::<Result<_>>()?;

    let k = classes.len();
    let d = backbone.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Linear::init(d, k, &mut rng);
    let mut optim = {
        let mut ts = backbone.params.tensors();
        ts.extend(head.tensors());
        LionState::new(cfg.optimizer, ts)
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = backbone.params.zeros_like();
            let mut head_grads = head.zeros_like();
            for &i in chunk {
                let (ids, y) = &train_set[i];
                let (tr, pos) = pooled_trace::<ChaCha8Rng>(&backbone, ids, None)?;
                let mut probs = softmax(&head.apply(&tr.hidden[pos * d..(pos + 1) * d]));
                loss -= probs[*y].ln();
                probs[*y] -= 1.0;
                probs.iter_mut().for_each(|g| *g /= chunk.len() as f64);
                pooled_backward(&backbone, &head, &tr, pos, &probs, &mut grads, &mut head_grads);
            }
            step_backbone_and_head(&mut optim, &mut backbone, &mut head, grads, head_grads, cfg.grad_clip)?;
        }
        log::info!("classifier epoch {epoch}: loss {:.4}", loss / train_set.len() as f64);
    }

    let mut counts = vec![0usize; k];
    train_set.iter().for_each(|(_, y)| counts[*y] += 1);
    let majority = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    // labels unseen in training get an index no prediction can match
    let gold: Vec<usize> = eval_set.iter().map(|(_, y)| y.unwrap_or(k)).collect();
    let mut pred = Vec::with_capacity(eval_set.len());
    for (ids, _) in &eval_set {
        let h = backbone.hidden_states(ids)?;
        pred.push(argmax(&head.apply(&h[(ids.len() - 1) * d..])));
    }
    let n = gold.len() as f64;
    Ok(ClassifyReport {
        accuracy: gold.iter().zip(&pred).filter(|(g, p)| g == p).count() as f64 / n,
        macro_f1: macro_f1(&gold, &pred, k + 1),
        majority_accuracy: gold.iter().filter(|&&g| g == majority).count() as f64 / n,
        classes,
        n_train: train_set.len(),
        n_eval: eval_set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn ex(text: &str, label: &str) -> LabeledExample {
        LabeledExample {
            text: Some(text.into()),
            text_a: None,
            text_b: None,
            label: serde_json::Value::String(label.into()),
        }
    }

    #[test]
    fn f1_values() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2), 1.0);
        // class 0: tp 1 fp 1 fn 0 -> 2/3; class 1: tp 1 fp 0 fn 1 -> 2/3
        assert!((macro_f1(&[0, 1, 1], &[0, 0, 1], 2) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn inputs_and_labels() {
        let pair = LabeledExample {
            text: None,
            text_a: Some("a".into()),
            text_b: Some("b".into()),
            label: serde_json::json!(1),
        };
        assert_eq!(pair.input().unwrap(), "a\nb");
        assert_eq!(pair.label_key(), "1");
        assert!(LabeledExample { text_b: None, ..pair }.input().is_err());
    }

    #[test]
    fn planted_marker_is_learned() {
        let tok = TokenizerModel::byte_level(&[]);
        let words = ["red", "blue", "tall", "cold", "soft", "dark", "old", "warm"];
        let mut data = Vec::new();
        for i in 0..64 {
            let a = words[i % 8];
            let b = words[(i / 8) % 8];
            let marked = i % 2 == 0;
            let text = if marked { format!("{a} {b} !") } else { format!("{a} {b} .") };
            data.push(ex(&text, if marked { "yes" } else { "no" }));
        }
        let model = Transformer::new(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_length: 32,
            vocab_size: 256,
            dropout: 0.0,
            seed: 2,
        })
        .unwrap();
        let cfg = ClassifyConfig {
            epochs: 4,
            optimizer: LionConfig {
                lr: 1e-3,
                ..LionConfig::default()
            },
            ..ClassifyConfig::default()
        };
        let r = finetune_classifier(model.clone(), &tok, &data[..48], &data[48..], &cfg).unwrap();
        assert!(r.accuracy >= 0.95, "{r:?}");
        assert!(r.accuracy >= r.majority_accuracy);
        assert!(finetune_classifier(model, &tok, &[ex("a", "x")], &data[..2], &cfg).is_err());
    }
}
