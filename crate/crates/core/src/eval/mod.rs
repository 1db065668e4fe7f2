//! Perplexity-free evaluations: minimal pairs, word surprisal, classification
//! fine-tuning and the statistics used to compare human ratings.

mod classify;
mod stats;

pub use classify::{finetune_classifier, macro_f1, ClassifyConfig, ClassifyReport, LabeledExample};
pub use stats::{compare_human_scores, mad, paired_t_test, CriterionComparison, HumanScoreRecord, TTest};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Transformer;
use crate::tensor::log_softmax;
use crate::tokenizer::TokenizerModel;

/// Sum of next-token log-probabilities over positions 1.. of `ids`.
pub fn sequence_logprob_ids(model: &Transformer, ids: &[u32]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot score an empty sequence".into()));
    }
    let logits = model.logits(ids)?;
    let v = model.vocab_size();
    Ok((1..ids.len())
        .map(|p| log_softmax(&logits[(p - 1) * v..p * v])[ids[p] as usize])
        .sum())
}

/// Raw summed log-probability of `text`, without length normalization.
pub fn sequence_logprob(model: &Transformer, tokenizer: &TokenizerModel, text: &str) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot score empty text".into()));
    }
    sequence_logprob_ids(model, &tokenizer.encode(text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub good: String,
    pub bad: String,
    #[serde(default)]
    pub phenomenon: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn new(correct: usize, total: usize) -> Self {
        Self {
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalPairReport {
    pub overall: Accuracy,
    pub phenomena: BTreeMap<String, Accuracy>,
}

/// A pair is correct when the acceptable sentence scores strictly higher.
pub fn minimal_pair_accuracy(model: &Transformer, tokenizer: &TokenizerModel, pairs: &[MinimalPair]) -> Result<MinimalPairReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no minimal pairs given".into()));
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (i, p) in pairs.iter().enumerate() {
        if p.good.is_empty() || p.bad.is_empty() || p.good == p.bad {
            return Err(Error::InvalidInput(format!(
                "minimal pair {i} needs two different non-empty sentences"
            )));
        }
        let ok = sequence_logprob(model, tokenizer, &p.good)? > sequence_logprob(model, tokenizer, &p.bad)?;
        let e = tally.entry(p.phenomenon.clone()).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
        correct += usize::from(ok);
    }
    Ok(MinimalPairReport {
        overall: Accuracy::new(correct, pairs.len()),
        phenomena: tally.into_iter().map(|(k, (c, t))| (k, Accuracy::new(c, t))).collect(),
    })
}

/// Byte offsets of whole-word occurrences of `word` in `text`.
fn word_occurrences(text: &str, word: &str) -> Vec<usize> {
    let is_word = |c: char| c.is_alphanumeric() || c == '\'';
    text.match_indices(word)
        .map(|(i, _)| i)
        .filter(|&i| {
            let before = text[..i].chars().next_back().is_none_or(|c| !is_word(c));
            let after = text[i + word.len()..].chars().next().is_none_or(|c| !is_word(c));
            before && after
        })
        .collect()
}

/// Surprisal in bits of each whole-word occurrence of `word` in `context`,
/// conditioned on the text before it. The end-of-text token, when the
/// tokenizer has one, serves as the start symbol.
pub fn word_surprisals(model: &Transformer, tokenizer: &TokenizerModel, word: &str, context: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let bos = tokenizer.eos_id();
    let v = model.vocab_size();
    let ctx = model.context_length();
    for start in word_occurrences(context, word) {
        // keep a preceding space with the word so the split matches pre-tokenization
        let cut = if context[..start].ends_with(' ') { start - 1 } else { start };
        let prefix = tokenizer.encode(&context[..cut]);
        let full = tokenizer.encode(&context[..start + word.len()]);
        if !full.starts_with(&prefix) || full.len() == prefix.len() {
            log::warn!("occurrence of `{word}` at byte {start} does not split cleanly into tokens; skipped");
            continue;
        }
        let mut ids: Vec<u32> = bos.into_iter().collect();
        ids.extend(&full);
        let n_word = full.len() - prefix.len();
        if ids.len() > ctx {
            ids.drain(..ids.len() - ctx);
        }
        if ids.len() <= n_word {
            log::warn!("occurrence of `{word}` at byte {start} has no context to condition on; skipped");
            continue;
        }
        let logits = model.logits(&ids)?;
        let bits: f64 = (ids.len() - n_word..ids.len())
            .map(|p| -log_softmax(&logits[(p - 1) * v..p * v])[ids[p] as usize])
            .sum::<f64>()
            / std::f64::consts::LN_2;
        out.push(bits);
    }
    Ok(out)
}

/// Mean surprisal in bits of `word` over every occurrence in `contexts`.
/// Contexts without the word are skipped with a warning.
pub fn mean_average_surprisal(model: &Transformer, tokenizer: &TokenizerModel, word: &str, contexts: &[String]) -> Result<f64> {
    if word.is_empty() {
        return Err(Error::InvalidInput("empty word".into()));
    }
    let mut all = Vec::new();
    for (i, c) in contexts.iter().enumerate() {
        let s = word_surprisals(model, tokenizer, word, c)?;
        if s.is_empty() {
            log::warn!("context {i} has no scorable occurrence of `{word}`; skipped");
        }
        all.extend(s);
    }
    if all.is_empty() {
        return Err(Error::InvalidInput(format!("`{word}` occurs in none of the contexts")));
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}
