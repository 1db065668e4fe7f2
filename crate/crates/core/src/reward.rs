//! Scalar reward model: transformer backbone plus a linear head on the final
//! non-padding position, trained with the pairwise log-sigmoid loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{clip_grad_norm, Checkpoint, LionConfig, LionState, Linear, ParameterSet, Trace, Transformer};
use crate::preference::PreferencePair;
use crate::tokenizer::TokenizerModel;

pub const HEAD_WEIGHT: &str = "reward_head.weight";
pub const HEAD_BIAS: &str = "reward_head.bias";

/// Joins a prompt and a response into the scored text.
pub fn join_prompt_response(prompt: &str, response: &str) -> String {
    format!("{prompt}\n{response}")
}

/// `-ln sigmoid(s0 - s1)`, evaluated as a softplus so neither tail overflows.
pub fn pairwise_loss(s0: f64, s1: f64) -> f64 {
    softplus(s1 - s0)
}

/// `(d loss / d s0, d loss / d s1)`.
pub fn pairwise_loss_grad(s0: f64, s1: f64) -> (f64, f64) {
    let g = sigmoid(s1 - s0);
    (-g, g)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A transformer whose final hidden state at one position feeds a linear head.
pub(crate) fn pooled_trace<R: Rng + ?Sized>(model: &Transformer, ids: &[u32], rng: Option<&mut R>) -> Result<(Trace, usize)> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot score an empty token sequence".into()));
    }
    let tr = model.trace(ids, false, rng)?;
    Ok((tr, ids.len() - 1))
}

/// Backpropagates `dy` (head output gradient) through the head and backbone.
pub(crate) fn pooled_backward(
    model: &Transformer,
    head: &Linear,
    trace: &Trace,
    pos: usize,
    dy: &[f64],
    grads: &mut ParameterSet,
    head_grads: &mut Linear,
) {
    let d = model.config.d_model;
    let h = &trace.hidden[pos * d..(pos + 1) * d];
    let dh_last = head.backward(h, dy, head_grads);
    let mut dh = vec![0.0; trace.hidden.len()];
    dh[pos * d..(pos + 1) * d].copy_from_slice(&dh_last);
    model.backward(trace, None, Some(&dh), grads);
}

/// One clipped Lion step over backbone and head together.
pub(crate) fn step_backbone_and_head(
    optim: &mut LionState,
    model: &mut Transformer,
    head: &mut Linear,
    mut grads: ParameterSet,
    mut head_grads: Linear,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(c) = clip {
        let mut all = grads.tensors_mut();
        all.extend(head_grads.tensors_mut());
        clip_grad_norm(all, c);
    }
    let mut params = model.params.tensors_mut();
    params.extend(head.tensors_mut());
    let mut g = grads.tensors();
    g.extend(head_grads.tensors());
    optim.step(params, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub backbone: Transformer,
    /// `d_model -> 1`
    pub head: Linear,
    /// Trailing tokens with this id are ignored when pooling.
    pub pad_id: Option<u32>,
}

impl RewardModel {
    /// Wraps a pretrained backbone with a randomly initialized head.
    pub fn new(backbone: Transformer, pad_id: Option<u32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Linear::init(backbone.config.d_model, 1, &mut rng);
        Self { backbone, head, pad_id }
    }

    /// Token ids of `prompt + "\n" + response`.
    pub fn encode(&self, tokenizer: &TokenizerModel, prompt: &str, response: &str) -> Result<Vec<u32>> {
        let ids = tokenizer.encode(&join_prompt_response(prompt, response));
        self.backbone.check_ids(&ids)?;
        Ok(ids)
    }

    fn trim<'a>(&self, ids: &'a [u32]) -> Result<&'a [u32]> {
        let end = match self.pad_id {
            Some(p) => ids.iter().rposition(|&t| t != p).map_or(0, |i| i + 1),
            None => ids.len(),
        };
        if end == 0 {
            return Err(Error::InvalidInput("sequence contains only padding".into()));
        }
        Ok(&ids[..end])
    }

    pub fn score_ids(&self, ids: &[u32]) -> Result<f64> {
        let ids = self.trim(ids)?;
        let hidden = self.backbone.hidden_states(ids)?;
        let d = self.backbone.config.d_model;
        Ok(self.head.apply(&hidden[(ids.len() - 1) * d..])[0])
    }

    pub fn score(&self, tokenizer: &TokenizerModel, prompt: &str, response: &str) -> Result<f64> {
        self.score_ids(&self.encode(tokenizer, prompt, response)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.backbone);
        ck.extra.insert(HEAD_WEIGHT.into(), self.head.weight.clone());
        ck.extra.insert(HEAD_BIAS.into(), self.head.bias.clone());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint, pad_id: Option<u32>) -> Result<Self> {
        let missing = |n: &str| Error::Checkpoint(format!("reward head array `{n}` missing; not a reward checkpoint"));
        let weight = ck.extra.get(HEAD_WEIGHT).cloned().ok_or_else(|| missing(HEAD_WEIGHT))?;
        let bias = ck.extra.get(HEAD_BIAS).cloned().ok_or_else(|| missing(HEAD_BIAS))?;
        let d = ck.config.d_model;
        if weight.shape != [d, 1] || bias.shape != [1] {
            return Err(Error::ShapeMismatch {
                name: HEAD_WEIGHT.into(),
                expected: vec![d, 1],
                found: weight.shape,
            });
        }
        Ok(Self {
            backbone: ck.into_model()?,
            head: Linear { weight, bias },
            pad_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub optimizer: LionConfig,
    pub heldout_fraction: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            batch_size: 8,
            optimizer: LionConfig::default(),
            heldout_fraction: 0.1,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Fraction of training pairs ranked correctly after the epoch.
    pub train_accuracy: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

/// A pair tokenized for training.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

pub fn encode_pairs(rm: &RewardModel, tokenizer: &TokenizerModel, pairs: &[PreferencePair]) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.is_degenerate() {
                return Err(Error::InvalidInput(format!(
                    "pair {i} has identical chosen and rejected text"
                )));
            }
            Ok(EncodedPair {
                chosen: rm.encode(tokenizer, &p.prompt, &p.chosen)?,
                rejected: rm.encode(tokenizer, &p.prompt, &p.rejected)?,
            })
        })
        .collect()
}

/// Mean loss and ranking accuracy (fraction with `s0 > s1`).
pub fn evaluate_pairs(rm: &RewardModel, pairs: &[EncodedPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for p in pairs {
        let (s0, s1) = (rm.score_ids(&p.chosen)?, rm.score_ids(&p.rejected)?);
        loss += pairwise_loss(s0, s1);
        correct += usize::from(s0 > s1);
    }
    let n = pairs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Splits off a seeded held-out share, then minimizes the mean pairwise loss
/// with Lion. Returns per-epoch metrics.
pub fn train_reward(
    rm: &mut RewardModel,
    tokenizer: &TokenizerModel,
    pairs: &[PreferencePair],
    cfg: &RewardTrainConfig,
) -> Result<Vec<RewardEpochMetrics>> {
    let encoded = encode_pairs(rm, tokenizer, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((encoded.len() as f64) * cfg.heldout_fraction.clamp(0.0, 1.0)).round() as usize;
    let n_held = n_held.min(encoded.len().saturating_sub(1));
    let heldout: Vec<EncodedPair> = order[..n_held].iter().map(|&i| encoded[i].clone()).collect();
    let train: Vec<EncodedPair> = order[n_held..].iter().map(|&i| encoded[i].clone()).collect();
    train_reward_encoded(rm, &train, &heldout, cfg)
}

pub fn train_reward_encoded(
    rm: &mut RewardModel,
    train: &[EncodedPair],
    heldout: &[EncodedPair],
    cfg: &RewardTrainConfig,
) -> Result<Vec<RewardEpochMetrics>> {
    if cfg.max_epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("max_epochs and batch_size must be at least 1".into()));
    }
    cfg.optimizer.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("reward training needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let use_dropout = rm.backbone.config.dropout > 0.0;
    let mut optim = {
        let mut ts = rm.backbone.params.tensors();
        ts.extend(rm.head.tensors());
        LionState::new(cfg.optimizer, ts)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = rm.backbone.params.zeros_like();
            let mut head_grads = rm.head.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let p = &train[i];
                let drng = if use_dropout { Some(&mut dropout_rng) } else { None };
                let (tr0, pos0) = pooled_trace(&rm.backbone, rm.trim(&p.chosen)?, drng)?;
                let drng = if use_dropout { Some(&mut dropout_rng) } else { None };
                let (tr1, pos1) = pooled_trace(&rm.backbone, rm.trim(&p.rejected)?, drng)?;
                let d = rm.backbone.config.d_model;
                let s0 = rm.head.apply(&tr0.hidden[pos0 * d..(pos0 + 1) * d])[0];
                let s1 = rm.head.apply(&tr1.hidden[pos1 * d..(pos1 + 1) * d])[0];
                let loss = pairwise_loss(s0, s1);
                if !loss.is_finite() {
                    return Err(Error::NonFinite("reward loss".into()));
                }
                epoch_loss += loss;
                let (g0, g1) = pairwise_loss_grad(s0, s1);
                pooled_backward(&rm.backbone, &rm.head, &tr0, pos0, &[g0 * scale], &mut grads, &mut head_grads);
                pooled_backward(&rm.backbone, &rm.head, &tr1, pos1, &[g1 * scale], &mut grads, &mut head_grads);
            }
            step_backbone_and_head(&mut optim, &mut rm.backbone, &mut rm.head, grads, head_grads, cfg.grad_clip)?;
        }
        let (_, train_accuracy) = evaluate_pairs(rm, train)?;
        let (heldout_loss, heldout_accuracy) = if heldout.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_pairs(rm, heldout)?;
            (Some(l), Some(a))
        };
        let m = RewardEpochMetrics {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            train_accuracy,
            heldout_loss,
            heldout_accuracy,
        };
        log::info!(
            "reward epoch {epoch}: loss {:.4} train acc {:.3} held-out acc {}",
            m.train_loss,
            m.train_accuracy,
            m.heldout_accuracy.map_or("-".into(), |a| format!("{a:.3}"))
        );
        history.push(m);
    }
    Ok(history)
}

/// CSV with columns epoch, train_loss, train_accuracy, heldout_loss, heldout_accuracy.
pub fn metrics_csv(metrics: &[RewardEpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,train_loss,train_accuracy,heldout_loss,heldout_accuracy\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            opt(m.heldout_loss),
            opt(m.heldout_accuracy)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;
    use crate::preference::Provenance;
    use proptest::prelude::*;

    fn backbone(vocab: usize) -> Transformer {
        Transformer::new(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_length: 48,
            vocab_size: vocab,
            dropout: 0.0,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn loss_values_and_limits() {
        assert!((pairwise_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-12);
        // ln(1 + e^-1), evaluated independently to 20 digits
        assert!((pairwise_loss(1.0, 0.0) - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(pairwise_loss(1000.0, 0.0) < 1e-300);
        let big = pairwise_loss(0.0, 1000.0);
        assert!(big.is_finite() && ((big - 1000.0) / 1000.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn below_ln2_iff_correctly_ranked(s0 in -50.0f64..50.0, s1 in -50.0f64..50.0) {
            prop_assert_eq!(pairwise_loss(s0, s1) < std::f64::consts::LN_2, s0 > s1);
        }

        #[test]
        fn gradient_matches_finite_differences(s0 in -8.0f64..8.0, s1 in -8.0f64..8.0) {
            let h = 1e-6;
            let (g0, g1) = pairwise_loss_grad(s0, s1);
            let fd0 = (pairwise_loss(s0 + h, s1) - pairwise_loss(s0 - h, s1)) / (2.0 * h);
            let fd1 = (pairwise_loss(s0, s1 + h) - pairwise_loss(s0, s1 - h)) / (2.0 * h);
            prop_assert!(g0 < 0.0 && g1 > 0.0);
            prop_assert!((g0 - fd0).abs() < 1e-6 && (g1 - fd1).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_head_scores_zero() {
        let mut rm = RewardModel::new(backbone(20), None, 1);
        rm.head = Linear::zeros(16, 1);
        assert_eq!(rm.score_ids(&[1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn trailing_padding_is_ignored_and_score_is_a_dot_product() {
        let rm = RewardModel::new(backbone(20), Some(19), 1);
        let a = rm.score_ids(&[4, 5, 6]).unwrap();
        assert_eq!(a, rm.score_ids(&[4, 5, 6, 19, 19]).unwrap());
        let h = rm.backbone.hidden_states(&[4, 5, 6]).unwrap();
        let manual: f64 = h[32..48].iter().zip(&rm.head.weight.data).map(|(x, w)| x * w).sum::<f64>() + rm.head.bias.data[0];
        assert!((a - manual).abs() < 1e-12);
        assert!(rm.score_ids(&[19, 19]).is_err());
        assert!(rm.score_ids(&[1; 49]).is_err());
    }

    fn pair(chosen: &str, rejected: &str) -> PreferencePair {
        PreferencePair {
            prompt: "p".into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            provenance: Provenance {
                set_id: 0,
                rule: "best>other".into(),
                chosen_index: 0,
                rejected_index: 1,
                annotator: None,
            },
        }
    }

    #[test]
    fn single_pair_loss_drops_below_ln2() {
        let tok = TokenizerModel::byte_level(&[]);
        let mut rm = RewardModel::new(backbone(256), None, 3);
        rm.head = Linear::zeros(16, 1);
        let cfg = RewardTrainConfig {
            max_epochs: 5,
            batch_size: 1,
            heldout_fraction: 0.0,
            optimizer: LionConfig {
                lr: 1e-3,
                ..LionConfig::default()
            },
            ..RewardTrainConfig::default()
        };
        let hist = train_reward(&mut rm, &tok, &[pair("good", "bad")], &cfg).unwrap();
        assert!((hist[0].train_loss - std::f64::consts::LN_2).abs() < 1e-12);
        let enc = encode_pairs(&rm, &tok, &[pair("good", "bad")]).unwrap();
        assert!(evaluate_pairs(&rm, &enc).unwrap().0 < std::f64::consts::LN_2);
    }

    #[test]
    fn accuracy_is_antisymmetric_and_degenerate_pairs_fail() {
        let tok = TokenizerModel::byte_level(&[]);
        let rm = RewardModel::new(backbone(256), None, 8);
        let pairs: Vec<_> = ["ab", "cd", "ef", "gh"].iter().map(|c| pair(c, "zz")).collect();
        let swapped: Vec<_> = pairs.iter().map(|p| pair(&p.rejected, &p.chosen)).collect();
        let a = evaluate_pairs(&rm, &encode_pairs(&rm, &tok, &pairs).unwrap()).unwrap().1;
        let b = evaluate_pairs(&rm, &encode_pairs(&rm, &tok, &swapped).unwrap()).unwrap().1;
        assert!((a + b - 1.0).abs() < 1e-12);
        assert!(encode_pairs(&rm, &tok, &[pair("x", "x")]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let rm = RewardModel::new(backbone(20), Some(3), 2);
        let back = RewardModel::from_checkpoint(Checkpoint::from_bytes(&rm.to_checkpoint().to_bytes().unwrap()).unwrap(), Some(3)).unwrap();
        assert_eq!(back, rm);
        assert!(RewardModel::from_checkpoint(Checkpoint::from_model(&backbone(20)), None).is_err());
    }
}
