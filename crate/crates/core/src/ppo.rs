//! KL-penalized PPO against a scalar reward.
//!
//! Per response token `t` the shaped reward is `-beta * (log pi(a_t) - log ref(a_t))`,
//! with the sequence score added at the last token. Advantages come from GAE,
//! and the policy minimizes the clipped surrogate plus a weighted value loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::{sample_with_rng, GenerationConfig, STORY_PREFIX};
use crate::error::{Error, Result};
use crate::lm::{Checkpoint, LionConfig, LionState, Linear, Transformer};
use crate::reward::RewardModel;
use crate::tensor::{log_softmax, softmax};
use crate::tokenizer::TokenizerModel;

pub const VALUE_WEIGHT: &str = "value_head.weight";
pub const VALUE_BIAS: &str = "value_head.bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    /// beta
    pub kl_coef: f64,
    /// epsilon
    pub clip_range: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Prompts sampled per iteration.
    pub rollout_batch_size: usize,
    pub minibatch_size: usize,
    pub inner_epochs: usize,
    /// Passes over the prompt pool.
    pub outer_epochs: usize,
    /// Prompt plus response budget in tokens.
    pub max_seq_len: usize,
    pub optimizer: LionConfig,
    pub value_weight: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            kl_coef: 0.05,
            clip_range: 0.2,
            gamma: 1.0,
            lambda: 0.95,
            rollout_batch_size: 8,
            minibatch_size: 4,
            inner_epochs: 4,
            outer_epochs: 5,
            max_seq_len: 512,
            optimizer: LionConfig::default(),
            value_weight: 0.5,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(Error::Config(format!("clip_range must lie in (0, 1), got {}", self.clip_range)));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        if !(self.kl_coef >= 0.0) {
            return Err(Error::Config(format!("kl_coef must be non-negative, got {}", self.kl_coef)));
        }
        if self.rollout_batch_size == 0 || self.minibatch_size == 0 {
            return Err(Error::Config("rollout_batch_size and minibatch_size must be at least 1".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        self.optimizer.validate()
    }
}

/// The policy LM with a per-token value head on its final hidden states. The
/// head reads detached features, so value regression never moves the LM.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub lm: Transformer,
    /// `d_model -> 1`
    pub value_head: Linear,
}

impl PolicyModel {
    pub fn new(lm: Transformer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let value_head = Linear::init(lm.config.d_model, 1, &mut rng);
        Self { lm, value_head }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.lm);
        ck.extra.insert(VALUE_WEIGHT.into(), self.value_head.weight.clone());
        ck.extra.insert(VALUE_BIAS.into(), self.value_head.bias.clone());
        ck
    }

    /// Restores the value head when present, otherwise initializes one.
    pub fn from_checkpoint(ck: Checkpoint, seed: u64) -> Result<Self> {
        let head = match (ck.extra.get(VALUE_WEIGHT), ck.extra.get(VALUE_BIAS)) {
            (Some(w), Some(b)) => Some(Linear {
                weight: w.clone(),
                bias: b.clone(),
            }),
            _ => None,
        };
        let lm = ck.into_model()?;
        Ok(match head {
            Some(value_head) => Self { lm, value_head },
            None => Self::new(lm, seed),
        })
    }
}

/// Scalar reward for a sampled response.
pub trait RewardFn {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64>;
}

/// Synthetic reward: how often `token` occurs in the response.
#[derive(Debug, Clone, Copy)]
pub struct TokenCountReward {
    pub token: u32,
}

impl RewardFn for TokenCountReward {
    fn score(&self, _prompt: &[u32], response: &[u32]) -> Result<f64> {
        Ok(response.iter().filter(|&&t| t == self.token).count() as f64)
    }
}

/// A trained reward model applied to decoded text. The story instruction
/// prefix is stripped from the prompt before scoring.
pub struct LearnedReward<'a> {
    pub model: &'a RewardModel,
    pub tokenizer: &'a TokenizerModel,
}

impl RewardFn for LearnedReward<'_> {
    fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        let prompt = self.tokenizer.decode_with(prompt, true)?;
        let prompt = prompt.strip_prefix(STORY_PREFIX).unwrap_or(&prompt).trim();
        let response = self.tokenizer.decode_with(response, true)?;
        let text = crate::reward::join_prompt_response(prompt, response.trim());
        let mut ids = self.tokenizer.encode(&text);
        let ctx = self.model.backbone.context_length();
        if ids.len() > ctx {
            ids.drain(..ids.len() - ctx);
        }
        self.model.score_ids(&ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    /// Policy log-probs of the response tokens at sampling time.
    pub logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    /// Shaped per-token rewards.
    pub rewards: Vec<f64>,
    /// Sequence score from the reward function.
    pub score: f64,
}

impl Rollout {
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend(&self.response);
        s
    }
}

/// Shaped rewards: per-token KL penalty with the score added at the last token.
pub fn shaped_rewards(logprobs: &[f64], ref_logprobs: &[f64], score: f64, kl_coef: f64) -> Vec<f64> {
    let mut r: Vec<f64> = logprobs.iter().zip(ref_logprobs).map(|(lp, rl)| -kl_coef * (lp - rl)).collect();
    if let Some(last) = r.last_mut() {
        *last += score;
    }
    r
}

/// Generalized advantage estimation with a zero bootstrap after the last token.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::InvalidInput(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Per-position log-probs of `seq[from..]` and value estimates, each taken from
/// the position before the token, via the full forward pass.
fn score_response(policy: &PolicyModel, seq: &[u32], from: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let tr = policy.lm.trace::<ChaCha8Rng>(seq, true, None)?;
    let v = policy.lm.vocab_size();
    let d = policy.lm.config.d_model;
    let logits = tr.logits.as_ref().expect("requested");
    let mut lps = Vec::with_capacity(seq.len() - from);
    let mut vals = Vec::with_capacity(seq.len() - from);
    for p in from..seq.len() {
        let row = &logits[(p - 1) * v..p * v];
        lps.push(log_softmax(row)[seq[p] as usize]);
        vals.push(policy.value_head.apply(&tr.hidden[(p - 1) * d..p * d])[0]);
    }
    Ok((lps, vals))
}

fn reference_logprobs(reference: &Transformer, seq: &[u32], from: usize) -> Result<Vec<f64>> {
    let logits = reference.logits(seq)?;
    let v = reference.vocab_size();
    Ok((from..seq.len())
        .map(|p| log_softmax(&logits[(p - 1) * v..p * v])[seq[p] as usize])
        .collect())
}

/// Samples one response per prompt from the policy and records everything the
/// update needs. Prompts that leave no room for `gen.max_new_tokens` within the
/// sequence budget are truncated from the left.
pub fn collect_rollouts<F: RewardFn + ?Sized, R: Rng + ?Sized>(
    policy: &PolicyModel,
    reference: &Transformer,
    reward: &F,
    prompts: &[Vec<u32>],
    gen: &GenerationConfig,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<Vec<Rollout>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("no prompts to roll out".into()));
    }
    if gen.max_new_tokens == 0 {
        return Err(Error::Config("rollouts need max_new_tokens >= 1".into()));
    }
    let limit = cfg.max_seq_len.min(policy.lm.context_length());
    let room = limit.saturating_sub(gen.max_new_tokens).max(1);
    let mut out = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        let prompt = if prompt.len() > room {
            log::warn!("prompt of {} tokens truncated from the left to {room}", prompt.len());
            &prompt[prompt.len() - room..]
        } else {
            &prompt[..]
        };
        let g = sample_with_rng(&policy.lm, prompt, gen, rng)?;
        let seq = g.ids;
        let from = prompt.len();
        if seq.len() == from {
            return Err(Error::InvalidInput("sampled an empty response".into()));
        }
        let (logprobs, values) = score_response(policy, &seq, from)?;
        let ref_logprobs = reference_logprobs(reference, &seq, from)?;
        let response = seq[from..].to_vec();
        let score = reward.score(prompt, &response)?;
        if !score.is_finite() {
            return Err(Error::NonFinite("reward score".into()));
        }
        let rewards = shaped_rewards(&logprobs, &ref_logprobs, score, cfg.kl_coef);
        out.push(Rollout {
            prompt: prompt.to_vec(),
            response,
            logprobs,
            ref_logprobs,
            values,
            rewards,
            score,
        });
    }
    Ok(out)
}

/// Full-vocabulary KL(p || q) between two logit rows.
pub fn kl_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Mean over every predicting position (all but the last of each sequence,
/// counted from `from`) of the exact KL between the two next-token distributions.
fn mean_kl_from(policy: &Transformer, reference: &Transformer, batch: &[(Vec<u32>, usize)]) -> Result<f64> {
    let v = policy.vocab_size();
    if reference.vocab_size() != v {
        return Err(Error::InvalidInput("policy and reference vocabularies differ".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (seq, from) in batch {
        let (pl, ql) = (policy.logits(seq)?, reference.logits(seq)?);
        for p in (*from).max(1)..=seq.len() {
            total += kl_logits(&pl[(p - 1) * v..p * v], &ql[(p - 1) * v..p * v]);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean per-position KL(policy || reference) over every position of every sequence.
pub fn mean_kl(policy: &Transformer, reference: &Transformer, sequences: &[Vec<u32>]) -> Result<f64> {
    let batch: Vec<(Vec<u32>, usize)> = sequences.iter().map(|s| (s.clone(), 1)).collect();
    mean_kl_from(policy, reference, &batch)
}

/// KL per generated token of a rollout batch.
pub fn rollout_kl(policy: &Transformer, reference: &Transformer, rollouts: &[Rollout]) -> Result<f64> {
    // positions prompt_len .. seq_len - 1 predict the response tokens
    let batch: Vec<(Vec<u32>, usize)> = rollouts
        .iter()
        .map(|r| {
            let mut s = r.sequence();
            s.pop();
            (s, r.prompt.len())
        })
        .collect();
    mean_kl_from(policy, reference, &batch)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    /// Clip fraction of the very first minibatch (zero by construction).
    pub first_clip_fraction: f64,
    pub minibatches: usize,
    pub skipped: usize,
}

/// Per-token quantities for one rollout inside an update.
struct Prepared {
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

/// Optimization phase over a rollout batch: `inner_epochs` shuffled passes of
/// minibatches with per-minibatch advantage whitening.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyModel,
    optim: &mut LionState,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    cfg.validate()?;
    if rollouts.is_empty() {
        return Err(Error::InvalidInput("ppo_update needs at least one rollout".into()));
    }
    let prepared: Vec<Prepared> = rollouts
        .iter()
        .map(|r| {
            let (advantages, returns) = compute_gae(&r.rewards, &r.values, cfg.gamma, cfg.lambda)?;
            Ok(Prepared { advantages, returns })
        })
        .collect::<Result<_>>()?;

    let mut stats = UpdateStats::default();
    let mut clipped_tokens = 0usize;
    let mut total_tokens = 0usize;
    let mut order: Vec<usize> = (0..rollouts.len()).collect();
    let v = policy.lm.vocab_size();
    let d = policy.lm.config.d_model;
    let eps = cfg.clip_range;
    for _ in 0..cfg.inner_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let all_adv: Vec<f64> = chunk.iter().flat_map(|&i| prepared[i].advantages.iter().copied()).collect();
            let n_tok = all_adv.len() as f64;
            let mean = all_adv.iter().sum::<f64>() / n_tok;
            let std = (all_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n_tok).sqrt();

            let mut grads = policy.lm.params.zeros_like();
            let mut head_grads = policy.value_head.zeros_like();
            let mut pol_loss = 0.0;
            let mut val_loss = 0.0;
            let mut clipped = 0usize;
            let mut finite = true;
            for &i in chunk {
                let r = &rollouts[i];
                let seq = r.sequence();
                let from = r.prompt.len();
                let tr = policy.lm.trace::<ChaCha8Rng>(&seq, true, None)?;
                let logits = tr.logits.as_ref().expect("requested");
                let mut dlogits = vec![0.0; logits.len()];
                for (k, p) in (from..seq.len()).enumerate() {
                    let row = &logits[(p - 1) * v..p * v];
                    let lp = log_softmax(row);
                    let a_tok = seq[p] as usize;
                    let ratio = (lp[a_tok] - r.logprobs[k]).exp();
                    if !ratio.is_finite() {
                        finite = false;
                        break;
                    }
                    let adv = (prepared[i].advantages[k] - mean) / (std + 1e-8);
                    let unclipped = ratio * adv;
                    let clipped_obj = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
                    pol_loss -= unclipped.min(clipped_obj);
                    if (ratio - 1.0).abs() > eps {
                        clipped += 1;
                    }
                    // gradient of -min(...) w.r.t. the new log-prob
                    let in_range = (1.0 - eps..=1.0 + eps).contains(&ratio);
                    let g = if unclipped <= clipped_obj || in_range {
                        -adv * ratio / n_tok
                    } else {
                        0.0
                    };
                    if g != 0.0 {
                        let probs = softmax(row);
                        let drow = &mut dlogits[(p - 1) * v..p * v];
                        for (dj, pj) in drow.iter_mut().zip(&probs) {
                            *dj += g * -pj;
                        }
                        drow[a_tok] += g;
                    }
                    // value regression on detached features
                    let h = &tr.hidden[(p - 1) * d..p * d];
                    let value = policy.value_head.apply(h)[0];
                    let err = value - prepared[i].returns[k];
                    val_loss += err * err;
                    let dv = cfg.value_weight * 2.0 * err / n_tok;
                    policy.value_head.backward(h, &[dv], &mut head_grads);
                }
                if !finite {
                    break;
                }
                policy.lm.backward(&tr, Some(&dlogits), None, &mut grads);
            }
            if !finite {
                log::warn!("non-finite probability ratio; minibatch skipped");
                stats.skipped += 1;
                continue;
            }
            if stats.minibatches == 0 {
                stats.first_clip_fraction = clipped as f64 / n_tok;
            }
            clipped_tokens += clipped;
            total_tokens += all_adv.len();
            stats.policy_loss += pol_loss / n_tok;
            stats.value_loss += val_loss / n_tok;
            stats.minibatches += 1;
            crate::reward::step_backbone_and_head(
                optim,
                &mut policy.lm,
                &mut policy.value_head,
                grads,
                head_grads,
                cfg.grad_clip,
            )?;
        }
    }
    if stats.minibatches > 0 {
        stats.policy_loss /= stats.minibatches as f64;
        stats.value_loss /= stats.minibatches as f64;
        stats.clip_fraction = clipped_tokens as f64 / total_tokens as f64;
    }
    Ok(stats)
}

/// Optimizer state covering the policy LM and its value head.
pub fn new_optimizer(policy: &PolicyModel, cfg: &PpoConfig) -> LionState {
    let mut ts = policy.lm.params.tensors();
    ts.extend(policy.value_head.tensors());
    LionState::new(cfg.optimizer, ts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    /// Exact KL per generated token, measured on the iteration's rollouts
    /// before the update.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
}

/// Outer loop: each epoch shuffles the prompt pool and runs one iteration
/// (rollouts, GAE, update) per `rollout_batch_size` prompts. The callback sees
/// the policy after every iteration.
pub fn run_ppo<F, C>(
    policy: &mut PolicyModel,
    reference: &Transformer,
    reward: &F,
    prompts: &[Vec<u32>],
    gen: &GenerationConfig,
    cfg: &PpoConfig,
    mut on_iteration: C,
) -> Result<Vec<IterationStats>>
where
    F: RewardFn + ?Sized,
    C: FnMut(&IterationStats, &PolicyModel) -> Result<()>,
{
    cfg.validate()?;
    gen.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidInput("empty prompt pool".into()));
    }
    if policy.lm.config != reference.config {
        return Err(Error::Config("policy and reference architectures differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optim = new_optimizer(policy, cfg);
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.outer_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.rollout_batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| prompts[i].clone()).collect();
            let rollouts = collect_rollouts(policy, reference, reward, &batch, gen, cfg, &mut rng)?;
            let mean_reward = rollouts.iter().map(|r| r.score).sum::<f64>() / rollouts.len() as f64;
            let mean_kl = rollout_kl(&policy.lm, reference, &rollouts)?;
            let upd = ppo_update(policy, &mut optim, &rollouts, cfg, &mut rng)?;
            let s = IterationStats {
                iteration: history.len() + 1,
                epoch,
                mean_reward,
                mean_kl,
                clip_fraction: upd.clip_fraction,
                value_loss: upd.value_loss,
                policy_loss: upd.policy_loss,
            };
            log::info!(
                "ppo iteration {} (epoch {epoch}): reward {:.4} kl {:.5} clip {:.3}",
                s.iteration,
                s.mean_reward,
                s.mean_kl,
                s.clip_fraction
            );
            on_iteration(&s, policy)?;
            history.push(s);
        }
    }
    Ok(history)
}

/// CSV with columns iteration, mean_reward, mean_kl, clip_fraction, value_loss, policy_loss.
pub fn stats_csv(stats: &[IterationStats]) -> String {
    let mut out = String::from("iteration,mean_reward,mean_kl,clip_fraction,value_loss,policy_loss\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.iteration, s.mean_reward, s.mean_kl, s.clip_fraction, s.value_loss, s.policy_loss
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;
    use proptest::prelude::*;

    fn small(vocab: usize, ctx: usize, seed: u64) -> Transformer {
        Transformer::new(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_length: ctx,
            vocab_size: vocab,
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    /// Direct double sum: A_t = sum_k (gamma lambda)^k delta_{t+k}.
    fn gae_oracle(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + gamma * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t])
            .collect();
        (0..n)
            .map(|t| (t..n).map(|j| (gamma * lambda).powi((j - t) as i32) * delta[j]).sum())
            .collect()
    }

    #[test]
    fn gae_fixed_cases() {
        let (a, ret) = compute_gae(&[2.0], &[0.0], 0.7, 0.3).unwrap();
        assert_eq!((a, ret), (vec![2.0], vec![2.0]));
        let (r, v) = ([1.0, -0.5, 2.0], [0.3, 0.1, -0.2]);
        let (a, _) = compute_gae(&r, &v, 0.9, 0.0).unwrap();
        assert_eq!(a, vec![1.0 + 0.9 * 0.1 - 0.3, -0.5 + 0.9 * -0.2 - 0.1, 2.0 + 0.2]);
        assert!(compute_gae(&[1.0], &[], 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn gae_matches_the_double_loop(
            rv in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..=16),
            gamma in 0.0f64..=1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
            let (a, ret) = compute_gae(&r, &v, gamma, lambda).unwrap();
            for (x, y) in a.iter().zip(gae_oracle(&r, &v, gamma, lambda)) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            for ((rt, at), vt) in ret.iter().zip(&a).zip(&v) {
                prop_assert_eq!(*rt, at + vt);
            }
        }

        #[test]
        fn kl_is_non_negative(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let (p, q) = (small(11, 8, seed_a), small(11, 8, seed_b));
            prop_assert!(mean_kl(&p, &q, &[vec![1, 2, 3, 4]]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_of_a_model_with_itself_is_zero() {
        let p = small(11, 8, 1);
        assert_eq!(mean_kl(&p, &p.clone(), &[vec![1, 2, 3], vec![4, 5]]).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_computation() {
        let p = [0.5, 0.3, 0.2];
        let q = [0.2, 0.2, 0.6];
        let want: f64 = p.iter().zip(&q).map(|(a, b): (&f64, &f64)| a * (a / b).ln()).sum();
        let lp: Vec<f64> = p.iter().map(|x: &f64| x.ln()).collect();
        let lq: Vec<f64> = q.iter().map(|x: &f64| x.ln() + 3.0).collect();
        assert!((kl_logits(&lp, &lq) - want).abs() < 1e-12);
    }

    fn gen(n: usize) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: n,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn rollouts_against_an_identical_reference() {
        let lm = small(13, 16, 2);
        let policy = PolicyModel::new(lm.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PpoConfig::default();
        let rolls = collect_rollouts(&policy, &lm, &TokenCountReward { token: 3 }, &[vec![1, 2], vec![5]], &gen(6), &cfg, &mut rng).unwrap();
        for r in &rolls {
            assert_eq!(r.response.len(), 6);
            assert_eq!(r.logprobs, r.ref_logprobs);
            let mut want = vec![0.0; 6];
            want[5] = r.score;
            assert_eq!(r.rewards.iter().map(|x| x + 0.0).collect::<Vec<_>>(), want);
            assert_eq!(r.score, r.response.iter().filter(|&&t| t == 3).count() as f64);
        }
    }

    #[test]
    fn shaped_reward_invariant_and_zero_beta() {
        let lm = small(13, 16, 2);
        let reference = small(13, 16, 3);
        let policy = PolicyModel::new(lm, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PpoConfig {
            kl_coef: 0.3,
            ..PpoConfig::default()
        };
        let rolls = collect_rollouts(&policy, &reference, &TokenCountReward { token: 3 }, &[vec![1, 2]], &gen(5), &cfg, &mut rng).unwrap();
        let r = &rolls[0];
        assert_eq!(r.rewards, shaped_rewards(&r.logprobs, &r.ref_logprobs, r.score, 0.3));
        let zero = shaped_rewards(&r.logprobs, &r.ref_logprobs, r.score, 0.0);
        assert!(zero[..4].iter().all(|&x| x == 0.0) && zero[4] == r.score);
    }

    #[test]
    fn long_prompts_are_truncated_from_the_left() {
        let lm = small(13, 10, 2);
        let policy = PolicyModel::new(lm.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rolls = collect_rollouts(&policy, &lm, &TokenCountReward { token: 3 }, &[(0..9).collect()], &gen(4), &PpoConfig::default(), &mut rng).unwrap();
        assert_eq!(rolls[0].prompt, vec![3, 4, 5, 6, 7, 8]);
        assert_eq!(rolls[0].sequence().len(), 10);
    }

    #[test]
    fn single_token_advantage_is_the_reward() {
        let (a, _) = compute_gae(&shaped_rewards(&[-1.2], &[-1.2], 2.5, 0.05), &[0.0], 0.37, 0.95).unwrap();
        assert_eq!(a, vec![2.5]);
    }

    #[test]
    fn first_minibatch_is_unclipped() {
        let lm = small(13, 16, 2);
        let mut policy = PolicyModel::new(lm.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = PpoConfig {
            optimizer: LionConfig {
                lr: 0.05,
                ..LionConfig::default()
            },
            minibatch_size: 2,
            ..PpoConfig::default()
        };
        let prompts: Vec<Vec<u32>> = (0..6).map(|i| vec![i]).collect();
        let rolls = collect_rollouts(&policy, &lm, &TokenCountReward { token: 3 }, &prompts, &gen(6), &cfg, &mut rng).unwrap();
        let mut optim = new_optimizer(&policy, &cfg);
        let stats = ppo_update(&mut policy, &mut optim, &rolls, &cfg, &mut rng).unwrap();
        assert_eq!(stats.first_clip_fraction, 0.0);
        assert!((0.0..=1.0).contains(&stats.clip_fraction));
        assert!(stats.clip_fraction > 0.0, "a large learning rate should trigger clipping");
        assert_eq!(stats.minibatches, 12);
    }

    #[test]
    fn zero_advantages_leave_the_lm_untouched() {
        let lm = small(13, 16, 2);
        let mut policy = PolicyModel::new(lm.clone(), 0);
        let roll = Rollout {
            prompt: vec![1],
            response: vec![4, 5],
            logprobs: vec![0.0; 2],
            ref_logprobs: vec![0.0; 2],
            values: vec![0.0; 2],
            rewards: vec![0.0; 2],
            score: 0.0,
        };
        // fix the stored log-probs to the policy's own
        let (lps, _) = score_response(&policy, &roll.sequence(), 1).unwrap();
        let roll = Rollout { logprobs: lps, ..roll };
        let cfg = PpoConfig {
            inner_epochs: 1,
            ..PpoConfig::default()
        };
        let mut optim = new_optimizer(&policy, &cfg);
        let before = policy.clone();
        let stats = ppo_update(&mut policy, &mut optim, &[roll], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(stats.policy_loss, 0.0);
        // only weight decay moves the LM: no update direction from the loss
        let decay = 1.0 - cfg.optimizer.lr * cfg.optimizer.weight_decay;
        for (a, b) in policy.lm.params.tensors().iter().zip(before.lm.params.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y * decay).abs() < 1e-15);
            }
        }
        assert_ne!(policy.value_head, before.value_head);
    }

    #[test]
    fn two_armed_bandit_converges() {
        let lm = small(2, 2, 7);
        let mut policy = PolicyModel::new(lm.clone(), 0);
        let cfg = PpoConfig {
            kl_coef: 0.0,
            rollout_batch_size: 16,
            minibatch_size: 16,
            inner_epochs: 1,
            optimizer: LionConfig {
                lr: 3e-3,
                ..LionConfig::default()
            },
            ..PpoConfig::default()
        };
        let mut optim = new_optimizer(&policy, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prompts = vec![vec![0u32]; 16];
        for _ in 0..50 {
            let rolls = collect_rollouts(&policy, &lm, &TokenCountReward { token: 1 }, &prompts, &gen(1), &cfg, &mut rng).unwrap();
            ppo_update(&mut policy, &mut optim, &rolls, &cfg, &mut rng).unwrap();
        }
        let p1 = softmax(&policy.lm.logits(&[0]).unwrap())[1];
        assert!(p1 >= 0.9, "p(rewarded) = {p1}");
    }

    #[test]
    fn zero_outer_epochs_return_the_input() {
        let lm = small(13, 16, 2);
        let mut policy = PolicyModel::new(lm.clone(), 0);
        let before = policy.clone();
        let cfg = PpoConfig {
            outer_epochs: 0,
            ..PpoConfig::default()
        };
        let stats = run_ppo(&mut policy, &lm, &TokenCountReward { token: 1 }, &[vec![1]], &gen(3), &cfg, |_, _| Ok(())).unwrap();
        assert!(stats.is_empty());
        assert_eq!(policy.to_checkpoint().to_bytes().unwrap(), before.to_checkpoint().to_bytes().unwrap());
    }
}
