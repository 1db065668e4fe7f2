//! Greedy, sampled and beam-search generation over any incremental causal model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{InferenceState, Transformer};
use crate::tensor::{argmax, log_softmax, softmax_in_place};

/// Instruction prepended to story prompts at generation time.
pub const STORY_PREFIX: &str = "write me a story starting with";

/// A model that can be fed one token at a time.
pub trait CausalLm {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
    fn start(&self) -> Self::State;
    /// Appends `token` to the state and returns logits for the next position.
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

impl CausalLm for Transformer {
    type State = InferenceState;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_length(&self) -> usize {
        self.config.context_length
    }

    fn start(&self) -> InferenceState {
        self.new_state()
    }

    fn advance(&self, state: &mut InferenceState, token: u32) -> Result<Vec<f64>> {
        self.step(state, token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub min_new_tokens: usize,
    pub beam_size: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub eos_id: Option<u32>,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            min_new_tokens: 0,
            beam_size: 1,
            temperature: 1.0,
            top_k: None,
            eos_id: None,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    /// Story-generation settings: beam 7, 10 to 128 new tokens.
    pub fn story(eos_id: Option<u32>) -> Self {
        Self {
            max_new_tokens: 128,
            min_new_tokens: 10,
            beam_size: 7,
            temperature: 1.0,
            top_k: None,
            eos_id,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_new_tokens > self.max_new_tokens {
            return Err(Error::Config(format!(
                "min_new_tokens {} exceeds max_new_tokens {}",
                self.min_new_tokens, self.max_new_tokens
            )));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// A prompt and its continuation with the model log-probability of every new token.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub prompt_len: usize,
    /// Log-probabilities of the generated tokens under the model's (untempered,
    /// untruncated) softmax.
    pub logprobs: Vec<f64>,
}

impl Generation {
    pub fn new_tokens(&self) -> &[u32] {
        &self.ids[self.prompt_len..]
    }

    /// Sum of the generated tokens' log-probabilities.
    pub fn score(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Feeds the prompt and returns the state, the next-token logits and the
/// number of new tokens the context leaves room for.
fn prefill<M: CausalLm>(model: &M, prompt: &[u32], cfg: &GenerationConfig) -> Result<(M::State, Vec<f64>, usize)> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must contain at least one token".into()));
    }
    let ctx = model.context_length();
    if prompt.len() > ctx {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            context: ctx,
        });
    }
    let mut state = model.start();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = model.advance(&mut state, t)?;
    }
    let budget = cfg.max_new_tokens.min(ctx - prompt.len());
    Ok((state, logits, budget))
}

fn eos_blocked(cfg: &GenerationConfig, produced: usize) -> Option<u32> {
    cfg.eos_id.filter(|_| produced < cfg.min_new_tokens)
}

/// Argmax decoding. Stops at eos (never before `min_new_tokens`) or after
/// `max_new_tokens`.
pub fn greedy<M: CausalLm>(model: &M, prompt: &[u32], cfg: &GenerationConfig) -> Result<Generation> {
    let (mut state, mut logits, budget) = prefill(model, prompt, cfg)?;
    let mut ids = prompt.to_vec();
    let mut logprobs = Vec::new();
    for produced in 0..budget {
        let lp = log_softmax(&logits);
        let mut masked = lp.clone();
        if let Some(eos) = eos_blocked(cfg, produced) {
            masked[eos as usize] = f64::NEG_INFINITY;
        }
        let tok = argmax(&masked) as u32;
        ids.push(tok);
        logprobs.push(lp[tok as usize]);
        if Some(tok) == cfg.eos_id || produced + 1 == budget {
            break;
        }
        logits = model.advance(&mut state, tok)?;
    }
    Ok(Generation {
        ids,
        prompt_len: prompt.len(),
        logprobs,
    })
}

/// Draws a continuation with the generator seeded from `cfg.seed`.
pub fn sample<M: CausalLm>(model: &M, prompt: &[u32], cfg: &GenerationConfig) -> Result<Generation> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_with_rng(model, prompt, cfg, &mut rng)
}

/// Categorical sampling from the temperature-scaled, optionally top-k truncated
/// softmax. Very small temperatures collapse to argmax.
pub fn sample_with_rng<M: CausalLm, R: Rng + ?Sized>(
    model: &M,
    prompt: &[u32],
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<Generation> {
    let (mut state, mut logits, budget) = prefill(model, prompt, cfg)?;
    let mut ids = prompt.to_vec();
    let mut logprobs = Vec::new();
    for produced in 0..budget {
        let lp = log_softmax(&logits);
        let tok = draw(&lp, cfg, eos_blocked(cfg, produced), rng);
        ids.push(tok);
        logprobs.push(lp[tok as usize]);
        if Some(tok) == cfg.eos_id || produced + 1 == budget {
            break;
        }
        logits = model.advance(&mut state, tok)?;
    }
    Ok(Generation {
        ids,
        prompt_len: prompt.len(),
        logprobs,
    })
}

fn draw<R: Rng + ?Sized>(logprobs: &[f64], cfg: &GenerationConfig, blocked: Option<u32>, rng: &mut R) -> u32 {
    let mut scaled: Vec<f64> = logprobs.iter().map(|l| l / cfg.temperature).collect();
    if let Some(b) = blocked {
        scaled[b as usize] = f64::NEG_INFINITY;
    }
    if let Some(k) = cfg.top_k.filter(|&k| k < scaled.len()) {
        let mut sorted = scaled.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cutoff = sorted[k - 1];
        let mut kept = 0;
        for v in scaled.iter_mut() {
            if *v >= cutoff && kept < k {
                kept += 1;
            } else {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    softmax_in_place(&mut scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in scaled.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

struct Beam<S> {
    ids: Vec<u32>,
    logprobs: Vec<f64>,
    score: f64,
    state: S,
    logits: Vec<f64>,
}

/// Beam search returning the single highest-scoring sequence.
pub fn beam_search<M: CausalLm>(model: &M, prompt: &[u32], cfg: &GenerationConfig) -> Result<Generation> {
    Ok(beam_search_n(model, prompt, cfg, 1)?.remove(0))
}

/// Beam search scored by the plain sum of token log-probabilities. Eos is
/// suppressed until `min_new_tokens`; beams still alive at the length limit are
/// complete hypotheses. Returns up to `n` distinct hypotheses, best first.
pub fn beam_search_n<M: CausalLm>(model: &M, prompt: &[u32], cfg: &GenerationConfig, n: usize) -> Result<Vec<Generation>> {
    let (state, logits, budget) = prefill(model, prompt, cfg)?;
    let width = cfg.beam_size;
    let keep = n.max(1);
    let mut live = vec![Beam {
        ids: prompt.to_vec(),
        logprobs: Vec::new(),
        score: 0.0,
        state,
        logits,
    }];
    let mut finished: Vec<(f64, Vec<u32>, Vec<f64>)> = Vec::new();

    for produced in 0..budget {
        let blocked = eos_blocked(cfg, produced);
        // (score, token log-prob, beam, token)
        let mut cands: Vec<(f64, f64, usize, u32)> = Vec::new();
        let mut beam_lps = Vec::with_capacity(live.len());
        for (bi, beam) in live.iter().enumerate() {
            let lp = log_softmax(&beam.logits);
            for (tok, &l) in lp.iter().enumerate() {
                if Some(tok as u32) == blocked || l == f64::NEG_INFINITY {
                    continue;
                }
                cands.push((beam.score + l, l, bi, tok as u32));
            }
            beam_lps.push(lp);
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        cands.truncate(2 * width);

        let last_step = produced + 1 == budget;
        let mut next = Vec::with_capacity(width);
        for (rank, &(score, l, bi, tok)) in cands.iter().enumerate() {
            let parent = &live[bi];
            if Some(tok) == cfg.eos_id {
                if rank < width {
                    let mut ids = parent.ids.clone();
                    ids.push(tok);
                    let mut lps = parent.logprobs.clone();
                    lps.push(l);
                    finished.push((score, ids, lps));
                }
                continue;
            }
            if next.len() == width {
                continue;
            }
            let mut ids = parent.ids.clone();
            ids.push(tok);
            let mut logprobs = parent.logprobs.clone();
            logprobs.push(l);
            let mut state = parent.state.clone();
            let logits = if last_step {
                Vec::new()
            } else {
                model.advance(&mut state, tok)?
            };
            next.push(Beam {
                ids,
                logprobs,
                score,
                state,
                logits,
            });
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // scores only decrease, so no live beam can overtake `keep` finished ones
        finished.sort_by(|a, b| b.0.total_cmp(&a.0));
        let best_live = live.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.len() >= keep && finished[keep - 1].0 >= best_live {
            live.clear();
            break;
        }
    }
    for beam in live {
        finished.push((beam.score, beam.ids, beam.logprobs));
    }
    if width > 1 && budget > 0 {
        // the greedy path may be pruned mid-search; keeping it as a candidate
        // means a wider beam never returns a worse sequence than greedy
        let g = greedy(model, prompt, cfg)?;
        finished.push((g.score(), g.ids, g.logprobs));
    }
    finished.sort_by(|a, b| b.0.total_cmp(&a.0));
    finished.dedup_by(|a, b| a.1 == b.1);
    if finished.is_empty() {
        // zero budget: the prompt itself is the only hypothesis
        finished.push((0.0, prompt.to_vec(), Vec::new()));
    }
    Ok(finished
        .into_iter()
        .take(keep)
        .map(|(_, ids, logprobs)| Generation {
            ids,
            prompt_len: prompt.len(),
            logprobs,
        })
        .collect())
}
