//! Choice sets, Best-Worst-Scaling annotations and the preference pairs they imply.

mod agreement;

pub use agreement::{disagreements, krippendorff_alpha, nominal_alpha, BwsLabel};

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoding::{beam_search_n, CausalLm, GenerationConfig, STORY_PREFIX};
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerModel;

/// Stories per choice set.
pub const SET_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub text: String,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub id: u64,
    pub prompt: Prompt,
    pub stories: Vec<Story>,
}

impl ChoiceSet {
    pub fn validate(&self) -> Result<()> {
        if self.stories.len() != SET_SIZE {
            return Err(Error::InvalidInput(format!(
                "choice set {} has {} stories, expected {SET_SIZE}",
                self.id,
                self.stories.len()
            )));
        }
        let ids: HashSet<&str> = self.stories.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != SET_SIZE {
            return Err(Error::InvalidInput(format!("choice set {} repeats a story id", self.id)));
        }
        Ok(())
    }
}

/// One judgment: indices are in canonical story order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BwsAnnotation {
    pub set_id: u64,
    pub annotator_id: String,
    pub best: usize,
    pub worst: usize,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
    #[serde(default)]
    pub consensus: bool,
}

impl BwsAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.best >= SET_SIZE || self.worst >= SET_SIZE {
            return Err(Error::InvalidInput(format!(
                "story index out of range (best {}, worst {}, set size {SET_SIZE})",
                self.best, self.worst
            )));
        }
        if self.best == self.worst {
            return Err(Error::InvalidInput(format!(
                "best and worst are the same story ({})",
                self.best
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub set_id: u64,
    /// `"best>other"`, `"best>worst"` or `"other>worst"`.
    pub rule: String,
    pub chosen_index: usize,
    pub rejected_index: usize,
    /// Absent for consensus records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

/// `chosen` is preferred over `rejected` for `prompt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub provenance: Provenance,
}

impl PreferencePair {
    pub fn is_degenerate(&self) -> bool {
        self.chosen == self.rejected
    }
}

/// The five pairs implied by one judgment: best over each other story in index
/// order, then each middle story over worst in index order.
pub fn expand_bws(annotation: &BwsAnnotation, set: &ChoiceSet) -> Result<Vec<PreferencePair>> {
    annotation.validate()?;
    set.validate()?;
    if annotation.set_id != set.id {
        return Err(Error::InvalidInput(format!(
            "annotation for set {} applied to set {}",
            annotation.set_id, set.id
        )));
    }
    let (b, w) = (annotation.best, annotation.worst);
    let annotator = (!annotation.consensus).then(|| annotation.annotator_id.clone());
    let pair = |c: usize, r: usize, rule: &str| PreferencePair {
        prompt: set.prompt.text.clone(),
        chosen: set.stories[c].text.clone(),
        rejected: set.stories[r].text.clone(),
        provenance: Provenance {
            set_id: set.id,
            rule: rule.to_string(),
            chosen_index: c,
            rejected_index: r,
            annotator: annotator.clone(),
        },
    };
    let mut out = Vec::with_capacity(5);
    for i in (0..SET_SIZE).filter(|&i| i != b) {
        out.push(pair(b, i, if i == w { "best>worst" } else { "best>other" }));
    }
    for i in (0..SET_SIZE).filter(|&i| i != b && i != w) {
        out.push(pair(i, w, "other>worst"));
    }
    Ok(out)
}

/// Records that feed pair export: the latest consensus record of a set when
/// one exists, otherwise every annotator's record. Ordered by set id, then
/// annotator id.
pub fn select_for_export(annotations: &[BwsAnnotation]) -> Vec<&BwsAnnotation> {
    let mut by_set: BTreeMap<u64, Vec<&BwsAnnotation>> = BTreeMap::new();
    for a in annotations {
        by_set.entry(a.set_id).or_default().push(a);
    }
    let mut out = Vec::new();
    for (_, mut records) in by_set {
        if let Some(c) = records.iter().rev().find(|a| a.consensus) {
            out.push(*c);
        } else {
            records.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
            out.extend(records);
        }
    }
    out
}

/// Expands the export selection of `annotations` into preference pairs.
pub fn export_pairs(annotations: &[BwsAnnotation], sets: &[ChoiceSet]) -> Result<Vec<PreferencePair>> {
    let index: BTreeMap<u64, &ChoiceSet> = sets.iter().map(|s| (s.id, s)).collect();
    let mut out = Vec::new();
    for a in select_for_export(annotations) {
        let set = index
            .get(&a.set_id)
            .ok_or_else(|| Error::InvalidInput(format!("annotation references unknown set {}", a.set_id)))?;
        out.extend(expand_bws(a, set)?);
    }
    let degenerate = out.iter().filter(|p| p.is_degenerate()).count();
    if degenerate > 0 {
        log::warn!("{degenerate} exported pairs have identical chosen and rejected text");
    }
    Ok(out)
}

/// Drops pairs whose chosen and rejected texts coincide, logging how many.
pub fn drop_degenerate(pairs: Vec<PreferencePair>) -> Vec<PreferencePair> {
    let before = pairs.len();
    let kept: Vec<_> = pairs.into_iter().filter(|p| !p.is_degenerate()).collect();
    if kept.len() < before {
        log::warn!("skipped {} pairs with identical chosen and rejected text", before - kept.len());
    }
    kept
}

/// Generation input for a prompt: the instruction prefix followed by the prompt.
pub fn story_prompt(text: &str) -> String {
    format!("{STORY_PREFIX} {}", text.trim())
}

/// Four stories per prompt: the two best beams of each generator. Stored story
/// text is the decoded continuation only. Prompts whose generation fails are
/// skipped with a warning.
pub fn build_choice_sets<M: CausalLm>(
    prompts: &[Prompt],
    generators: [(&str, &M); 2],
    tokenizer: &TokenizerModel,
    cfg: &GenerationConfig,
) -> Result<Vec<ChoiceSet>> {
    cfg.validate()?;
    if cfg.beam_size < 2 {
        return Err(Error::Config("choice sets need beam_size >= 2 to take two beams per model".into()));
    }
    let mut sets = Vec::new();
    for (pi, prompt) in prompts.iter().enumerate() {
        if prompt.text.trim().is_empty() {
            log::warn!("skipping prompt {}: empty text", prompt.id);
            continue;
        }
        let ids = tokenizer.encode(&story_prompt(&prompt.text));
        let set_id = pi as u64;
        let mut stories = Vec::with_capacity(SET_SIZE);
        let mut failed = None;
        for (name, model) in generators {
            match beam_search_n(model, &ids, cfg, 2) {
                Ok(beams) if beams.len() == 2 => {
                    for g in beams {
                        let text = tokenizer.decode_with(g.new_tokens(), true)?;
                        stories.push(Story {
                            id: format!("{set_id}-{}", stories.len()),
                            text: text.trim().to_string(),
                            generator: name.to_string(),
                        });
                    }
                }
                Ok(_) => failed = Some(format!("{name} produced fewer than two distinct beams")),
                Err(e) => failed = Some(format!("{name}: {e}")),
            }
        }
        match failed {
            Some(reason) => log::warn!("skipping prompt {}: {reason}", prompt.id),
            None => sets.push(ChoiceSet {
                id: set_id,
                prompt: prompt.clone(),
                stories,
            }),
        }
    }
    Ok(sets)
}

/// Optional eligibility heuristic for prompts: a capitalized word after the
/// first (a named character) and a word that reads as a finite verb.
pub fn looks_like_story_prompt(text: &str) -> bool {
    const VERBS: &[&str] = &[
        "was", "were", "is", "are", "had", "has", "went", "saw", "found", "lived", "wanted", "loved", "met", "took",
        "made", "said", "came", "ran", "got", "decided",
    ];
    let words: Vec<&str> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect();
    let named = words.iter().skip(1).any(|w| w.chars().next().is_some_and(char::is_uppercase));
    let verb = words.iter().any(|w| {
        let lw = w.to_lowercase();
        VERBS.contains(&lw.as_str()) || (lw.len() > 3 && lw.ends_with("ed"))
    });
    named && verb
}

/// Stable across platforms and toolchains, unlike `DefaultHasher`.
fn mix_seed(seed: u64, set_id: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(set_id.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Order in which an annotator sees a set's stories: entry `i` is the
/// canonical index shown at position `i`. Seeded by (seed, set, annotator).
pub fn presentation_order(seed: u64, set_id: u64, annotator: &str) -> [usize; SET_SIZE] {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, set_id, annotator));
    let mut order = [0, 1, 2, 3];
    // Fisher-Yates
    for i in (1..SET_SIZE).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Rule-based stand-in for a human annotator, for exercising the pipeline
/// without people. Judgments are synthetic.
#[derive(Debug, Clone)]
pub struct ScriptedAnnotator {
    pub name: String,
    /// Probability of replacing the rule's judgment with a random one.
    pub noise: f64,
    pub seed: u64,
}

/// Heuristic story quality: lexical variety scaled by log length.
pub fn scripted_quality(text: &str) -> f64 {
    let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
    if words.is_empty() {
        return 0.0;
    }
    let distinct = words.iter().collect::<HashSet<_>>().len() as f64;
    distinct / words.len() as f64 * (1.0 + words.len() as f64).ln()
}

impl ScriptedAnnotator {
    pub fn new(name: impl Into<String>, noise: f64, seed: u64) -> Self {
        Self {
            name: name.into(),
            noise,
            seed,
        }
    }

    /// Best = highest quality (earliest on ties), worst = lowest (latest on ties).
    pub fn annotate(&self, set: &ChoiceSet) -> BwsAnnotation {
        let q: Vec<f64> = set.stories.iter().map(|s| scripted_quality(&s.text)).collect();
        let mut best = 0;
        let mut worst = SET_SIZE - 1;
        for i in 0..q.len() {
            if q[i] > q[best] {
                best = i;
            }
            if q[i] <= q[worst] {
                worst = i;
            }
        }
        if best == worst {
            worst = if best == SET_SIZE - 1 { 0 } else { SET_SIZE - 1 };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, set.id, &self.name));
        if rng.random::<f64>() < self.noise {
            best = rng.random_range(0..SET_SIZE);
            worst = (best + rng.random_range(1..SET_SIZE)) % SET_SIZE;
        }
        BwsAnnotation {
            set_id: set.id,
            annotator_id: self.name.clone(),
            best,
            worst,
            timestamp: 0,
            consensus: false,
        }
    }
}
