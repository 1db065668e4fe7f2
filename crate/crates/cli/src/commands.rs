use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use babyrlhf_annotate::ServiceConfig;
use babyrlhf_core::decoding::{beam_search, greedy, sample, GenerationConfig};
use babyrlhf_core::eval::{
    compare_human_scores, finetune_classifier, mean_average_surprisal, minimal_pair_accuracy, ClassifyConfig,
    HumanScoreRecord, LabeledExample, MinimalPair,
};
use babyrlhf_core::jsonl;
use babyrlhf_core::lm::{Checkpoint, LionConfig, ModelConfig, Transformer};
use babyrlhf_core::ppo::{run_ppo, stats_csv, LearnedReward, PolicyModel, PpoConfig, RewardFn, TokenCountReward};
use babyrlhf_core::preference::{
    build_choice_sets, disagreements, drop_degenerate, export_pairs, krippendorff_alpha, looks_like_story_prompt,
    story_prompt, BwsAnnotation, ChoiceSet, PreferencePair, Prompt, ScriptedAnnotator,
};
use babyrlhf_core::pretrain::{
    metrics_csv, pretrain_with, select_checkpoint, split_validation, tokenize_corpus, validation_perplexity,
    TrainConfig,
};
use babyrlhf_core::reward::{self, train_reward, RewardModel, RewardTrainConfig};
use babyrlhf_core::tokenizer::{train_bpe, TokenizerModel, END_OF_TEXT};
use clap::{Args, Parser, Subcommand};

use crate::CliError;

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(name = "babyrlhf", version, about = "Pretrain, collect preferences, train a reward model and run PPO on tiny language models")]
pub struct Cli {
    /// Seed for every random choice; equal seeds give identical outputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON object of flag values that override the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a byte-level BPE tokenizer.
    TokenizerTrain(TokenizerTrainArgs),
    /// Pretrain a language model from scratch.
    Pretrain(PretrainArgs),
    /// Generate a continuation for one prompt.
    Generate(GenerateArgs),
    /// Build four-story choice sets from two generators.
    MakeChoiceSets(MakeChoiceSetsArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Produce synthetic judgments with rule-based annotators.
    ScriptedAnnotate(ScriptedAnnotateArgs),
    /// Expand Best-Worst judgments into preference pairs.
    ExportPairs(ExportPairsArgs),
    /// Krippendorff's alpha and the sets annotators disagree on.
    Agreement(AgreementArgs),
    /// Train a reward model on preference pairs.
    TrainReward(TrainRewardArgs),
    /// KL-penalized PPO fine-tuning against a reward.
    Ppo(PpoArgs),
    /// Perplexity of a model on a corpus.
    EvalPpl(EvalPplArgs),
    /// Zero-shot minimal-pair accuracy.
    EvalMinimalPairs(EvalMinimalPairsArgs),
    /// Fine-tune a classification head and report accuracy and macro-F1.
    EvalClassify(EvalClassifyArgs),
    /// Mean surprisal of words over contexts, in bits.
    EvalSurprisal(EvalSurprisalArgs),
    /// Compare two systems' human ratings with paired t-tests.
    EvalHumanStats(EvalHumanStatsArgs),
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Tokenizer directory holding vocab.json and merges.txt.
    #[arg(long, value_name = "DIR")]
    pub tokenizer: PathBuf,
}

#[derive(Args, Debug)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.99)]
    pub beta2: f64,
    /// Gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
}

impl OptimArgs {
    fn lion(&self) -> LionConfig {
        LionConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }

    fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

#[derive(Args, Debug)]
pub struct TokenizerTrainArgs {
    /// Text files or directories; blank lines separate documents.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 32_001)]
    pub vocab_size: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub tokenizer: PathBuf,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// tiny, gpt2-base or gpt2-large.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    #[arg(long)]
    pub context_length: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Tokens per training window; defaults to the context length.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Share of the token stream held out for validation perplexity.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 128)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 10)]
    pub min_new_tokens: usize,
    #[arg(long, default_value_t = 7)]
    pub beam_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub top_k: Option<usize>,
}

impl GenArgs {
    fn config(&self, tok: &TokenizerModel, seed: u64) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            min_new_tokens: self.min_new_tokens,
            beam_size: self.beam_size,
            temperature: self.temperature,
            top_k: self.top_k,
            eos_id: tok.eos_id(),
            seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub gen: GenArgs,
    /// Draw tokens at random instead of searching.
    #[arg(long)]
    pub sample: bool,
    /// Prepend the story instruction to the prompt.
    #[arg(long)]
    pub story: bool,
}

#[derive(Args, Debug)]
pub struct MakeChoiceSetsArgs {
    /// prompts.jsonl with {id, text, source} per line.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    /// Generator tag for model A; defaults to the checkpoint file stem.
    #[arg(long)]
    pub name_a: Option<String>,
    #[arg(long)]
    pub name_b: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only prompts that look like they name a character and an event.
    #[arg(long)]
    pub filter_prompts: bool,
    #[command(flatten)]
    pub gen: GenArgs,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "BABYRLHF_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, env = "BABYRLHF_DATA_DIR")]
    pub data_dir: PathBuf,
    #[arg(long, env = "BABYRLHF_CHOICE_SETS")]
    pub choice_sets: PathBuf,
    /// Built annotation UI served at `/`.
    #[arg(long, env = "BABYRLHF_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScriptedAnnotateArgs {
    #[arg(long)]
    pub choice_sets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub annotators: usize,
    /// Probability that an annotator answers at random.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct ExportPairsArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub choice_sets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop pairs whose two stories have identical text.
    #[arg(long)]
    pub drop_degenerate: bool,
}

#[derive(Args, Debug)]
pub struct AgreementArgs {
    #[arg(long)]
    pub annotations: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainRewardArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Pretrained language model used as the backbone.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Reward checkpoint to write; metrics go next to it as CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub heldout_fraction: f64,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct PpoArgs {
    /// Starting policy; also the frozen reference.
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    /// Reward checkpoint from train-reward.
    #[arg(long, conflicts_with = "reward_token")]
    pub reward: Option<PathBuf>,
    /// Synthetic reward: count of this single token in the response.
    #[arg(long)]
    pub reward_token: Option<String>,
    /// Output directory for policy.ckpt and ppo_stats.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Use prompts as given, without the story instruction.
    #[arg(long)]
    pub no_story_prefix: bool,
    #[arg(long, default_value_t = 0.05)]
    pub kl_coef: f64,
    #[arg(long, default_value_t = 0.2)]
    pub clip_range: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.95)]
    pub lambda: f64,
    #[arg(long, default_value_t = 8)]
    pub rollout_batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub minibatch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub inner_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub outer_epochs: usize,
    #[arg(long, default_value_t = 512)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub value_weight: f64,
    #[arg(long, default_value_t = 128)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub min_new_tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct EvalPplArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalMinimalPairsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSONL of {good, bad, phenomenon}.
    #[arg(long)]
    pub pairs: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalClassifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSONL of {text, label} or {text_a, text_b, label}.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub weight_decay: f64,
}

#[derive(Args, Debug)]
pub struct EvalSurprisalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// One word per line.
    #[arg(long)]
    pub words: PathBuf,
    /// One context per line.
    #[arg(long)]
    pub contexts: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalHumanStatsArgs {
    /// CSV with story_id, grammar, creativity, consistency, plot.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::Pretrain(a) => pretrain(a, seed),
        Command::Generate(a) => generate(a, seed),
        Command::MakeChoiceSets(a) => make_choice_sets(a, seed),
        Command::Serve(a) => serve(a, seed),
        Command::ScriptedAnnotate(a) => scripted_annotate(a, seed),
        Command::ExportPairs(a) => export(a),
        Command::Agreement(a) => agreement(a),
        Command::TrainReward(a) => train_reward_cmd(a, seed),
        Command::Ppo(a) => ppo(a, seed),
        Command::EvalPpl(a) => eval_ppl(a),
        Command::EvalMinimalPairs(a) => eval_minimal_pairs(a),
        Command::EvalClassify(a) => eval_classify(a, seed),
        Command::EvalSurprisal(a) => eval_surprisal(a),
        Command::EvalHumanStats(a) => eval_human_stats(a),
    }
}

fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::Usage(format!("input {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Documents of the corpus, split on blank lines.
fn read_corpus(paths: &[PathBuf]) -> anyhow::Result<Vec<String>> {
    let mut files = Vec::new();
    for p in paths {
        files_under(p, &mut files)?;
    }
    let mut docs = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        let mut doc = String::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                if !doc.is_empty() {
                    docs.push(std::mem::take(&mut doc));
                }
            } else {
                if !doc.is_empty() {
                    doc.push('\n');
                }
                doc.push_str(line);
            }
        }
        if !doc.is_empty() {
            docs.push(doc);
        }
    }
    if docs.is_empty() {
        anyhow::bail!("corpus holds no text");
    }
    Ok(docs)
}

fn load_tokenizer(dir: &Path) -> Result<TokenizerModel> {
    Ok(TokenizerModel::load(dir).with_context(|| format!("loading tokenizer from {}", dir.display()))?)
}

fn check_vocab(tok: &TokenizerModel, vocab: usize, what: &Path) -> Result<()> {
    if tok.vocab_size() != vocab {
        return Err(CliError::Usage(format!(
            "{} has vocabulary {vocab} but the tokenizer has {}",
            what.display(),
            tok.vocab_size()
        )));
    }
    Ok(())
}

fn load_lm(args: &ModelArgs) -> Result<(Transformer, TokenizerModel)> {
    require(&[&args.checkpoint, &args.tokenizer])?;
    let tok = load_tokenizer(&args.tokenizer)?;
    let model = load_checkpoint(&args.checkpoint)?.into_model()?;
    check_vocab(&tok, model.vocab_size(), &args.checkpoint)?;
    Ok((model, tok))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).context("serializing report")?);
    Ok(())
}

fn tokenizer_train(a: TokenizerTrainArgs) -> Result<()> {
    require(&a.corpus.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let docs = read_corpus(&a.corpus)?;
    let tok = train_bpe(docs.iter(), a.vocab_size, &[END_OF_TEXT])?;
    tok.save(&a.out)?;
    println!("tokenizer with {} entries written to {}", tok.vocab_size(), a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs, seed: u64) -> Result<()> {
    let mut inputs: Vec<&Path> = a.corpus.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.tokenizer);
    require(&inputs)?;
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(CliError::Usage(format!("--val-fraction must lie in [0, 1), got {}", a.val_fraction)));
    }
    let tok = load_tokenizer(&a.tokenizer)?;
    let mut mc = ModelConfig::preset(&a.preset, tok.vocab_size())?;
    mc.context_length = a.context_length.unwrap_or(mc.context_length);
    mc.n_layers = a.n_layers.unwrap_or(mc.n_layers);
    mc.n_heads = a.n_heads.unwrap_or(mc.n_heads);
    mc.d_model = a.d_model.unwrap_or(mc.d_model);
    mc.d_ff = a.d_ff.unwrap_or(mc.d_ff);
    mc.dropout = a.dropout.unwrap_or(mc.dropout);
    mc.seed = seed;
    let cfg = TrainConfig {
        max_epochs: a.epochs,
        batch_size: a.batch_size,
        seq_len: a.seq_len.unwrap_or(mc.context_length),
        optimizer: a.optim.lion(),
        eval_every: a.eval_every,
        grad_clip: a.optim.clip(),
        max_steps: a.max_steps,
        seed,
    };
    cfg.validate(&mc)?;

    let docs = read_corpus(&a.corpus)?;
    let tokens = tokenize_corpus(&tok, &docs);
    let (train, val) = split_validation(&tokens, a.val_fraction);
    log::info!("{} training and {} validation tokens", train.len(), val.len());
    let model = Transformer::new(mc)?;
    log::info!("model has {} parameters", model.params.num_parameters());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let tokenizer_ref = a.tokenizer.display().to_string();
    let mut saved: Vec<(PathBuf, Option<f64>)> = Vec::new();
    let (_, metrics) = pretrain_with(model, &train, &val, &cfg, |mut ck| {
        ck.tokenizer = Some(tokenizer_ref.clone());
        let path = a.out.join(format!("step-{:07}.ckpt", ck.step));
        ck.save(&path)?;
        saved.push((path, ck.metrics.last().and_then(|m| m.val_ppl)));
        Ok(())
    })?;
    write_text(&a.out.join("metrics.csv"), &metrics_csv(&metrics))?;

    // without validation data the last checkpoint wins
    let scores: Vec<Vec<f64>> = saved
        .iter()
        .enumerate()
        .map(|(i, (_, ppl))| vec![ppl.map_or(i as f64, |p| -p)])
        .collect();
    let best = select_checkpoint(&scores)?;
    let best_path = a.out.join("best.ckpt");
    fs::copy(&saved[best].0, &best_path).with_context(|| format!("writing {}", best_path.display()))?;
    println!(
        "{} checkpoints in {}; best {} (val ppl {})",
        saved.len(),
        a.out.display(),
        saved[best].0.display(),
        saved[best].1.map_or("n/a".to_string(), |p| format!("{p:.4}"))
    );
    Ok(())
}

fn generate(a: GenerateArgs, seed: u64) -> Result<()> {
    let (model, tok) = load_lm(&a.model)?;
    let text = if a.story { story_prompt(&a.prompt) } else { a.prompt.clone() };
    let ids = tok.encode(&text);
    let cfg = a.gen.config(&tok, seed);
    let g = if a.sample {
        sample(&model, &ids, &cfg)?
    } else if cfg.beam_size > 1 {
        beam_search(&model, &ids, &cfg)?
    } else {
        greedy(&model, &ids, &cfg)?
    };
    println!("{}", tok.decode_with(g.new_tokens(), true)?);
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
}

fn make_choice_sets(a: MakeChoiceSetsArgs, seed: u64) -> Result<()> {
    require(&[&a.prompts, &a.tokenizer, &a.model_a, &a.model_b])?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let model_a = load_checkpoint(&a.model_a)?.into_model()?;
    let model_b = load_checkpoint(&a.model_b)?.into_model()?;
    check_vocab(&tok, model_a.vocab_size(), &a.model_a)?;
    check_vocab(&tok, model_b.vocab_size(), &a.model_b)?;
    let name_a = a.name_a.clone().unwrap_or_else(|| stem(&a.model_a));
    let name_b = a.name_b.clone().unwrap_or_else(|| stem(&a.model_b));
    if name_a == name_b {
        return Err(CliError::Usage(format!("both generators are named `{name_a}`; set --name-a/--name-b")));
    }
    let mut prompts: Vec<Prompt> = jsonl::read(&a.prompts)?;
    if a.filter_prompts {
        let before = prompts.len();
        prompts.retain(|p| looks_like_story_prompt(&p.text));
        log::info!("prompt filter kept {} of {before}", prompts.len());
    }
    let cfg = a.gen.config(&tok, seed);
    let sets = build_choice_sets(&prompts, [(&name_a, &model_a), (&name_b, &model_b)], &tok, &cfg)?;
    jsonl::write(&a.out, &sets)?;
    println!("{} choice sets from {} prompts written to {}", sets.len(), prompts.len(), a.out.display());
    Ok(())
}

fn serve(a: ServeArgs, seed: u64) -> Result<()> {
    require(&[&a.choice_sets])?;
    if let Some(dir) = &a.static_dir {
        require(&[dir])?;
    }
    let cfg = ServiceConfig {
        addr: a.addr,
        data_dir: a.data_dir,
        choice_sets: a.choice_sets,
        static_dir: a.static_dir,
        seed,
    };
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(babyrlhf_annotate::serve(cfg))?;
    Ok(())
}

fn scripted_annotate(a: ScriptedAnnotateArgs, seed: u64) -> Result<()> {
    require(&[&a.choice_sets])?;
    if a.annotators == 0 || !(0.0..=1.0).contains(&a.noise) {
        return Err(CliError::Usage("--annotators must be positive and --noise in [0, 1]".into()));
    }
    let sets: Vec<ChoiceSet> = jsonl::read(&a.choice_sets)?;
    log::warn!("scripted annotations are synthetic, not human judgments");
    let annotators: Vec<ScriptedAnnotator> = (1..=a.annotators)
        .map(|i| ScriptedAnnotator::new(format!("scripted-{i}"), a.noise, seed))
        .collect();
    let mut out = Vec::with_capacity(sets.len() * annotators.len());
    for set in &sets {
        set.validate()?;
        out.extend(annotators.iter().map(|ann| ann.annotate(set)));
    }
    jsonl::write(&a.out, &out)?;
    println!("{} synthetic annotations written to {}", out.len(), a.out.display());
    Ok(())
}

fn export(a: ExportPairsArgs) -> Result<()> {
    require(&[&a.annotations, &a.choice_sets])?;
    let anns: Vec<BwsAnnotation> = jsonl::read(&a.annotations)?;
    let sets: Vec<ChoiceSet> = jsonl::read(&a.choice_sets)?;
    let mut pairs = export_pairs(&anns, &sets)?;
    if a.drop_degenerate {
        pairs = drop_degenerate(pairs);
    }
    jsonl::write(&a.out, &pairs)?;
    println!("{} pairs from {} annotations written to {}", pairs.len(), anns.len(), a.out.display());
    Ok(())
}

fn agreement(a: AgreementArgs) -> Result<()> {
    require(&[&a.annotations])?;
    let anns: Vec<BwsAnnotation> = jsonl::read(&a.annotations)?;
    match krippendorff_alpha(&anns) {
        Ok(alpha) => println!("alpha = {alpha:?}"),
        Err(babyrlhf_core::Error::AgreementUndefined(why)) => println!("alpha undefined: {why}"),
        Err(e) => return Err(e.into()),
    }
    let d = disagreements(&anns)?;
    println!(
        "disagreements ({}): {}",
        d.len(),
        d.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

fn train_reward_cmd(a: TrainRewardArgs, seed: u64) -> Result<()> {
    require(&[&a.pairs, &a.checkpoint, &a.tokenizer])?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let backbone = load_checkpoint(&a.checkpoint)?.into_model()?;
    check_vocab(&tok, backbone.vocab_size(), &a.checkpoint)?;
    let pairs = drop_degenerate(jsonl::read::<PreferencePair>(&a.pairs)?);
    if pairs.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("{} holds no usable pairs", a.pairs.display())));
    }
    let cfg = RewardTrainConfig {
        max_epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: a.optim.lion(),
        heldout_fraction: a.heldout_fraction,
        grad_clip: a.optim.clip(),
        seed,
    };
    let mut rm = RewardModel::new(backbone, None, seed);
    let metrics = train_reward(&mut rm, &tok, &pairs, &cfg)?;
    let mut ck = rm.to_checkpoint();
    ck.tokenizer = Some(a.tokenizer.display().to_string());
    ck.save(&a.out)?;
    let csv = a.out.with_extension("csv");
    write_text(&csv, &reward::metrics_csv(&metrics))?;
    let last = metrics.last().expect("at least one epoch");
    println!(
        "reward model written to {} (train acc {:.3}, held-out acc {}); metrics in {}",
        a.out.display(),
        last.train_accuracy,
        last.heldout_accuracy.map_or("n/a".into(), |x| format!("{x:.3}")),
        csv.display()
    );
    Ok(())
}

fn ppo(a: PpoArgs, seed: u64) -> Result<()> {
    require(&[&a.policy, &a.tokenizer, &a.prompts])?;
    if let Some(r) = &a.reward {
        require(&[r])?;
    }
    let tok = load_tokenizer(&a.tokenizer)?;
    let mut policy = PolicyModel::from_checkpoint(load_checkpoint(&a.policy)?, seed)?;
    check_vocab(&tok, policy.lm.vocab_size(), &a.policy)?;
    let reference = policy.lm.clone();

    let reward_model;
    let token_reward;
    let reward: &dyn RewardFn = match (&a.reward, &a.reward_token) {
        (Some(path), None) => {
            reward_model = RewardModel::from_checkpoint(load_checkpoint(path)?, None)?;
            check_vocab(&tok, reward_model.backbone.vocab_size(), path)?;
            &LearnedReward {
                model: &reward_model,
                tokenizer: &tok,
            }
        }
        (None, Some(t)) => {
            let ids = tok.encode(t);
            let [token] = ids[..] else {
                return Err(CliError::Usage(format!("--reward-token `{t}` is {} tokens, not one", ids.len())));
            };
            token_reward = TokenCountReward { token };
            &token_reward
        }
        _ => return Err(CliError::Usage("give exactly one of --reward and --reward-token".into())),
    };

    let prompts: Vec<Prompt> = jsonl::read(&a.prompts)?;
    let prompt_ids: Vec<Vec<u32>> = prompts
        .iter()
        .map(|p| {
            let text = if a.no_story_prefix { p.text.clone() } else { story_prompt(&p.text) };
            tok.encode(&text)
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    let cfg = PpoConfig {
        kl_coef: a.kl_coef,
        clip_range: a.clip_range,
        gamma: a.gamma,
        lambda: a.lambda,
        rollout_batch_size: a.rollout_batch_size,
        minibatch_size: a.minibatch_size,
        inner_epochs: a.inner_epochs,
        outer_epochs: a.outer_epochs,
        max_seq_len: a.max_seq_len,
        optimizer: a.optim.lion(),
        value_weight: a.value_weight,
        grad_clip: a.optim.clip(),
        seed,
    };
    let gen = GenerationConfig {
        max_new_tokens: a.max_new_tokens,
        min_new_tokens: a.min_new_tokens,
        beam_size: 1,
        temperature: a.temperature,
        top_k: a.top_k,
        eos_id: tok.eos_id(),
        seed,
    };
    let stats = run_ppo(&mut policy, &reference, reward, &prompt_ids, &gen, &cfg, |_, _| Ok(()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut ck = policy.to_checkpoint();
    ck.tokenizer = Some(a.tokenizer.display().to_string());
    ck.save(&a.out.join("policy.ckpt"))?;
    write_text(&a.out.join("ppo_stats.csv"), &stats_csv(&stats))?;
    match (stats.first(), stats.last()) {
        (Some(f), Some(l)) => println!(
            "{} PPO iterations; mean reward {:.4} -> {:.4}, final KL {:.5}; outputs in {}",
            stats.len(),
            f.mean_reward,
            l.mean_reward,
            l.mean_kl,
            a.out.display()
        ),
        _ => println!("no PPO iterations run; policy copied to {}", a.out.display()),
    }
    Ok(())
}

fn eval_ppl(a: EvalPplArgs) -> Result<()> {
    require(&a.corpus.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let (model, tok) = load_lm(&a.model)?;
    let tokens = tokenize_corpus(&tok, &read_corpus(&a.corpus)?);
    let ppl = validation_perplexity(&model, &tokens)?;
    print_json(&serde_json::json!({ "perplexity": ppl, "tokens": tokens.len() }))
}

fn eval_minimal_pairs(a: EvalMinimalPairsArgs) -> Result<()> {
    require(&[&a.pairs])?;
    let (model, tok) = load_lm(&a.model)?;
    let pairs: Vec<MinimalPair> = jsonl::read(&a.pairs)?;
    print_json(&minimal_pair_accuracy(&model, &tok, &pairs)?)
}

fn eval_classify(a: EvalClassifyArgs, seed: u64) -> Result<()> {
    require(&[&a.train, &a.eval])?;
    let (model, tok) = load_lm(&a.model)?;
    let train: Vec<LabeledExample> = jsonl::read(&a.train)?;
    let eval: Vec<LabeledExample> = jsonl::read(&a.eval)?;
    let cfg = ClassifyConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: LionConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..LionConfig::default()
        },
        grad_clip: Some(1.0),
        seed,
    };
    print_json(&finetune_classifier(model, &tok, &train, &eval, &cfg)?)
}

fn nonblank_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn eval_surprisal(a: EvalSurprisalArgs) -> Result<()> {
    require(&[&a.words, &a.contexts])?;
    let (model, tok) = load_lm(&a.model)?;
    let contexts = nonblank_lines(&a.contexts)?;
    let mut report = BTreeMap::new();
    for w in nonblank_lines(&a.words)? {
        match mean_average_surprisal(&model, &tok, &w, &contexts) {
            Ok(bits) => {
                report.insert(w, Some(bits));
            }
            Err(babyrlhf_core::Error::InvalidInput(why)) => {
                log::warn!("{why}");
                report.insert(w, None);
            }
            Err(e) => return Err(e.into()),
        }
    }
    print_json(&report)
}

fn read_scores(path: &Path) -> Result<Vec<HumanScoreRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<HumanScoreRecord>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

fn eval_human_stats(a: EvalHumanStatsArgs) -> Result<()> {
    require(&[&a.a, &a.b])?;
    let report = compare_human_scores(&read_scores(&a.a)?, &read_scores(&a.b)?)?;
    print_json(&report)
}
