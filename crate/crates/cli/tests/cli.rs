use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use babyrlhf_core::jsonl;
use babyrlhf_core::lm::{Checkpoint, ModelConfig, Transformer};
use babyrlhf_core::preference::{BwsAnnotation, ChoiceSet, Prompt, Story};
use babyrlhf_core::tensor::Tensor;
use babyrlhf_core::tokenizer::TokenizerModel;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_babyrlhf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn sets(n: u64) -> Vec<ChoiceSet> {
    (0..n)
        .map(|id| ChoiceSet {
            id,
            prompt: Prompt {
                id: format!("p{id}"),
                text: format!("Tom found a box {id}."),
                source: String::new(),
            },
            stories: (0..4)
                .map(|k| Story {
                    id: format!("{id}-{k}"),
                    text: format!("story {k} for {id}"),
                    generator: "g".into(),
                })
                .collect(),
        })
        .collect()
}

fn ann(set_id: u64, who: &str, best: usize, worst: usize) -> BwsAnnotation {
    BwsAnnotation {
        set_id,
        annotator_id: who.into(),
        best,
        worst,
        timestamp: 0,
        consensus: false,
    }
}

/// Byte-level tokenizer and a model whose output layer is zero, so every
/// next-token distribution is uniform over 256 bytes.
fn uniform_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let tok_dir = dir.join("tok");
    TokenizerModel::byte_level(&[]).save(&tok_dir).unwrap();
    let mut cfg = ModelConfig::tiny(256);
    cfg.n_layers = 1;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.context_length = 32;
    let mut m = Transformer::new(cfg).unwrap();
    m.params.lm_head = Tensor::zeros(&m.params.lm_head.shape);
    let ck = dir.join("uniform.ckpt");
    Checkpoint::from_model(&m).save(&ck).unwrap();
    (tok_dir, ck)
}

#[test]
fn agreement_of_identical_annotators_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("anns.jsonl");
    let mut anns = Vec::new();
    for (id, b, w) in [(0, 0, 3), (1, 2, 1), (2, 3, 0), (3, 1, 2)] {
        anns.push(ann(id, "a", b, w));
        anns.push(ann(id, "b", b, w));
    }
    jsonl::write(&path, &anns).unwrap();
    let o = run(&["agreement", "--annotations", p(&path)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("alpha = 1.0\n"), "{}", stdout(&o));
    assert!(stdout(&o).contains("disagreements (0)"));
}

#[test]
fn export_of_one_hundred_annotations_writes_five_hundred_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let sets_path = dir.path().join("sets.jsonl");
    let anns_path = dir.path().join("anns.jsonl");
    let out = dir.path().join("pairs.jsonl");
    jsonl::write(&sets_path, &sets(50)).unwrap();
    let anns: Vec<BwsAnnotation> = (0..50)
        .flat_map(|id| [ann(id, "a", (id % 4) as usize, ((id + 1) % 4) as usize), ann(id, "b", 0, 1)])
        .collect();
    jsonl::write(&anns_path, &anns).unwrap();
    let o = run(&[
        "export-pairs",
        "--annotations",
        p(&anns_path),
        "--choice-sets",
        p(&sets_path),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 500);
}

#[test]
fn perplexity_of_a_uniform_model_is_the_vocabulary_size() {
    let dir = tempfile::tempdir().unwrap();
    let (tok, ck) = uniform_fixture(dir.path());
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "the quick brown fox jumps over the lazy dog\n\nand again").unwrap();
    let o = run(&["eval-ppl", "--checkpoint", p(&ck), "--tokenizer", p(&tok), "--corpus", p(&corpus)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((report["perplexity"].as_f64().unwrap() - 256.0).abs() < 1e-9);
}

#[test]
fn usage_errors_exit_with_two_and_runtime_errors_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = run(&["agreement", "--annotations", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");

    assert_eq!(run(&["pretrain"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"set_id\": 0}\n").unwrap();
    assert_eq!(run(&["agreement", "--annotations", p(&bad)]).status.code(), Some(1));

    let (tok, ck) = uniform_fixture(dir.path());
    let prompts = dir.path().join("prompts.jsonl");
    std::fs::write(&prompts, "{\"id\":\"1\",\"text\":\"hi\"}\n").unwrap();
    let both = run(&[
        "ppo",
        "--policy",
        p(&ck),
        "--tokenizer",
        p(&tok),
        "--prompts",
        p(&prompts),
        "--reward",
        p(&ck),
        "--reward-token",
        "a",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.jsonl");
    jsonl::write(&good, &[ann(0, "a", 0, 1), ann(0, "b", 0, 1)]).unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, format!("{{\"annotations\": {:?}}}", p(&good))).unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = run(&["agreement", "--annotations", p(&missing), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(&cfg, "{\"bogus\": 1}").unwrap();
    assert_eq!(run(&["agreement", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn seeded_commands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sets_path = dir.path().join("sets.jsonl");
    jsonl::write(&sets_path, &sets(20)).unwrap();
    let outs: Vec<String> = ["7", "7", "8"]
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let out = dir.path().join(format!("a{i}.jsonl"));
            let o = run(&[
                "scripted-annotate",
                "--choice-sets",
                p(&sets_path),
                "--out",
                p(&out),
                "--noise",
                "0.5",
                "--seed",
                seed,
            ]);
            assert!(o.status.success());
            std::fs::read_to_string(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_ne!(outs[0], outs[2]);
    assert_eq!(outs[0].lines().count(), 40);

    let (tok, ck) = uniform_fixture(dir.path());
    let gen = |seed: &str| {
        stdout(&run(&[
            "generate",
            "--checkpoint",
            p(&ck),
            "--tokenizer",
            p(&tok),
            "--prompt",
            "abc",
            "--sample",
            "--max-new-tokens",
            "12",
            "--min-new-tokens",
            "0",
            "--seed",
            seed,
        ]))
    };
    assert_eq!(gen("3"), gen("3"));
    assert_ne!(gen("3"), gen("4"));
}

#[test]
fn evaluation_reports_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let (tok, ck) = uniform_fixture(dir.path());
    let pairs = dir.path().join("mp.jsonl");
    std::fs::write(&pairs, "{\"good\":\"ab\",\"bad\":\"ba\",\"phenomenon\":\"order\"}\n").unwrap();
    let o = run(&["eval-minimal-pairs", "--checkpoint", p(&ck), "--tokenizer", p(&tok), "--pairs", p(&pairs)]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // uniform scores tie, and ties count as wrong
    assert_eq!(r["phenomena"]["order"]["correct"], 0);

    let words = dir.path().join("words.txt");
    let contexts = dir.path().join("contexts.txt");
    std::fs::write(&words, "x\nzz\n").unwrap();
    std::fs::write(&contexts, "ax.x\n").unwrap();
    let o = run(&[
        "eval-surprisal",
        "--checkpoint",
        p(&ck),
        "--tokenizer",
        p(&tok),
        "--words",
        p(&words),
        "--contexts",
        p(&contexts),
    ]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((r["x"].as_f64().unwrap() - 8.0).abs() < 1e-9);
    assert!(r["zz"].is_null());

    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "story_id,grammar,creativity,consistency,plot\ns1,2,5,5,5\ns2,4,6,5,5\ns3,6,4,5,5\ns4,8,5,5,5\n").unwrap();
    std::fs::write(&b, "story_id,grammar,creativity,consistency,plot\ns1,1,5,5,5\ns2,2,5,5,5\ns3,3,5,5,5\ns4,4,5,5,5\n").unwrap();
    let o = run(&["eval-human-stats", "--a", p(&a), "--b", p(&b)]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((r["grammar"]["test"]["t"].as_f64().unwrap() - 3.872983346207417).abs() < 1e-9);
    assert!(r["consistency"]["test"].is_null());
}
