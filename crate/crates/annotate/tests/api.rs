use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use babyrlhf_annotate::{open_store, router, ServiceConfig, SharedStore, LOG_FILE};
use babyrlhf_core::preference::{expand_bws, presentation_order, BwsAnnotation, ChoiceSet, Prompt, Story};
use serde_json::{json, Value};
use tower::ServiceExt;

const SEED: u64 = 11;

fn sets(n: u64) -> Vec<ChoiceSet> {
    // written out of order on purpose
    (0..n)
        .rev()
        .map(|id| ChoiceSet {
            id: id * 10 + 3,
            prompt: Prompt {
                id: format!("p{id}"),
                text: format!("prompt {id}"),
                source: String::new(),
            },
            stories: (0..4)
                .map(|k| Story {
                    id: format!("{id}-{k}"),
                    text: format!("story {k} of set {id}"),
                    generator: if k < 2 { "base".into() } else { "large".into() },
                })
                .collect(),
        })
        .collect()
}

fn config(dir: &Path, n: u64) -> ServiceConfig {
    let path = dir.join("sets.jsonl");
    babyrlhf_core::jsonl::write(&path, &sets(n)).unwrap();
    ServiceConfig {
        addr: "127.0.0.1:0".parse().unwrap(),
        data_dir: dir.join("data"),
        choice_sets: path,
        static_dir: None,
        seed: SEED,
    }
}

fn app(cfg: &ServiceConfig) -> (Router, SharedStore) {
    let store = open_store(cfg).unwrap();
    (router(store.clone(), cfg.static_dir.clone()), store)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null), text)
}

/// Presentation positions that select canonical stories `best` and `worst`.
fn positions(set_id: u64, who: &str, best: usize, worst: usize) -> (usize, usize) {
    let order = presentation_order(SEED, set_id, who);
    let pos = |c| order.iter().position(|&x| x == c).unwrap();
    (pos(best), pos(worst))
}

async fn judge(app: &Router, set_id: u64, who: &str, best: usize, worst: usize) -> StatusCode {
    let (b, w) = positions(set_id, who, best, worst);
    let body = json!({"set_id": set_id, "annotator": who, "best": b, "worst": w});
    call(app, "POST", "/api/annotations", Some(body)).await.0
}

#[tokio::test]
async fn next_set_is_lowest_unjudged_and_shuffled_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(&config(dir.path(), 3));
    let (status, first, _) = call(&app, "GET", "/api/sets/next?annotator=ann", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["set_id"], 3);
    assert_eq!(first["prompt"], "prompt 0");
    let order = presentation_order(SEED, 3, "ann");
    for (pos, story) in first["stories"].as_array().unwrap().iter().enumerate() {
        assert_eq!(story["idx"], pos);
        assert_eq!(story["text"], format!("story {} of set 0", order[pos]));
        assert!(story.get("generator").is_none());
    }
    let (_, again, _) = call(&app, "GET", "/api/sets/next?annotator=ann", None).await;
    assert_eq!(first, again);

    for id in [3, 13, 23] {
        assert_eq!(judge(&app, id, "ann", 0, 1).await, StatusCode::CREATED);
    }
    let (status, _, _) = call(&app, "GET", "/api/sets/next?annotator=ann", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (_, other, _) = call(&app, "GET", "/api/sets/next?annotator=other", None).await;
    assert_eq!(other["set_id"], 3);
    assert_eq!(call(&app, "GET", "/api/sets/next", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn submissions_are_validated_and_translated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2);
    let (app, store) = app(&cfg);
    let (b, w) = positions(13, "ann", 2, 0);
    let (status, rec, _) = call(
        &app,
        "POST",
        "/api/annotations",
        Some(json!({"set_id": 13, "annotator": "ann", "best": b, "worst": w})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!((rec["best"].clone(), rec["worst"].clone()), (json!(2), json!(0)));
    assert_eq!(store.read().unwrap().records().len(), 1);

    let dup = json!({"set_id": 13, "annotator": "ann", "best": 1, "worst": 3});
    assert_eq!(call(&app, "POST", "/api/annotations", Some(dup)).await.0, StatusCode::CONFLICT);
    let same = json!({"set_id": 3, "annotator": "ann", "best": 1, "worst": 1});
    assert_eq!(call(&app, "POST", "/api/annotations", Some(same)).await.0, StatusCode::BAD_REQUEST);
    let range = json!({"set_id": 3, "annotator": "ann", "best": 4, "worst": 1});
    assert_eq!(call(&app, "POST", "/api/annotations", Some(range)).await.0, StatusCode::BAD_REQUEST);
    let unknown = json!({"set_id": 99, "annotator": "ann", "best": 0, "worst": 1});
    assert_eq!(call(&app, "POST", "/api/annotations", Some(unknown)).await.0, StatusCode::NOT_FOUND);
    let garbled = json!({"set_id": "x"});
    assert_eq!(call(&app, "POST", "/api/annotations", Some(garbled)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(store.read().unwrap().records().len(), 1);

    let persisted: Vec<BwsAnnotation> = babyrlhf_core::jsonl::read(&cfg.data_dir.join(LOG_FILE)).unwrap();
    assert_eq!(persisted, store.read().unwrap().records());
}

#[tokio::test]
async fn stats_report_progress_agreement_and_disagreements() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(&config(dir.path(), 3));
    let (status, empty, _) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(empty["total_sets"], 3);
    assert_eq!(empty["total_annotations"], 0);
    assert!(empty["alpha"].is_null());
    assert_eq!(empty["alpha_undefined"], true);

    for (id, b, w) in [(3, 0, 3), (13, 2, 1), (23, 1, 0)] {
        judge(&app, id, "a", b, w).await;
        judge(&app, id, "b", b, w).await;
    }
    let (_, agree, _) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(agree["alpha"], 1.0);
    assert_eq!(agree["per_annotator"], json!({"a": 3, "b": 3}));
    assert_eq!(agree["disagreements"], json!([]));

    judge(&app, 13, "c", 0, 1).await;
    let (_, split, _) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(split["disagreements"], json!([13]));
    assert!(split["alpha"].as_f64().unwrap() < 1.0);
}

#[tokio::test]
async fn replay_after_restart_reproduces_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 3);
    let before = {
        let (app, _) = app(&cfg);
        judge(&app, 3, "a", 0, 3).await;
        judge(&app, 3, "b", 1, 3).await;
        judge(&app, 23, "a", 2, 1).await;
        let c = json!({"set_id": 3, "best": 0, "worst": 3});
        assert_eq!(call(&app, "POST", "/api/annotations/consensus", Some(c)).await.0, StatusCode::CREATED);
        call(&app, "GET", "/api/stats", None).await.1
    };
    // a crash mid-append leaves a torn line that was never acknowledged
    let log = cfg.data_dir.join(LOG_FILE);
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"set_id\": 13, \"annotat");
    std::fs::write(&log, text).unwrap();

    let (app, _) = app(&cfg);
    let (_, after, _) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(before, after);
    assert_eq!(before["consensus"], 1);
    assert_eq!(judge(&app, 3, "a", 1, 2).await, StatusCode::CONFLICT);
    assert_eq!(judge(&app, 13, "a", 1, 2).await, StatusCode::CREATED);
    assert_eq!(babyrlhf_core::jsonl::read::<BwsAnnotation>(&log).unwrap().len(), 5);
}

#[tokio::test]
async fn export_matches_expansion_of_the_persisted_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 3);
    let (app, store) = app(&cfg);
    judge(&app, 3, "a", 0, 3).await;
    judge(&app, 3, "b", 1, 3).await;
    judge(&app, 13, "a", 2, 1).await;
    judge(&app, 13, "b", 2, 1).await;
    let c = json!({"set_id": 3, "best": 1, "worst": 2});
    call(&app, "POST", "/api/annotations/consensus", Some(c)).await;

    let (status, _, body) = call(&app, "GET", "/api/export/pairs", None).await;
    assert_eq!(status, StatusCode::OK);
    let lines: Vec<Value> = body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // consensus replaces both judgments of set 3; set 13 keeps both annotators
    assert_eq!(lines.len(), 15);

    let records = store.read().unwrap().records().to_vec();
    let all = sets(3);
    let set = |id| all.iter().find(|s| s.id == id).unwrap();
    let mut want = expand_bws(records.iter().find(|r| r.consensus).unwrap(), set(3)).unwrap();
    for who in ["a", "b"] {
        let r = records.iter().find(|r| r.set_id == 13 && r.annotator_id == who).unwrap();
        want.extend(expand_bws(r, set(13)).unwrap());
    }
    let want: Vec<Value> = want.iter().map(|p| serde_json::to_value(p).unwrap()).collect();
    assert_eq!(lines, want);
}

#[tokio::test]
async fn concurrent_submissions_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1);
    let (app, store) = app(&cfg);
    let mut tasks = Vec::new();
    for i in 0..16 {
        let app = app.clone();
        // half the requests race on the same annotator id
        let who = if i % 2 == 0 { "shared".to_string() } else { format!("ann{i}") };
        tasks.push(tokio::spawn(async move { judge(&app, 3, &who, 0, 1).await }));
    }
    let mut created = 0;
    let mut conflicts = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::CREATED => created += 1,
            StatusCode::CONFLICT => conflicts += 1,
            s => panic!("unexpected {s}"),
        }
    }
    assert_eq!((created, conflicts), (9, 7));
    assert_eq!(store.read().unwrap().records().len(), 9);
    let persisted: Vec<BwsAnnotation> = babyrlhf_core::jsonl::read(&cfg.data_dir.join(LOG_FILE)).unwrap();
    assert_eq!(persisted.len(), 9);
}

#[tokio::test]
async fn static_bundle_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<h1>annotate</h1>").unwrap();
    let (_, _, placeholder) = call(&app(&cfg).0, "GET", "/", None).await;
    assert!(placeholder.contains("/api"));
    cfg.static_dir = Some(ui);
    let (status, _, body) = call(&app(&cfg).0, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, "<h1>annotate</h1>");
}

#[test]
fn bad_inputs_fail_to_open() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1);
    std::fs::create_dir_all(&cfg.data_dir).unwrap();
    std::fs::write(cfg.data_dir.join(LOG_FILE), "not json\n{}\n").unwrap();
    assert!(open_store(&cfg).is_err());
    cfg.choice_sets = dir.path().join("missing.jsonl");
    assert!(open_store(&cfg).is_err());
}
