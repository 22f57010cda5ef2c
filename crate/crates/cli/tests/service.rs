//! Session service and HTTP routes over a stub pipeline, checked against the
//! checked-in HTTP contract.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use mgcrs::config::ServeConfig;
use mgcrs::server::router;
use mgcrs::service::{Service, TranscriptEntry};
use mgcrs_core::backbone::{Backbone, BackboneConfig, DecodeConfig, Seq2Seq};
use mgcrs_core::corpus::Item;
use mgcrs_core::pipeline::{Pipeline, PipelineConfig, StageModels};
use mgcrs_core::serialize::WordCount;
use mgcrs_core::vocab::{self, build_vocabulary, BaseTokenizer};
use serde_json::{json, Value};
use tower::ServiceExt;

/// Answers by task prompt: a recommendation goal, one topic, a fixed reply.
struct Stub;

impl Seq2Seq for Stub {
    fn generate(&self, input: &str, _: &DecodeConfig) -> mgcrs_core::Result<String> {
        Ok(if input.ends_with(vocab::GOAL) {
            "Movie recommendation".into()
        } else if input.ends_with(vocab::TOPIC) {
            "jazz".into()
        } else {
            "you might enjoy this one".into()
        })
    }

    fn score_target(&self, _: &str, target: &str) -> mgcrs_core::Result<Vec<f64>> {
        Ok(vec![-1.0; target.split_whitespace().count() + 1])
    }

    fn rank_items(&self, _: &str, catalog: &[Item]) -> mgcrs_core::Result<Vec<(String, f64)>> {
        let z: f64 = (1..=catalog.len()).map(|r| 1.0 / r as f64).sum();
        Ok(catalog.iter().enumerate().map(|(r, it)| (it.id.clone(), 1.0 / ((r + 1) as f64 * z))).collect())
    }

    fn vocab_digest(&self) -> String {
        "stub".into()
    }
}

fn catalog() -> Vec<Item> {
    (0..8).map(|i| Item::new(format!("{}", 100 + i), format!("Film {i}"))).collect()
}

fn stub_pipeline() -> Arc<Pipeline> {
    let m: Arc<dyn Seq2Seq> = Arc::new(Stub);
    let models = StageModels {
        goal: Some(m.clone()),
        topic: Some(m.clone()),
        item: Some(m.clone()),
        response: Some(m),
    };
    Arc::new(Pipeline::new(models, PipelineConfig::default(), catalog(), Arc::new(WordCount)).unwrap())
}

fn service(cfg: ServeConfig) -> Arc<Service> {
    Arc::new(Service::new(stub_pipeline(), cfg))
}

async fn call(svc: &Arc<Service>, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn new_session(svc: &Arc<Service>) -> String {
    let (status, body) = call(svc, "POST", "/v1/session", None).await;
    assert_eq!(status, StatusCode::OK);
    body["session_id"].as_str().unwrap().to_string()
}

async fn say(svc: &Arc<Service>, id: &str, text: &str) -> (StatusCode, Value) {
    call(svc, "POST", &format!("/v1/session/{id}/turn"), Some(&json!({ "text": text }).to_string())).await
}

fn contract() -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../contract/http_api.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Strict structural match: every required key present, no undeclared keys.
fn conforms(schema: &Value, v: &Value, at: &str) -> Result<(), String> {
    match schema {
        Value::String(t) if t == "string" => v.is_string().then_some(()).ok_or(format!("{at}: want string, got {v}")),
        Value::String(t) if t == "number" => v.is_number().then_some(()).ok_or(format!("{at}: want number, got {v}")),
        Value::String(t) if t.starts_with("enum:") => {
            let ok = v.as_str().is_some_and(|s| t["enum:".len()..].split('|').any(|c| c == s));
            ok.then_some(()).ok_or(format!("{at}: {v} not in {t}"))
        }
        Value::Array(el) => {
            let items = v.as_array().ok_or(format!("{at}: want array, got {v}"))?;
            items.iter().enumerate().try_for_each(|(i, x)| conforms(&el[0], x, &format!("{at}[{i}]")))
        }
        Value::Object(fields) => {
            let obj = v.as_object().ok_or(format!("{at}: want object, got {v}"))?;
            for (k, s) in fields {
                let (name, optional) = k.strip_suffix('?').map_or((k.as_str(), false), |n| (n, true));
                match obj.get(name) {
                    Some(x) => conforms(s, x, &format!("{at}.{name}"))?,
                    None if optional => {}
                    None => return Err(format!("{at}: missing `{name}`")),
                }
            }
            for k in obj.keys() {
                if !fields.contains_key(k) && !fields.contains_key(&format!("{k}?")) {
                    return Err(format!("{at}: undeclared field `{k}`"));
                }
            }
            Ok(())
        }
        other => Err(format!("{at}: bad schema {other}")),
    }
}

fn endpoint(name: &str) -> Value {
    contract()["endpoints"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["name"] == name)
        .cloned()
        .unwrap()
}

#[tokio::test]
async fn every_endpoint_matches_the_contract() {
    let svc = service(ServeConfig::default());
    let mut checked = 0;
    for ep in contract()["endpoints"].as_array().unwrap() {
        let id = new_session(&svc).await;
        if ep["name"] == "transcript" {
            say(&svc, &id, "any good films").await;
        }
        let path = ep["path"].as_str().unwrap().replace("{session_id}", &id);
        let body = ep.get("request").map(|_| json!({"text": "recommend me a film"}).to_string());
        let (status, got) = call(&svc, ep["method"].as_str().unwrap(), &path, body.as_deref()).await;
        assert_eq!(status.as_u16() as u64, ep["status"].as_u64().unwrap(), "{}", ep["name"]);
        conforms(&ep["response"], &got, ep["name"].as_str().unwrap()).unwrap();
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[tokio::test]
async fn error_cases_match_the_contract() {
    let svc = service(ServeConfig::default());
    let id = new_session(&svc).await;
    let err = &contract()["error"];
    for case in err["cases"].as_array().unwrap() {
        let (status, body) = match case["name"].as_str().unwrap() {
            "unknown_session" => say(&svc, "no-such-session", "hi").await,
            "empty_text" => say(&svc, &id, "   ").await,
            "malformed_body" => call(&svc, "POST", &format!("/v1/session/{id}/turn"), Some("{\"txt\": 1}")).await,
            other => panic!("unhandled contract case {other}"),
        };
        assert_eq!(status.as_u16() as u64, case["status"].as_u64().unwrap(), "{case}");
        conforms(&err["body"], &body, "error").unwrap();
        assert_eq!(body["error"]["kind"], case["kind"]);
    }
    let (status, _) = call(&svc, "GET", "/v1/session/no-such-session/transcript", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn first_turn_returns_a_prediction_and_two_transcript_turns() {
    let svc = service(ServeConfig::default());
    let id = new_session(&svc).await;
    let (status, p) = say(&svc, &id, "any good films").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(p["goal"], json!(["Movie recommendation"]));
    assert_eq!(p["topics"], json!(["jazz"]));
    assert_eq!(p["response"], "you might enjoy this one");
    let items = p["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    assert_eq!(items[0]["name"], "Film 0");
    assert!(items.windows(2).all(|w| w[0]["p"].as_f64() >= w[1]["p"].as_f64()));

    let t = svc.transcript(&id).await.unwrap();
    assert_eq!(t.turns.len(), 2);
    assert_eq!(t.turns[0].text, "any good films");
    assert!(t.turns[0].inspector.is_none());
    let inspector = t.turns[1].inspector.as_ref().unwrap();
    assert_eq!(inspector.items.len(), 5);
    assert_eq!(inspector.goal, vec!["Movie recommendation".to_string()]);
}

fn tag_count(input: &str, tag: &str) -> usize {
    input.split_whitespace().filter(|w| *w == tag).count()
}

#[tokio::test]
async fn ten_turns_grow_histories_by_one_entry_per_turn() {
    let svc = service(ServeConfig::default());
    let id = new_session(&svc).await;
    for i in 0..10 {
        let (status, _) = say(&svc, &id, &format!("tell me more {i}")).await;
        assert_eq!(status, StatusCode::OK);
    }
    let preds = svc.predictions(&id).await.unwrap();
    assert_eq!(preds.len(), 10);
    for (k, p) in preds.iter().enumerate() {
        assert_eq!(p.turn_index, 2 * k + 1);
        // The first user turn has no earlier prediction to carry; after that
        // every system turn and every user turn adds one history entry. The
        // trailing prompt accounts for the extra tag.
        let g = p.stage_inputs.goal.as_deref().unwrap();
        assert_eq!(tag_count(g, vocab::GOAL), 2 * k + 1, "{g}");
        let t = p.stage_inputs.topic.as_deref().unwrap();
        assert_eq!(tag_count(t, vocab::TOPIC), 2 * k + 1, "{t}");
    }
    for w in preds.windows(2) {
        let (a, b) = (w[0].stage_inputs.goal.as_deref().unwrap(), w[1].stage_inputs.goal.as_deref().unwrap());
        let a_ctx = a.strip_suffix(vocab::GOAL).unwrap();
        assert!(b.starts_with(a_ctx.trim_end()), "history is append-only");
    }
    assert_eq!(svc.transcript(&id).await.unwrap().turns.len(), 20);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_are_isolated() {
    let svc = service(ServeConfig::default());
    let a = new_session(&svc).await;
    let b = new_session(&svc).await;
    let (ra, rb) = tokio::join!(say(&svc, &a, "from session a"), say(&svc, &b, "from session b"));
    assert_eq!(ra.0, StatusCode::OK);
    assert_eq!(rb.0, StatusCode::OK);
    let (ta, tb) = (svc.transcript(&a).await.unwrap(), svc.transcript(&b).await.unwrap());
    assert_eq!(ta.turns[0].text, "from session a");
    assert_eq!(tb.turns[0].text, "from session b");
    assert_eq!((ta.turns.len(), tb.turns.len()), (2, 2));

    // Requests within one session are serialized: both land, in some order.
    let (r1, r2) = tokio::join!(say(&svc, &a, "first"), say(&svc, &a, "second"));
    assert_eq!((r1.0, r2.0), (StatusCode::OK, StatusCode::OK));
    let ta = svc.transcript(&a).await.unwrap();
    assert_eq!(ta.turns.len(), 6);
    let speakers: Vec<_> = ta.turns.iter().map(|t| t.speaker.as_str()).collect();
    assert_eq!(speakers, ["user", "system", "user", "system", "user", "system"]);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let svc = service(ServeConfig {
        session_idle_secs: 0,
        ..ServeConfig::default()
    });
    let id = new_session(&svc).await;
    tokio::time::sleep(Duration::from_millis(20)).await;
    let (status, body) = say(&svc, &id, "hello").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["kind"], "not_found");
    assert_eq!(svc.session_count(), 0);

    new_session(&svc).await;
    tokio::time::sleep(Duration::from_millis(20)).await;
    assert_eq!(svc.sweep(), 1);
    assert_eq!(svc.session_count(), 0);
}

#[tokio::test]
async fn reserved_tokens_are_rejected() {
    let svc = service(ServeConfig::default());
    let id = new_session(&svc).await;
    let (status, body) = say(&svc, &id, "hi [goal] there").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["kind"], "bad_request");
    assert!(svc.transcript(&id).await.unwrap().turns.is_empty(), "failed turns leave no state");
}

#[tokio::test]
async fn transcripts_persist_as_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(ServeConfig {
        persist_dir: dir.path().to_string_lossy().into_owned(),
        ..ServeConfig::default()
    });
    let id = new_session(&svc).await;
    say(&svc, &id, "one").await;
    say(&svc, &id, "two").await;
    let raw = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    let stored: Vec<TranscriptEntry> = raw.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(stored, svc.transcript(&id).await.unwrap().turns);
}

#[tokio::test]
async fn healthz_reports_sessions() {
    let svc = service(ServeConfig::default());
    new_session(&svc).await;
    let (status, body) = call(&svc, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok", "sessions": 1}));
    conforms(&endpoint("health")["response"], &body, "health").unwrap();
}

/// A real (untrained) checkpoint, restored twice as if the service restarted.
#[tokio::test]
async fn restarted_service_reproduces_greedy_responses() {
    let base = BaseTokenizer::from_texts(["hello", "there", "films", "music", "please"], 1);
    let v = Arc::new(build_vocabulary(&base, &catalog()).unwrap());
    let cfg = BackboneConfig {
        d_model: 16,
        heads: 2,
        ff: 32,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        max_positions: 128,
        seed: 9,
    };
    let dir = tempfile::tempdir().unwrap();
    Backbone::<f32>::new("theta", cfg, v).unwrap().snapshot(dir.path()).unwrap();

    let mut pc = PipelineConfig::default();
    pc.budget.max_source = 120;
    pc.budget.max_target = 8;
    pc.budget.max_topic_context = 32;
    pc.goal_decode = DecodeConfig::greedy(8);
    pc.topic_decode = DecodeConfig::greedy(8);
    pc.response_decode = DecodeConfig::greedy(8);
    let start = || {
        let m: Arc<dyn Seq2Seq> = Arc::new(Backbone::<f32>::restore(dir.path()).unwrap());
        let models = StageModels {
            goal: Some(m.clone()),
            topic: Some(m.clone()),
            item: Some(m.clone()),
            response: Some(m),
        };
        let counter = Arc::new(Backbone::<f32>::restore(dir.path()).unwrap().vocab.as_ref().clone());
        let p = Pipeline::new(models, pc.clone(), catalog(), counter).unwrap();
        Arc::new(Service::new(Arc::new(p), ServeConfig::default()))
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let svc = start();
        let id = svc.create_session();
        let mut out = Vec::new();
        for text in ["hello there", "films please", "music"] {
            out.push(svc.turn(&id, text).await.unwrap());
        }
        runs.push(out);
    }
    assert_eq!(runs[0], runs[1]);
}
