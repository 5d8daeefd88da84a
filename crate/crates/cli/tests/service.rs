use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use http_body_util::BodyExt;
use mrwkv::service::{router, AppState};
use mrwkv_core::harness::{Engine, Variant};
use mrwkv_core::midi::{bar_grid, read_midi, write_midi, Score};
use mrwkv_core::model::{Model, ModelConfig};
use mrwkv_core::prompt::{bar_notes, compute_controls};
use mrwkv_core::synth::{style_score, Style};
use mrwkv_core::tokenizer::{quantize_score, BaseVocab, TokenConfig, Vocabulary};
use serde_json::{json, Value};
use tower::ServiceExt;

fn engine() -> Engine {
    let vocab = Vocabulary::new(BaseVocab::new(TokenConfig::default()));
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 16,
        head_size: 8,
        d_ffn: 32,
        vocab_size: vocab.len(),
    };
    Engine {
        model: Model::<f64>::random(cfg, 3, 1.0).unwrap().cast(),
        state: None,
        vocab,
        variant: Variant::Base,
    }
}

fn demo() -> Score {
    style_score(Style::Driving, 12, 1)
}

fn b64(s: &Score) -> String {
    B64.encode(write_midi(s).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

fn infill_body(s: &Score, seed: u64) -> String {
    json!({"midi": b64(s), "track": 0, "start_bar": 4, "n_bars": 2, "sampler": {"seed": seed, "max_tokens": 1500}}).to_string()
}

#[tokio::test]
async fn health_and_model() {
    let app = router(AppState::ready(engine()));
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!((s, v), (StatusCode::OK, Value::String("ok".into())));
    let (s, v) = call(&app, "GET", "/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["config"]["d_model"], 16);
    assert_eq!(v["variant"]["kind"], "base");
    let (s, v) = call(&app, "GET", "/openapi.json", None).await;
    assert_eq!(s, StatusCode::OK);
    for path in ["/health", "/model", "/infill", "/controls", "/metrics"] {
        assert!(v["paths"].get(path).is_some(), "{path} undocumented");
    }
}

#[tokio::test]
async fn loading_gives_503() {
    let app = router(AppState::loading());
    assert_eq!(call(&app, "GET", "/health", None).await.0, StatusCode::OK);
    assert_eq!(call(&app, "GET", "/model", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (s, v) = call(&app, "POST", "/infill", Some(infill_body(&demo(), 0))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn infill_changes_only_the_requested_bars() {
    let app = router(AppState::ready(engine()));
    let input = demo();
    let (s, v) = call(&app, "POST", "/infill", Some(infill_body(&input, 5))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["n_bars"], 2);
    let out = read_midi(&B64.decode(v["midi"].as_str().unwrap()).unwrap()).unwrap();
    let grid = bar_grid(&input).unwrap();
    let (lo, hi) = (grid[4].0, grid[5].1);
    assert_eq!(out.tempo_map, input.tempo_map);
    assert_eq!(out.timesig_map, input.timesig_map);
    for (t, (a, b)) in input.tracks.iter().zip(&out.tracks).enumerate() {
        assert_eq!(a.program, b.program);
        if t != 0 {
            assert_eq!(a.notes, b.notes);
            continue;
        }
        let outside = |n: &&mrwkv_core::midi::Note| n.onset < lo || n.onset >= hi;
        let ao: Vec<_> = a.notes.iter().filter(outside).collect();
        let bo: Vec<_> = b.notes.iter().filter(outside).collect();
        assert_eq!(ao, bo);
    }
}

#[tokio::test]
async fn invalid_requests() {
    let app = router(AppState::ready(engine()));
    let s = demo();
    let bad_range = json!({"midi": b64(&s), "track": 0, "start_bar": 11, "n_bars": 4}).to_string();
    assert_eq!(call(&app, "POST", "/infill", Some(bad_range)).await.0, StatusCode::BAD_REQUEST);
    let bad_track = json!({"midi": b64(&s), "track": 9, "start_bar": 0, "n_bars": 1}).to_string();
    assert_eq!(call(&app, "POST", "/infill", Some(bad_track)).await.0, StatusCode::BAD_REQUEST);
    let bad_b64 = json!({"midi": "***", "track": 0, "start_bar": 0, "n_bars": 1}).to_string();
    assert_eq!(call(&app, "POST", "/infill", Some(bad_b64)).await.0, StatusCode::BAD_REQUEST);
    let not_midi = json!({"midi": B64.encode(b"RIFFnonsense"), "track": 0, "start_bar": 0, "n_bars": 1}).to_string();
    assert_eq!(call(&app, "POST", "/infill", Some(not_midi)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", "/infill", Some("{".into())).await.0, StatusCode::BAD_REQUEST);
    let bad_controls = json!({"midi": b64(&s), "track": 0, "start_bar": 0, "n_bars": 1, "controls": [{"density": 40}]}).to_string();
    assert_eq!(call(&app, "POST", "/infill", Some(bad_controls)).await.0, StatusCode::BAD_REQUEST);
    let bad_sampler = json!({"midi": b64(&s), "track": 0, "start_bar": 0, "n_bars": 1, "sampler": {"temperature": -1.0}}).to_string();
    assert_eq!(call(&app, "POST", "/infill", Some(bad_sampler)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn controls_delegate_to_compute_controls() {
    let app = router(AppState::ready(engine()));
    let s = demo();
    let (st, v) = call(&app, "POST", "/controls", Some(json!({"midi": b64(&s), "track": 1, "start_bar": 2, "n_bars": 3}).to_string())).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let base = BaseVocab::new(TokenConfig::default());
    let q = quantize_score(&read_midi(&write_midi(&s).unwrap()).unwrap(), &base).unwrap();
    let grid = bar_grid(&q).unwrap();
    for (k, b) in (2..5).enumerate() {
        let want = compute_controls(&bar_notes(&q.tracks[1], grid[b]), q.ticks_per_quarter, base.config()).ok();
        assert_eq!(v["controls"][k], serde_json::to_value(want).unwrap());
    }
}

#[tokio::test]
async fn metrics_of_identical_scores() {
    let app = router(AppState::loading());
    let m = b64(&demo());
    let body = json!({"original": m, "infilled": m, "track": 0, "start_bar": 1, "n_bars": 4}).to_string();
    let (s, v) = call(&app, "POST", "/metrics", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["cp"]["mean"], 1.0);
    assert_eq!(v["gs"]["mean"], 1.0);
    assert_eq!(v["pche"]["mean"], 0.0);
    assert_eq!(v["f1"]["mean"], 1.0);
}

#[tokio::test]
async fn concurrent_equals_serial() {
    let app = router(AppState::ready(engine()));
    let s = demo();
    let mut serial = Vec::new();
    for seed in 0..4 {
        serial.push(call(&app, "POST", "/infill", Some(infill_body(&s, seed))).await.1["midi"].clone());
    }
    let handles: Vec<_> = (0..4)
        .map(|seed| {
            let app = app.clone();
            let body = infill_body(&s, seed);
            tokio::spawn(async move { call(&app, "POST", "/infill", Some(body)).await.1["midi"].clone() })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(serial) {
        assert_eq!(h.await.unwrap(), want);
    }
}
