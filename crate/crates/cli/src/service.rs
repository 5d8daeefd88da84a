//! HTTP+JSON service over a loaded model. MIDI travels as base64 SMF bytes.
//!
//! Every request samples with its own seed and state, so concurrent calls
//! give the same results as the same calls made one at a time.

use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State as AxState;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use mrwkv_core::harness::{realized_controls, resolve_spec, Engine, HarnessError, RegionRequest};
use mrwkv_core::metrics::{attribute_adherence, evaluate_pair, MetricConfig, MetricReport};
use mrwkv_core::midi::{bar_grid, read_midi, write_midi, Note, Score};
use mrwkv_core::prompt::{AttributeControls, ControlOverrides};
use mrwkv_core::sampler::{SampleError, SamplerConfig};
use mrwkv_core::tokenizer::{quantize_score, TokenConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const OPENAPI: &str = include_str!("../openapi.json");

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn loading() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model is loading")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Spec(_) | HarnessError::Prompt(_) | HarnessError::Metric(_) => StatusCode::BAD_REQUEST,
            HarnessError::Sample(SampleError::Config(_) | SampleError::Request(_)) => StatusCode::BAD_REQUEST,
            HarnessError::Midi(_) | HarnessError::Tokenizer(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Model description returned by `GET /model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: mrwkv_core::model::ModelConfig,
    pub variant: mrwkv_core::harness::Variant,
    pub param_count: usize,
    pub params_hash: String,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub has_state: bool,
}

impl ModelInfo {
    fn of(e: &Engine) -> Self {
        Self {
            config: e.model.cfg,
            variant: e.variant,
            param_count: e.model.param_count(),
            params_hash: e.model.params_hash(),
            vocab_size: e.vocab.len(),
            vocab_hash: format!("{:016x}", e.vocab.hash()),
            has_state: e.state.is_some(),
        }
    }
}

struct Loaded {
    engine: Arc<Engine>,
    info: ModelInfo,
}

/// Shared service state. The engine slot is empty while loading.
#[derive(Clone, Default)]
pub struct AppState {
    slot: Arc<RwLock<Option<Arc<Loaded>>>>,
}

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(engine: Engine) -> Self {
        let s = Self::default();
        s.install(engine);
        s
    }

    pub fn install(&self, engine: Engine) {
        let info = ModelInfo::of(&engine);
        *self.slot.write().expect("state lock") = Some(Arc::new(Loaded {
            engine: Arc::new(engine),
            info,
        }));
    }

    fn get(&self) -> Option<Arc<Loaded>> {
        self.slot.read().expect("state lock").clone()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/openapi.json", get(openapi))
        .route("/infill", post(infill))
        .route("/controls", post(controls))
        .route("/metrics", post(metrics))
        .with_state(state)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Decodes base64 MIDI; undecodable bytes are a 400, unparsable SMF a 422.
fn decode_midi(b64: &str) -> Result<Score, ApiError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("midi is not valid base64: {e}")))?;
    read_midi(&bytes).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unreadable MIDI: {e}")))
}

async fn health() -> &'static str {
    "ok"
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI)
}

async fn model(AxState(state): AxState<AppState>) -> ApiResult<ModelInfo> {
    let loaded = state.get().ok_or_else(ApiError::loading)?;
    Ok(Json(loaded.info.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfillBody {
    pub midi: String,
    pub track: usize,
    pub start_bar: usize,
    pub n_bars: usize,
    /// Context bars on each side; defaults to `4 * n_bars`.
    #[serde(default)]
    pub context: Option<usize>,
    /// Per-bar controls; fields left out are computed from the original.
    #[serde(default)]
    pub controls: Vec<ControlOverrides>,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfillReply {
    pub midi: String,
    pub n_bars: usize,
    pub controls_requested: Vec<AttributeControls>,
    /// Controls recomputed from the generated bars; `null` for empty bars.
    pub controls_realized: Vec<Option<AttributeControls>>,
    pub tokens_generated: usize,
    pub early_stops: usize,
    pub elapsed_ms: f64,
}

/// The blocking body of `POST /infill`.
pub fn run_infill(engine: &Engine, body: &InfillBody) -> Result<InfillReply, ApiError> {
    let t0 = Instant::now();
    let score = decode_midi(&body.midi)?;
    let req = RegionRequest {
        track: body.track,
        start_bar: body.start_bar,
        n_bars: body.n_bars,
        context: body.context.unwrap_or(4 * body.n_bars),
        controls: body.controls.clone(),
        track_order: None,
    };
    let q = quantize_score(&score, engine.vocab.base()).map_err(HarnessError::from)?;
    let spec = resolve_spec(&q, &req, &engine.vocab)?;
    let out = engine.infill_spec(&score, &spec, &body.sampler)?;
    let grid = bar_grid(&out.score).map_err(HarnessError::from)?;
    let bars = &grid[spec.region()];
    let realized = realized_controls(&out.score, spec.track, bars, &engine.vocab);
    let midi = write_midi(&out.score).map_err(HarnessError::from)?;
    let o = out.output.expect("engine output");
    Ok(InfillReply {
        midi: B64.encode(midi),
        n_bars: o.bars,
        controls_requested: spec.controls,
        controls_realized: realized,
        tokens_generated: o.generated.len(),
        early_stops: o.early_stops,
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

async fn infill(AxState(state): AxState<AppState>, body: Bytes) -> ApiResult<InfillReply> {
    let body: InfillBody = parse(&body)?;
    let loaded = state.get().ok_or_else(ApiError::loading)?;
    let reply = tokio::task::spawn_blocking(move || run_infill(&loaded.engine, &body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(reply))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlsBody {
    pub midi: String,
    pub track: usize,
    pub start_bar: usize,
    pub n_bars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlsReply {
    /// One entry per bar; `null` for empty bars.
    pub controls: Vec<Option<AttributeControls>>,
}

fn token_config(state: &AppState) -> TokenConfig {
    state.get().map_or_else(TokenConfig::default, |l| l.engine.vocab.base().config().clone())
}

fn region(score: &Score, track: usize, start: usize, n: usize) -> Result<Vec<(u32, u32)>, ApiError> {
    let grid = bar_grid(score).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    if track >= score.tracks.len() {
        return Err(ApiError::bad_request(format!("track {track} of {}", score.tracks.len())));
    }
    if n == 0 || start + n > grid.len() {
        return Err(ApiError::bad_request(format!("bars {start}..{} outside a score of {} bars", start + n, grid.len())));
    }
    Ok(grid[start..start + n].to_vec())
}

/// Quantizes to the tokenizer grid, as prompts see the score.
fn quantized(score: &Score, cfg: &TokenConfig) -> Result<Score, ApiError> {
    quantize_score(score, &mrwkv_core::tokenizer::BaseVocab::new(cfg.clone()))
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

async fn controls(AxState(state): AxState<AppState>, body: Bytes) -> ApiResult<ControlsReply> {
    let body: ControlsBody = parse(&body)?;
    let cfg = token_config(&state);
    let q = quantized(&decode_midi(&body.midi)?, &cfg)?;
    let bars = region(&q, body.track, body.start_bar, body.n_bars)?;
    let controls = bars
        .iter()
        .map(|&b| {
            let notes = mrwkv_core::prompt::bar_notes(&q.tracks[body.track], b);
            mrwkv_core::prompt::compute_controls(&notes, q.ticks_per_quarter, &cfg).ok()
        })
        .collect();
    Ok(Json(ControlsReply { controls }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBody {
    pub original: String,
    pub infilled: String,
    pub track: usize,
    pub start_bar: usize,
    pub n_bars: usize,
    /// Requested controls, for adherence; omit to skip it.
    #[serde(default)]
    pub controls: Option<Vec<AttributeControls>>,
    #[serde(default)]
    pub config: MetricConfig,
}

fn region_notes(score: &Score, track: usize, bars: &[(u32, u32)]) -> Vec<Note> {
    let (lo, hi) = (bars[0].0, bars[bars.len() - 1].1);
    score.tracks[track].notes.iter().filter(|n| n.onset >= lo && n.onset < hi).copied().collect()
}

async fn metrics(AxState(state): AxState<AppState>, body: Bytes) -> ApiResult<MetricReport> {
    let body: MetricsBody = parse(&body)?;
    let cfg = token_config(&state);
    let o = quantized(&decode_midi(&body.original)?, &cfg)?;
    let i = quantized(&decode_midi(&body.infilled)?, &cfg)?;
    if o.ticks_per_quarter != i.ticks_per_quarter || o.tracks.len() != i.tracks.len() {
        return Err(ApiError::bad_request("original and infilled scores have different layouts"));
    }
    let bars = region(&o, body.track, body.start_bar, body.n_bars)?;
    if region(&i, body.track, body.start_bar, body.n_bars)? != bars {
        return Err(ApiError::bad_request("original and infilled scores have different bar grids"));
    }
    let on = region_notes(&o, body.track, &bars);
    let inn = region_notes(&i, body.track, &bars);
    let pair = evaluate_pair(&on, &inn, &bars, o.ticks_per_quarter, &cfg, &body.config)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let adherence = match &body.controls {
        Some(c) => vec![attribute_adherence(c, &inn, &bars, o.ticks_per_quarter, &cfg).map_err(|e| ApiError::bad_request(e.to_string()))?],
        None => Vec::new(),
    };
    Ok(Json(MetricReport::from_pairs(vec![pair], &adherence)))
}

/// Binds `addr` and serves until the process ends. The model loads in the
/// background; requests that need it get 503 until it is ready.
pub async fn serve(addr: &str, load: impl FnOnce() -> Result<Engine, String> + Send + 'static) -> std::io::Result<()> {
    let state = AppState::loading();
    let slot = state.clone();
    tokio::task::spawn_blocking(move || match load() {
        Ok(engine) => {
            slot.install(engine);
            eprintln!("model loaded");
        }
        Err(e) => eprintln!("failed to load model: {e}"),
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
