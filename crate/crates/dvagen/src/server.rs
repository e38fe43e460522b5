//! HTTP API over a loaded pipeline: generation, candidate inspection,
//! steering and heat visualization, with sessions in a bounded LRU store.

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dvagen_core::inference::{GenerationConfig, GenerationSession, Generator};
use dvagen_core::text::TokenId;
use dvagen_core::tokenizer::{DvaTokenizer, SegmentKind};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{AppError, AppResult};
use crate::pipeline::Pipeline;
use crate::viz;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn session_not_found(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "session_not_found",
            format!("session {id:?} not found (unknown or evicted)"),
        )
    }
}

impl From<dvagen_core::Error> for ApiError {
    fn from(e: dvagen_core::Error) -> Self {
        use dvagen_core::Error as E;
        let (status, code) = match &e {
            E::InvalidArgument(_) | E::IdOutOfRange { .. } | E::ShapeMismatch(_) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            E::InvalidPhrase { .. } => (StatusCode::BAD_REQUEST, "invalid_phrase"),
            E::SequenceTooLong { .. } => (StatusCode::BAD_REQUEST, "sequence_too_long"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub struct AppState {
    generator: Generator,
    defaults: GenerationConfig,
    model_info: Value,
    sessions: Mutex<LruCache<String, Arc<GenerationSession>>>,
    capacity: usize,
}

impl AppState {
    pub fn new(pipeline: &Pipeline) -> AppResult<Self> {
        let capacity = pipeline.config.server.session_capacity;
        let cap = NonZeroUsize::new(capacity)
            .ok_or_else(|| AppError::Config("server.session_capacity must be >= 1".into()))?;
        let m = &pipeline.model;
        let cfg = m.config();
        let model_info = json!({
            "d_model": cfg.d_model,
            "backbone_layers": cfg.backbone.n_layers,
            "backbone_heads": cfg.backbone.n_heads,
            "encoder_layers": cfg.phrase_encoder.n_layers,
            "max_seq_len": cfg.max_seq_len,
            "vocab_size": m.vocab_size(),
            "fingerprint": m.fingerprint(),
            "vocab_fingerprint": m.vocab_fingerprint(),
            "lora": cfg.lora.is_some(),
        });
        Ok(Self {
            generator: pipeline.generator.clone(),
            defaults: pipeline.config.generation.clone(),
            model_info,
            sessions: Mutex::new(LruCache::new(cap)),
            capacity,
        })
    }

    fn store(&self, session: GenerationSession) -> (String, Arc<GenerationSession>) {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Arc::new(session);
        self.sessions
            .lock()
            .expect("session store poisoned")
            .put(id.clone(), session.clone());
        (id, session)
    }

    fn get(&self, id: &str) -> Result<Arc<GenerationSession>, ApiError> {
        self.sessions
            .lock()
            .expect("session store poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::session_not_found(id))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session store poisoned").len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/generate", post(generate))
        .route("/api/candidates", get(candidates))
        .route("/api/steer", post(steer))
        .route("/api/viz", get(viz_handler))
        .with_state(state)
}

/// Bind and serve until interrupted.
pub async fn serve(state: Arc<AppState>, host: &str, port: u16) -> AppResult<()> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| AppError::Config(format!("bad server address {host}:{port}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| AppError::Config(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::Config(format!("server error: {e}")))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let retriever = state.generator.retriever();
    Json(json!({
        "status": "ok",
        "service": "dvagen",
        "version": env!("CARGO_PKG_VERSION"),
        "model": state.model_info,
        "retrieval": retriever.is_some(),
        "documents": retriever.map_or(0, |r| r.documents().len()),
        "sessions": {"stored": state.session_count(), "capacity": state.capacity},
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentPayload {
    pub text: String,
    pub kind: SegmentKind,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionPayload {
    pub session_id: String,
    pub parent_session_id: Option<String>,
    pub prefix: String,
    pub ids: Vec<TokenId>,
    pub segments: Vec<SegmentPayload>,
    pub text: String,
    pub phrases: Vec<String>,
    pub vocab_size: usize,
}

fn session_payload(id: String, parent: Option<String>, s: &GenerationSession) -> SessionPayload {
    SessionPayload {
        session_id: id,
        parent_session_id: parent,
        prefix: s.prefix.clone(),
        ids: s.ids.clone(),
        segments: s
            .segments
            .iter()
            .map(|g| SegmentPayload {
                text: g.text.clone(),
                kind: g.kind,
                probability: g.probability,
            })
            .collect(),
        text: s.text.clone(),
        phrases: s.phrases.clone(),
        vocab_size: s.vocab_size,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prefix: String,
    #[serde(default)]
    pub phrases: Option<Vec<String>>,
    #[serde(default)]
    pub config: Option<serde_json::Map<String, Value>>,
}

/// Overlay request fields on the service defaults; unknown keys are rejected.
fn merged_config(
    base: &GenerationConfig,
    overrides: Option<serde_json::Map<String, Value>>,
) -> Result<GenerationConfig, ApiError> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    if let (Some(obj), Some(o)) = (value.as_object_mut(), overrides) {
        obj.extend(o);
    }
    let cfg: GenerationConfig =
        serde_json::from_value(value).map_err(|e| ApiError::bad_request(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

async fn run_blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn generate(
    State(state): State<Arc<AppState>>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> ApiResult<SessionPayload> {
    let Json(req) = body?;
    if req.prefix.trim().is_empty() {
        return Err(ApiError::bad_request("prefix must not be empty"));
    }
    let cfg = merged_config(&state.defaults, req.config)?;
    let st = state.clone();
    let session = run_blocking(move || {
        Ok(st
            .generator
            .generate_single(&req.prefix, req.phrases.as_deref(), &cfg)?)
    })
    .await?;
    let (id, session) = state.store(session);
    Ok(Json(session_payload(id, None, &session)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindFilter {
    Phrases,
    Tokens,
    #[default]
    Both,
}

fn default_limit() -> usize {
    50
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatesQuery {
    pub session_id: String,
    pub position: usize,
    #[serde(default)]
    pub filter: KindFilter,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatePayload {
    pub id: TokenId,
    pub text: String,
    pub kind: SegmentKind,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatesResponse {
    pub session_id: String,
    pub position: usize,
    pub filter: KindFilter,
    pub chosen: TokenId,
    pub candidates: Vec<CandidatePayload>,
}

async fn candidates(
    State(state): State<Arc<AppState>>,
    query: Result<Query<CandidatesQuery>, QueryRejection>,
) -> ApiResult<CandidatesResponse> {
    let Query(q) = query?;
    let session = state.get(&q.session_id)?;
    let step = session.steps.get(q.position).ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "position_out_of_range",
            format!(
                "position {} out of range for {} steps",
                q.position,
                session.steps.len()
            ),
        )
    })?;
    let vocab = state.generator.vocab();
    let table = session.table(vocab)?;
    let tok = DvaTokenizer::new(vocab, &table)?;
    let mut out = Vec::new();
    for c in &step.candidates {
        let kind = table.kind_of(c.id);
        let keep = match q.filter {
            KindFilter::Both => true,
            KindFilter::Tokens => kind == SegmentKind::Token,
            KindFilter::Phrases => kind == SegmentKind::Phrase,
        };
        if !keep {
            continue;
        }
        if out.len() == q.limit {
            break;
        }
        out.push(CandidatePayload {
            id: c.id,
            text: tok.surface(c.id)?.to_string(),
            kind,
            probability: c.probability,
        });
    }
    Ok(Json(CandidatesResponse {
        session_id: q.session_id,
        position: q.position,
        filter: q.filter,
        chosen: step.chosen,
        candidates: out,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerRequest {
    pub session_id: String,
    pub position: usize,
    pub replacement_id: TokenId,
}

async fn steer(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SteerRequest>, JsonRejection>,
) -> ApiResult<SessionPayload> {
    let Json(req) = body?;
    let session = state.get(&req.session_id)?;
    if req.position >= session.steps.len() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "position_out_of_range",
            format!(
                "position {} out of range for {} steps",
                req.position,
                session.steps.len()
            ),
        ));
    }
    if !session.steps[req.position]
        .candidates
        .iter()
        .any(|c| c.id == req.replacement_id)
    {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_replacement",
            format!(
                "id {} is not a stored candidate at position {}",
                req.replacement_id, req.position
            ),
        ));
    }
    let st = state.clone();
    let (pos, rep) = (req.position, req.replacement_id);
    let steered = run_blocking(move || Ok(st.generator.steer(&session, pos, rep)?)).await?;
    let parent = Some(req.session_id);
    let (id, s) = state.store(steered);
    Ok(Json(session_payload(id, parent, &s)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizQuery {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VizResponse {
    pub session_id: String,
    pub segments: Vec<viz::HeatSegment>,
    pub svg: String,
}

async fn viz_handler(
    State(state): State<Arc<AppState>>,
    query: Result<Query<VizQuery>, QueryRejection>,
) -> ApiResult<VizResponse> {
    let Query(q) = query?;
    let session = state.get(&q.session_id)?;
    let segments = viz::heat_segments(&session);
    let svg = viz::render_svg(&segments);
    Ok(Json(VizResponse {
        session_id: q.session_id,
        segments,
        svg,
    }))
}
