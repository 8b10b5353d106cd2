//! JSON-over-HTTP expansion service: one frozen base model shared by every
//! request, personalized per user by soft prompt, memory or checkpoint.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use abbrex_core::corpus::AbbrevExample;
use abbrex_core::eval::{expand, Conditioning, DecodeConfig, Strategy};
use abbrex_core::model::Model;
use abbrex_core::text::{is_punct, normalize, Vocab};
use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::AppError;
use crate::registry::{MemoryRecord, ProfileSummary, Registry};

/// Header carrying the served base checkpoint digest on every response.
pub const DIGEST_HEADER: &str = "x-base-digest";
/// Interactive default; offline evaluation uses 128.
pub const DEFAULT_REQUEST_SAMPLES: usize = 32;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_SHOTS: usize = 4;
pub const REQUEST_TTL: Duration = Duration::from_secs(600);
/// Upper bound on a request's sample count.
pub const MAX_REQUEST_SAMPLES: usize = 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub samples: usize,
    pub temperature: f64,
    pub shots: usize,
    pub request_ttl: Duration,
    /// Static bearer token; `None` disables auth.
    pub token: Option<String>,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_REQUEST_SAMPLES,
            temperature: 1.0,
            shots: DEFAULT_SHOTS,
            request_ttl: REQUEST_TTL,
            token: None,
            seed: 0,
        }
    }
}

struct Pending {
    user_id: Option<String>,
    abbreviation: String,
    candidates: Vec<String>,
    created: Instant,
    /// Set by the first /select; repeats are acknowledged without effect.
    selected: Option<SelectAck>,
}

pub struct AppState {
    base: Arc<Model>,
    digest: String,
    registry: Registry,
    pending: Mutex<HashMap<String, Pending>>,
    cfg: ServiceConfig,
}

impl AppState {
    pub fn new(base: Model, registry: Registry, cfg: ServiceConfig) -> Arc<Self> {
        let digest = base.digest();
        assert_eq!(digest, registry.base_digest(), "registry opened against another base");
        Arc::new(Self {
            base: Arc::new(base),
            digest,
            registry,
            pending: Mutex::new(HashMap::new()),
            cfg,
        })
    }

    pub fn base(&self) -> &Model {
        &self.base
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match &self {
            AppError::UnknownUser(_) | AppError::UnknownRequest(_) => StatusCode::NOT_FOUND,
            AppError::MalformedAbbreviation(_) | AppError::InvalidUserId(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            AppError::BaseMismatch { .. } => StatusCode::CONFLICT,
            AppError::Unauthorized => StatusCode::UNAUTHORIZED,
            AppError::PromptShape { .. } | AppError::Invalid(_) | AppError::Json(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            AppError::Core(e) => match e {
                abbrex_core::CoreError::ContextOverflow { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                abbrex_core::CoreError::Corrupt(_)
                | abbrex_core::CoreError::VersionMismatch { .. }
                | abbrex_core::CoreError::DigestMismatch { .. }
                | abbrex_core::CoreError::InvalidArgument(_)
                | abbrex_core::CoreError::UnknownChar(_) => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            AppError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.to_json())).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, AppError>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpandRequest {
    /// Absent for anonymous use, which always runs the base strategy.
    #[serde(default)]
    pub user_id: Option<String>,
    pub abbreviation: String,
    /// Previous conversation turn.
    #[serde(default)]
    pub context: Option<String>,
    /// Overrides the user's default strategy.
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub k: Option<usize>,
    /// Samples to draw; defaults to the service setting.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedExpansion {
    pub expansion: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandResponse {
    pub request_id: String,
    pub user_id: Option<String>,
    pub abbreviation: String,
    pub strategy: Strategy,
    /// The requested personalization had nothing to work with, so the base
    /// strategy answered instead.
    pub fallback: bool,
    pub expansions: Vec<RankedExpansion>,
    /// Samples that produced a well-formed expansion.
    pub n_samples: usize,
    /// Samples discarded as empty, over-long or containing a control token.
    pub excluded: usize,
    pub latency_ms: f64,
    pub base_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectRequest {
    pub user_id: String,
    pub request_id: String,
    pub chosen_expansion: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectAck {
    pub request_id: String,
    pub recorded: MemoryRecord,
    /// The chosen text was not among the offered candidates.
    pub free_text_edit: bool,
    /// This request had already been selected; nothing was added.
    pub duplicate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileUpdate {
    pub default_strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAck {
    pub user_id: String,
    pub version: u32,
    pub base_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub user_id: String,
    pub entries: Vec<MemoryRecord>,
}

/// Checks that `abbr` is a word-initial abbreviation: single characters or
/// punctuation marks separated by spaces. Returns the normalized form.
pub fn parse_abbreviation(abbr: &str) -> ApiResult<String> {
    let norm = normalize(abbr);
    if norm.is_empty() {
        return Err(AppError::MalformedAbbreviation("empty abbreviation".into()));
    }
    let vocab = Vocab::default();
    for tok in norm.split(' ') {
        let mut chars = tok.chars();
        let c = chars.next().expect("normalized tokens are non-empty");
        if chars.next().is_some() && !tok.chars().all(is_punct) {
            return Err(AppError::MalformedAbbreviation(format!(
                "token {tok:?} is not a single character"
            )));
        }
        if !vocab.contains_char(c) {
            return Err(AppError::MalformedAbbreviation(format!("unsupported character {c:?}")));
        }
    }
    Ok(norm)
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/expand", post(expand_handler))
        .route("/v1/select", post(select_handler))
        .route("/v1/users/:id", get(get_profile).put(put_profile))
        .route("/v1/users/:id/prompt", get(get_prompt).put(put_prompt))
        .route("/v1/users/:id/memory", get(get_memory))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    Router::new()
        .route("/v1/health", get(health))
        .merge(api)
        .layer(middleware::from_fn_with_state(state.clone(), digest_header))
        .with_state(state)
}

async fn digest_header(State(s): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut res = next.run(req).await;
    res.headers_mut().insert(
        DIGEST_HEADER,
        HeaderValue::from_str(&s.digest).expect("hex digest is a valid header"),
    );
    res
}

async fn auth(State(s): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.cfg.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return AppError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "base_digest": s.digest,
        "parameters": s.base.parameter_count(),
        "users": s.registry.len(),
    }))
}

/// Resolved conditioning source for one request, detached from registry locks
/// except for retrieval, which reads the profile under its read lock.
enum Plan {
    Base,
    Prompt(Arc<abbrex_core::model::SoftPrompt>),
    Model(Arc<Model>),
    Memory(crate::registry::SharedProfile, Strategy),
}

pub fn run_expand(state: &AppState, req: &ExpandRequest) -> ApiResult<ExpandResponse> {
    let t0 = Instant::now();
    let abbreviation = parse_abbreviation(&req.abbreviation)?;
    let k = req.k.unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(AppError::Invalid("k must be at least 1".into()));
    }
    let n = req.n.unwrap_or(state.cfg.samples);
    if n == 0 || n > MAX_REQUEST_SAMPLES {
        return Err(AppError::Invalid(format!("n must be in 1..={MAX_REQUEST_SAMPLES}")));
    }
    let context = req.context.as_deref().map(normalize).filter(|c| !c.is_empty());
    let profile = match &req.user_id {
        Some(id) => state.registry.get(id),
        None => None,
    };
    let requested = match (&profile, req.strategy) {
        (_, Some(s)) => s,
        (Some(p), None) => p.read().expect("profile lock").default_strategy,
        (None, None) => Strategy::Base,
    };
    if requested != Strategy::Base {
        if req.user_id.is_none() {
            return Err(AppError::Invalid(format!(
                "strategy {requested} needs a user_id"
            )));
        }
        if profile.is_none() {
            return Err(AppError::UnknownUser(req.user_id.clone().unwrap_or_default()));
        }
    }
    let plan = match (requested, &profile) {
        (Strategy::Base, _) | (_, None) => Plan::Base,
        (Strategy::PromptTuned, Some(p)) => {
            let g = p.read().expect("profile lock");
            g.soft_prompt.as_ref().map_or(Plan::Base, |s| Plan::Prompt(s.prompt.clone()))
        }
        (Strategy::FineTuned, Some(p)) => {
            let g = p.read().expect("profile lock");
            g.fine_tuned.as_ref().map_or(Plan::Base, |m| Plan::Model(m.clone()))
        }
        (s @ (Strategy::RaIcl | Strategy::Icl), Some(p)) => Plan::Memory(p.clone(), s),
    };
    let decode = DecodeConfig {
        n,
        temperature: state.cfg.temperature,
        seed: req.seed.unwrap_or(state.cfg.seed),
        ..Default::default()
    };
    let shots = state.cfg.shots;
    let ctx = context.as_deref();
    let (result, fallback) = match &plan {
        Plan::Base => {
            let e = expand(&state.base, Conditioning::Plain, &abbreviation, ctx, &decode)?;
            (e.result, requested != Strategy::Base)
        }
        Plan::Prompt(p) => {
            let e = expand(&state.base, Conditioning::SoftPrompt(&p.matrix), &abbreviation, ctx, &decode)?;
            (e.result, false)
        }
        Plan::Model(m) => (expand(m, Conditioning::Plain, &abbreviation, ctx, &decode)?.result, false),
        Plan::Memory(p, s) => {
            let g = p.read().expect("profile lock");
            let e = if *s == Strategy::RaIcl {
                let cond = Conditioning::Retrieved { memory: &g.memory, k: shots };
                expand(&state.base, cond, &abbreviation, ctx, &decode)?
            } else {
                let pool: Vec<AbbrevExample> = g.memory.entries().iter().map(|e| e.example.clone()).collect();
                let cond = Conditioning::RandomShots { pool: &pool, k: shots };
                expand(&state.base, cond, &abbreviation, ctx, &decode)?
            };
            (e.result, e.fallback)
        }
    };
    let expansions: Vec<RankedExpansion> = result
        .candidates
        .iter()
        .take(k)
        .map(|c| RankedExpansion {
            expansion: c.text.clone(),
            count: c.count,
        })
        .collect();
    let request_id = uuid::Uuid::new_v4().to_string();
    {
        let mut pending = state.pending.lock().expect("pending lock");
        let ttl = state.cfg.request_ttl;
        pending.retain(|_, p| p.created.elapsed() < ttl);
        pending.insert(
            request_id.clone(),
            Pending {
                user_id: req.user_id.clone(),
                abbreviation: abbreviation.clone(),
                candidates: expansions.iter().map(|e| e.expansion.clone()).collect(),
                created: Instant::now(),
                selected: None,
            },
        );
    }
    let strategy = if fallback { Strategy::Base } else { requested };
    info!(user = ?req.user_id, %strategy, fallback, "expand");
    Ok(ExpandResponse {
        request_id,
        user_id: req.user_id.clone(),
        abbreviation,
        strategy,
        fallback,
        expansions,
        n_samples: result.n_samples,
        excluded: result.excluded,
        latency_ms: t0.elapsed().as_secs_f64() * 1e3,
        base_digest: state.digest.clone(),
    })
}

async fn expand_handler(
    State(s): State<Arc<AppState>>,
    Json(req): Json<ExpandRequest>,
) -> ApiResult<Json<ExpandResponse>> {
    let res = tokio::task::spawn_blocking(move || run_expand(&s, &req))
        .await
        .map_err(|e| AppError::Invalid(format!("expansion task failed: {e}")))??;
    Ok(Json(res))
}

pub fn run_select(state: &AppState, req: &SelectRequest) -> ApiResult<SelectAck> {
    let chosen = normalize(&req.chosen_expansion);
    if chosen.is_empty() {
        return Err(AppError::Invalid("chosen_expansion is empty".into()));
    }
    let mut pending = state.pending.lock().expect("pending lock");
    let unknown = || AppError::UnknownRequest(req.request_id.clone());
    let p = pending.get_mut(&req.request_id).ok_or_else(unknown)?;
    if p.created.elapsed() >= state.cfg.request_ttl {
        pending.remove(&req.request_id);
        return Err(unknown());
    }
    if p.user_id.as_ref().is_some_and(|u| *u != req.user_id) {
        return Err(unknown());
    }
    if let Some(ack) = &p.selected {
        return Ok(SelectAck {
            duplicate: true,
            ..ack.clone()
        });
    }
    // A free-text sentence is stored under the abbreviation the user typed,
    // which is what later queries will look like.
    let free_text_edit = !p.candidates.contains(&chosen);
    let recorded = state.registry.append_memory(&req.user_id, &p.abbreviation, &chosen)?;
    let ack = SelectAck {
        request_id: req.request_id.clone(),
        recorded,
        free_text_edit,
        duplicate: false,
    };
    p.selected = Some(ack.clone());
    info!(user = %req.user_id, free_text_edit, "select");
    Ok(ack)
}

async fn select_handler(
    State(s): State<Arc<AppState>>,
    Json(req): Json<SelectRequest>,
) -> ApiResult<Json<SelectAck>> {
    let res = tokio::task::spawn_blocking(move || run_select(&s, &req))
        .await
        .map_err(|e| AppError::Invalid(format!("select task failed: {e}")))??;
    Ok(Json(res))
}

fn known(s: &AppState, id: &str) -> ApiResult<crate::registry::SharedProfile> {
    crate::registry::validate_user_id(id)?;
    s.registry.get(id).ok_or_else(|| AppError::UnknownUser(id.to_string()))
}

async fn get_profile(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ProfileSummary>> {
    let p = known(&s, &id)?;
    let summary = p.read().expect("profile lock").summary();
    Ok(Json(summary))
}

async fn put_profile(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(update): Json<ProfileUpdate>,
) -> ApiResult<Json<ProfileSummary>> {
    s.registry.set_default_strategy(&id, update.default_strategy)?;
    let p = known(&s, &id)?;
    let summary = p.read().expect("profile lock").summary();
    Ok(Json(summary))
}

async fn put_prompt(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<PromptAck>> {
    crate::registry::validate_user_id(&id)?;
    let version = tokio::task::spawn_blocking({
        let s = s.clone();
        let id = id.clone();
        move || s.registry.put_prompt(&id, body.to_vec())
    })
    .await
    .map_err(|e| AppError::Invalid(format!("upload task failed: {e}")))??;
    Ok(Json(PromptAck {
        user_id: id,
        version,
        base_digest: s.digest.clone(),
    }))
}

async fn get_prompt(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    known(&s, &id)?;
    let bytes = s.registry.prompt_bytes(&id).ok_or_else(|| AppError::UnknownUser(id.clone()))?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream")],
        bytes.as_ref().clone(),
    )
        .into_response())
}

async fn get_memory(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<MemoryView>> {
    let p = known(&s, &id)?;
    let entries = p.read().expect("profile lock").memory_records();
    Ok(Json(MemoryView { user_id: id, entries }))
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: &str) -> crate::error::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(addr = %listener.local_addr()?, digest = %state.digest, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abbreviation_validation() {
        assert_eq!(parse_abbreviation(" S I  l t r ").unwrap(), "s i l t r");
        assert_eq!(parse_abbreviation("w a d , o d y").unwrap(), "w a d , o d y");
        for bad in ["", "   ", "hello there", "a bc"] {
            assert!(
                matches!(parse_abbreviation(bad), Err(AppError::MalformedAbbreviation(_))),
                "{bad:?}"
            );
        }
    }
}
