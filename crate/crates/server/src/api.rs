//! HTTP surface: channel traffic, authoring CRUD, bot management, session
//! inspection and event export.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, FixedOffset, Utc};
use convograph_core::engine::OutboundMessage;
use convograph_core::graph::{load_graph, Diagnostic};
use convograph_core::host::{Delivery, Host, HostError};
use convograph_core::store::{BotRegistration, ChannelKind, ContentVersion, StoreError, VersionStatus};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::delivery::Outbox;

pub struct AppState {
    pub host: Arc<Host>,
    pub admin_token: String,
    pub outbox: Outbox,
}

pub type SharedState = Arc<AppState>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Vec<Diagnostic>>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code,
            message: message.into(),
            diagnostics: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unauthorized() -> ApiError {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    fn bot_not_found(bot: &str) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, "bot_not_found", format!("no bot named {bot}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> ApiError {
        let message = e.to_string();
        match e {
            StoreError::UnknownVersion(_) => ApiError::new(StatusCode::NOT_FOUND, "version_not_found", message),
            StoreError::UnknownBot(_) => ApiError::new(StatusCode::NOT_FOUND, "bot_not_found", message),
            StoreError::Immutable(_) => ApiError::new(StatusCode::CONFLICT, "version_immutable", message),
            StoreError::AlreadyPublished(_) => ApiError::new(StatusCode::CONFLICT, "already_published", message),
            StoreError::Conflict { .. } => ApiError::new(StatusCode::CONFLICT, "revision_conflict", message),
            StoreError::Load(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_document", message),
            StoreError::Validation(diagnostics) => ApiError {
                diagnostics: Some(diagnostics),
                ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_failed", message)
            },
            StoreError::NotPublished { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "version_not_published", message)
            }
            StoreError::BadId(_) => ApiError::bad_request(message),
            StoreError::Io(_) | StoreError::Corrupt { .. } => {
                tracing::error!(error = %message, "storage failure");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", message)
            }
        }
    }
}

impl From<HostError> for ApiError {
    fn from(e: HostError) -> ApiError {
        let message = e.to_string();
        match e {
            HostError::UnknownBot(bot) => ApiError::bot_not_found(&bot),
            HostError::TextTooLong(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "text_too_long", message),
            HostError::TurnInProgress => ApiError::new(StatusCode::CONFLICT, "turn_in_progress", message),
            HostError::Runtime(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "runtime_fault", message),
            HostError::Program { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "version_invalid", message),
            HostError::Catalog(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_catalog", message),
            HostError::Scheduler(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_checkin", message),
            HostError::Store(e) => e.into(),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking store or engine work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("worker failed: {e}"))
    })?
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match bearer(headers) {
        Some(token) if token == state.admin_token => Ok(()),
        _ => Err(ApiError::unauthorized()),
    }
}

/// Looks the bot up, then accepts its own token or the admin token.
fn require_bot(state: &AppState, headers: &HeaderMap, bot_id: &str) -> ApiResult<BotRegistration> {
    let bot = state.host.bot(bot_id).ok_or_else(|| ApiError::bot_not_found(bot_id))?;
    match bearer(headers) {
        Some(token) if token == bot.registration.channel.token || token == state.admin_token => {
            Ok(bot.registration.clone())
        }
        _ => Err(ApiError::unauthorized()),
    }
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/v1/channels/{bot_id}/messages", post(post_message))
        .route("/v1/graphs", get(list_graphs).post(create_graph))
        .route("/v1/graphs/{gid}/versions/{vid}", get(get_version).put(put_version))
        .route("/v1/graphs/{gid}/versions/{vid}/validate", post(validate_version))
        .route("/v1/graphs/{gid}/versions/{vid}/duplicate", post(duplicate_version))
        .route("/v1/graphs/{gid}/versions/{vid}/publish", post(publish_version))
        .route("/v1/bots/{bot_id}", get(get_bot).put(put_bot))
        .route("/v1/bots/{bot_id}/events", get(export_events))
        .route("/v1/bots/{bot_id}/sessions/{uid}", get(get_session))
        .route("/v1/bots/{bot_id}/sessions/{uid}/reset", post(reset_session))
        .with_state(state)
}

// ---- channel ----

#[derive(Debug, Deserialize)]
struct InboundMessage {
    user_id: String,
    text: String,
    #[serde(default)]
    timestamp: Option<DateTime<FixedOffset>>,
}

#[derive(Debug, Serialize)]
struct SyncReply {
    messages: Vec<OutboundMessage>,
    /// Check-in messages queued since this user's last request.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    proactive: Vec<OutboundMessage>,
}

async fn post_message(
    State(state): State<SharedState>,
    Path(bot_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let registration = require_bot(&state, &headers, &bot_id)?;
    let msg: InboundMessage = parse_body(&body)?;
    if msg.user_id.is_empty() {
        return Err(ApiError::bad_request("user_id must not be empty"));
    }
    let offset = msg.timestamp.map(|t| t.offset().local_minus_utc() / 60);
    let host = state.host.clone();
    let (bot, user, text) = (bot_id.clone(), msg.user_id.clone(), msg.text);
    let delivery = blocking(move || Ok(host.handle_inbound(&bot, &user, &text, offset)?)).await?;
    match registration.channel.kind {
        ChannelKind::HttpSync => {
            let proactive = state.outbox.take(&bot_id, &msg.user_id);
            Ok(Json(SyncReply {
                messages: delivery.messages,
                proactive,
            })
            .into_response())
        }
        ChannelKind::Webhook => {
            state.outbox.deliver(&registration, delivery);
            Ok((StatusCode::ACCEPTED, Json(json!({"status": "accepted"}))).into_response())
        }
    }
}

// ---- authoring ----

#[derive(Debug, Serialize)]
struct VersionView {
    version_id: String,
    graph_id: String,
    status: VersionStatus,
    parent_version: Option<String>,
    created_at: DateTime<Utc>,
    revision: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    document: Option<Value>,
}

impl VersionView {
    fn meta(v: &ContentVersion) -> VersionView {
        VersionView {
            version_id: v.version_id.clone(),
            graph_id: v.graph_id.clone(),
            status: v.status,
            parent_version: v.parent_version.clone(),
            created_at: v.created_at,
            revision: v.revision,
            document: None,
        }
    }

    fn full(v: &ContentVersion) -> VersionView {
        VersionView {
            document: serde_json::from_str(&v.document).ok(),
            ..VersionView::meta(v)
        }
    }
}

fn version_in_graph(host: &Host, gid: &str, vid: &str) -> ApiResult<ContentVersion> {
    let version = host.store().get_version(vid)?;
    if version.graph_id != gid {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "version_not_found",
            format!("version {vid} does not belong to graph {gid}"),
        ));
    }
    Ok(version)
}

async fn list_graphs(State(state): State<SharedState>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    let host = state.host.clone();
    let versions = blocking(move || Ok(host.store().list_versions()?)).await?;
    let mut graphs: BTreeMap<String, Vec<VersionView>> = BTreeMap::new();
    for v in &versions {
        graphs.entry(v.graph_id.clone()).or_default().push(VersionView::meta(v));
    }
    let graphs: Vec<Value> = graphs
        .into_iter()
        .map(|(graph_id, versions)| json!({"graph_id": graph_id, "versions": versions}))
        .collect();
    Ok(Json(json!({ "graphs": graphs })))
}

async fn create_graph(State(state): State<SharedState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    require_admin(&state, &headers)?;
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let host = state.host.clone();
    let version = blocking(move || Ok(host.store().create_draft(&text, host.clock().now())?)).await?;
    Ok((StatusCode::CREATED, Json(VersionView::meta(&version))).into_response())
}

async fn get_version(
    State(state): State<SharedState>,
    Path((gid, vid)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Json<VersionView>> {
    require_admin(&state, &headers)?;
    let host = state.host.clone();
    let version = blocking(move || version_in_graph(&host, &gid, &vid)).await?;
    Ok(Json(VersionView::full(&version)))
}

#[derive(Debug, Deserialize)]
struct DraftUpdate {
    #[serde(default)]
    revision: Option<u64>,
    document: Value,
}

async fn put_version(
    State(state): State<SharedState>,
    Path((gid, vid)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<VersionView>> {
    require_admin(&state, &headers)?;
    let update: DraftUpdate = parse_body(&body)?;
    let text = update.document.to_string();
    let graph = load_graph(&text).map_err(StoreError::from)?;
    if graph.graph_id != gid {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "graph_id_mismatch",
            format!("document graph_id {} does not match {gid}", graph.graph_id),
        ));
    }
    let host = state.host.clone();
    let version = blocking(move || {
        version_in_graph(&host, &gid, &vid)?;
        Ok(host.store().update_draft(&vid, &text, update.revision)?)
    })
    .await?;
    Ok(Json(VersionView::meta(&version)))
}

async fn validate_version(
    State(state): State<SharedState>,
    Path((gid, vid)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    let host = state.host.clone();
    let diagnostics = blocking(move || {
        version_in_graph(&host, &gid, &vid)?;
        Ok(host.store().validate_version(&vid)?)
    })
    .await?;
    let errors = diagnostics.iter().filter(|d| d.is_error()).count();
    Ok(Json(json!({
        "diagnostics": diagnostics,
        "error_count": errors,
        "warning_count": diagnostics.len() - errors,
    })))
}

async fn duplicate_version(
    State(state): State<SharedState>,
    Path((gid, vid)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    require_admin(&state, &headers)?;
    let host = state.host.clone();
    let copy = blocking(move || {
        version_in_graph(&host, &gid, &vid)?;
        Ok(host.store().duplicate(&vid, host.clock().now())?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(VersionView::meta(&copy))).into_response())
}

async fn publish_version(
    State(state): State<SharedState>,
    Path((gid, vid)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Json<VersionView>> {
    require_admin(&state, &headers)?;
    let host = state.host.clone();
    let published = blocking(move || {
        version_in_graph(&host, &gid, &vid)?;
        Ok(host.store().publish(&vid)?)
    })
    .await?;
    Ok(Json(VersionView::meta(&published)))
}

// ---- bots ----

fn public_registration(reg: &BotRegistration) -> Value {
    let mut value = serde_json::to_value(reg).expect("registration serializes");
    if let Some(channel) = value.get_mut("channel").and_then(Value::as_object_mut) {
        channel.remove("token");
    }
    value
}

async fn get_bot(
    State(state): State<SharedState>,
    Path(bot_id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    let registration = require_bot(&state, &headers, &bot_id)?;
    Ok(Json(public_registration(&registration)))
}

async fn put_bot(
    State(state): State<SharedState>,
    Path(bot_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    require_admin(&state, &headers)?;
    let registration: BotRegistration = parse_body(&body)?;
    if registration.bot_id != bot_id {
        return Err(ApiError::bad_request(format!(
            "body bot_id {} does not match path {bot_id}",
            registration.bot_id
        )));
    }
    let host = state.host.clone();
    let runtime = blocking(move || Ok(host.register_bot(registration)?)).await?;
    Ok(Json(public_registration(&runtime.registration)))
}

#[derive(Debug, Deserialize)]
struct EventRange {
    from: Option<String>,
    to: Option<String>,
}

fn parse_instant(name: &str, value: &Option<String>) -> ApiResult<Option<DateTime<Utc>>> {
    value
        .as_deref()
        .map(|s| {
            DateTime::parse_from_rfc3339(s)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|e| ApiError::bad_request(format!("{name}: {e}")))
        })
        .transpose()
}

async fn export_events(
    State(state): State<SharedState>,
    Path(bot_id): Path<String>,
    Query(range): Query<EventRange>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    require_bot(&state, &headers, &bot_id)?;
    let from = parse_instant("from", &range.from)?;
    let to = parse_instant("to", &range.to)?;
    if let (Some(f), Some(t)) = (from, to) {
        if f > t {
            return Err(ApiError::bad_request("from is after to"));
        }
    }
    let host = state.host.clone();
    let ndjson = blocking(move || Ok(host.store().export_events(&bot_id, from, to)?)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], ndjson).into_response())
}

async fn get_session(
    State(state): State<SharedState>,
    Path((bot_id, uid)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    require_bot(&state, &headers, &bot_id)?;
    let host = state.host.clone();
    let session = blocking(move || Ok(host.session(&bot_id, &uid)?)).await?;
    match session {
        Some(s) => Ok(Json(serde_json::to_value(s).expect("session serializes"))),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "session_not_found", "no session for this user")),
    }
}

async fn reset_session(
    State(state): State<SharedState>,
    Path((bot_id, uid)): Path<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Json<Value>> {
    require_bot(&state, &headers, &bot_id)?;
    let host = state.host.clone();
    let (b, u) = (bot_id.clone(), uid.clone());
    let existed = blocking(move || Ok(host.reset_session(&b, &u)?)).await?;
    state.outbox.take(&bot_id, &uid);
    Ok(Json(json!({ "reset": existed })))
}

/// Routes check-in deliveries produced by a scheduler tick.
pub fn dispatch_proactive(state: &AppState, deliveries: Vec<Delivery>) {
    let regs: HashMap<String, BotRegistration> = deliveries
        .iter()
        .filter_map(|d| state.host.bot(&d.bot_id).map(|b| (d.bot_id.clone(), b.registration.clone())))
        .collect();
    for d in deliveries {
        if d.messages.is_empty() {
            continue;
        }
        match regs.get(&d.bot_id) {
            Some(reg) if reg.channel.kind == ChannelKind::Webhook => state.outbox.deliver(reg, d),
            Some(_) => state.outbox.push(&d.bot_id, &d.address, d.messages),
            None => {}
        }
    }
}

/// Runs scheduler ticks every `period` until the task is dropped.
pub async fn run_ticker(state: SharedState, period: std::time::Duration) {
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        let host = state.host.clone();
        match tokio::task::spawn_blocking(move || host.tick()).await {
            Ok(deliveries) => dispatch_proactive(&state, deliveries),
            Err(e) => tracing::error!(error = %e, "tick worker failed"),
        }
    }
}

pub fn app_state(host: Arc<Host>, admin_token: String) -> SharedState {
    Arc::new(AppState {
        host,
        admin_token,
        outbox: Outbox::new(reqwest::Client::new()),
    })
}
