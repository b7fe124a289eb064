//! JSON over HTTP. Every route under `/api` requires an `X-User` header
//! naming the caller; unknown users are registered on their first write.
//!
//! | method | path                            | body                | success |
//! |--------|---------------------------------|---------------------|---------|
//! | GET    | /api/tickets?limit=&offset=     |                     | 200     |
//! | GET    | /api/tickets/{id}               |                     | 200     |
//! | POST   | /api/tickets/{id}/comments      | `{"body": "..."}`   | 201     |
//! | POST   | /api/tickets/{id}/next-action   | `{"body": "..."}`   | 201     |
//! | PUT    | /api/follows/{id}               | `{"following": b}`  | 200     |
//! | GET    | /api/follows                    |                     | 200     |
//! | POST   | /api/scoring/run                |                     | 200     |
//! | GET    | /api/schema                     |                     | 200     |
//!
//! Errors are `{"error": {"code": "...", "message": "..."}}`.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use escalate_core::features::{FeatureCategory, FeatureExtractor, FeatureSchema};
use escalate_core::model::{timestamp, Comment, NextAction, TicketRecord};
use escalate_core::scoring::{estimate_risk, RiskPoint, RiskSnapshot};
use escalate_core::store::{FollowState, StoreError, TimelineEntry};
use escalate_core::{RepositorySnapshot, Store, TicketState, Timestamp};

use crate::runner::{Clock, RunError, RunSummary, ScoringRunner};

pub const USER_HEADER: &str = "x-user";

#[derive(Clone)]
pub struct AppState {
    pub repo: Arc<RepositorySnapshot>,
    pub store: Arc<Store>,
    pub runner: Arc<ScoringRunner>,
    pub clock: Clock,
    schema: Arc<FeatureSchema>,
}

impl AppState {
    pub fn new(store: Arc<Store>, runner: Arc<ScoringRunner>, clock: Clock) -> Self {
        AppState {
            repo: Arc::clone(store.repository()),
            store,
            runner,
            clock,
            schema: Arc::new(FeatureSchema::standard()),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn ticket_not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown ticket {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            StoreError::Validation(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_error", e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text())
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::NoModel => ApiError::new(StatusCode::CONFLICT, "no_model", e.to_string()),
            RunError::Failed(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "scoring_failed", e.to_string()),
        }
    }
}

/// The caller named by the `X-User` header.
pub struct UserId(pub String);

impl<S: Send + Sync> FromRequestParts<S> for UserId {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, ApiError> {
        let missing = || ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "X-User header required");
        let value = parts.headers.get(USER_HEADER).ok_or_else(missing)?;
        let user = value.to_str().map_err(|_| missing())?.trim();
        if user.is_empty() {
            return Err(missing());
        }
        Ok(UserId(user.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverviewRow {
    pub ticket_id: String,
    pub customer_id: String,
    pub title: String,
    pub severity: u8,
    pub state: TicketState,
    pub risk: Option<f64>,
    pub delta: Option<f64>,
    pub estimated_risk: Option<f64>,
    pub current_next_action: Option<String>,
    pub followed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub category: FeatureCategory,
    pub features: Vec<FeatureValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketDetail {
    pub ticket: TicketRecord,
    #[serde(with = "timestamp")]
    pub features_as_of: Timestamp,
    pub features: Vec<FeatureGroup>,
    pub estimated_risk: f64,
    pub latest_risk: Option<RiskSnapshot>,
    pub risk_history: Vec<RiskPoint>,
    pub timeline: Vec<TimelineEntry>,
    pub current_next_action: Option<NextAction>,
    pub followers: Vec<String>,
    pub followed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowedTicket {
    pub ticket_id: String,
    pub title: String,
    pub state: TicketState,
    pub risk: Option<f64>,
    pub delta: Option<f64>,
    #[serde(with = "timestamp")]
    pub followed_at: Timestamp,
}

#[derive(Debug, Deserialize)]
pub struct Page {
    limit: Option<usize>,
    offset: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct BodyText {
    body: String,
}

#[derive(Debug, Deserialize)]
pub struct FollowBody {
    following: bool,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/tickets", get(list_tickets))
        .route("/api/tickets/{id}", get(ticket_detail))
        .route("/api/tickets/{id}/comments", post(add_comment))
        .route("/api/tickets/{id}/next-action", post(add_next_action))
        .route("/api/follows", get(list_follows))
        .route("/api/follows/{id}", put(set_follow))
        .route("/api/scoring/run", post(run_scoring))
        .route("/api/schema", get(schema))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn list_tickets(
    State(app): State<AppState>,
    UserId(user): UserId,
    Query(page): Query<Page>,
) -> Result<Json<Vec<OverviewRow>>, ApiError> {
    let view = app.store.view();
    let latest: HashMap<&str, &RiskSnapshot> = view
        .latest_run()
        .map(|r| r.snapshots.iter().map(|s| (s.ticket_id.as_str(), s)).collect())
        .unwrap_or_default();
    let mut rows: Vec<OverviewRow> = app
        .repo
        .open_tickets()
        .map(|t| {
            let snap = latest.get(t.ticket_id.as_str());
            OverviewRow {
                ticket_id: t.ticket_id.clone(),
                customer_id: t.customer_id.clone(),
                title: t.title.clone(),
                severity: t.severity,
                state: t.state,
                risk: snap.map(|s| s.risk),
                delta: snap.and_then(|s| s.delta),
                estimated_risk: snap.map(|s| s.estimated_risk),
                current_next_action: view.current_next_action(&t.ticket_id).map(|a| a.body.clone()),
                followed: view.is_following(&user, &t.ticket_id),
            }
        })
        .collect();
    drop(view);
    // unscored rows sink below scored ones
    rows.sort_by(|a, b| {
        let ra = a.risk.unwrap_or(f64::NEG_INFINITY);
        let rb = b.risk.unwrap_or(f64::NEG_INFINITY);
        rb.total_cmp(&ra).then_with(|| a.ticket_id.cmp(&b.ticket_id))
    });
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(usize::MAX);
    Ok(Json(rows.into_iter().skip(offset).take(limit).collect()))
}

async fn ticket_detail(
    State(app): State<AppState>,
    UserId(user): UserId,
    Path(id): Path<String>,
) -> Result<Json<TicketDetail>, ApiError> {
    let ticket = app.repo.get(&id).ok_or_else(|| ApiError::ticket_not_found(&id))?;
    let view = app.store.view();
    let latest = view.latest_snapshot(&id).cloned();
    let fv = match &latest {
        Some(s) => s.features.clone(),
        None => FeatureExtractor::new(&app.repo)
            .ticket_features(ticket, app.runner.as_of().max(ticket.created_at))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "feature_error", e.to_string()))?,
    };
    let features = fv
        .grouped(&app.schema)
        .into_iter()
        .map(|(category, values)| FeatureGroup {
            category,
            features: values.into_iter().map(|(name, value)| FeatureValue { name, value }).collect(),
        })
        .collect();
    Ok(Json(TicketDetail {
        ticket: ticket.clone(),
        features_as_of: fv.as_of,
        features,
        estimated_risk: latest.as_ref().map(|s| s.estimated_risk).unwrap_or_else(|| estimate_risk(&fv)),
        risk_history: view.risk_history(&id),
        timeline: view.weave(&ticket.events, &id),
        current_next_action: view.current_next_action(&id).cloned(),
        followers: view.followers(&id),
        followed: view.is_following(&user, &id),
        latest_risk: latest,
    }))
}

fn require_ticket(app: &AppState, id: &str) -> Result<(), ApiError> {
    match app.repo.get(id) {
        Some(_) => Ok(()),
        None => Err(ApiError::ticket_not_found(id)),
    }
}

async fn add_comment(
    State(app): State<AppState>,
    UserId(user): UserId,
    Path(id): Path<String>,
    body: Result<Json<BodyText>, JsonRejection>,
) -> Result<(StatusCode, Json<Comment>), ApiError> {
    require_ticket(&app, &id)?;
    let Json(body) = body?;
    app.store.ensure_user(&user, &user)?;
    let comment = app.store.add_comment(&id, &user, &body.body, (app.clock)())?;
    Ok((StatusCode::CREATED, Json(comment)))
}

async fn add_next_action(
    State(app): State<AppState>,
    UserId(user): UserId,
    Path(id): Path<String>,
    body: Result<Json<BodyText>, JsonRejection>,
) -> Result<(StatusCode, Json<NextAction>), ApiError> {
    require_ticket(&app, &id)?;
    let Json(body) = body?;
    app.store.ensure_user(&user, &user)?;
    let action = app.store.add_next_action(&id, &user, &body.body, (app.clock)())?;
    Ok((StatusCode::CREATED, Json(action)))
}

async fn set_follow(
    State(app): State<AppState>,
    UserId(user): UserId,
    Path(id): Path<String>,
    body: Result<Json<FollowBody>, JsonRejection>,
) -> Result<Json<FollowState>, ApiError> {
    require_ticket(&app, &id)?;
    let Json(body) = body?;
    app.store.ensure_user(&user, &user)?;
    Ok(Json(app.store.set_follow(&user, &id, body.following, (app.clock)())?))
}

async fn list_follows(State(app): State<AppState>, UserId(user): UserId) -> Json<Vec<FollowedTicket>> {
    let view = app.store.view();
    let rows = view
        .follows(&user)
        .into_iter()
        .filter_map(|m| {
            let t = app.repo.get(&m.ticket_id)?;
            let snap = view.latest_snapshot(&m.ticket_id);
            Some(FollowedTicket {
                ticket_id: m.ticket_id,
                title: t.title.clone(),
                state: t.state,
                risk: snap.map(|s| s.risk),
                delta: snap.and_then(|s| s.delta),
                followed_at: m.followed_at,
            })
        })
        .collect();
    Json(rows)
}

async fn run_scoring(State(app): State<AppState>, UserId(_): UserId) -> Result<Json<RunSummary>, ApiError> {
    Ok(Json(app.runner.trigger().await?))
}

async fn schema(State(app): State<AppState>, UserId(_): UserId) -> Response {
    (
        [(axum::http::header::CONTENT_TYPE, "application/json")],
        app.schema.to_json(),
    )
        .into_response()
}
