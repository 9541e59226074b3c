//! Session HTTP service. Each session keeps its own conversation; asks on
//! one session are serialized, sessions run independently.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use crate::datamodel::{Conversation, Turn};
use crate::error::{Error, Stage};
use crate::orchestrator::{Pipeline, StageTimings, TurnError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCard {
    pub display_id: String,
    pub text: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub turn: usize,
    pub question: String,
    pub reformulation: String,
    pub evidence: Vec<EvidenceCard>,
    pub answers: Vec<String>,
    pub timings_ms: StageTimings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub turns: Vec<AskResponse>,
}

#[derive(Debug)]
struct Session {
    conversation: Conversation,
    turns: Vec<AskResponse>,
}

#[derive(Clone)]
pub struct AppState {
    pipeline: Pipeline,
    sessions: Arc<RwLock<HashMap<String, Arc<Mutex<Session>>>>>,
}

impl AppState {
    pub fn new(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            sessions: Arc::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<Stage>,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Upstream { stage: Option<Stage>, message: String },
    Internal(String),
}

impl From<TurnError> for ApiError {
    fn from(e: TurnError) -> Self {
        match &e.error {
            Error::Stage { .. } | Error::Gateway(_) => ApiError::Upstream {
                stage: e.stage(),
                message: e.error.to_string(),
            },
            _ => ApiError::Internal(e.error.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, stage) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m, None),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m, None),
            ApiError::Upstream { stage, message } => (StatusCode::BAD_GATEWAY, message, stage),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m, None),
        };
        (status, Json(ErrorBody { error, stage })).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/questions", post(ask))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "config_hash": state.pipeline.config_hash(),
        "corpus_size": state.pipeline.index().len(),
    }))
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

async fn create_session(State(state): State<AppState>) -> (StatusCode, Json<Created>) {
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session {
        conversation: Conversation {
            conv_id: id.clone(),
            domain: String::new(),
            turns: Vec::new(),
        },
        turns: Vec::new(),
    };
    state
        .sessions
        .write()
        .await
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    (StatusCode::CREATED, Json(Created { session_id: id }))
}

async fn session(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    state
        .sessions
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let s = session(&state, &id).await?;
    let s = s.lock().await;
    Ok(Json(SessionView {
        session_id: id,
        turns: s.turns.clone(),
    }))
}

#[derive(Deserialize)]
pub struct Question {
    pub text: String,
}

async fn ask(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(q): Json<Question>,
) -> Result<Json<AskResponse>, ApiError> {
    let text = q.text.trim();
    if text.is_empty() {
        return Err(ApiError::BadRequest("question text is empty".into()));
    }
    let s = session(&state, &id).await?;
    let mut s = s.lock().await;
    let mut conversation = s.conversation.clone();
    conversation.turns.push(Turn {
        index: conversation.turns.len(),
        question: text.to_string(),
        gold_answers: Vec::new(),
        question_entities: Vec::new(),
        observed_answer: None,
    });
    let i = conversation.turns.len() - 1;
    let result = state.pipeline.run_turn(&conversation, i).await?;
    let (selection, trace) = (&result.selection, &result.trace);
    let response = AskResponse {
        turn: i,
        question: text.to_string(),
        reformulation: trace.reformulation.clone().unwrap_or_default(),
        evidence: selection
            .selected
            .iter()
            .zip(&selection.selected_ids)
            .map(|(e, d)| EvidenceCard {
                display_id: d.clone(),
                text: e.text.clone(),
                source: e.source.clone(),
            })
            .collect(),
        answers: result.answers.as_slice().to_vec(),
        timings_ms: trace.timings_ms,
    };
    conversation.turns[i].observed_answer = Some(response.answers.first().cloned().unwrap_or_default());
    s.conversation = conversation;
    s.turns.push(response.clone());
    Ok(Json(response))
}

/// Binds and serves until the process is stopped.
pub async fn serve(pipeline: Pipeline, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(pipeline))).await
}
