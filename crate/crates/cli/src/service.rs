//! HTTP service for live sessions. Sessions live in memory; a conversation
//! becomes durable when it is completed and appended to the FITS output.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fits_core::bots::{BotTurnOutput, Responder};
use fits_core::data::{append_fits, Conversation, FeedbackRecord, IdGen, Split, TaskDefinition};
use fits_core::protocol::{start_session, Budget, ProtocolConfig, SessionState};
use fits_core::Error as CoreError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub world: PathBuf,
    pub bot: PathBuf,
    pub budget: Budget,
    /// Completed conversations are appended here.
    pub out: PathBuf,
    /// Live sessions are written here every `snapshot_every`.
    pub snapshot: Option<PathBuf>,
    pub snapshot_every: Duration,
    pub version: String,
    pub seed: u64,
}

impl ServiceConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        for (what, p) in [("world", &self.world), ("bot", &self.bot)] {
            if !p.exists() {
                anyhow::bail!("{what} path {} does not exist", p.display());
            }
        }
        match self.out.parent() {
            Some(dir) if !dir.as_os_str().is_empty() && !dir.exists() => {
                anyhow::bail!("output directory {} does not exist", dir.display())
            }
            _ => Ok(()),
        }
    }
}

type Session = Arc<Mutex<SessionState>>;

pub struct AppState {
    tasks: Vec<TaskDefinition>,
    bot: Arc<dyn Responder + Send + Sync>,
    protocol: ProtocolConfig,
    sessions: StdMutex<HashMap<String, Session>>,
    ids: StdMutex<IdGen>,
    rng: StdMutex<ChaCha8Rng>,
    out: PathBuf,
    out_lock: StdMutex<()>,
    version: String,
}

impl AppState {
    pub fn new(
        tasks: Vec<TaskDefinition>,
        bot: Arc<dyn Responder + Send + Sync>,
        budget: Budget,
        out: PathBuf,
        version: impl Into<String>,
        seed: u64,
    ) -> Self {
        AppState {
            tasks,
            bot,
            protocol: ProtocolConfig { budget, require_feedback: true },
            sessions: StdMutex::new(HashMap::new()),
            ids: StdMutex::new(IdGen::seeded(seed)),
            rng: StdMutex::new(ChaCha8Rng::seed_from_u64(seed)),
            out,
            out_lock: StdMutex::new(()),
            version: version.into(),
        }
    }

    fn session(&self, id: &str) -> Result<Session, ApiError> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown conversation {id}")))
    }

    /// Writes every live session as one JSON array.
    pub async fn snapshot(&self, path: &Path) -> anyhow::Result<()> {
        let sessions: Vec<Session> = self.sessions.lock().expect("sessions lock").values().cloned().collect();
        let mut states = Vec::with_capacity(sessions.len());
        for s in sessions {
            let s = s.lock().await;
            if !s.conversation.completed {
                states.push(s.clone());
            }
        }
        states.sort_by(|a, b| a.conversation.id.cmp(&b.conversation.id));
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&states)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::NotFound(_) => StatusCode::NOT_FOUND,
            CoreError::Protocol(_) => StatusCode::CONFLICT,
            CoreError::Invalid { .. } | CoreError::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NewConversation {
    pub task_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConversationCreated {
    pub conversation_id: String,
    pub task: TaskDefinition,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Message {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub accepted: bool,
    /// True once the turn budget is spent; only completion remains.
    pub terminated: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Completion {
    pub rating: u8,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Completed {
    pub conversation_id: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/conversations", post(create_conversation))
        .route("/conversations/{id}", get(get_conversation))
        .route("/conversations/{id}/message", post(message))
        .route("/conversations/{id}/feedback", post(feedback))
        .route("/conversations/{id}/complete", post(complete))
        .with_state(state)
}

/// Two distinct random tasks (fewer if the world has fewer).
async fn list_tasks(State(app): State<Arc<AppState>>) -> Json<Vec<TaskDefinition>> {
    let mut rng = app.rng.lock().expect("rng lock");
    Json(app.tasks.choose_multiple(&mut *rng, 2).cloned().collect())
}

async fn create_conversation(
    State(app): State<Arc<AppState>>,
    Json(req): Json<NewConversation>,
) -> Result<Json<ConversationCreated>, ApiError> {
    let id = app.ids.lock().expect("id lock").next_id();
    let s = start_session(&app.tasks, &req.task_id, id.clone(), app.protocol)?;
    let task = s.task.clone();
    app.sessions.lock().expect("sessions lock").insert(id.clone(), Arc::new(Mutex::new(s)));
    Ok(Json(ConversationCreated { conversation_id: id, task }))
}

async fn get_conversation(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Conversation>, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().await;
    Ok(Json(s.conversation.clone()))
}

/// Adds the human message and runs the bot. Inference runs off the async
/// workers; the session stays locked so its operations are serialized.
async fn message(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<Message>,
) -> Result<Json<BotTurnOutput>, ApiError> {
    let s = app.session(&id)?;
    let mut guard = s.lock().await;
    let mut next = guard.clone();
    next.human_message(&req.text)?;
    let bot = app.bot.clone();
    let (next, out) = tokio::task::spawn_blocking(move || {
        let out = next.bot_step(bot.as_ref());
        (next, out)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let out = out?;
    *guard = next;
    Ok(Json(out))
}

async fn feedback(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(record): Json<FeedbackRecord>,
) -> Result<Json<FeedbackAck>, ApiError> {
    let s = app.session(&id)?;
    let mut s = s.lock().await;
    s.give_feedback(record)?;
    Ok(Json(FeedbackAck { accepted: true, terminated: s.is_terminated() }))
}

async fn complete(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<Completion>,
) -> Result<Json<Completed>, ApiError> {
    let s = app.session(&id)?;
    let mut guard = s.lock().await;
    let mut next = guard.clone();
    let conv = next.complete(req.rating)?;
    {
        let _w = app.out_lock.lock().expect("output lock");
        append_fits(&app.out, &app.version, Split::Train, &next.task, &conv)?;
    }
    *guard = next;
    Ok(Json(Completed { conversation_id: conv.id }))
}

/// Binds and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, cfg: &ServiceConfig) -> anyhow::Result<()> {
    if let Some(path) = cfg.snapshot.clone() {
        let app = state.clone();
        let every = cfg.snapshot_every;
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                if let Err(e) = app.snapshot(&path).await {
                    eprintln!("snapshot failed: {e}");
                }
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
