//! HTTP service for click-by-click annotation.
//!
//! A session walks the cluster centers of one frame. Every acknowledged
//! response is on disk before the reply is sent, and a finished session
//! writes the same pseudo-label file the oracle path would.
//!
//! Endpoints (JSON bodies):
//!
//! - `POST /sessions {frame_id}`
//! - `GET /sessions/{id}/next`
//! - `POST /sessions/{id}/label {point, class}`
//! - `POST /sessions/{id}/undo`
//! - `GET /sessions/{id}/progress`
//! - `GET /frames/{id}/classes`
//! - `GET /frames/{id}/points?center=<idx>&radius=<m>`

pub mod error;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use milliseg_core::clustering::{load_clustering, Clustering};
use milliseg_core::pipeline::RunLayout;
use milliseg_core::{DatasetManifest, Frame};
use serde::{Deserialize, Serialize};
use tracing::info;

pub use error::ApiError;
pub use session::{QueueItem, QueueOrder, SessionState};

/// Upper bound on points returned in one context payload.
pub const MAX_CONTEXT_POINTS: usize = 50_000;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub manifest: PathBuf,
    /// Run directory holding `clusters/`; sessions and labels are written there too.
    pub run_dir: PathBuf,
    /// Context radius around a clicked point, in meters.
    pub radius: f32,
    pub max_context: usize,
    pub order: QueueOrder,
}

impl ServerConfig {
    pub fn new(manifest: impl Into<PathBuf>, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            run_dir: run_dir.into(),
            radius: 2.0,
            max_context: MAX_CONTEXT_POINTS,
            order: QueueOrder::Cluster,
        }
    }
}

struct Session {
    state: SessionState,
    frame: Arc<Frame>,
    clustering: Arc<Clustering>,
}

/// Shared server state. Frames are loaded once and never mutated; each
/// session has its own lock, so mutations are serialized per session.
pub struct AnnoServer {
    cfg: ServerConfig,
    manifest: DatasetManifest,
    layout: RunLayout,
    frames: RwLock<HashMap<String, Arc<Frame>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AnnoServer {
    pub fn new(cfg: ServerConfig) -> milliseg_core::Result<Self> {
        let manifest = DatasetManifest::load(&cfg.manifest)?;
        Ok(Self {
            layout: RunLayout::new(&cfg.run_dir),
            cfg,
            manifest,
            frames: RwLock::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    fn sessions_dir(&self) -> PathBuf {
        self.layout.root().join("sessions")
    }

    fn frame(&self, frame_id: &str) -> Result<Arc<Frame>, ApiError> {
        if let Some(f) = self.frames.read().unwrap().get(frame_id) {
            return Ok(f.clone());
        }
        let frame = Arc::new(self.manifest.load_frame_by_id(frame_id)?);
        let mut cache = self.frames.write().unwrap();
        Ok(cache.entry(frame_id.to_string()).or_insert(frame).clone())
    }

    fn clustering(&self, frame_id: &str) -> Result<Option<Clustering>, ApiError> {
        let path = self.layout.clustering(frame_id);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_clustering(&path)?))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    /// Creates a session, or reopens the persisted one for the same frame.
    pub fn create_session(&self, frame_id: &str) -> Result<Progress, ApiError> {
        let frame = self.frame(frame_id)?;
        let clustering = self
            .clustering(frame_id)?
            .ok_or_else(|| ApiError::MissingClustering(frame_id.to_string()))?;
        if clustering.len() != frame.len() {
            return Err(ApiError::Internal(format!(
                "clustering of {frame_id} covers {} points, frame has {}",
                clustering.len(),
                frame.len()
            )));
        }
        let id = session::session_id_for(frame_id);
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(s) = sessions.get(&id) {
            return Ok(Progress::of(&s.lock().unwrap().state));
        }
        let dir = self.sessions_dir();
        let state = match session::load_session(&dir, &id)? {
            Some(s) => {
                info!(session = %id, cursor = s.cursor(), "resuming session");
                s
            }
            None => {
                let s = SessionState::new(frame_id, &frame, &clustering, self.cfg.order);
                session::save_session(&dir, &s)?;
                s
            }
        };
        let s = Session {
            state,
            frame,
            clustering: Arc::new(clustering),
        };
        // A crash between the final state write and the label write leaves no labels.
        if s.state.is_done() && !self.layout.labels(frame_id).exists() {
            self.write_labels(&s)?;
        }
        let progress = Progress::of(&s.state);
        sessions.insert(id, Arc::new(Mutex::new(s)));
        Ok(progress)
    }

    pub fn next_click(&self, id: &str) -> Result<NextClick, ApiError> {
        let session = self.session(id)?;
        let s = session.lock().unwrap();
        let (cursor, k) = (s.state.cursor(), s.state.k());
        Ok(match s.state.current() {
            None => NextClick {
                done: true,
                cursor,
                k,
                point: None,
                context: Vec::new(),
            },
            Some(item) => {
                let context = context_points(
                    &s.frame,
                    Some(&s.clustering),
                    item.point,
                    self.cfg.radius,
                    self.cfg.max_context,
                );
                NextClick {
                    done: false,
                    cursor,
                    k,
                    point: Some(PointPayload::new(&s.frame, Some(&s.clustering), item.point)),
                    context,
                }
            }
        })
    }

    pub fn submit_label(&self, id: &str, point: u32, class: u32) -> Result<Progress, ApiError> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        s.state.check_submit(point, class, self.num_classes())?;
        let mut next = s.state.clone();
        next.responses.push((point, class));
        session::save_session(&self.sessions_dir(), &next)?;
        s.state = next;
        if s.state.is_done() {
            self.write_labels(&s)?;
        }
        Ok(Progress::of(&s.state))
    }

    pub fn undo(&self, id: &str) -> Result<Progress, ApiError> {
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        if s.state.responses.is_empty() {
            return Err(ApiError::NothingToUndo);
        }
        let was_done = s.state.is_done();
        let mut next = s.state.clone();
        next.responses.pop();
        session::save_session(&self.sessions_dir(), &next)?;
        s.state = next;
        if was_done {
            let path = self.layout.labels(&s.state.frame_id);
            if path.exists() {
                std::fs::remove_file(&path)?;
            }
        }
        Ok(Progress::of(&s.state))
    }

    pub fn progress(&self, id: &str) -> Result<Progress, ApiError> {
        let session = self.session(id)?;
        let s = session.lock().unwrap();
        Ok(Progress::of(&s.state))
    }

    pub fn classes(&self, frame_id: &str) -> Result<Classes, ApiError> {
        self.manifest.find(frame_id)?;
        Ok(Classes {
            frame_id: frame_id.to_string(),
            classes: self
                .manifest
                .class_names
                .iter()
                .enumerate()
                .map(|(id, name)| ClassEntry {
                    id: id as u32,
                    name: name.clone(),
                })
                .collect(),
        })
    }

    pub fn points(&self, frame_id: &str, q: &PointsQuery) -> Result<Vec<PointPayload>, ApiError> {
        let frame = self.frame(frame_id)?;
        let clustering = self.clustering(frame_id)?;
        let clustering = clustering.filter(|c| c.len() == frame.len());
        match q.center {
            Some(center) => {
                if center as usize >= frame.len() {
                    return Err(ApiError::InvalidPoint {
                        index: center,
                        points: frame.len(),
                    });
                }
                let radius = q.radius.unwrap_or(self.cfg.radius);
                Ok(context_points(&frame, clustering.as_ref(), center, radius, self.cfg.max_context))
            }
            None => {
                let all: Vec<u32> = (0..frame.len() as u32).collect();
                Ok(downsample(&all, None, self.cfg.max_context)
                    .into_iter()
                    .map(|i| PointPayload::new(&frame, clustering.as_ref(), i))
                    .collect())
            }
        }
    }

    fn write_labels(&self, s: &Session) -> Result<(), ApiError> {
        let labels = s.state.pseudo_labels(&s.frame, &s.clustering, self.num_classes())?;
        session::write_labels(&self.layout.labels(&s.state.frame_id), &labels)?;
        info!(frame = %s.state.frame_id, "session complete, pseudo-labels written");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPayload {
    pub index: u32,
    pub xyz: [f32; 3],
    /// Absent when the frame has no clustering yet.
    pub cluster: Option<u32>,
}

impl PointPayload {
    fn new(frame: &Frame, clustering: Option<&Clustering>, index: u32) -> Self {
        Self {
            index,
            xyz: frame.points()[index as usize],
            cluster: clustering.map(|c| c.assignments()[index as usize]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextClick {
    pub done: bool,
    pub cursor: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<PointPayload>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<PointPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub session_id: String,
    pub frame_id: String,
    pub cursor: usize,
    pub k: usize,
    pub done: bool,
}

impl Progress {
    fn of(s: &SessionState) -> Self {
        Self {
            session_id: s.session_id.clone(),
            frame_id: s.frame_id.clone(),
            cursor: s.cursor(),
            k: s.k(),
            done: s.is_done(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classes {
    pub frame_id: String,
    pub classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub frame_id: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Label {
    pub point: u32,
    pub class: u32,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PointsQuery {
    pub center: Option<u32>,
    pub radius: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointsBody {
    pub frame_id: String,
    pub points: Vec<PointPayload>,
}

/// The clicked point, its cluster, and everything within `radius`, thinned
/// to at most `max` points. The clicked point is always first.
pub fn context_points(
    frame: &Frame,
    clustering: Option<&Clustering>,
    center: u32,
    radius: f32,
    max: usize,
) -> Vec<PointPayload> {
    let pts = frame.points();
    let c = pts[center as usize];
    let r2 = radius * radius;
    let cluster = clustering.map(|cl| cl.assignments()[center as usize]);
    let picked: Vec<u32> = (0..pts.len() as u32)
        .filter(|&i| {
            let p = pts[i as usize];
            let near = (0..3).map(|j| (p[j] - c[j]).powi(2)).sum::<f32>() <= r2;
            let same = match (clustering, cluster) {
                (Some(cl), Some(id)) => cl.assignments()[i as usize] == id,
                _ => false,
            };
            near || same
        })
        .collect();
    downsample(&picked, Some(center), max)
        .into_iter()
        .map(|i| PointPayload::new(frame, clustering, i))
        .collect()
}

/// Evenly strided subset of `idx` of size at most `max`, with `keep` in front.
fn downsample(idx: &[u32], keep: Option<u32>, max: usize) -> Vec<u32> {
    let rest: Vec<u32> = idx.iter().copied().filter(|&i| Some(i) != keep).collect();
    let room = max.saturating_sub(keep.is_some() as usize);
    let mut out: Vec<u32> = keep.into_iter().collect();
    if rest.len() <= room {
        out.extend(rest);
    } else {
        out.extend((0..room).map(|j| rest[j * rest.len() / room]));
    }
    out
}

type Shared = Arc<AnnoServer>;

async fn create_handler(
    State(s): State<Shared>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<Progress>), ApiError> {
    Ok((StatusCode::CREATED, Json(s.create_session(&body.frame_id)?)))
}

async fn next_handler(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<NextClick>, ApiError> {
    Ok(Json(s.next_click(&id)?))
}

async fn label_handler(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<Label>,
) -> Result<Json<Progress>, ApiError> {
    Ok(Json(s.submit_label(&id, body.point, body.class)?))
}

async fn undo_handler(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Progress>, ApiError> {
    Ok(Json(s.undo(&id)?))
}

async fn progress_handler(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Progress>, ApiError> {
    Ok(Json(s.progress(&id)?))
}

async fn classes_handler(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Classes>, ApiError> {
    Ok(Json(s.classes(&id)?))
}

async fn points_handler(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<PointsQuery>,
) -> Result<Json<PointsBody>, ApiError> {
    let points = s.points(&id, &q)?;
    Ok(Json(PointsBody { frame_id: id, points }))
}

pub fn router(server: Arc<AnnoServer>) -> Router {
    Router::new()
        .route("/sessions", post(create_handler))
        .route("/sessions/{id}/next", get(next_handler))
        .route("/sessions/{id}/label", post(label_handler))
        .route("/sessions/{id}/undo", post(undo_handler))
        .route("/sessions/{id}/progress", get(progress_handler))
        .route("/frames/{id}/classes", get(classes_handler))
        .route("/frames/{id}/points", get(points_handler))
        .with_state(server)
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_with_shutdown(
    listener: tokio::net::TcpListener,
    server: Arc<AnnoServer>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(server))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(cfg: ServerConfig, addr: SocketAddr) -> Result<(), Box<dyn std::error::Error>> {
    let server = Arc::new(AnnoServer::new(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(addr = %listener.local_addr()?, "annotation server listening");
    serve_with_shutdown(listener, server, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
