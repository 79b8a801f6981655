//! JSON-over-HTTP service for the annotation studio: frame browsing,
//! validated annotation writes with revision checks, and model
//! suggestions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use waymark_core::dataset::{image_path, load_manifest, DatasetManifest, FrameRecord, ManifestStats, RgbImage, StpAnnotation};

use crate::pipeline::Pipeline;
use crate::HarnessError;

struct Store {
    manifest: DatasetManifest,
    revisions: BTreeMap<String, u64>,
}

pub struct AppState {
    manifest_path: PathBuf,
    dir: PathBuf,
    store: Mutex<Store>,
    /// One inference at a time per loaded model.
    pipeline: Option<Arc<Mutex<Pipeline>>>,
}

impl AppState {
    pub fn open(manifest_path: impl Into<PathBuf>, pipeline: Option<Pipeline>) -> Result<Arc<Self>, HarnessError> {
        let manifest_path = manifest_path.into();
        let manifest = load_manifest(&manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let revisions = manifest.frames.iter().map(|f| (f.frame_id.clone(), 0)).collect();
        Ok(Arc::new(Self {
            manifest_path,
            dir,
            store: Mutex::new(Store { manifest, revisions }),
            pipeline: pipeline.map(|p| Arc::new(Mutex::new(p))),
        }))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: String,
    pub game: String,
    pub width: u32,
    pub height: u32,
    pub annotations: usize,
    pub revision: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameView {
    pub frame: FrameRecord,
    pub revision: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationUpdate {
    pub annotations: Vec<StpAnnotation>,
    /// Revision the client last saw.
    pub revision: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stats {
    #[serde(flatten)]
    pub manifest: ManifestStats,
    pub edited_frames: usize,
    pub suggestions_available: bool,
}

#[derive(Debug, Deserialize)]
struct FrameFilter {
    game: Option<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown frame `{id}`"))
}

fn internal(e: impl std::fmt::Display) -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn projects(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let st = s.store.lock().expect("store lock");
    let name = s.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "project".into());
    Json(json!([{
        "name": name,
        "manifest": s.manifest_path,
        "provenance": st.manifest.provenance,
        "frames": st.manifest.frames.len(),
        "games": st.manifest.games(),
        "suggestions_available": s.pipeline.is_some(),
    }]))
}

async fn frames(State(s): State<Arc<AppState>>, Query(q): Query<FrameFilter>) -> Json<Vec<FrameSummary>> {
    let st = s.store.lock().expect("store lock");
    Json(
        st.manifest
            .frames
            .iter()
            .filter(|f| q.game.as_ref().is_none_or(|g| &f.game == g))
            .map(|f| FrameSummary {
                frame_id: f.frame_id.clone(),
                game: f.game.clone(),
                width: f.width,
                height: f.height,
                annotations: f.annotations.len(),
                revision: st.revisions[&f.frame_id],
            })
            .collect(),
    )
}

async fn frame(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let st = s.store.lock().expect("store lock");
    match st.manifest.frame(&id) {
        Some(f) => Json(FrameView { frame: f.clone(), revision: st.revisions[&id] }).into_response(),
        None => not_found(&id),
    }
}

async fn image(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let path = {
        let st = s.store.lock().expect("store lock");
        match st.manifest.frame(&id) {
            Some(f) => image_path(&s.dir, f),
            None => return not_found(&id),
        }
    };
    match fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => internal(format!("{}: {e}", path.display())),
    }
}

fn persist(path: &Path, manifest: &DatasetManifest) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    fs::write(&tmp, text + "\n")?;
    fs::rename(&tmp, path)
}

async fn put_annotations(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Json(body): Json<AnnotationUpdate>) -> Response {
    let mut st = s.store.lock().expect("store lock");
    let Some(pos) = st.manifest.frames.iter().position(|f| f.frame_id == id) else {
        return not_found(&id);
    };
    let current = st.revisions[&id];
    if body.revision != current {
        let msg = format!("stale revision {} for frame `{id}`; current revision is {current}", body.revision);
        return (StatusCode::CONFLICT, Json(json!({ "error": msg, "current_revision": current }))).into_response();
    }
    let mut updated = st.manifest.frames[pos].clone();
    updated.annotations = body.annotations;
    let violations = updated.violations();
    if !violations.is_empty() {
        return (StatusCode::BAD_REQUEST, Json(json!({ "error": "annotation rules violated", "errors": violations }))).into_response();
    }
    let previous = std::mem::replace(&mut st.manifest.frames[pos], updated.clone());
    if let Err(e) = persist(&s.manifest_path, &st.manifest) {
        st.manifest.frames[pos] = previous;
        return internal(e);
    }
    let revision = current + 1;
    st.revisions.insert(id, revision);
    Json(FrameView { frame: updated, revision }).into_response()
}

async fn suggest(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(pipeline) = s.pipeline.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no models loaded; start the service with --detector and --selector");
    };
    let path = {
        let st = s.store.lock().expect("store lock");
        match st.manifest.frame(&id) {
            Some(f) => image_path(&s.dir, f),
            None => return not_found(&id),
        }
    };
    let job = tokio::task::spawn_blocking(move || -> Result<_, HarnessError> {
        let img = RgbImage::load_png(&path)?;
        let p = pipeline.lock().expect("inference gate");
        p.suggest(&img)
    });
    match job.await {
        Ok(Ok(sug)) => Json(sug).into_response(),
        Ok(Err(e)) => internal(e),
        Err(e) => internal(e),
    }
}

async fn stats(State(s): State<Arc<AppState>>) -> Json<Stats> {
    let st = s.store.lock().expect("store lock");
    Json(Stats {
        manifest: st.manifest.stats(),
        edited_frames: st.revisions.values().filter(|&&r| r > 0).count(),
        suggestions_available: s.pipeline.is_some(),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/projects", get(projects))
        .route("/api/frames", get(frames))
        .route("/api/frames/{id}", get(frame))
        .route("/api/frames/{id}/image", get(image))
        .route("/api/frames/{id}/annotations", put(put_annotations))
        .route("/api/frames/{id}/suggest", post(suggest))
        .route("/api/stats", get(stats))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
