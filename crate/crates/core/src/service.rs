//! HTTP API for the annotation workflow.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/api/scenes` | `[{id, n_images, annotated}]` |
//! | GET | `/api/scenes/{id}/cloud?max_points=N` | `.evbt` f32 N×3 |
//! | GET | `/api/scenes/{id}/images` | image manifest |
//! | GET | `/api/scenes/{id}/annotation` | stored record |
//! | POST | `/api/scenes/{id}/annotation` | submission → record |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationStore, AnnotationSubmission, StoreError};
use crate::colmap::{read_sparse_model, scene_points, ColmapError, ModelFormat, SparseScene};
use crate::config::ServiceConfig;
use crate::pairs::derive_seed;
use crate::recon::{PointCloud, Unit};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}: no COLMAP model found")]
    NoModel(PathBuf),
    #[error("duplicate scene id {0:?}")]
    DuplicateScene(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scene {id}: {source}")]
    Model { id: String, source: ColmapError },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct SceneEntry {
    pub id: String,
    pub model_dir: PathBuf,
    pub images_dir: Option<PathBuf>,
    pub scene: SparseScene,
}

fn has_model(dir: &Path) -> bool {
    dir.join("cameras.bin").is_file() || dir.join("cameras.txt").is_file()
}

/// Model directory of a scene: itself, `sparse/` or `sparse/0/`.
pub fn find_model_dir(dir: &Path) -> Option<PathBuf> {
    [dir.to_path_buf(), dir.join("sparse"), dir.join("sparse").join("0")]
        .into_iter()
        .find(|d| has_model(d))
}

fn load_entry(dir: &Path) -> Result<SceneEntry, ServiceError> {
    let id = dir
        .canonicalize()
        .ok()
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let model_dir = find_model_dir(dir).ok_or_else(|| ServiceError::NoModel(dir.to_path_buf()))?;
    let scene = read_sparse_model(&model_dir, ModelFormat::Auto).map_err(|source| ServiceError::Model { id: id.clone(), source })?;
    let images = dir.join("images");
    Ok(SceneEntry {
        id,
        model_dir,
        images_dir: images.is_dir().then_some(images),
        scene,
    })
}

/// Each root is either a scene directory or a directory of scenes.
pub fn discover_scenes(roots: &[PathBuf]) -> Result<Vec<SceneEntry>, ServiceError> {
    let mut out: BTreeMap<String, SceneEntry> = BTreeMap::new();
    for root in roots {
        let dirs = if find_model_dir(root).is_some() {
            vec![root.clone()]
        } else {
            let rd = std::fs::read_dir(root).map_err(|source| ServiceError::Io {
                path: root.display().to_string(),
                source,
            })?;
            let mut dirs: Vec<PathBuf> = rd
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.is_dir() && find_model_dir(p).is_some())
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                return Err(ServiceError::NoModel(root.clone()));
            }
            dirs
        };
        for d in dirs {
            let e = load_entry(&d)?;
            if out.contains_key(&e.id) {
                return Err(ServiceError::DuplicateScene(e.id));
            }
            out.insert(e.id.clone(), e);
        }
    }
    Ok(out.into_values().collect())
}

pub struct AppState {
    pub scenes: BTreeMap<String, Arc<SceneEntry>>,
    pub store: AnnotationStore,
    pub cfg: ServiceConfig,
}

impl AppState {
    pub fn new(scenes: Vec<SceneEntry>, state_dir: &Path, cfg: ServiceConfig) -> Result<Self, ServiceError> {
        Ok(Self {
            scenes: scenes.into_iter().map(|s| (s.id.clone(), Arc::new(s))).collect(),
            store: AnnotationStore::open(state_dir)?,
            cfg,
        })
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneSummary {
    pub id: String,
    pub n_images: usize,
    pub annotated: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageEntry {
    pub id: u32,
    pub name: String,
    pub camera_id: u32,
    pub width: u64,
    pub height: u64,
    /// Relative to the scene directory, when the file exists.
    pub file: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageManifest {
    pub scene: String,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    pub error: String,
    pub field: Option<String>,
}

fn api_error(status: StatusCode, error: impl Into<String>, field: Option<&str>) -> Response {
    (
        status,
        Json(ApiError {
            error: error.into(),
            field: field.map(str::to_string),
        }),
    )
        .into_response()
}

fn scene_or_404(st: &AppState, id: &str) -> Result<Arc<SceneEntry>, Response> {
    st.scenes
        .get(id)
        .cloned()
        .ok_or_else(|| api_error(StatusCode::NOT_FOUND, format!("unknown scene {id:?}"), None))
}

async fn list_scenes(State(st): State<Arc<AppState>>) -> Json<Vec<SceneSummary>> {
    Json(
        st.scenes
            .values()
            .map(|s| SceneSummary {
                id: s.id.clone(),
                n_images: s.scene.images.len(),
                annotated: st.store.is_annotated(&s.id),
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct CloudQuery {
    max_points: Option<usize>,
}

/// Seeded uniform downsample of the sparse points as an f32 N×3 tensor.
pub fn cloud_payload(scene_id: &str, scene: &SparseScene, max_points: usize, seed: u64) -> Vec<u8> {
    let points = scene_points(scene).into_iter().filter(|p| p.iter().all(|v| v.is_finite())).collect();
    let cloud = PointCloud { points, unit: Unit::Model }.subsample(max_points, derive_seed(seed, scene_id));
    let data: Vec<f32> = cloud.points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Tensor::from_f32(vec![cloud.points.len(), 3], data).expect("shape matches").encode()
}

async fn get_cloud(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<CloudQuery>) -> Response {
    let entry = match scene_or_404(&st, &id) {
        Ok(e) => e,
        Err(r) => return r,
    };
    let max_points = q.max_points.unwrap_or(st.cfg.max_points);
    if max_points == 0 {
        return api_error(StatusCode::BAD_REQUEST, "max_points must be at least 1", Some("max_points"));
    }
    let body = cloud_payload(&id, &entry.scene, max_points, st.cfg.seed);
    ([(header::CONTENT_TYPE, "application/octet-stream")], body).into_response()
}

pub fn image_manifest(entry: &SceneEntry) -> ImageManifest {
    let images = entry
        .scene
        .images
        .values()
        .map(|img| {
            let cam = entry.scene.cameras.get(&img.camera_id);
            let file = entry
                .images_dir
                .as_ref()
                .filter(|d| d.join(&img.name).is_file())
                .map(|_| format!("images/{}", img.name));
            ImageEntry {
                id: img.image_id,
                name: img.name.clone(),
                camera_id: img.camera_id,
                width: cam.map_or(0, |c| c.width),
                height: cam.map_or(0, |c| c.height),
                file,
            }
        })
        .collect();
    ImageManifest {
        scene: entry.id.clone(),
        images,
    }
}

async fn get_images(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match scene_or_404(&st, &id) {
        Ok(e) => Json(image_manifest(&e)).into_response(),
        Err(r) => r,
    }
}

async fn get_annotation(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    if let Err(r) = scene_or_404(&st, &id) {
        return r;
    }
    match st.store.load(&id) {
        Ok(Some(rec)) => Json(rec).into_response(),
        Ok(None) => api_error(StatusCode::NOT_FOUND, format!("scene {id:?} has no annotation"), None),
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

async fn post_annotation(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    if let Err(r) = scene_or_404(&st, &id) {
        return r;
    }
    let sub: AnnotationSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return api_error(StatusCode::BAD_REQUEST, format!("malformed annotation: {e}"), None),
    };
    let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let rec = match sub.into_record(&id, &now) {
        Ok(r) => r,
        Err(e) => return api_error(StatusCode::UNPROCESSABLE_ENTITY, e.message, Some(e.field)),
    };
    let st2 = st.clone();
    let saved = rec.clone();
    match tokio::task::spawn_blocking(move || st2.store.save(&saved)).await {
        Ok(Ok(())) => Json(rec).into_response(),
        Ok(Err(e)) => api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/scenes", get(list_scenes))
        .route("/api/scenes/:id/cloud", get(get_cloud))
        .route("/api/scenes/:id/images", get(get_images))
        .route("/api/scenes/:id/annotation", get(get_annotation).post(post_annotation))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("serving {} scenes on {}", state.scenes.len(), listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
