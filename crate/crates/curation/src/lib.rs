//! HTTP review service for tile pairs: lists pending tiles, serves their images and records
//! keep/drop decisions into the manifest on disk.
//!
//! Endpoints (JSON bodies unless noted):
//!
//! - `GET /api/tiles?status=pending&limit=50&offset=0`: page of tile summaries ordered by
//!   `tile_id`; `status` is `pending`, `kept`, `dropped` or `all`.
//! - `GET /api/tiles/{id}`: one record.
//! - `GET /api/tiles/{id}/image?stain=source|target`: the PNG file as stored (`image/png`).
//! - `POST /api/tiles/{id}/decision` with `{"decision": "kept"|"dropped"|"pending", "artifact_tag": "..."}`:
//!   persists the manifest, then returns the updated counts. `pending` undoes a decision.
//! - `GET /api/progress`: counts, reviewer and the next pending tile.
//!
//! With a token configured every request needs `Authorization: Bearer <token>`.

use std::collections::HashMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use stainbench_core::{Manifest, Split, Status, TileRecord};
use thiserror::Error;
use tokio::sync::RwLock;

pub const MAX_PAGE: usize = 1000;
pub const DEFAULT_PAGE: usize = 50;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("manifest: {0}")]
    Manifest(#[from] stainbench_core::imaging::ManifestError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes `manifest` to a temporary file beside `path`, syncs it and renames it over `path`.
pub fn persist_atomic(manifest: &Manifest, path: &Path) -> Result<(), CurationError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut buf = Vec::new();
    manifest.write_to(&mut buf)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub total: usize,
    pub pending: usize,
    pub kept: usize,
    pub dropped: usize,
}

impl Counts {
    pub fn of(m: &Manifest) -> Self {
        Counts {
            total: m.len(),
            pending: m.count_status(Status::Pending),
            kept: m.count_status(Status::Kept),
            dropped: m.count_status(Status::Dropped),
        }
    }
}

pub struct Session {
    manifest: RwLock<Manifest>,
    path: PathBuf,
    base_dir: PathBuf,
    reviewer: String,
    token: Option<String>,
}

impl Session {
    pub fn open(
        path: impl Into<PathBuf>,
        reviewer: impl Into<String>,
        token: Option<String>,
    ) -> Result<Self, CurationError> {
        let path = path.into();
        let manifest = Manifest::load(&path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Session { manifest: RwLock::new(manifest), path, base_dir, reviewer: reviewer.into(), token })
    }

    pub async fn snapshot(&self) -> Manifest {
        self.manifest.read().await.clone()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/api/tiles", get(list_tiles))
        .route("/api/tiles/{id}", get(get_tile))
        .route("/api/tiles/{id}/image", get(get_image))
        .route("/api/tiles/{id}/decision", post(post_decision))
        .route("/api/progress", get(progress))
        .layer(middleware::from_fn_with_state(session.clone(), authorize))
        .with_state(session)
}

/// Binds `addr` and serves until the process ends. Returns the bound address through `ready`.
pub async fn serve(
    session: Arc<Session>,
    addr: SocketAddr,
    ready: Option<tokio::sync::oneshot::Sender<SocketAddr>>,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    if let Some(tx) = ready {
        let _ = tx.send(listener.local_addr()?);
    }
    axum::serve(listener, router(session)).await
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn authorize(State(s): State<Arc<Session>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let ok = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
        }
    }
    next.run(req).await
}

fn summary(r: &TileRecord) -> Value {
    json!({
        "tile_id": r.tile_id,
        "case_id": r.case_id,
        "her2_score": r.her2_score.to_string(),
        "split": r.split.as_str(),
        "status": r.status.as_str(),
        "artifact_tag": r.artifact_tag,
    })
}

#[allow(clippy::result_large_err)]
fn parse_count(q: &HashMap<String, String>, key: &str, default: usize) -> Result<usize, Response> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| error(StatusCode::BAD_REQUEST, format!("{key} must be a non-negative integer, got '{v}'"))),
    }
}

async fn list_tiles(State(s): State<Arc<Session>>, Query(q): Query<HashMap<String, String>>) -> Response {
    let status = match q.get("status").map(String::as_str).unwrap_or("pending") {
        "all" => None,
        other => match other.parse::<Status>() {
            Ok(st) => Some(st),
            Err(e) => return error(StatusCode::BAD_REQUEST, e),
        },
    };
    let (limit, offset) = match (parse_count(&q, "limit", DEFAULT_PAGE), parse_count(&q, "offset", 0)) {
        (Ok(l), Ok(o)) => (l, o),
        (Err(e), _) | (_, Err(e)) => return e,
    };
    if limit == 0 || limit > MAX_PAGE {
        return error(StatusCode::BAD_REQUEST, format!("limit must be in 1..={MAX_PAGE}"));
    }
    let m = s.manifest.read().await;
    let mut matching: Vec<&TileRecord> =
        m.records().iter().filter(|r| status.is_none_or(|st| r.status == st)).collect();
    matching.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    let tiles: Vec<Value> = matching.iter().skip(offset).take(limit).map(|r| summary(r)).collect();
    Json(json!({ "total": matching.len(), "limit": limit, "offset": offset, "tiles": tiles })).into_response()
}

async fn get_tile(State(s): State<Arc<Session>>, UrlPath(id): UrlPath<String>) -> Response {
    let m = s.manifest.read().await;
    match m.get(&id) {
        Some(r) => {
            let mut v = summary(r);
            v["path_source"] = json!(r.path_source.to_string_lossy());
            v["path_target"] = json!(r.path_target.to_string_lossy());
            Json(v).into_response()
        }
        None => error(StatusCode::NOT_FOUND, format!("unknown tile '{id}'")),
    }
}

async fn get_image(
    State(s): State<Arc<Session>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let path = {
        let m = s.manifest.read().await;
        let Some(r) = m.get(&id) else {
            return error(StatusCode::NOT_FOUND, format!("unknown tile '{id}'"));
        };
        match q.get("stain").map(String::as_str) {
            Some("source") => s.resolve(&r.path_source),
            Some("target") => s.resolve(&r.path_target),
            _ => return error(StatusCode::BAD_REQUEST, "stain must be 'source' or 'target'"),
        }
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            error(StatusCode::GONE, format!("image file for '{id}' is missing"))
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn post_decision(State(s): State<Arc<Session>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let Ok(body) = serde_json::from_slice::<Value>(&body) else {
        return error(StatusCode::BAD_REQUEST, "body must be a JSON object");
    };
    let Some(obj) = body.as_object() else {
        return error(StatusCode::BAD_REQUEST, "body must be a JSON object");
    };
    let status = match obj.get("decision").and_then(Value::as_str).map(str::parse::<Status>) {
        Some(Ok(st)) => st,
        _ => return error(StatusCode::UNPROCESSABLE_ENTITY, "decision must be 'kept', 'dropped' or 'pending'"),
    };
    let tag = match obj.get("artifact_tag") {
        None | Some(Value::Null) => None,
        Some(Value::String(t)) if t.trim().is_empty() => None,
        Some(Value::String(t)) if !t.contains(['\t', '\n', '\r']) => Some(t.trim().to_string()),
        _ => return error(StatusCode::UNPROCESSABLE_ENTITY, "artifact_tag must be a single-line string"),
    };

    let mut m = s.manifest.write().await;
    let Some(idx) = m.records().iter().position(|r| r.tile_id == id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown tile '{id}'"));
    };
    let mut records = m.records().to_vec();
    let r = &mut records[idx];
    r.status = status;
    r.artifact_tag = tag;
    if status != Status::Kept {
        r.split = Split::Unassigned;
    }
    let updated = match m.with_records(records) {
        Ok(u) => u,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    if let Err(e) = persist_atomic(&updated, &s.path) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    *m = updated;
    Json(Counts::of(&m)).into_response()
}

async fn progress(State(s): State<Arc<Session>>) -> Response {
    let m = s.manifest.read().await;
    let next = m.records().iter().filter(|r| r.status == Status::Pending).map(|r| r.tile_id.as_str()).min();
    let c = Counts::of(&m);
    Json(json!({
        "reviewer": s.reviewer,
        "total": c.total,
        "pending": c.pending,
        "kept": c.kept,
        "dropped": c.dropped,
        "next_pending": next,
    }))
    .into_response()
}
