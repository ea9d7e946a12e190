//! HTTP backend for the annotation UI.
//!
//! `GET /pairs`, `GET /image/{id}`, `GET /annotation/{id}` and
//! `PUT /annotation/{id}`. Annotation responses carry an `ETag`; a PUT whose
//! `If-Match` no longer matches the stored file gets 409.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use clap::Args;
use odssd_core::annotation::{parse_annotation, DatasetIndex};
use serde::Serialize;
use tokio::sync::Mutex;

use crate::manifest::{self, RunManifest};

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Where `<id>.xml` annotations are read and written.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PairInfo {
    pub id: String,
    pub image_url: String,
    pub annotation_url: String,
    pub width: u32,
    pub height: u32,
    pub annotated: bool,
}

struct Sample {
    image: PathBuf,
    width: u32,
    height: u32,
}

pub struct AppState {
    order: Vec<String>,
    samples: HashMap<String, Sample>,
    annotations: PathBuf,
    /// One lock per sample id so writes to a file never interleave.
    locks: HashMap<String, Mutex<()>>,
}

impl AppState {
    pub fn new(index: &DatasetIndex, annotations: &Path) -> Result<Self> {
        let mut order = Vec::new();
        let mut samples = HashMap::new();
        for e in &index.entries {
            let id = e.id();
            let (width, height) =
                image::image_dimensions(&e.image).with_context(|| format!("reading {}", e.image.display()))?;
            if samples.contains_key(&id) {
                anyhow::bail!("duplicate sample id {id:?}");
            }
            order.push(id.clone());
            samples.insert(
                id,
                Sample {
                    image: e.image.clone(),
                    width,
                    height,
                },
            );
        }
        let locks = order.iter().map(|id| (id.clone(), Mutex::new(()))).collect();
        Ok(AppState {
            order,
            samples,
            annotations: annotations.to_path_buf(),
            locks,
        })
    }

    fn annotation_path(&self, id: &str) -> PathBuf {
        self.annotations.join(format!("{id}.xml"))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/pairs", get(pairs))
        .route("/image/{id}", get(image_bytes))
        .route("/annotation/{id}", get(get_annotation).put(put_annotation))
        .with_state(state)
}

fn etag(bytes: &[u8]) -> String {
    format!("\"{:08x}-{}\"", crc32fast::hash(bytes), bytes.len())
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (
        status,
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        msg.into(),
    )
        .into_response()
}

async fn pairs(State(s): State<Arc<AppState>>) -> Json<Vec<PairInfo>> {
    let mut out = Vec::with_capacity(s.order.len());
    for id in &s.order {
        let smp = &s.samples[id];
        out.push(PairInfo {
            id: id.clone(),
            image_url: format!("/image/{id}"),
            annotation_url: format!("/annotation/{id}"),
            width: smp.width,
            height: smp.height,
            annotated: tokio::fs::try_exists(s.annotation_path(id)).await.unwrap_or(false),
        });
    }
    Json(out)
}

async fn image_bytes(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(smp) = s.samples.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no sample {id:?}"));
    };
    let mime = match smp
        .image
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "image/png",
    };
    match tokio::fs::read(&smp.image).await {
        Ok(b) => ([(header::CONTENT_TYPE, mime)], b).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_annotation(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    if !s.samples.contains_key(&id) {
        return error(StatusCode::NOT_FOUND, format!("no sample {id:?}"));
    }
    match tokio::fs::read(s.annotation_path(&id)).await {
        Ok(b) => (
            [
                (header::CONTENT_TYPE, "application/xml; charset=utf-8".to_string()),
                (header::ETAG, etag(&b)),
            ],
            b,
        )
            .into_response(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            error(StatusCode::NOT_FOUND, format!("{id} is not annotated"))
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn put_annotation(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let (Some(smp), Some(lock)) = (s.samples.get(&id), s.locks.get(&id)) else {
        return error(StatusCode::NOT_FOUND, format!("no sample {id:?}"));
    };
    if std::str::from_utf8(&body).is_err() {
        return error(StatusCode::BAD_REQUEST, "body is not UTF-8");
    }
    let doc = match parse_annotation(&body) {
        Ok(d) => d,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid annotation: {e}")),
    };
    if (doc.size.width, doc.size.height) != (smp.width, smp.height) {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "invalid annotation: size {}x{} does not match image {}x{}",
                doc.size.width, doc.size.height, smp.width, smp.height
            ),
        );
    }

    let _guard = lock.lock().await;
    let path = s.annotation_path(&id);
    let current = match tokio::fs::read(&path).await {
        Ok(b) => Some(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    if let Some(want) = headers.get(header::IF_MATCH).and_then(|v| v.to_str().ok()) {
        let have = current.as_deref().map(etag);
        if want != "*" && have.as_deref() != Some(want) || want == "*" && have.is_none() {
            return error(StatusCode::CONFLICT, format!("{id} changed since it was read"));
        }
    }
    if headers.get(header::IF_NONE_MATCH).is_some_and(|v| v == "*") && current.is_some() {
        return error(StatusCode::CONFLICT, format!("{id} already exists"));
    }
    if let Err(e) = write_atomic(&path, &body).await {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    let tag = HeaderValue::from_str(&etag(&body)).expect("etag is ASCII");
    (StatusCode::NO_CONTENT, [(header::ETAG, tag)]).into_response()
}

/// Writes to a temporary sibling and renames it over `path`.
async fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().unwrap().to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    tokio::fs::write(&tmp, bytes).await?;
    if let Err(e) = tokio::fs::rename(&tmp, path).await {
        let _ = tokio::fs::remove_file(&tmp).await;
        return Err(e);
    }
    Ok(())
}

pub fn serve(a: &ServeArgs, args: &[String]) -> Result<()> {
    let start = Instant::now();
    let index = DatasetIndex::load_images(&a.index)?;
    std::fs::create_dir_all(&a.annotations)?;
    let state = Arc::new(AppState::new(&index, &a.annotations)?);
    let mut m = RunManifest::new("serve", args);
    m.inputs = vec![a.index.clone()];
    m.outputs = vec![a.annotations.clone()];
    m.notes.push(format!("bind {}", a.bind));
    m.time("startup", start.elapsed());
    m.write(&a.annotations.join(manifest::FILE_NAME))?;

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.bind).await?;
        eprintln!(
            "serving {} pairs on http://{}",
            index.entries.len(),
            listener.local_addr()?
        );
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
