use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use odssd_cli::serve::{router, AppState};
use odssd_core::annotation::DatasetIndex;
use odssd_core::synth::{write_dataset, SceneSpec};
use tower::ServiceExt;

struct Fixture {
    _tmp: tempfile::TempDir,
    state: Arc<AppState>,
    annotations: std::path::PathBuf,
    /// A valid document for sample `synth_000000`.
    xml: Vec<u8>,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&SceneSpec::toy(2), 2, &data).unwrap();
    let xml = std::fs::read(data.join("synth_000000.xml")).unwrap();
    let annotations = tmp.path().join("ann");
    std::fs::create_dir_all(&annotations).unwrap();
    let index = DatasetIndex::load_images(&data.join("index.tsv")).unwrap();
    let state = Arc::new(AppState::new(&index, &annotations).unwrap());
    Fixture {
        _tmp: tmp,
        state,
        annotations,
        xml,
    }
}

async fn send(f: &Fixture, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = router(f.state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn put(uri: &str, body: &[u8]) -> Request<Body> {
    Request::put(uri).body(Body::from(body.to_vec())).unwrap()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[tokio::test]
async fn lists_pairs() {
    let f = fixture();
    let (status, _, body) = send(&f, get("/pairs")).await;
    assert_eq!(status, StatusCode::OK);
    let pairs: Vec<serde_json::Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[0]["id"], "synth_000000");
    assert_eq!(pairs[0]["image_url"], "/image/synth_000000");
    assert_eq!(pairs[0]["annotation_url"], "/annotation/synth_000000");
    assert_eq!(
        (pairs[0]["width"].as_u64(), pairs[0]["height"].as_u64()),
        (Some(160), Some(160))
    );
    assert_eq!(pairs[0]["annotated"], false);
}

#[tokio::test]
async fn serves_image_bytes() {
    let f = fixture();
    let (status, headers, body) = send(&f, get("/image/synth_000001")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(image::load_from_memory(&body).unwrap().width(), 160);
    assert_eq!(send(&f, get("/image/nope")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn put_then_get_round_trips_bytes() {
    let f = fixture();
    assert_eq!(send(&f, get("/annotation/synth_000000")).await.0, StatusCode::NOT_FOUND);
    let (status, headers, _) = send(&f, put("/annotation/synth_000000", &f.xml)).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let tag = headers[header::ETAG].clone();
    let (status, headers, body) = send(&f, get("/annotation/synth_000000")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, f.xml);
    assert_eq!(headers[header::ETAG], tag);
    // no temporary files left behind
    assert_eq!(entries(&f.annotations), vec!["synth_000000.xml"]);
    let (_, _, body) = send(&f, get("/pairs")).await;
    let pairs: Vec<serde_json::Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(pairs[0]["annotated"], true);
}

#[tokio::test]
async fn invalid_documents_are_rejected() {
    let f = fixture();
    let (status, _, body) = send(&f, put("/annotation/synth_000000", b"<annotation><oops>")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(String::from_utf8(body).unwrap().starts_with("invalid annotation"));

    let wrong_size = String::from_utf8(f.xml.clone())
        .unwrap()
        .replacen("<width>160</width>", "<width>320</width>", 1);
    let (status, _, body) = send(&f, put("/annotation/synth_000000", wrong_size.as_bytes())).await;
    assert_eq!(
        status,
        StatusCode::UNPROCESSABLE_ENTITY,
        "{}",
        String::from_utf8_lossy(&body)
    );

    let (status, _, _) = send(&f, put("/annotation/synth_000000", &[0xff, 0xfe])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(send(&f, put("/annotation/../x", &f.xml)).await.0, StatusCode::NOT_FOUND);
    assert!(entries(&f.annotations).is_empty());
}

#[tokio::test]
async fn stale_writes_conflict() {
    let f = fixture();
    let (_, headers, _) = send(&f, put("/annotation/synth_000000", &f.xml)).await;
    let first = headers[header::ETAG].to_str().unwrap().to_string();

    let edited = String::from_utf8(f.xml.clone())
        .unwrap()
        .replacen("<pose>", "<pose>Left", 1);
    let req = Request::put("/annotation/synth_000000")
        .header(header::IF_MATCH, &first)
        .body(Body::from(edited.clone()))
        .unwrap();
    assert_eq!(send(&f, req).await.0, StatusCode::NO_CONTENT);

    // a second writer still holding the first version loses
    let req = Request::put("/annotation/synth_000000")
        .header(header::IF_MATCH, &first)
        .body(Body::from(f.xml.clone()))
        .unwrap();
    let (status, _, _) = send(&f, req).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(send(&f, get("/annotation/synth_000000")).await.2, edited.into_bytes());

    let req = Request::put("/annotation/synth_000000")
        .header(header::IF_NONE_MATCH, "*")
        .body(Body::from(f.xml.clone()))
        .unwrap();
    assert_eq!(send(&f, req).await.0, StatusCode::CONFLICT);
}
