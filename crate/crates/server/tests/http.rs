mod common;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use common::*;
use dabih_core::api::{
    ApiError, ChunkReceipt, DatasetInfo, KeyRequest, LoginRequest, LoginResponse, StartUploadResponse, API_PREFIX,
    HEADER_CRC32, HEADER_IV, HEADER_PLAIN_HASH,
};
use dabih_core::{decapsulate, Digest};
use dabih_server::routes::router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json<T: serde::de::DeserializeOwned>(&self) -> T {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    fn error_code(&self) -> String {
        self.json::<ApiError>().code
    }
}

async fn call(app: &Router, method: Method, path: &str, token: Option<&str>, headers: &[(&str, String)], body: Vec<u8>) -> Reply {
    let mut req = Request::builder().method(method).uri(format!("{API_PREFIX}{path}"));
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    for (k, v) in headers {
        req = req.header(*k, v);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn json_call(app: &Router, method: Method, path: &str, token: Option<&str>, body: Value) -> Reply {
    let headers = [("content-type", "application/json".to_string())];
    call(app, method, path, token, &headers, serde_json::to_vec(&body).unwrap()).await
}

async fn http_login(app: &Router, user: &str) -> String {
    let req = LoginRequest {
        user_id: user.into(),
        name: user.into(),
        email: format!("{user}@example.org"),
        password: format!("{user}-password"),
    };
    let r = json_call(app, Method::POST, "/auth/login", None, serde_json::to_value(req).unwrap()).await;
    assert_eq!(r.status, StatusCode::OK);
    r.json::<LoginResponse>().token
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_flow_over_http() {
    let env = Env::new(&["root"]);
    let app = router(env.svc.clone());
    let admin = http_login(&app, "admin").await;
    let alice = http_login(&app, "alice").await;

    let r = json_call(&app, Method::POST, "/keys", Some(&alice), json!({ "public_key": public_pem("alice") })).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let fp = private_key("alice").fingerprint().to_hex();
    let r = call(&app, Method::POST, &format!("/keys/{fp}/enable"), Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = call(&app, Method::POST, &format!("/keys/{fp}/enable"), Some(&admin), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::OK);

    let data = bytes(2500, 21);
    let r = json_call(
        &app,
        Method::POST,
        "/upload",
        Some(&alice),
        json!({ "filename": "x.bin", "size": 2500, "chunk_size": 1024 }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED);
    let m = r.json::<StartUploadResponse>().mnemonic;

    let wrong = [(HEADER_PLAIN_HASH, Digest::of(b"nope").to_hex())];
    let r = call(&app, Method::PUT, &format!("/upload/{m}/chunk/0"), Some(&alice), &wrong, data[..1024].to_vec()).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.error_code(), "hash_mismatch");
    let r = call(&app, Method::PUT, &format!("/upload/{m}/chunk/0"), Some(&alice), &[], data[..1024].to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    for (i, chunk) in data.chunks(1024).enumerate() {
        if i == 1 {
            continue;
        }
        let h = [(HEADER_PLAIN_HASH, Digest::of(chunk).to_hex())];
        let r = call(&app, Method::PUT, &format!("/upload/{m}/chunk/{i}"), Some(&alice), &h, chunk.to_vec()).await;
        assert_eq!(r.status, StatusCode::OK);
        let receipt: ChunkReceipt = r.json();
        assert_eq!(receipt.crc32.len(), 8);
    }
    let r = call(&app, Method::POST, &format!("/upload/{m}/finish"), Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let err: ApiError = r.json();
    assert_eq!(err.code, "missing_chunks");
    assert_eq!(err.detail.unwrap()["missing"], json!([1]));
    let h = [(HEADER_PLAIN_HASH, Digest::of(&data[1024..2048]).to_hex())];
    let r = call(&app, Method::PUT, &format!("/upload/{m}/chunk/1"), Some(&alice), &h, data[1024..2048].to_vec()).await;
    assert_eq!(r.status, StatusCode::OK);
    let r = call(&app, Method::POST, &format!("/upload/{m}/finish"), Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::OK);

    let r = call(&app, Method::GET, "/datasets", Some(&alice), &[], vec![]).await;
    let list: Vec<DatasetInfo> = r.json();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].mnemonic, m);

    let r = call(&app, Method::GET, &format!("/datasets/{m}/envelope"), Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::OK);
    let key = decapsulate(private_key("alice"), &r.json()).unwrap();

    let r = call(&app, Method::GET, &format!("/datasets/{m}/chunk/2"), Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(
        r.headers[HEADER_CRC32].to_str().unwrap(),
        format!("{:08x}", crc32_oracle(&r.body))
    );
    assert_eq!(r.headers[HEADER_IV].len(), 32);

    let body = serde_json::to_value(KeyRequest::new(&key)).unwrap();
    let r = json_call(&app, Method::POST, &format!("/datasets/{m}/download"), Some(&alice), body).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers[header::CONTENT_LENGTH].to_str().unwrap(), "2500");
    assert!(r.headers[header::CONTENT_DISPOSITION].to_str().unwrap().contains("x.bin"));
    assert_eq!(r.body, data);

    let bad = json!({ "key": dabih_core::api::encode_key(&dabih_core::DatasetKey::generate()) });
    let r = json_call(&app, Method::POST, &format!("/datasets/{m}/download"), Some(&alice), bad).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.error_code(), "fingerprint_mismatch");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_are_structured() {
    let env = Env::with_config(|c| c.chunk_size = 4096, &[]);
    let app = router(env.svc.clone());
    let r = call(&app, Method::GET, "/datasets", None, &[], vec![]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.error_code(), "unauthorized");
    let r = call(&app, Method::GET, "/datasets", Some("bogus"), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);

    let alice = http_login(&app, "alice").await;
    let r = call(&app, Method::GET, "/nowhere", Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.error_code(), "not_found");
    let r = call(&app, Method::POST, "/keys", Some(&alice), &[("content-type", "application/json".into())], b"{".to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.error_code(), "bad_request");
    let r = json_call(&app, Method::POST, "/keys", Some(&alice), json!({ "public_key": public_pem("small2048") })).await;
    assert_eq!(r.error_code(), "invalid_key");
    let r = call(&app, Method::GET, "/datasets/no-such-thing/envelope", Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let r = json_call(&app, Method::POST, "/upload", Some(&alice), json!({ "filename": "a", "size": 10 })).await;
    assert_eq!(r.error_code(), "no_enabled_key");
    assert_eq!(r.status, StatusCode::FORBIDDEN);

    env.user_with_key("alice");
    let r = json_call(&app, Method::POST, "/upload", Some(&alice), json!({ "filename": "a", "size": 10000 })).await;
    let m = r.json::<StartUploadResponse>().mnemonic;
    let big = vec![0u8; 4096 + 1024 * 1024 + 1];
    let h = [(HEADER_PLAIN_HASH, Digest::of(&big).to_hex())];
    let r = call(&app, Method::PUT, &format!("/upload/{m}/chunk/0"), Some(&alice), &h, big).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    let over = vec![0u8; 4097];
    let h = [(HEADER_PLAIN_HASH, Digest::of(&over).to_hex())];
    let r = call(&app, Method::PUT, &format!("/upload/{m}/chunk/0"), Some(&alice), &h, over).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(r.error_code(), "chunk_too_large");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn upload_token_over_http() {
    let env = Env::new(&[]);
    let app = router(env.svc.clone());
    env.user_with_key("alice");
    let alice = http_login(&app, "alice").await;
    let r = call(&app, Method::POST, "/tokens", Some(&alice), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let token = r.json::<Value>()["token"].as_str().unwrap().to_string();

    let r = json_call(&app, Method::POST, "/upload", Some(&token), json!({ "filename": "t", "size": 3 })).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let m = r.json::<StartUploadResponse>().mnemonic;
    let h = [(HEADER_PLAIN_HASH, Digest::of(b"abc").to_hex())];
    let r = call(&app, Method::PUT, &format!("/upload/{m}/chunk/0"), Some(&token), &h, b"abc".to_vec()).await;
    assert_eq!(r.status, StatusCode::OK);
    let r = call(&app, Method::POST, &format!("/upload/{m}/finish"), Some(&token), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::OK);

    let r = call(&app, Method::GET, "/datasets", Some(&token), &[], vec![]).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = json_call(&app, Method::POST, "/tokens/revoke", Some(&alice), json!({ "token": token })).await;
    assert!(r.status.is_success());
    let r = json_call(&app, Method::POST, "/upload", Some(&token), json!({ "filename": "t", "size": 3 })).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}

#[test]
fn running_server_serves_requests() {
    let dir = tempfile::tempdir().unwrap();
    let server = dabih_server::RunningServer::start(config(dir.path(), &[])).unwrap();
    let addr = server.addr();
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET {API_PREFIX}/datasets HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    assert!(out.starts_with("HTTP/1.1 401"), "{out}");
    server.stop().unwrap();
    assert!(std::net::TcpStream::connect(addr).is_err());
}
