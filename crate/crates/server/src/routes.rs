use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Path as AxumPath, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_DISPOSITION, CONTENT_LENGTH, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use dabih_core::api::{
    format_crc32, EnrollKeyRequest, KeyRequest, LoginRequest, RevokeTokenRequest, ShareRequest,
    StartUploadRequest, TokenRequest, API_PREFIX, HEADER_CRC32, HEADER_IV, HEADER_PLAIN_HASH,
    HEADER_PLAIN_SIZE,
};
use dabih_core::Digest;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::auth::{parse_bearer, Caller};
use crate::error::ServiceError;
use crate::service::Dabih;

type AppState = Arc<Dabih>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if matches!(self, ServiceError::Internal(_) | ServiceError::Integrity(_)) {
            tracing::error!(error = %self, "request failed");
        }
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.to_api())).into_response()
    }
}

/// Runs a blocking service call off the async executor.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ServiceError>
where
    F: FnOnce(&Dabih) -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ServiceError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(parse_bearer)
            .ok_or(ServiceError::Unauthorized)?
            .to_string();
        blocking(state, move |s| s.authenticate(&token)).await
    }
}

fn rejection(status: StatusCode, text: String) -> ServiceError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ServiceError::PayloadTooLarge(text)
    } else {
        ServiceError::BadRequest(text)
    }
}

/// JSON body extractor whose rejections use the structured error format.
struct ApiJson<T>(T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for ApiJson<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|e| rejection(e.status(), e.body_text()))
    }
}

/// Path extractor whose rejections use the structured error format.
struct Path<T>(T);

impl<T: DeserializeOwned + Send, S: Send + Sync> FromRequestParts<S> for Path<T> {
    type Rejection = ServiceError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        AxumPath::<T>::from_request_parts(parts, state)
            .await
            .map(|AxumPath(v)| Path(v))
            .map_err(|e| rejection(e.status(), e.body_text()))
    }
}

/// Raw body extractor whose rejections use the structured error format.
struct RawBody(Bytes);

impl<S: Send + Sync> FromRequest<S> for RawBody {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Bytes::from_request(req, state)
            .await
            .map(RawBody)
            .map_err(|e: BytesRejection| rejection(e.status(), e.body_text()))
    }
}

fn parse_digest(s: &str, what: &str) -> Result<Digest, ServiceError> {
    Digest::from_hex(s).map_err(|_| ServiceError::BadRequest(format!("{what} must be 64 hex digits")))
}

pub fn router(state: AppState) -> Router {
    let limit = state.config().body_limit();
    let api = Router::new()
        .route("/auth/login", post(login))
        .route("/keys", post(enroll_key).get(list_keys))
        .route("/keys/{fingerprint}/enable", post(enable_key))
        .route("/upload", post(start_upload))
        .route("/upload/incomplete", get(list_incomplete))
        .route("/upload/{mnemonic}/chunk/{index}", put(upload_chunk))
        .route("/upload/{mnemonic}/finish", post(finish_upload))
        .route("/upload/{mnemonic}", delete(cancel_upload))
        .route("/datasets", get(list_datasets))
        .route("/datasets/{mnemonic}", get(get_dataset).delete(delete_dataset))
        .route("/datasets/{mnemonic}/envelope", get(get_envelope))
        .route("/datasets/{mnemonic}/chunk/{index}", get(download_chunk))
        .route("/datasets/{mnemonic}/download", post(server_download))
        .route("/datasets/{mnemonic}/share", post(share))
        .route("/datasets/{mnemonic}/reencrypt", post(reencrypt))
        .route("/datasets/{mnemonic}/members/{user}", delete(revoke_member))
        .route("/tokens", post(create_token))
        .route("/tokens/revoke", post(revoke_token))
        .route("/admin/users", get(list_users))
        .route("/admin/keys", get(list_all_keys))
        .route("/admin/events", get(list_events))
        .fallback(not_found);
    Router::new()
        .nest(API_PREFIX, api)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn not_found() -> ServiceError {
    ServiceError::NotFound("endpoint".into())
}

async fn login(State(s): State<AppState>, ApiJson(req): ApiJson<LoginRequest>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.login(&req)).await?))
}

async fn enroll_key(
    State(s): State<AppState>,
    caller: Caller,
    ApiJson(req): ApiJson<EnrollKeyRequest>,
) -> Result<impl IntoResponse, ServiceError> {
    let info = blocking(&s, move |s| s.enroll_key(&caller, &req.public_key)).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn list_keys(State(s): State<AppState>, caller: Caller) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.list_keys(&caller)).await?))
}

async fn list_all_keys(State(s): State<AppState>, caller: Caller) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.list_all_keys(&caller)).await?))
}

async fn enable_key(
    State(s): State<AppState>,
    caller: Caller,
    Path(fingerprint): Path<String>,
) -> Result<impl IntoResponse, ServiceError> {
    let fp = parse_digest(&fingerprint, "fingerprint")?;
    Ok(Json(blocking(&s, move |s| s.enable_key(&caller, &fp)).await?))
}

async fn start_upload(
    State(s): State<AppState>,
    caller: Caller,
    ApiJson(req): ApiJson<StartUploadRequest>,
) -> Result<impl IntoResponse, ServiceError> {
    let resp = blocking(&s, move |s| s.start_upload(&caller, &req)).await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn upload_chunk(
    State(s): State<AppState>,
    caller: Caller,
    Path((mnemonic, index)): Path<(String, u64)>,
    headers: HeaderMap,
    RawBody(body): RawBody,
) -> Result<impl IntoResponse, ServiceError> {
    let hash = headers
        .get(HEADER_PLAIN_HASH)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ServiceError::BadRequest(format!("missing {HEADER_PLAIN_HASH} header")))?;
    let hash = parse_digest(hash, HEADER_PLAIN_HASH)?;
    let receipt = blocking(&s, move |s| s.upload_chunk(&caller, &mnemonic, index, &hash, &body)).await?;
    Ok(Json(receipt))
}

async fn finish_upload(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.finish_upload(&caller, &mnemonic)).await?))
}

async fn cancel_upload(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
) -> Result<impl IntoResponse, ServiceError> {
    blocking(&s, move |s| s.cancel_upload(&caller, &mnemonic)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_incomplete(State(s): State<AppState>, caller: Caller) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.list_incomplete(&caller)).await?))
}

async fn list_datasets(State(s): State<AppState>, caller: Caller) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.list_datasets(&caller)).await?))
}

async fn get_dataset(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.get_dataset(&caller, &mnemonic)).await?))
}

async fn delete_dataset(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
) -> Result<impl IntoResponse, ServiceError> {
    blocking(&s, move |s| s.delete_dataset(&caller, &mnemonic)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct EnvelopeQuery {
    fingerprint: Option<String>,
}

async fn get_envelope(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
    Query(q): Query<EnvelopeQuery>,
) -> Result<impl IntoResponse, ServiceError> {
    let fp = q
        .fingerprint
        .as_deref()
        .map(|f| parse_digest(f, "fingerprint"))
        .transpose()?;
    Ok(Json(
        blocking(&s, move |s| s.get_envelope(&caller, &mnemonic, fp.as_ref())).await?,
    ))
}

fn header(value: String) -> HeaderValue {
    HeaderValue::from_str(&value).expect("ascii header value")
}

async fn download_chunk(
    State(s): State<AppState>,
    caller: Caller,
    Path((mnemonic, index)): Path<(String, u64)>,
) -> Result<impl IntoResponse, ServiceError> {
    let (row, bytes) = blocking(&s, move |s| s.download_chunk(&caller, &mnemonic, index)).await?;
    let mut headers = HeaderMap::new();
    headers.insert(CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    headers.insert(HEADER_IV, header(hex::encode(row.iv)));
    headers.insert(HEADER_PLAIN_HASH, header(row.plain_hash.to_hex()));
    headers.insert(HEADER_CRC32, header(format_crc32(row.crc32)));
    headers.insert(HEADER_PLAIN_SIZE, header(row.plain_size.to_string()));
    Ok((headers, bytes))
}

async fn server_download(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
    ApiJson(req): ApiJson<KeyRequest>,
) -> Result<Response, ServiceError> {
    let state = Arc::clone(&s);
    let download = tokio::task::spawn_blocking(move || state.prepare_download(&caller, &mnemonic, &req.key))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;

    let filename = download.filename().replace(['"', '\\'], "_");
    let size = download.size();
    let (tx, rx) = tokio::sync::mpsc::channel::<Result<Bytes, std::io::Error>>(2);
    tokio::task::spawn_blocking(move || {
        download.run(|chunk| {
            let item = chunk
                .map(Bytes::from)
                .map_err(|e| std::io::Error::other(e.to_string()));
            tx.blocking_send(item).is_ok()
        })
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|item| (item, rx)) });

    let mut headers = HeaderMap::new();
    headers.insert(CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    headers.insert(CONTENT_LENGTH, header(size.to_string()));
    if let Ok(v) = HeaderValue::from_str(&format!("attachment; filename=\"{filename}\"")) {
        headers.insert(CONTENT_DISPOSITION, v);
    }
    Ok((headers, Body::from_stream(stream)).into_response())
}

async fn share(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
    ApiJson(req): ApiJson<ShareRequest>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.share(&caller, &mnemonic, &req)).await?))
}

async fn reencrypt(
    State(s): State<AppState>,
    caller: Caller,
    Path(mnemonic): Path<String>,
    ApiJson(req): ApiJson<KeyRequest>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.reencrypt(&caller, &mnemonic, &req.key)).await?))
}

async fn revoke_member(
    State(s): State<AppState>,
    caller: Caller,
    Path((mnemonic, user)): Path<(String, String)>,
) -> Result<impl IntoResponse, ServiceError> {
    blocking(&s, move |s| s.revoke_member(&caller, &mnemonic, &user)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn create_token(
    State(s): State<AppState>,
    caller: Caller,
    RawBody(body): RawBody,
) -> Result<impl IntoResponse, ServiceError> {
    let ttl = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        serde_json::from_slice::<TokenRequest>(&body)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?
            .ttl_secs
    };
    let resp = blocking(&s, move |s| s.create_upload_token(&caller, ttl)).await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn revoke_token(
    State(s): State<AppState>,
    caller: Caller,
    ApiJson(req): ApiJson<RevokeTokenRequest>,
) -> Result<impl IntoResponse, ServiceError> {
    blocking(&s, move |s| s.revoke_token(&caller, &req.token)).await?;
    Ok(Json(json!({ "revoked": true })))
}

async fn list_users(State(s): State<AppState>, caller: Caller) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(blocking(&s, move |s| s.list_users(&caller)).await?))
}

#[derive(Deserialize)]
struct EventsQuery {
    limit: Option<u32>,
}

async fn list_events(
    State(s): State<AppState>,
    caller: Caller,
    Query(q): Query<EventsQuery>,
) -> Result<impl IntoResponse, ServiceError> {
    let limit = q.limit.unwrap_or(1000).min(100_000);
    Ok(Json(blocking(&s, move |s| s.list_events(&caller, limit)).await?))
}
