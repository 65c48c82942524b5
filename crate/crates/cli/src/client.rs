//! Blocking HTTP client for the `/api/v1` API.

use std::io::{self, Read, Write};
use std::time::Duration;

use dabih_core::api::{
    ApiError, ChunkReceipt, DatasetInfo, EnrollKeyRequest, EventInfo, FinishResponse, IncompleteUpload, KeyInfo,
    KeyRequest, LoginRequest, LoginResponse, ReencryptResponse, RevokeTokenRequest, ShareRequest, ShareResponse,
    StartUploadRequest, StartUploadResponse, TokenRequest, TokenResponse, UserInfo, API_PREFIX, HEADER_CRC32,
    HEADER_IV, HEADER_PLAIN_HASH, HEADER_PLAIN_SIZE,
};
use dabih_core::crypto::IV_LEN;
use dabih_core::{ChunkSealed, DatasetKey, Digest, KeyEnvelope};
use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::http::Response;
use ureq::{Agent, Body, RequestBuilder};

use crate::error::{CliError, CliResult};

pub struct Client {
    agent: Agent,
    base: String,
    token: Option<String>,
}

/// Percent-encodes one path segment.
fn segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn network(e: ureq::Error) -> CliError {
    CliError::Network(e.to_string())
}

fn header<'a>(resp: &'a Response<Body>, name: &str) -> CliResult<&'a str> {
    resp.headers()
        .get(name)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| CliError::Integrity(format!("response lacks the {name} header")))
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            agent,
            base: base.trim_end_matches('/').to_string(),
            token,
        }
    }

    pub fn with_token(&self, token: String) -> Self {
        Self {
            agent: self.agent.clone(),
            base: self.base.clone(),
            token: Some(token),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{API_PREFIX}{path}", self.base)
    }

    fn auth<B>(&self, req: RequestBuilder<B>) -> RequestBuilder<B> {
        match &self.token {
            Some(t) => req.header("authorization", format!("Bearer {t}")),
            None => req,
        }
    }

    /// Turns non-success responses into [`CliError::Api`].
    fn check(result: Result<Response<Body>, ureq::Error>) -> CliResult<Response<Body>> {
        let resp = result.map_err(network)?;
        let status = resp.status().as_u16();
        if resp.status().is_success() {
            return Ok(resp);
        }
        let mut body = Vec::new();
        resp.into_body().into_reader().take(1 << 20).read_to_end(&mut body)?;
        let error = serde_json::from_slice::<ApiError>(&body).unwrap_or_else(|_| ApiError {
            code: format!("http_{status}"),
            message: String::from_utf8_lossy(&body).into_owned(),
            detail: None,
        });
        Err(CliError::Api { status, error })
    }

    fn read_json<T: DeserializeOwned>(resp: Response<Body>) -> CliResult<T> {
        let mut body = Vec::new();
        resp.into_body()
            .into_reader()
            .read_to_end(&mut body)
            .map_err(|e| CliError::Network(e.to_string()))?;
        serde_json::from_slice(&body).map_err(|e| CliError::Network(format!("malformed response: {e}")))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> CliResult<T> {
        Self::read_json(Self::check(self.auth(self.agent.get(self.url(path))).call())?)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> CliResult<T> {
        let bytes = serde_json::to_vec(body).map_err(|e| CliError::Config(e.to_string()))?;
        let req = self.auth(self.agent.post(self.url(path))).content_type("application/json");
        Self::read_json(Self::check(req.send(&bytes[..]))?)
    }

    fn post_empty<T: DeserializeOwned>(&self, path: &str) -> CliResult<T> {
        Self::read_json(Self::check(self.auth(self.agent.post(self.url(path))).send_empty())?)
    }

    fn delete(&self, path: &str) -> CliResult<()> {
        Self::check(self.auth(self.agent.delete(self.url(path))).call()).map(drop)
    }

    pub fn login(&self, req: &LoginRequest) -> CliResult<LoginResponse> {
        self.post("/auth/login", req)
    }

    pub fn enroll_key(&self, public_pem: &str) -> CliResult<KeyInfo> {
        self.post(
            "/keys",
            &EnrollKeyRequest {
                public_key: public_pem.to_string(),
            },
        )
    }

    pub fn list_keys(&self) -> CliResult<Vec<KeyInfo>> {
        self.get("/keys")
    }

    pub fn enable_key(&self, fingerprint: &Digest) -> CliResult<KeyInfo> {
        self.post_empty(&format!("/keys/{}/enable", fingerprint.to_hex()))
    }

    pub fn start_upload(&self, req: &StartUploadRequest) -> CliResult<StartUploadResponse> {
        self.post("/upload", req)
    }

    pub fn upload_chunk(&self, mnemonic: &str, index: u64, plain_hash: &Digest, data: &[u8]) -> CliResult<ChunkReceipt> {
        let req = self
            .auth(self.agent.put(self.url(&format!("/upload/{}/chunk/{index}", segment(mnemonic)))))
            .header(HEADER_PLAIN_HASH, plain_hash.to_hex())
            .content_type("application/octet-stream");
        Self::read_json(Self::check(req.send(data))?)
    }

    pub fn finish_upload(&self, mnemonic: &str) -> CliResult<FinishResponse> {
        self.post_empty(&format!("/upload/{}/finish", segment(mnemonic)))
    }

    pub fn cancel_upload(&self, mnemonic: &str) -> CliResult<()> {
        self.delete(&format!("/upload/{}", segment(mnemonic)))
    }

    pub fn list_incomplete(&self) -> CliResult<Vec<IncompleteUpload>> {
        self.get("/upload/incomplete")
    }

    pub fn list_datasets(&self) -> CliResult<Vec<DatasetInfo>> {
        self.get("/datasets")
    }

    pub fn get_dataset(&self, mnemonic: &str) -> CliResult<DatasetInfo> {
        self.get(&format!("/datasets/{}", segment(mnemonic)))
    }

    pub fn delete_dataset(&self, mnemonic: &str) -> CliResult<()> {
        self.delete(&format!("/datasets/{}", segment(mnemonic)))
    }

    pub fn get_envelope(&self, mnemonic: &str, fingerprint: Option<&Digest>) -> CliResult<KeyEnvelope> {
        let mut path = format!("/datasets/{}/envelope", segment(mnemonic));
        if let Some(fp) = fingerprint {
            path.push_str(&format!("?fingerprint={}", fp.to_hex()));
        }
        self.get(&path)
    }

    /// Fetches a stored chunk with the metadata needed to open it.
    pub fn download_chunk(&self, mnemonic: &str, index: u64) -> CliResult<ChunkSealed> {
        let url = self.url(&format!("/datasets/{}/chunk/{index}", segment(mnemonic)));
        let resp = Self::check(self.auth(self.agent.get(url)).call())?;
        let bad = |what: &str| CliError::Integrity(format!("chunk {index}: malformed {what} header"));
        let mut iv = [0u8; IV_LEN];
        let iv_hex = header(&resp, HEADER_IV)?;
        if iv_hex.len() != 2 * IV_LEN || !iv_hex.is_ascii() {
            return Err(bad(HEADER_IV));
        }
        for (i, byte) in iv.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&iv_hex[2 * i..2 * i + 2], 16).map_err(|_| bad(HEADER_IV))?;
        }
        let plain_hash = Digest::from_hex(header(&resp, HEADER_PLAIN_HASH)?).map_err(|_| bad(HEADER_PLAIN_HASH))?;
        let crc32 = dabih_core::api::parse_crc32(header(&resp, HEADER_CRC32)?).ok_or_else(|| bad(HEADER_CRC32))?;
        let plain_size = header(&resp, HEADER_PLAIN_SIZE)?
            .parse::<u64>()
            .map_err(|_| bad(HEADER_PLAIN_SIZE))?;
        let mut ciphertext = Vec::new();
        resp.into_body()
            .into_reader()
            .read_to_end(&mut ciphertext)
            .map_err(|e| CliError::Network(e.to_string()))?;
        Ok(ChunkSealed {
            index,
            iv,
            ciphertext,
            plain_hash,
            crc32,
            plain_size,
        })
    }

    /// Streams the server-decrypted file into `out`; returns the byte count.
    pub fn server_download(&self, mnemonic: &str, key: &DatasetKey, out: &mut dyn Write) -> CliResult<u64> {
        let body = serde_json::to_vec(&KeyRequest::new(key)).map_err(|e| CliError::Config(e.to_string()))?;
        let body = zeroize::Zeroizing::new(body);
        let req = self
            .auth(self.agent.post(self.url(&format!("/datasets/{}/download", segment(mnemonic)))))
            .content_type("application/json");
        let resp = Self::check(req.send(&body[..]))?;
        let mut reader = resp.into_body().into_reader();
        io::copy(&mut reader, out).map_err(|e| match e.kind() {
            io::ErrorKind::Other | io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset => {
                CliError::Network(e.to_string())
            }
            _ => CliError::Io(e),
        })
    }

    pub fn share(&self, mnemonic: &str, req: &ShareRequest) -> CliResult<ShareResponse> {
        self.post(&format!("/datasets/{}/share", segment(mnemonic)), req)
    }

    pub fn revoke_member(&self, mnemonic: &str, user: &str) -> CliResult<()> {
        self.delete(&format!("/datasets/{}/members/{}", segment(mnemonic), segment(user)))
    }

    pub fn reencrypt(&self, mnemonic: &str, key: &DatasetKey) -> CliResult<ReencryptResponse> {
        self.post(&format!("/datasets/{}/reencrypt", segment(mnemonic)), &KeyRequest::new(key))
    }

    pub fn create_token(&self, ttl_secs: Option<u64>) -> CliResult<TokenResponse> {
        self.post("/tokens", &TokenRequest { ttl_secs })
    }

    pub fn revoke_token(&self, token: &str) -> CliResult<()> {
        let req = RevokeTokenRequest {
            token: token.to_string(),
        };
        let bytes = serde_json::to_vec(&req).map_err(|e| CliError::Config(e.to_string()))?;
        let req = self.auth(self.agent.post(self.url("/tokens/revoke"))).content_type("application/json");
        Self::check(req.send(&bytes[..])).map(drop)
    }

    pub fn list_users(&self) -> CliResult<Vec<UserInfo>> {
        self.get("/admin/users")
    }

    pub fn list_all_keys(&self) -> CliResult<Vec<KeyInfo>> {
        self.get("/admin/keys")
    }

    pub fn list_events(&self, limit: Option<u64>) -> CliResult<Vec<EventInfo>> {
        match limit {
            Some(l) => self.get(&format!("/admin/events?limit={l}")),
            None => self.get("/admin/events"),
        }
    }
}
