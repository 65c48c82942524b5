//! Server operations, independent of the HTTP layer.
//!
//! Every method is synchronous and may block on disk or database I/O; the
//! HTTP handlers run them on the blocking thread pool.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant};

use dabih_core::api::{
    decode_key, format_crc32, ChunkHashEntry, ChunkReceipt, DatasetInfo, DatasetState, DuplicateHint,
    EventInfo, FinishResponse, IncompleteUpload, KeyInfo, LoginRequest, LoginResponse, Permission,
    ReencryptResponse, ShareRequest, ShareResponse, StartUploadRequest, StartUploadResponse,
    TokenResponse, UserInfo,
};
use dabih_core::crypto::dataset_hash;
use dabih_core::storage::{RecoveryChunk, RootEnvelope, RECOVERY_VERSION};
use dabih_core::{
    encapsulate, import_pkcs8, open_chunk, seal_chunk, ChunkStore, DatasetKey, Digest, FsStore,
    ImportedKey, KeyEnvelope, PublicKey, RecoveryFile, WordLists,
};
use rand::rngs::OsRng;

use crate::auth::{self, Caller};
use crate::config::ServerConfig;
use crate::db::{
    now, ChunkRow, Database, DatasetRecord, NewEvent, PublicKeyRecord, TokenRecord, TokenScope, UserRecord,
};
use crate::error::{ServiceError, ServiceResult};

const SYSTEM_ACTOR: &str = "system";
const MAX_FILENAME_LEN: usize = 1024;

/// An upload in progress. The dataset key lives only here and is zeroized
/// when the session is dropped.
struct UploadSession {
    owner: String,
    key: DatasetKey,
    filename: String,
    size: u64,
    chunk_size: u64,
    chunk_count: u64,
    received: BTreeMap<u64, Digest>,
    in_flight: HashSet<u64>,
    last_activity: Instant,
}

impl UploadSession {
    fn expected_len(&self, index: u64) -> u64 {
        if index + 1 == self.chunk_count {
            self.size - self.chunk_size * (self.chunk_count - 1)
        } else {
            self.chunk_size
        }
    }
}

pub struct Dabih {
    config: ServerConfig,
    db: Database,
    store: Arc<dyn ChunkStore>,
    words: WordLists,
    root_keys: Vec<PublicKey>,
    sessions: Mutex<HashMap<String, UploadSession>>,
    dataset_locks: Mutex<HashMap<String, Arc<RwLock<()>>>>,
    create_lock: Mutex<()>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn user_info(u: &UserRecord) -> UserInfo {
    UserInfo {
        user_id: u.user_id.clone(),
        name: u.name.clone(),
        email: u.email.clone(),
        is_admin: u.is_admin,
    }
}

fn key_info(k: &PublicKeyRecord) -> KeyInfo {
    KeyInfo {
        fingerprint: k.fingerprint,
        owner: k.owner.clone(),
        enabled: k.enabled,
        is_root: k.is_root,
        created_at: k.created_at,
    }
}

fn event<'a>(caller: &'a Caller, action: &'a str, mnemonic: Option<&'a str>, detail: String) -> NewEvent<'a> {
    NewEvent {
        actor: &caller.user_id,
        action,
        mnemonic,
        detail,
    }
}

fn recovery_chunk(row: &ChunkRow) -> RecoveryChunk {
    RecoveryChunk {
        index: row.index,
        iv: hex::encode(row.iv),
        plain_hash: row.plain_hash,
        crc32: format_crc32(row.crc32),
        plain_size: row.plain_size,
    }
}

fn load_root_key(path: &std::path::Path) -> ServiceResult<PublicKey> {
    let bytes = std::fs::read(path)
        .map_err(|e| ServiceError::Internal(format!("reading root key {}: {e}", path.display())))?;
    match import_pkcs8(&bytes) {
        Ok(ImportedKey::Public(k)) => Ok(k),
        Ok(ImportedKey::Private(k)) => Ok(k.public().clone()),
        Err(e) => Err(ServiceError::InvalidKey(format!("root key {}: {e}", path.display()))),
    }
}

fn validate_filename(name: &str) -> ServiceResult<()> {
    if name.is_empty() || name.len() > MAX_FILENAME_LEN || name.chars().any(char::is_control) {
        return Err(ServiceError::BadRequest("invalid filename".into()));
    }
    Ok(())
}

impl Dabih {
    /// Opens the database and the filesystem store named in `config`.
    pub fn open(config: ServerConfig) -> ServiceResult<Self> {
        let store = FsStore::new(&config.storage_root)?;
        Self::with_store(config, Arc::new(store))
    }

    /// Like [`Dabih::open`] with a caller-supplied chunk store.
    pub fn with_store(config: ServerConfig, store: Arc<dyn ChunkStore>) -> ServiceResult<Self> {
        config
            .validate()
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let db = Database::open(&config.database_path)?;
        let words = match (&config.adjectives_file, &config.names_file) {
            (Some(a), Some(n)) => {
                WordLists::from_files(a, n).map_err(|e| ServiceError::Internal(e.to_string()))?
            }
            _ => WordLists::bundled(),
        };
        let root_keys = config
            .root_keys
            .iter()
            .map(|p| load_root_key(p))
            .collect::<ServiceResult<Vec<_>>>()?;
        let service = Self {
            config,
            db,
            store,
            words,
            root_keys,
            sessions: Mutex::new(HashMap::new()),
            dataset_locks: Mutex::new(HashMap::new()),
            create_lock: Mutex::new(()),
        };
        service.register_root_keys()?;
        service.reconcile()?;
        Ok(service)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn database(&self) -> &Database {
        &self.db
    }

    pub fn root_keys(&self) -> &[PublicKey] {
        &self.root_keys
    }

    fn register_root_keys(&self) -> ServiceResult<()> {
        for key in &self.root_keys {
            match self.db.get_key(&key.fingerprint())? {
                Some(rec) if rec.is_root => {}
                Some(_) => {
                    return Err(ServiceError::Conflict(format!(
                        "root key {} is already enrolled as a user key",
                        key.fingerprint()
                    )))
                }
                None => {
                    self.db.add_public_key(
                        None,
                        key.der(),
                        &key.fingerprint(),
                        true,
                        true,
                        Some(NewEvent {
                            actor: SYSTEM_ACTOR,
                            action: "root_key_added",
                            mnemonic: None,
                            detail: key.fingerprint().to_hex(),
                        }),
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Repairs state left behind by a crash: uploads whose in-memory key is
    /// gone are abandoned, half-finished re-encryptions are rolled forward or
    /// back depending on whether the database swap committed.
    fn reconcile(&self) -> ServiceResult<()> {
        for d in self.db.datasets_in_state(DatasetState::Uploading)? {
            self.abandon(&d.mnemonic, "upload_abandoned")?;
        }
        for d in self.db.datasets_in_state(DatasetState::Deleted)? {
            self.store.delete_dataset_files(&d.mnemonic)?;
        }
        for d in self.db.datasets_in_state(DatasetState::Complete)? {
            let staged = self.store.list_staged(&d.mnemonic)?;
            if staged.is_empty() {
                continue;
            }
            let rows: HashMap<u64, ChunkRow> = self
                .db
                .chunk_rows(&d.mnemonic)?
                .into_iter()
                .map(|r| (r.index, r))
                .collect();
            let mut rolled_forward = false;
            for index in staged {
                let bytes = self.store.get_staged(&d.mnemonic, index)?;
                let committed = rows.get(&index).is_some_and(|r| {
                    r.stored_size == bytes.len() as u64 && r.crc32 == dabih_core::crypto::crc32(&bytes)
                });
                if committed {
                    self.store.commit_staged(&d.mnemonic, index)?;
                    rolled_forward = true;
                }
            }
            self.store.discard_staged(&d.mnemonic)?;
            if rolled_forward {
                let recovery = self.recovery_from_db(&d)?;
                self.store.write_recovery(&d.mnemonic, &recovery)?;
            }
        }
        Ok(())
    }

    fn abandon(&self, mnemonic: &str, action: &str) -> ServiceResult<()> {
        self.db.mark_deleted(
            mnemonic,
            NewEvent {
                actor: SYSTEM_ACTOR,
                action,
                mnemonic: Some(mnemonic),
                detail: String::new(),
            },
        )?;
        self.store.delete_dataset_files(mnemonic)?;
        Ok(())
    }

    fn dataset_lock(&self, mnemonic: &str) -> Arc<RwLock<()>> {
        lock(&self.dataset_locks)
            .entry(mnemonic.to_string())
            .or_default()
            .clone()
    }

    // authentication

    pub fn login(&self, req: &LoginRequest) -> ServiceResult<LoginResponse> {
        let user_id = req.user_id.trim();
        if user_id.is_empty() || req.password.is_empty() {
            return Err(ServiceError::BadRequest("user_id and password are required".into()));
        }
        let is_admin = self.config.admins.iter().any(|a| a == user_id);
        let wanted = UserRecord {
            user_id: user_id.to_string(),
            name: req.name.clone(),
            email: req.email.clone(),
            is_admin,
        };
        let user = match self.db.get_user(user_id)? {
            None => {
                let hash = auth::hash_password(&req.password).map_err(ServiceError::Internal)?;
                match self.db.create_user(&wanted, Some(&hash)) {
                    Ok(()) => wanted,
                    // Lost a race with a concurrent first login; verify against the winner.
                    Err(crate::db::DbError::Conflict(_)) => self.verify_login(user_id, &req.password, &wanted)?,
                    Err(e) => return Err(e.into()),
                }
            }
            Some(_) => self.verify_login(user_id, &req.password, &wanted)?,
        };
        let (token, expires_at) = self.issue_token(&user.user_id, TokenScope::Api, self.config.session_ttl)?;
        Ok(LoginResponse {
            token,
            expires_at,
            user: user_info(&user),
        })
    }

    fn verify_login(&self, user_id: &str, password: &str, wanted: &UserRecord) -> ServiceResult<UserRecord> {
        let stored = self.db.password_hash(user_id)?.ok_or(ServiceError::Unauthorized)?;
        if !auth::verify_password(password, &stored) {
            return Err(ServiceError::Unauthorized);
        }
        let current = self.db.get_user(user_id)?.ok_or(ServiceError::Unauthorized)?;
        let mut updated = current.clone();
        if !wanted.name.is_empty() {
            updated.name = wanted.name.clone();
        }
        if !wanted.email.is_empty() {
            updated.email = wanted.email.clone();
        }
        updated.is_admin = wanted.is_admin;
        if updated != current {
            self.db.update_user(&updated)?;
        }
        Ok(updated)
    }

    fn issue_token(&self, owner: &str, scope: TokenScope, ttl: u64) -> ServiceResult<(String, i64)> {
        let token = auth::new_token();
        let created_at = now();
        let expires_at = created_at.saturating_add(ttl.min(i64::MAX as u64) as i64);
        let action = match scope {
            TokenScope::Api => "login",
            TokenScope::Upload => "upload_token_created",
        };
        self.db.create_token(
            &TokenRecord {
                token_hash: auth::token_hash(&token),
                owner: owner.to_string(),
                scope,
                created_at,
                expires_at,
                revoked: false,
            },
            Some(NewEvent {
                actor: owner,
                action,
                mnemonic: None,
                detail: format!("expires_at={expires_at}"),
            }),
        )?;
        Ok((token, expires_at))
    }

    /// Resolves a bearer token to its caller.
    pub fn authenticate(&self, token: &str) -> ServiceResult<Caller> {
        let rec = self
            .db
            .find_token(&auth::token_hash(token))?
            .ok_or(ServiceError::Unauthorized)?;
        if rec.revoked || rec.expires_at <= now() {
            return Err(ServiceError::Unauthorized);
        }
        let user = self.db.get_user(&rec.owner)?.ok_or(ServiceError::Unauthorized)?;
        Ok(Caller {
            is_admin: user.is_admin && rec.scope == TokenScope::Api,
            user_id: user.user_id,
            scope: rec.scope,
        })
    }

    fn require_api(&self, caller: &Caller) -> ServiceResult<()> {
        if caller.is_upload_token() {
            return Err(ServiceError::Forbidden(
                "upload tokens are limited to upload endpoints".into(),
            ));
        }
        Ok(())
    }

    fn require_admin(&self, caller: &Caller) -> ServiceResult<()> {
        self.require_api(caller)?;
        if !caller.is_admin {
            return Err(ServiceError::Forbidden("administrator access required".into()));
        }
        Ok(())
    }

    fn enabled_public_keys(&self, user_id: &str) -> ServiceResult<Vec<PublicKey>> {
        self.db
            .enabled_keys_of(user_id)?
            .iter()
            .map(|k| PublicKey::from_der(&k.der).map_err(|e| ServiceError::Internal(e.to_string())))
            .collect()
    }

    fn require_enabled_key(&self, user_id: &str) -> ServiceResult<()> {
        if self.db.enabled_keys_of(user_id)?.is_empty() {
            return Err(ServiceError::NoEnabledKey(user_id.to_string()));
        }
        Ok(())
    }

    // keys

    pub fn enroll_key(&self, caller: &Caller, pem: &str) -> ServiceResult<KeyInfo> {
        self.require_api(caller)?;
        let key = match import_pkcs8(pem.as_bytes())? {
            ImportedKey::Public(k) => k,
            ImportedKey::Private(_) => {
                return Err(ServiceError::InvalidKey(
                    "expected a public key; private keys must never be uploaded".into(),
                ))
            }
        };
        let fp = key.fingerprint();
        let rec = self.db.add_public_key(
            Some(&caller.user_id),
            key.der(),
            &fp,
            false,
            false,
            Some(event(caller, "key_enrolled", None, fp.to_hex())),
        )?;
        Ok(key_info(&rec))
    }

    pub fn list_keys(&self, caller: &Caller) -> ServiceResult<Vec<KeyInfo>> {
        self.require_api(caller)?;
        Ok(self.db.keys_of(&caller.user_id)?.iter().map(key_info).collect())
    }

    pub fn list_all_keys(&self, caller: &Caller) -> ServiceResult<Vec<KeyInfo>> {
        self.require_admin(caller)?;
        let mut keys = Vec::new();
        for user in self.db.list_users()? {
            keys.extend(self.db.keys_of(&user.user_id)?.iter().map(key_info));
        }
        keys.extend(self.db.root_keys()?.iter().map(key_info));
        Ok(keys)
    }

    pub fn enable_key(&self, caller: &Caller, fingerprint: &Digest) -> ServiceResult<KeyInfo> {
        self.require_admin(caller)?;
        self.db.set_key_enabled(
            fingerprint,
            true,
            Some(event(caller, "key_enabled", None, fingerprint.to_hex())),
        )?;
        let rec = self
            .db
            .get_key(fingerprint)?
            .ok_or_else(|| ServiceError::NotFound(format!("key {fingerprint}")))?;
        Ok(key_info(&rec))
    }

    // upload

    pub fn start_upload(&self, caller: &Caller, req: &StartUploadRequest) -> ServiceResult<StartUploadResponse> {
        validate_filename(&req.filename)?;
        if req.size == 0 {
            return Err(ServiceError::BadRequest("empty files cannot be uploaded".into()));
        }
        let limit = self.config.chunk_size as u64;
        let chunk_size = req.chunk_size.unwrap_or(limit);
        if chunk_size == 0 {
            return Err(ServiceError::BadRequest("chunk_size must be positive".into()));
        }
        if chunk_size > limit {
            return Err(ServiceError::ChunkTooLarge {
                size: chunk_size,
                limit,
            });
        }
        self.require_enabled_key(&caller.user_id)?;

        let duplicate = match &req.first_chunk_hash {
            Some(h) => self
                .db
                .find_first_chunk_match(&caller.user_id, h)?
                .map(|(mnemonic, dataset_hash)| DuplicateHint {
                    mnemonic,
                    dataset_hash,
                }),
            None => None,
        };

        let mnemonic = {
            let _guard = lock(&self.create_lock);
            let mnemonic = self
                .words
                .generate(&mut OsRng, |m| self.db.mnemonic_taken(m).unwrap_or(false))
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
            self.db.create_dataset(
                &DatasetRecord {
                    mnemonic: mnemonic.clone(),
                    owner: caller.user_id.clone(),
                    filename: req.filename.clone(),
                    size: req.size,
                    dataset_hash: None,
                    key_fingerprint: None,
                    created_at: now(),
                    state: DatasetState::Uploading,
                },
                &caller.user_id,
            )?;
            mnemonic
        };

        lock(&self.sessions).insert(
            mnemonic.clone(),
            UploadSession {
                owner: caller.user_id.clone(),
                key: DatasetKey::generate(),
                filename: req.filename.clone(),
                size: req.size,
                chunk_size,
                chunk_count: req.size.div_ceil(chunk_size),
                received: BTreeMap::new(),
                in_flight: HashSet::new(),
                last_activity: Instant::now(),
            },
        );
        Ok(StartUploadResponse {
            mnemonic,
            chunk_size,
            duplicate,
        })
    }

    pub fn upload_chunk(
        &self,
        caller: &Caller,
        mnemonic: &str,
        index: u64,
        plain_hash: &Digest,
        data: &[u8],
    ) -> ServiceResult<ChunkReceipt> {
        let limit = self.config.chunk_size as u64;
        if data.len() as u64 > limit {
            return Err(ServiceError::ChunkTooLarge {
                size: data.len() as u64,
                limit,
            });
        }
        let key = {
            let mut sessions = lock(&self.sessions);
            let session = self.session_of(&mut sessions, caller, mnemonic)?;
            if index >= session.chunk_count {
                return Err(ServiceError::BadRequest(format!(
                    "chunk index {index} out of range, upload has {} chunks",
                    session.chunk_count
                )));
            }
            let expected = session.expected_len(index);
            if data.len() as u64 != expected {
                return Err(ServiceError::BadRequest(format!(
                    "chunk {index} has {} bytes, expected {expected}",
                    data.len()
                )));
            }
            if session.received.contains_key(&index) || !session.in_flight.insert(index) {
                return Err(ServiceError::Conflict(format!("chunk {index} already received")));
            }
            session.last_activity = Instant::now();
            session.key.clone()
        };

        let result = self.store_chunk(mnemonic, index, plain_hash, data, &key);

        let mut sessions = lock(&self.sessions);
        let Some(session) = sessions.get_mut(mnemonic) else {
            if result.is_ok() {
                let _ = self.store.delete_dataset_files(mnemonic);
            }
            return Err(ServiceError::Conflict("upload was cancelled".into()));
        };
        session.in_flight.remove(&index);
        session.last_activity = Instant::now();
        let receipt = result?;
        session.received.insert(index, *plain_hash);
        Ok(receipt)
    }

    fn store_chunk(
        &self,
        mnemonic: &str,
        index: u64,
        plain_hash: &Digest,
        data: &[u8],
        key: &DatasetKey,
    ) -> ServiceResult<ChunkReceipt> {
        if Digest::of(data) != *plain_hash {
            return Err(ServiceError::HashMismatch);
        }
        let sealed = seal_chunk(key, index, data)?;
        let stored_size = self.store.put_chunk(mnemonic, index, &sealed.ciphertext)?;
        if let Err(e) = self.db.add_chunk_row(&ChunkRow::from_sealed(mnemonic, &sealed)) {
            let _ = self.store.remove_chunk(mnemonic, index);
            return Err(e.into());
        }
        Ok(ChunkReceipt {
            index,
            crc32: format_crc32(sealed.crc32),
            stored_size,
        })
    }

    fn session_of<'a>(
        &self,
        sessions: &'a mut HashMap<String, UploadSession>,
        caller: &Caller,
        mnemonic: &str,
    ) -> ServiceResult<&'a mut UploadSession> {
        let session = sessions
            .get_mut(mnemonic)
            .ok_or_else(|| ServiceError::NotFound(format!("upload {mnemonic}")))?;
        if session.owner != caller.user_id {
            return Err(ServiceError::forbidden());
        }
        Ok(session)
    }

    pub fn finish_upload(&self, caller: &Caller, mnemonic: &str) -> ServiceResult<FinishResponse> {
        let session = {
            let mut sessions = lock(&self.sessions);
            let session = self.session_of(&mut sessions, caller, mnemonic)?;
            if !session.in_flight.is_empty() {
                return Err(ServiceError::Conflict("chunks are still being uploaded".into()));
            }
            let missing: Vec<u64> = (0..session.chunk_count)
                .filter(|i| !session.received.contains_key(i))
                .collect();
            if !missing.is_empty() {
                return Err(ServiceError::MissingChunks(missing));
            }
            sessions.remove(mnemonic).expect("session present")
        };
        match self.complete(caller, mnemonic, &session) {
            Ok(r) => Ok(r),
            Err(e) => {
                lock(&self.sessions).insert(mnemonic.to_string(), session);
                Err(e)
            }
        }
    }

    fn complete(&self, caller: &Caller, mnemonic: &str, session: &UploadSession) -> ServiceResult<FinishResponse> {
        let hashes: Vec<Digest> = session.received.values().copied().collect();
        let hash = dataset_hash(&hashes)?;
        let rows = self.db.chunk_rows(mnemonic)?;
        if rows.len() != hashes.len() || rows.iter().zip(&hashes).any(|(r, h)| r.plain_hash != *h) {
            return Err(ServiceError::Integrity(format!(
                "chunk records of {mnemonic} do not match the upload session"
            )));
        }
        let owner_keys = self.enabled_public_keys(&session.owner)?;
        if owner_keys.is_empty() {
            return Err(ServiceError::NoEnabledKey(session.owner.clone()));
        }
        let envelopes = owner_keys
            .iter()
            .chain(&self.root_keys)
            .map(|k| encapsulate(k, &session.key))
            .collect::<Result<Vec<_>, _>>()?;
        let key_fingerprint = session.key.fingerprint();
        let recovery = self.build_recovery(
            mnemonic,
            &session.filename,
            session.size,
            &hash,
            &key_fingerprint,
            &rows,
            &envelopes,
        );
        self.store.write_recovery(mnemonic, &recovery)?;
        self.db
            .set_dataset_complete(mnemonic, &hash, &key_fingerprint, &envelopes, &caller.user_id)?;
        Ok(FinishResponse {
            mnemonic: mnemonic.to_string(),
            dataset_hash: hash,
            key_fingerprint,
            chunks: rows.len() as u64,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_recovery(
        &self,
        mnemonic: &str,
        filename: &str,
        size: u64,
        hash: &Digest,
        key_fingerprint: &Digest,
        rows: &[ChunkRow],
        envelopes: &[KeyEnvelope],
    ) -> RecoveryFile {
        let roots: HashSet<Digest> = self.root_keys.iter().map(|k| k.fingerprint()).collect();
        RecoveryFile {
            version: RECOVERY_VERSION,
            mnemonic: mnemonic.to_string(),
            filename: filename.to_string(),
            size,
            dataset_hash: *hash,
            key_fingerprint: *key_fingerprint,
            chunks: rows.iter().map(recovery_chunk).collect(),
            root_envelopes: envelopes
                .iter()
                .filter(|e| roots.contains(&e.recipient_fingerprint))
                .map(|e| RootEnvelope {
                    fingerprint: e.recipient_fingerprint,
                    ciphertext: e.ciphertext.clone(),
                })
                .collect(),
        }
    }

    fn recovery_from_db(&self, d: &DatasetRecord) -> ServiceResult<RecoveryFile> {
        let hash = d
            .dataset_hash
            .ok_or_else(|| ServiceError::Internal(format!("{} has no dataset hash", d.mnemonic)))?;
        let key_fp = d
            .key_fingerprint
            .ok_or_else(|| ServiceError::Internal(format!("{} has no key fingerprint", d.mnemonic)))?;
        let rows = self.db.chunk_rows(&d.mnemonic)?;
        let envelopes = self.db.envelopes(&d.mnemonic)?;
        Ok(self.build_recovery(&d.mnemonic, &d.filename, d.size, &hash, &key_fp, &rows, &envelopes))
    }

    pub fn cancel_upload(&self, caller: &Caller, mnemonic: &str) -> ServiceResult<()> {
        {
            let mut sessions = lock(&self.sessions);
            let session = self.session_of(&mut sessions, caller, mnemonic)?;
            if !session.in_flight.is_empty() {
                return Err(ServiceError::Conflict("chunks are still being uploaded".into()));
            }
            sessions.remove(mnemonic);
        }
        self.db
            .mark_deleted(mnemonic, event(caller, "upload_cancelled", Some(mnemonic), String::new()))?;
        self.store.delete_dataset_files(mnemonic)?;
        Ok(())
    }

    pub fn list_incomplete(&self, caller: &Caller) -> ServiceResult<Vec<IncompleteUpload>> {
        let sessions = lock(&self.sessions);
        let mut out: Vec<IncompleteUpload> = sessions
            .iter()
            .filter(|(_, s)| s.owner == caller.user_id)
            .map(|(m, s)| IncompleteUpload {
                mnemonic: m.clone(),
                filename: s.filename.clone(),
                size: s.size,
                chunk_size: s.chunk_size,
                chunks: s
                    .received
                    .iter()
                    .map(|(&index, &plain_hash)| ChunkHashEntry { index, plain_hash })
                    .collect(),
            })
            .collect();
        out.sort_by(|a, b| a.mnemonic.cmp(&b.mnemonic));
        Ok(out)
    }

    /// Drops upload sessions idle for longer than `max_idle`; their keys are
    /// zeroized and the partial uploads deleted. Returns the evicted ids.
    pub fn evict_idle(&self, max_idle: Duration) -> ServiceResult<Vec<String>> {
        let evicted: Vec<String> = {
            let mut sessions = lock(&self.sessions);
            let stale: Vec<String> = sessions
                .iter()
                .filter(|(_, s)| s.in_flight.is_empty() && s.last_activity.elapsed() >= max_idle)
                .map(|(m, _)| m.clone())
                .collect();
            for m in &stale {
                sessions.remove(m);
            }
            stale
        };
        for m in &evicted {
            self.abandon(m, "upload_evicted")?;
        }
        Ok(evicted)
    }

    // datasets

    fn complete_dataset(&self, mnemonic: &str) -> ServiceResult<DatasetRecord> {
        match self.db.get_dataset(mnemonic)? {
            Some(d) if d.state == DatasetState::Complete => Ok(d),
            _ => Err(ServiceError::NotFound(format!("dataset {mnemonic}"))),
        }
    }

    /// The dataset and the caller's permission, which must cover `needed`.
    fn authorize(&self, caller: &Caller, mnemonic: &str, needed: Permission) -> ServiceResult<DatasetRecord> {
        self.require_api(caller)?;
        let d = self.complete_dataset(mnemonic)?;
        match self.db.member_permission(mnemonic, &caller.user_id)? {
            Some(p) if p.allows(needed) => Ok(d),
            _ => Err(ServiceError::forbidden()),
        }
    }

    fn dataset_info(&self, d: &DatasetRecord, permission: Option<Permission>) -> ServiceResult<DatasetInfo> {
        let chunks = self.db.chunk_count(&d.mnemonic)?;
        let chunk_size = match self.db.chunk_row(&d.mnemonic, 0)? {
            Some(first) if chunks > 1 => first.plain_size,
            _ => d.size,
        };
        Ok(DatasetInfo {
            mnemonic: d.mnemonic.clone(),
            filename: d.filename.clone(),
            size: d.size,
            owner: d.owner.clone(),
            state: d.state,
            dataset_hash: d.dataset_hash,
            key_fingerprint: d.key_fingerprint,
            permission,
            chunks,
            chunk_size,
            created_at: d.created_at,
        })
    }

    pub fn list_datasets(&self, caller: &Caller) -> ServiceResult<Vec<DatasetInfo>> {
        self.require_api(caller)?;
        self.db
            .datasets_for(&caller.user_id)?
            .iter()
            .map(|(d, p)| self.dataset_info(d, Some(*p)))
            .collect()
    }

    /// Metadata of one dataset; members and administrators may read it.
    pub fn get_dataset(&self, caller: &Caller, mnemonic: &str) -> ServiceResult<DatasetInfo> {
        self.require_api(caller)?;
        let d = self.complete_dataset(mnemonic)?;
        let permission = self.db.member_permission(mnemonic, &caller.user_id)?;
        if permission.is_none() && !caller.is_admin {
            return Err(ServiceError::forbidden());
        }
        self.dataset_info(&d, permission)
    }

    pub fn get_envelope(&self, caller: &Caller, mnemonic: &str, fingerprint: Option<&Digest>) -> ServiceResult<KeyEnvelope> {
        self.authorize(caller, mnemonic, Permission::Read)?;
        let own: Vec<Digest> = self.db.keys_of(&caller.user_id)?.iter().map(|k| k.fingerprint).collect();
        let candidates: Vec<&Digest> = match fingerprint {
            Some(fp) if own.contains(fp) => vec![fp],
            Some(_) => return Err(ServiceError::NoEnvelope),
            None => own.iter().collect(),
        };
        for fp in candidates {
            if let Some(env) = self.db.envelope_for(mnemonic, fp)? {
                return Ok(env);
            }
        }
        Err(ServiceError::NoEnvelope)
    }

    /// Stored ciphertext of one chunk with its metadata. The checksum is not
    /// verified here; clients check it on receipt.
    pub fn download_chunk(&self, caller: &Caller, mnemonic: &str, index: u64) -> ServiceResult<(ChunkRow, Vec<u8>)> {
        self.authorize(caller, mnemonic, Permission::Read)?;
        let lock = self.dataset_lock(mnemonic);
        let _guard = lock.read().unwrap_or_else(|e| e.into_inner());
        let row = self
            .db
            .chunk_row(mnemonic, index)?
            .ok_or_else(|| ServiceError::NotFound(format!("chunk {index} of {mnemonic}")))?;
        let bytes = self.store.get_chunk(mnemonic, index)?;
        Ok((row, bytes))
    }

    fn check_key(&self, d: &DatasetRecord, key: &str) -> ServiceResult<DatasetKey> {
        let key = decode_key(key).map_err(|_| ServiceError::BadRequest("key must be 32 bytes, base64".into()))?;
        if Some(key.fingerprint()) != d.key_fingerprint {
            return Err(ServiceError::FingerprintMismatch);
        }
        Ok(key)
    }

    /// Validates a server-side download request. The returned handle
    /// decrypts chunk by chunk; plaintext is only ever held in memory.
    pub fn prepare_download(self: &Arc<Self>, caller: &Caller, mnemonic: &str, key: &str) -> ServiceResult<PlainDownload> {
        let d = self.authorize(caller, mnemonic, Permission::Read)?;
        let key = self.check_key(&d, key)?;
        self.db.append_event(event(caller, "server_download", Some(mnemonic), String::new()))?;
        Ok(PlainDownload {
            service: Arc::clone(self),
            mnemonic: mnemonic.to_string(),
            filename: d.filename,
            size: d.size,
            key,
        })
    }

    pub fn share(&self, caller: &Caller, mnemonic: &str, req: &ShareRequest) -> ServiceResult<ShareResponse> {
        let d = self.authorize(caller, mnemonic, Permission::Write)?;
        let key = self.check_key(&d, &req.key)?;
        if self.db.get_user(&req.user)?.is_none() {
            return Err(ServiceError::NotFound(format!("user {}", req.user)));
        }
        let permission = if req.user == d.owner {
            Permission::Write
        } else {
            req.permission
        };
        let recipient_keys = self.enabled_public_keys(&req.user)?;
        if recipient_keys.is_empty() {
            return Err(ServiceError::NoEnabledKey(req.user.clone()));
        }
        let envelopes = recipient_keys
            .iter()
            .map(|k| encapsulate(k, &key))
            .collect::<Result<Vec<_>, _>>()?;
        let lock = self.dataset_lock(mnemonic);
        let _guard = lock.read().unwrap_or_else(|e| e.into_inner());
        self.db.share(
            mnemonic,
            &req.user,
            permission,
            &envelopes,
            event(caller, "share", Some(mnemonic), format!("{} {}", req.user, permission)),
        )?;
        Ok(ShareResponse {
            user: req.user.clone(),
            permission,
            envelopes: envelopes.len(),
        })
    }

    pub fn revoke_member(&self, caller: &Caller, mnemonic: &str, user: &str) -> ServiceResult<()> {
        let d = self.authorize(caller, mnemonic, Permission::Write)?;
        if user == d.owner {
            return Err(ServiceError::Forbidden("the owner's access cannot be revoked".into()));
        }
        self.db
            .remove_member(mnemonic, user, event(caller, "member_removed", Some(mnemonic), user.to_string()))?;
        Ok(())
    }

    /// Rotates the dataset key: every chunk is decrypted and sealed again
    /// under a fresh key, and all envelopes are replaced. New ciphertext is
    /// staged beside the old until the database swap commits.
    pub fn reencrypt(&self, caller: &Caller, mnemonic: &str, key: &str) -> ServiceResult<ReencryptResponse> {
        let d = self.authorize(caller, mnemonic, Permission::Write)?;
        self.check_key(&d, key)?;
        let lock = self.dataset_lock(mnemonic);
        let _guard = lock.write().unwrap_or_else(|e| e.into_inner());
        let d = self.complete_dataset(mnemonic)?;
        let old_key = self.check_key(&d, key)?;
        let old_fp = d.key_fingerprint.expect("complete dataset has a key");

        let new_key = DatasetKey::generate();
        let new_fp = new_key.fingerprint();
        let staged = self.stage_reencrypted(mnemonic, &old_key, &new_key);
        let rows = match staged {
            Ok(rows) => rows,
            Err(e) => {
                let _ = self.store.discard_staged(mnemonic);
                return Err(e);
            }
        };
        let envelopes = match self.envelopes_for_members(mnemonic, &new_key) {
            Ok(envs) => envs,
            Err(e) => {
                let _ = self.store.discard_staged(mnemonic);
                return Err(e);
            }
        };
        if let Err(e) = self.db.replace_key(
            mnemonic,
            &old_fp,
            &new_fp,
            &rows,
            &envelopes,
            event(caller, "reencrypt", Some(mnemonic), new_fp.to_hex()),
        ) {
            let _ = self.store.discard_staged(mnemonic);
            return Err(e.into());
        }
        // The database now refers to the staged ciphertext; from here on a
        // failure is repaired by rolling forward at the next start.
        for row in &rows {
            self.store.commit_staged(mnemonic, row.index)?;
        }
        let hash = d.dataset_hash.expect("complete dataset has a hash");
        let recovery = self.build_recovery(mnemonic, &d.filename, d.size, &hash, &new_fp, &rows, &envelopes);
        self.store.write_recovery(mnemonic, &recovery)?;
        Ok(ReencryptResponse { key_fingerprint: new_fp })
    }

    fn stage_reencrypted(&self, mnemonic: &str, old: &DatasetKey, new: &DatasetKey) -> ServiceResult<Vec<ChunkRow>> {
        let mut rows = Vec::new();
        for row in self.db.chunk_rows(mnemonic)? {
            let sealed = row.to_sealed(self.store.get_chunk(mnemonic, row.index)?);
            let plain = zeroize::Zeroizing::new(open_chunk(old, &sealed)?);
            let resealed = seal_chunk(new, row.index, &plain)?;
            self.store.stage_chunk(mnemonic, row.index, &resealed.ciphertext)?;
            rows.push(ChunkRow::from_sealed(mnemonic, &resealed));
        }
        Ok(rows)
    }

    /// Envelopes for every enabled key of every member plus every root key.
    fn envelopes_for_members(&self, mnemonic: &str, key: &DatasetKey) -> ServiceResult<Vec<KeyEnvelope>> {
        let mut recipients: BTreeMap<Digest, PublicKey> = BTreeMap::new();
        for (user, _) in self.db.members(mnemonic)? {
            for k in self.enabled_public_keys(&user)? {
                recipients.insert(k.fingerprint(), k);
            }
        }
        for k in &self.root_keys {
            recipients.insert(k.fingerprint(), k.clone());
        }
        Ok(recipients
            .values()
            .map(|k| encapsulate(k, key))
            .collect::<Result<Vec<_>, _>>()?)
    }

    pub fn delete_dataset(&self, caller: &Caller, mnemonic: &str) -> ServiceResult<()> {
        self.require_api(caller)?;
        self.complete_dataset(mnemonic)?;
        let permission = self.db.member_permission(mnemonic, &caller.user_id)?;
        let allowed = permission.is_some_and(|p| p.allows(Permission::Write)) || caller.is_admin;
        if !allowed {
            return Err(ServiceError::forbidden());
        }
        let lock = self.dataset_lock(mnemonic);
        let _guard = lock.write().unwrap_or_else(|e| e.into_inner());
        self.db
            .mark_deleted(mnemonic, event(caller, "dataset_deleted", Some(mnemonic), String::new()))?;
        self.store.delete_dataset_files(mnemonic)?;
        Ok(())
    }

    // tokens

    pub fn create_upload_token(&self, caller: &Caller, ttl: Option<u64>) -> ServiceResult<TokenResponse> {
        self.require_api(caller)?;
        self.require_enabled_key(&caller.user_id)?;
        let max = self.config.upload_token_ttl;
        let ttl = ttl.unwrap_or(max);
        if ttl == 0 || ttl > max {
            return Err(ServiceError::BadRequest(format!("ttl must be between 1 and {max} seconds")));
        }
        let (token, expires_at) = self.issue_token(&caller.user_id, TokenScope::Upload, ttl)?;
        Ok(TokenResponse { token, expires_at })
    }

    pub fn revoke_token(&self, caller: &Caller, token: &str) -> ServiceResult<()> {
        self.require_api(caller)?;
        let hash = auth::token_hash(token);
        let rec = self
            .db
            .find_token(&hash)?
            .ok_or_else(|| ServiceError::NotFound("token".into()))?;
        if rec.owner != caller.user_id && !caller.is_admin {
            return Err(ServiceError::NotFound("token".into()));
        }
        self.db.revoke_token(
            &hash,
            event(caller, "token_revoked", None, format!("owner={}", rec.owner)),
        )?;
        Ok(())
    }

    // admin

    pub fn list_users(&self, caller: &Caller) -> ServiceResult<Vec<UserInfo>> {
        self.require_admin(caller)?;
        Ok(self.db.list_users()?.iter().map(user_info).collect())
    }

    pub fn list_events(&self, caller: &Caller, limit: u32) -> ServiceResult<Vec<EventInfo>> {
        self.require_admin(caller)?;
        Ok(self
            .db
            .list_events(limit)?
            .into_iter()
            .map(|e| EventInfo {
                id: e.id,
                timestamp: e.timestamp,
                actor: e.actor,
                action: e.action,
                mnemonic: e.mnemonic,
                detail: e.detail,
            })
            .collect())
    }
}

/// A validated server-side download.
pub struct PlainDownload {
    service: Arc<Dabih>,
    mnemonic: String,
    filename: String,
    size: u64,
    key: DatasetKey,
}

impl PlainDownload {
    pub fn filename(&self) -> &str {
        &self.filename
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// Decrypts the chunks in order and hands each to `sink`. Stops early
    /// when `sink` returns false. Holds the dataset read lock throughout so a
    /// concurrent re-encryption cannot swap chunks mid-stream.
    pub fn run(self, mut sink: impl FnMut(ServiceResult<Vec<u8>>) -> bool) {
        let svc = &self.service;
        let lock = svc.dataset_lock(&self.mnemonic);
        let _guard = lock.read().unwrap_or_else(|e| e.into_inner());
        let rows = match svc.complete_dataset(&self.mnemonic) {
            Ok(d) if d.key_fingerprint == Some(self.key.fingerprint()) => svc.db.chunk_rows(&self.mnemonic),
            Ok(_) => {
                sink(Err(ServiceError::Conflict("dataset key changed".into())));
                return;
            }
            Err(e) => {
                sink(Err(e));
                return;
            }
        };
        let rows = match rows {
            Ok(r) => r,
            Err(e) => {
                sink(Err(e.into()));
                return;
            }
        };
        for row in rows {
            let chunk = svc
                .store
                .get_chunk(&self.mnemonic, row.index)
                .map_err(ServiceError::from)
                .and_then(|ct| open_chunk(&self.key, &row.to_sealed(ct)).map_err(ServiceError::from));
            let failed = chunk.is_err();
            if !sink(chunk) || failed {
                return;
            }
        }
    }
}
