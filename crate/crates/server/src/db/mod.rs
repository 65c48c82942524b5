//! Transactional metadata store backed by a single SQLite file.
//!
//! Holds users, public keys, datasets, chunk metadata, memberships, key
//! envelopes, tokens and the append-only event log. Never holds plaintext or
//! clear dataset keys.

mod schema;

use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use dabih_core::api::{format_crc32, parse_crc32, DatasetState, Permission};
use dabih_core::crypto::IV_LEN;
use dabih_core::{ChunkSealed, Digest, KeyEnvelope};
use rusqlite::{params, Connection, ErrorCode, OptionalExtension, Row, Transaction, TransactionBehavior};

#[derive(Debug, thiserror::Error)]
pub enum DbError {
    #[error("already exists: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error("database: {0}")]
    Sqlite(rusqlite::Error),
}

impl From<rusqlite::Error> for DbError {
    fn from(e: rusqlite::Error) -> Self {
        match &e {
            rusqlite::Error::SqliteFailure(f, msg) if f.code == ErrorCode::ConstraintViolation => {
                DbError::Conflict(msg.clone().unwrap_or_else(|| "constraint violation".into()))
            }
            _ => DbError::Sqlite(e),
        }
    }
}

pub type DbResult<T> = Result<T, DbError>;

pub fn now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub name: String,
    pub email: String,
    pub is_admin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKeyRecord {
    pub key_id: i64,
    pub owner: Option<String>,
    pub der: Vec<u8>,
    pub fingerprint: Digest,
    pub enabled: bool,
    pub is_root: bool,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub mnemonic: String,
    pub owner: String,
    pub filename: String,
    pub size: u64,
    pub dataset_hash: Option<Digest>,
    pub key_fingerprint: Option<Digest>,
    pub created_at: i64,
    pub state: DatasetState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkRow {
    pub mnemonic: String,
    pub index: u64,
    pub iv: [u8; IV_LEN],
    pub plain_hash: Digest,
    pub crc32: u32,
    pub plain_size: u64,
    pub stored_size: u64,
}

impl ChunkRow {
    pub fn from_sealed(mnemonic: &str, sealed: &ChunkSealed) -> Self {
        Self {
            mnemonic: mnemonic.to_string(),
            index: sealed.index,
            iv: sealed.iv,
            plain_hash: sealed.plain_hash,
            crc32: sealed.crc32,
            plain_size: sealed.plain_size,
            stored_size: sealed.ciphertext.len() as u64,
        }
    }

    pub fn to_sealed(&self, ciphertext: Vec<u8>) -> ChunkSealed {
        ChunkSealed {
            index: self.index,
            iv: self.iv,
            ciphertext,
            plain_hash: self.plain_hash,
            crc32: self.crc32,
            plain_size: self.plain_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScope {
    Api,
    Upload,
}

impl TokenScope {
    fn as_str(&self) -> &'static str {
        match self {
            TokenScope::Api => "api",
            TokenScope::Upload => "upload",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub token_hash: String,
    pub owner: String,
    pub scope: TokenScope,
    pub created_at: i64,
    pub expires_at: i64,
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRow {
    pub id: i64,
    pub timestamp: i64,
    pub actor: String,
    pub action: String,
    pub mnemonic: Option<String>,
    pub detail: String,
}

pub struct Database {
    conn: Mutex<Connection>,
}

fn digest_col(row: &Row<'_>, idx: usize) -> rusqlite::Result<Digest> {
    let s: String = row.get(idx)?;
    Digest::from_hex(&s).map_err(|e| {
        rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e))
    })
}

fn opt_digest_col(row: &Row<'_>, idx: usize) -> rusqlite::Result<Option<Digest>> {
    let s: Option<String> = row.get(idx)?;
    s.map(|s| {
        Digest::from_hex(&s).map_err(|e| {
            rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e))
        })
    })
    .transpose()
}

fn conversion_error(idx: usize, msg: String) -> rusqlite::Error {
    rusqlite::Error::FromSqlConversionFailure(
        idx,
        rusqlite::types::Type::Text,
        Box::<dyn std::error::Error + Send + Sync>::from(msg),
    )
}

const USER_COLS: &str = "user_id, name, email, is_admin";

fn user_from_row(row: &Row<'_>) -> rusqlite::Result<UserRecord> {
    Ok(UserRecord {
        user_id: row.get(0)?,
        name: row.get(1)?,
        email: row.get(2)?,
        is_admin: row.get(3)?,
    })
}

const KEY_COLS: &str = "key_id, owner, der, fingerprint, enabled, is_root, created_at";

fn key_from_row(row: &Row<'_>) -> rusqlite::Result<PublicKeyRecord> {
    Ok(PublicKeyRecord {
        key_id: row.get(0)?,
        owner: row.get(1)?,
        der: row.get(2)?,
        fingerprint: digest_col(row, 3)?,
        enabled: row.get(4)?,
        is_root: row.get(5)?,
        created_at: row.get(6)?,
    })
}

const DATASET_COLS: &str =
    "mnemonic, owner, filename, size, dataset_hash, key_fingerprint, created_at, state";

fn dataset_from_row(row: &Row<'_>) -> rusqlite::Result<DatasetRecord> {
    let state: String = row.get(7)?;
    Ok(DatasetRecord {
        mnemonic: row.get(0)?,
        owner: row.get(1)?,
        filename: row.get(2)?,
        size: row.get::<_, i64>(3)? as u64,
        dataset_hash: opt_digest_col(row, 4)?,
        key_fingerprint: opt_digest_col(row, 5)?,
        created_at: row.get(6)?,
        state: state.parse().map_err(|e| conversion_error(7, e))?,
    })
}

const CHUNK_COLS: &str = "mnemonic, idx, iv, plain_hash, crc32, plain_size, stored_size";

fn chunk_from_row(row: &Row<'_>) -> rusqlite::Result<ChunkRow> {
    let iv_hex: String = row.get(2)?;
    let mut iv = [0u8; IV_LEN];
    hex::decode_to_slice(&iv_hex, &mut iv).map_err(|_| conversion_error(2, "bad iv".into()))?;
    let crc: String = row.get(4)?;
    Ok(ChunkRow {
        mnemonic: row.get(0)?,
        index: row.get::<_, i64>(1)? as u64,
        iv,
        plain_hash: digest_col(row, 3)?,
        crc32: parse_crc32(&crc).ok_or_else(|| conversion_error(4, "bad crc32".into()))?,
        plain_size: row.get::<_, i64>(5)? as u64,
        stored_size: row.get::<_, i64>(6)? as u64,
    })
}

fn envelope_from_row(row: &Row<'_>) -> rusqlite::Result<KeyEnvelope> {
    Ok(KeyEnvelope {
        recipient_fingerprint: digest_col(row, 0)?,
        ciphertext: row.get(1)?,
        key_fingerprint: digest_col(row, 2)?,
    })
}

fn permission_from_str(s: &str, idx: usize) -> rusqlite::Result<Permission> {
    s.parse().map_err(|e| conversion_error(idx, e))
}

fn insert_chunk(tx: &Connection, row: &ChunkRow) -> DbResult<()> {
    tx.execute(
        "INSERT INTO chunks (mnemonic, idx, iv, plain_hash, crc32, plain_size, stored_size)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        params![
            row.mnemonic,
            row.index as i64,
            hex::encode(row.iv),
            row.plain_hash.to_hex(),
            format_crc32(row.crc32),
            row.plain_size as i64,
            row.stored_size as i64
        ],
    )?;
    Ok(())
}

fn upsert_envelope(tx: &Connection, mnemonic: &str, env: &KeyEnvelope) -> DbResult<()> {
    tx.execute(
        "INSERT INTO envelopes (mnemonic, recipient_fingerprint, ciphertext, key_fingerprint)
         VALUES (?1, ?2, ?3, ?4)
         ON CONFLICT (mnemonic, recipient_fingerprint)
         DO UPDATE SET ciphertext = excluded.ciphertext, key_fingerprint = excluded.key_fingerprint",
        params![
            mnemonic,
            env.recipient_fingerprint.to_hex(),
            env.ciphertext,
            env.key_fingerprint.to_hex()
        ],
    )?;
    Ok(())
}

fn insert_event(tx: &Connection, actor: &str, action: &str, mnemonic: Option<&str>, detail: &str) -> DbResult<()> {
    tx.execute(
        "INSERT INTO events (timestamp, actor, action, mnemonic, detail) VALUES (?1, ?2, ?3, ?4, ?5)",
        params![now(), actor, action, mnemonic, detail],
    )?;
    Ok(())
}

/// An event to append in the same transaction as a mutation.
#[derive(Debug, Clone)]
pub struct NewEvent<'a> {
    pub actor: &'a str,
    pub action: &'a str,
    pub mnemonic: Option<&'a str>,
    pub detail: String,
}

impl Database {
    pub fn open(path: &Path) -> DbResult<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| DbError::Corrupt(format!("creating {}: {e}", parent.display())))?;
            }
        }
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> DbResult<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(mut conn: Connection) -> DbResult<Self> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.busy_timeout(std::time::Duration::from_secs(10))?;
        let version: i64 = conn.pragma_query_value(None, "user_version", |r| r.get(0))?;
        if version as usize > schema::MIGRATIONS.len() {
            return Err(DbError::Corrupt(format!(
                "database schema version {version} is newer than this server"
            )));
        }
        for (i, sql) in schema::MIGRATIONS.iter().enumerate().skip(version as usize) {
            let tx = conn.transaction()?;
            tx.execute_batch(sql)?;
            tx.pragma_update(None, "user_version", (i + 1) as i64)?;
            tx.commit()?;
        }
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    pub fn schema_version(&self) -> DbResult<i64> {
        let conn = self.lock();
        Ok(conn.pragma_query_value(None, "user_version", |r| r.get(0))?)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` inside an immediate transaction; commits on `Ok`.
    pub fn transaction<T>(&self, f: impl FnOnce(&Transaction<'_>) -> DbResult<T>) -> DbResult<T> {
        let mut conn = self.lock();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> DbResult<T>) -> DbResult<T> {
        let conn = self.lock();
        f(&conn)
    }

    // users

    pub fn create_user(&self, user: &UserRecord, password_hash: Option<&str>) -> DbResult<()> {
        self.transaction(|tx| {
            tx.execute(
                "INSERT INTO users (user_id, name, email, is_admin, password_hash, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![user.user_id, user.name, user.email, user.is_admin, password_hash, now()],
            )?;
            insert_event(tx, &user.user_id, "user_created", None, &user.email)
        })
    }

    pub fn update_user(&self, user: &UserRecord) -> DbResult<()> {
        self.transaction(|tx| {
            let n = tx.execute(
                "UPDATE users SET name = ?2, email = ?3, is_admin = ?4 WHERE user_id = ?1",
                params![user.user_id, user.name, user.email, user.is_admin],
            )?;
            if n == 0 {
                return Err(DbError::NotFound(format!("user {}", user.user_id)));
            }
            Ok(())
        })
    }

    pub fn get_user(&self, user_id: &str) -> DbResult<Option<UserRecord>> {
        self.read(|c| {
            Ok(c.query_row(
                &format!("SELECT {USER_COLS} FROM users WHERE user_id = ?1"),
                [user_id],
                user_from_row,
            )
            .optional()?)
        })
    }

    pub fn password_hash(&self, user_id: &str) -> DbResult<Option<String>> {
        self.read(|c| {
            Ok(c.query_row("SELECT password_hash FROM users WHERE user_id = ?1", [user_id], |r| {
                r.get::<_, Option<String>>(0)
            })
            .optional()?
            .flatten())
        })
    }

    pub fn list_users(&self) -> DbResult<Vec<UserRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!("SELECT {USER_COLS} FROM users ORDER BY user_id"))?;
            let rows = stmt.query_map([], user_from_row)?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    // public keys

    pub fn add_public_key(
        &self,
        owner: Option<&str>,
        der: &[u8],
        fingerprint: &Digest,
        enabled: bool,
        is_root: bool,
        event: Option<NewEvent<'_>>,
    ) -> DbResult<PublicKeyRecord> {
        self.transaction(|tx| {
            let exists: bool = tx.query_row(
                "SELECT EXISTS (SELECT 1 FROM public_keys WHERE fingerprint = ?1)",
                [fingerprint.to_hex()],
                |r| r.get(0),
            )?;
            if exists {
                return Err(DbError::Conflict(format!("public key {fingerprint}")));
            }
            tx.execute(
                "INSERT INTO public_keys (owner, der, fingerprint, enabled, is_root, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![owner, der, fingerprint.to_hex(), enabled, is_root, now()],
            )?;
            if let Some(ev) = &event {
                insert_event(tx, ev.actor, ev.action, ev.mnemonic, &ev.detail)?;
            }
            Ok(tx.query_row(
                &format!("SELECT {KEY_COLS} FROM public_keys WHERE fingerprint = ?1"),
                [fingerprint.to_hex()],
                key_from_row,
            )?)
        })
    }

    pub fn set_key_enabled(&self, fingerprint: &Digest, enabled: bool, event: Option<NewEvent<'_>>) -> DbResult<()> {
        self.transaction(|tx| {
            let n = tx.execute(
                "UPDATE public_keys SET enabled = ?2 WHERE fingerprint = ?1",
                params![fingerprint.to_hex(), enabled],
            )?;
            if n == 0 {
                return Err(DbError::NotFound(format!("public key {fingerprint}")));
            }
            if let Some(ev) = &event {
                insert_event(tx, ev.actor, ev.action, ev.mnemonic, &ev.detail)?;
            }
            Ok(())
        })
    }

    pub fn get_key(&self, fingerprint: &Digest) -> DbResult<Option<PublicKeyRecord>> {
        self.read(|c| {
            Ok(c.query_row(
                &format!("SELECT {KEY_COLS} FROM public_keys WHERE fingerprint = ?1"),
                [fingerprint.to_hex()],
                key_from_row,
            )
            .optional()?)
        })
    }

    pub fn keys_of(&self, owner: &str) -> DbResult<Vec<PublicKeyRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {KEY_COLS} FROM public_keys WHERE owner = ?1 ORDER BY key_id"
            ))?;
            let rows = stmt.query_map([owner], key_from_row)?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    pub fn enabled_keys_of(&self, owner: &str) -> DbResult<Vec<PublicKeyRecord>> {
        Ok(self.keys_of(owner)?.into_iter().filter(|k| k.enabled).collect())
    }

    pub fn root_keys(&self) -> DbResult<Vec<PublicKeyRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {KEY_COLS} FROM public_keys WHERE is_root = 1 AND enabled = 1 ORDER BY key_id"
            ))?;
            let rows = stmt.query_map([], key_from_row)?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    // datasets

    pub fn mnemonic_taken(&self, mnemonic: &str) -> DbResult<bool> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT EXISTS (SELECT 1 FROM datasets WHERE mnemonic = ?1)",
                [mnemonic],
                |r| r.get(0),
            )?)
        })
    }

    /// Inserts an `uploading` dataset and its owner's write membership.
    pub fn create_dataset(&self, rec: &DatasetRecord, actor: &str) -> DbResult<()> {
        self.transaction(|tx| {
            tx.execute(
                &format!("INSERT INTO datasets ({DATASET_COLS}) VALUES (?1, ?2, ?3, ?4, NULL, NULL, ?5, 'uploading')"),
                params![rec.mnemonic, rec.owner, rec.filename, rec.size as i64, rec.created_at],
            )?;
            tx.execute(
                "INSERT INTO members (mnemonic, user_id, permission) VALUES (?1, ?2, 'write')",
                params![rec.mnemonic, rec.owner],
            )?;
            insert_event(tx, actor, "upload_started", Some(&rec.mnemonic), &rec.filename)
        })
    }

    pub fn get_dataset(&self, mnemonic: &str) -> DbResult<Option<DatasetRecord>> {
        self.read(|c| {
            Ok(c.query_row(
                &format!("SELECT {DATASET_COLS} FROM datasets WHERE mnemonic = ?1"),
                [mnemonic],
                dataset_from_row,
            )
            .optional()?)
        })
    }

    pub fn datasets_in_state(&self, state: DatasetState) -> DbResult<Vec<DatasetRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {DATASET_COLS} FROM datasets WHERE state = ?1 ORDER BY mnemonic"
            ))?;
            let rows = stmt.query_map([state.as_str()], dataset_from_row)?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    /// Complete datasets the user is a member of, with their permission.
    pub fn datasets_for(&self, user_id: &str) -> DbResult<Vec<(DatasetRecord, Permission)>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT d.mnemonic, d.owner, d.filename, d.size, d.dataset_hash, d.key_fingerprint,
                        d.created_at, d.state, m.permission
                 FROM datasets d JOIN members m ON m.mnemonic = d.mnemonic
                 WHERE m.user_id = ?1 AND d.state = 'complete'
                 ORDER BY d.created_at, d.mnemonic",
            )?;
            let rows = stmt.query_map([user_id], |r| {
                let perm: String = r.get(8)?;
                Ok((dataset_from_row(r)?, permission_from_str(&perm, 8)?))
            })?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    pub fn add_chunk_row(&self, row: &ChunkRow) -> DbResult<()> {
        self.transaction(|tx| {
            let state: Option<String> = tx
                .query_row("SELECT state FROM datasets WHERE mnemonic = ?1", [&row.mnemonic], |r| r.get(0))
                .optional()?;
            match state.as_deref() {
                Some("uploading") => insert_chunk(tx, row),
                Some(_) => Err(DbError::Conflict(format!("dataset {} is not uploading", row.mnemonic))),
                None => Err(DbError::NotFound(format!("dataset {}", row.mnemonic))),
            }
        })
    }

    pub fn chunk_rows(&self, mnemonic: &str) -> DbResult<Vec<ChunkRow>> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {CHUNK_COLS} FROM chunks WHERE mnemonic = ?1 ORDER BY idx"
            ))?;
            let rows = stmt.query_map([mnemonic], chunk_from_row)?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    pub fn chunk_row(&self, mnemonic: &str, index: u64) -> DbResult<Option<ChunkRow>> {
        self.read(|c| {
            Ok(c.query_row(
                &format!("SELECT {CHUNK_COLS} FROM chunks WHERE mnemonic = ?1 AND idx = ?2"),
                params![mnemonic, index as i64],
                chunk_from_row,
            )
            .optional()?)
        })
    }

    pub fn chunk_count(&self, mnemonic: &str) -> DbResult<u64> {
        self.read(|c| {
            Ok(c.query_row("SELECT COUNT(*) FROM chunks WHERE mnemonic = ?1", [mnemonic], |r| {
                r.get::<_, i64>(0)
            })? as u64)
        })
    }

    /// Marks an uploading dataset complete and stores its first envelopes.
    pub fn set_dataset_complete(
        &self,
        mnemonic: &str,
        dataset_hash: &Digest,
        key_fingerprint: &Digest,
        envelopes: &[KeyEnvelope],
        actor: &str,
    ) -> DbResult<()> {
        self.transaction(|tx| {
            let n = tx.execute(
                "UPDATE datasets SET state = 'complete', dataset_hash = ?2, key_fingerprint = ?3
                 WHERE mnemonic = ?1 AND state = 'uploading'",
                params![mnemonic, dataset_hash.to_hex(), key_fingerprint.to_hex()],
            )?;
            if n == 0 {
                return Err(DbError::NotFound(format!("uploading dataset {mnemonic}")));
            }
            for env in envelopes {
                if &env.key_fingerprint != key_fingerprint {
                    return Err(DbError::Corrupt("envelope for a different key".into()));
                }
                upsert_envelope(tx, mnemonic, env)?;
            }
            insert_event(tx, actor, "upload_finished", Some(mnemonic), &dataset_hash.to_hex())
        })
    }

    /// Soft-deletes a dataset: the row stays (state `deleted`), chunk
    /// metadata and envelopes go.
    pub fn mark_deleted(&self, mnemonic: &str, event: NewEvent<'_>) -> DbResult<()> {
        self.transaction(|tx| {
            let n = tx.execute(
                "UPDATE datasets SET state = 'deleted', dataset_hash = NULL WHERE mnemonic = ?1",
                [mnemonic],
            )?;
            if n == 0 {
                return Err(DbError::NotFound(format!("dataset {mnemonic}")));
            }
            tx.execute("DELETE FROM envelopes WHERE mnemonic = ?1", [mnemonic])?;
            tx.execute("DELETE FROM chunks WHERE mnemonic = ?1", [mnemonic])?;
            insert_event(tx, event.actor, event.action, event.mnemonic, &event.detail)
        })
    }

    // members

    pub fn member_permission(&self, mnemonic: &str, user_id: &str) -> DbResult<Option<Permission>> {
        self.read(|c| {
            let p: Option<String> = c
                .query_row(
                    "SELECT permission FROM members WHERE mnemonic = ?1 AND user_id = ?2",
                    params![mnemonic, user_id],
                    |r| r.get(0),
                )
                .optional()?;
            p.map(|p| p.parse().map_err(DbError::Corrupt)).transpose()
        })
    }

    pub fn members(&self, mnemonic: &str) -> DbResult<Vec<(String, Permission)>> {
        self.read(|c| {
            let mut stmt =
                c.prepare("SELECT user_id, permission FROM members WHERE mnemonic = ?1 ORDER BY user_id")?;
            let rows = stmt.query_map([mnemonic], |r| {
                let p: String = r.get(1)?;
                Ok((r.get(0)?, permission_from_str(&p, 1)?))
            })?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    pub fn add_member(&self, mnemonic: &str, user_id: &str, permission: Permission) -> DbResult<()> {
        self.transaction(|tx| {
            tx.execute(
                "INSERT INTO members (mnemonic, user_id, permission) VALUES (?1, ?2, ?3)
                 ON CONFLICT (mnemonic, user_id) DO UPDATE SET permission = excluded.permission",
                params![mnemonic, user_id, permission.as_str()],
            )?;
            Ok(())
        })
    }

    /// Upserts a membership and the recipient's envelopes atomically.
    pub fn share(
        &self,
        mnemonic: &str,
        user_id: &str,
        permission: Permission,
        envelopes: &[KeyEnvelope],
        event: NewEvent<'_>,
    ) -> DbResult<()> {
        self.transaction(|tx| {
            let current: Option<String> = tx
                .query_row("SELECT key_fingerprint FROM datasets WHERE mnemonic = ?1 AND state = 'complete'", [mnemonic], |r| r.get(0))
                .optional()?;
            let current = current.ok_or_else(|| DbError::NotFound(format!("dataset {mnemonic}")))?;
            for env in envelopes {
                if env.key_fingerprint.to_hex() != current {
                    return Err(DbError::Conflict("dataset key changed concurrently".into()));
                }
                upsert_envelope(tx, mnemonic, env)?;
            }
            tx.execute(
                "INSERT INTO members (mnemonic, user_id, permission) VALUES (?1, ?2, ?3)
                 ON CONFLICT (mnemonic, user_id) DO UPDATE SET permission = excluded.permission",
                params![mnemonic, user_id, permission.as_str()],
            )?;
            insert_event(tx, event.actor, event.action, event.mnemonic, &event.detail)
        })
    }

    /// Removes a membership and every envelope addressed to that user's keys.
    pub fn remove_member(&self, mnemonic: &str, user_id: &str, event: NewEvent<'_>) -> DbResult<()> {
        self.transaction(|tx| {
            let n = tx.execute(
                "DELETE FROM members WHERE mnemonic = ?1 AND user_id = ?2",
                params![mnemonic, user_id],
            )?;
            if n == 0 {
                return Err(DbError::NotFound(format!("member {user_id} of {mnemonic}")));
            }
            tx.execute(
                "DELETE FROM envelopes WHERE mnemonic = ?1 AND recipient_fingerprint IN
                   (SELECT fingerprint FROM public_keys WHERE owner = ?2)",
                params![mnemonic, user_id],
            )?;
            insert_event(tx, event.actor, event.action, event.mnemonic, &event.detail)
        })
    }

    // envelopes

    pub fn put_envelope(&self, mnemonic: &str, env: &KeyEnvelope) -> DbResult<()> {
        self.transaction(|tx| upsert_envelope(tx, mnemonic, env))
    }

    pub fn delete_envelope(&self, mnemonic: &str, recipient: &Digest) -> DbResult<()> {
        self.transaction(|tx| {
            tx.execute(
                "DELETE FROM envelopes WHERE mnemonic = ?1 AND recipient_fingerprint = ?2",
                params![mnemonic, recipient.to_hex()],
            )?;
            Ok(())
        })
    }

    pub fn envelopes(&self, mnemonic: &str) -> DbResult<Vec<KeyEnvelope>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT recipient_fingerprint, ciphertext, key_fingerprint FROM envelopes
                 WHERE mnemonic = ?1 ORDER BY recipient_fingerprint",
            )?;
            let rows = stmt.query_map([mnemonic], envelope_from_row)?;
            Ok(rows.collect::<Result<_, _>>()?)
        })
    }

    pub fn envelope_for(&self, mnemonic: &str, recipient: &Digest) -> DbResult<Option<KeyEnvelope>> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT recipient_fingerprint, ciphertext, key_fingerprint FROM envelopes
                 WHERE mnemonic = ?1 AND recipient_fingerprint = ?2",
                params![mnemonic, recipient.to_hex()],
                envelope_from_row,
            )
            .optional()?)
        })
    }

    /// Swaps in re-encrypted chunk metadata and a complete new envelope set.
    pub fn replace_key(
        &self,
        mnemonic: &str,
        old_key_fingerprint: &Digest,
        new_key_fingerprint: &Digest,
        chunks: &[ChunkRow],
        envelopes: &[KeyEnvelope],
        event: NewEvent<'_>,
    ) -> DbResult<()> {
        self.transaction(|tx| {
            let n = tx.execute(
                "UPDATE datasets SET key_fingerprint = ?3
                 WHERE mnemonic = ?1 AND key_fingerprint = ?2 AND state = 'complete'",
                params![mnemonic, old_key_fingerprint.to_hex(), new_key_fingerprint.to_hex()],
            )?;
            if n == 0 {
                return Err(DbError::Conflict(format!("dataset {mnemonic} key changed concurrently")));
            }
            for row in chunks {
                let n = tx.execute(
                    "UPDATE chunks SET iv = ?3, plain_hash = ?4, crc32 = ?5, plain_size = ?6, stored_size = ?7
                     WHERE mnemonic = ?1 AND idx = ?2",
                    params![
                        mnemonic,
                        row.index as i64,
                        hex::encode(row.iv),
                        row.plain_hash.to_hex(),
                        format_crc32(row.crc32),
                        row.plain_size as i64,
                        row.stored_size as i64
                    ],
                )?;
                if n != 1 {
                    return Err(DbError::NotFound(format!("chunk {} of {mnemonic}", row.index)));
                }
            }
            tx.execute("DELETE FROM envelopes WHERE mnemonic = ?1", [mnemonic])?;
            for env in envelopes {
                upsert_envelope(tx, mnemonic, env)?;
            }
            insert_event(tx, event.actor, event.action, event.mnemonic, &event.detail)
        })
    }

    // duplicate detection

    /// A complete dataset of `user_id` whose first chunk has `plain_hash`.
    pub fn find_first_chunk_match(&self, user_id: &str, plain_hash: &Digest) -> DbResult<Option<(String, Digest)>> {
        self.read(|c| {
            let row = c
                .query_row(
                    "SELECT d.mnemonic, d.dataset_hash FROM chunks c
                     JOIN datasets d ON d.mnemonic = c.mnemonic
                     JOIN members m ON m.mnemonic = d.mnemonic
                     WHERE c.idx = 0 AND c.plain_hash = ?2 AND m.user_id = ?1 AND d.state = 'complete'
                     ORDER BY d.created_at DESC LIMIT 1",
                    params![user_id, plain_hash.to_hex()],
                    |r| Ok((r.get::<_, String>(0)?, digest_col(r, 1)?)),
                )
                .optional()?;
            Ok(row)
        })
    }

    /// Any chunk of the user's datasets with the given plaintext hash.
    pub fn find_chunk_by_hash(&self, user_id: &str, plain_hash: &Digest) -> DbResult<Option<ChunkRow>> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT c.mnemonic, c.idx, c.iv, c.plain_hash, c.crc32, c.plain_size, c.stored_size
                 FROM chunks c
                 JOIN datasets d ON d.mnemonic = c.mnemonic
                 JOIN members m ON m.mnemonic = d.mnemonic
                 WHERE c.plain_hash = ?2 AND m.user_id = ?1 AND d.state = 'complete'
                 LIMIT 1",
                params![user_id, plain_hash.to_hex()],
                chunk_from_row,
            )
            .optional()?)
        })
    }

    pub fn find_dataset_by_hash(&self, user_id: &str, dataset_hash: &Digest) -> DbResult<Option<DatasetRecord>> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT d.mnemonic, d.owner, d.filename, d.size, d.dataset_hash, d.key_fingerprint,
                        d.created_at, d.state
                 FROM datasets d JOIN members m ON m.mnemonic = d.mnemonic
                 WHERE m.user_id = ?1 AND d.dataset_hash = ?2 AND d.state = 'complete'
                 LIMIT 1",
                params![user_id, dataset_hash.to_hex()],
                dataset_from_row,
            )
            .optional()?)
        })
    }

    /// Uploading datasets owned by `user_id` with their received chunk hashes.
    pub fn find_incomplete_uploads(&self, user_id: &str) -> DbResult<Vec<(DatasetRecord, Vec<(u64, Digest)>)>> {
        let datasets: Vec<DatasetRecord> = self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {DATASET_COLS} FROM datasets WHERE owner = ?1 AND state = 'uploading' ORDER BY mnemonic"
            ))?;
            let rows = stmt.query_map([user_id], dataset_from_row)?;
            Ok(rows.collect::<Result<_, _>>()?)
        })?;
        datasets
            .into_iter()
            .map(|d| {
                let chunks = self
                    .chunk_rows(&d.mnemonic)?
                    .into_iter()
                    .map(|c| (c.index, c.plain_hash))
                    .collect();
                Ok((d, chunks))
            })
            .collect()
    }

    // tokens

    pub fn create_token(&self, rec: &TokenRecord, event: Option<NewEvent<'_>>) -> DbResult<()> {
        self.transaction(|tx| {
            tx.execute(
                "INSERT INTO tokens (token_hash, owner, scope, created_at, expires_at, revoked)
                 VALUES (?1, ?2, ?3, ?4, ?5, 0)",
                params![rec.token_hash, rec.owner, rec.scope.as_str(), rec.created_at, rec.expires_at],
            )?;
            if let Some(ev) = &event {
                insert_event(tx, ev.actor, ev.action, ev.mnemonic, &ev.detail)?;
            }
            Ok(())
        })
    }

    pub fn find_token(&self, token_hash: &str) -> DbResult<Option<TokenRecord>> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT token_hash, owner, scope, created_at, expires_at, revoked FROM tokens WHERE token_hash = ?1",
                [token_hash],
                |r| {
                    let scope: String = r.get(2)?;
                    Ok(TokenRecord {
                        token_hash: r.get(0)?,
                        owner: r.get(1)?,
                        scope: match scope.as_str() {
                            "api" => TokenScope::Api,
                            "upload" => TokenScope::Upload,
                            other => return Err(conversion_error(2, format!("scope {other}"))),
                        },
                        created_at: r.get(3)?,
                        expires_at: r.get(4)?,
                        revoked: r.get(5)?,
                    })
                },
            )
            .optional()?)
        })
    }

    pub fn revoke_token(&self, token_hash: &str, event: NewEvent<'_>) -> DbResult<()> {
        self.transaction(|tx| {
            let n = tx.execute("UPDATE tokens SET revoked = 1 WHERE token_hash = ?1", [token_hash])?;
            if n == 0 {
                return Err(DbError::NotFound("token".into()));
            }
            insert_event(tx, event.actor, event.action, event.mnemonic, &event.detail)
        })
    }

    // events

    pub fn append_event(&self, event: NewEvent<'_>) -> DbResult<()> {
        self.transaction(|tx| insert_event(tx, event.actor, event.action, event.mnemonic, &event.detail))
    }

    pub fn list_events(&self, limit: u32) -> DbResult<Vec<EventRow>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT id, timestamp, actor, action, mnemonic, detail FROM events ORDER BY id DESC LIMIT ?1",
            )?;
            let rows = stmt.query_map([limit], |r| {
                Ok(EventRow {
                    id: r.get(0)?,
                    timestamp: r.get(1)?,
                    actor: r.get(2)?,
                    action: r.get(3)?,
                    mnemonic: r.get(4)?,
                    detail: r.get(5)?,
                })
            })?;
            let mut events: Vec<EventRow> = rows.collect::<Result<_, _>>()?;
            events.reverse();
            Ok(events)
        })
    }

    #[cfg(test)]
    pub(crate) fn raw(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.lock()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dabih_core::{seal_chunk, DatasetKey};

    fn db_with_users() -> Database {
        let db = Database::open_in_memory().unwrap();
        for id in ["alice", "bob"] {
            db.create_user(
                &UserRecord {
                    user_id: id.into(),
                    name: id.into(),
                    email: format!("{id}@example.org"),
                    is_admin: false,
                },
                None,
            )
            .unwrap();
        }
        db
    }

    fn dataset(db: &Database, mnemonic: &str, owner: &str) {
        db.create_dataset(
            &DatasetRecord {
                mnemonic: mnemonic.into(),
                owner: owner.into(),
                filename: "f.bin".into(),
                size: 3,
                dataset_hash: None,
                key_fingerprint: None,
                created_at: now(),
                state: DatasetState::Uploading,
            },
            owner,
        )
        .unwrap();
    }

    fn complete_with_chunk(db: &Database, mnemonic: &str, owner: &str, data: &[u8]) -> ChunkRow {
        dataset(db, mnemonic, owner);
        let key = DatasetKey::generate();
        let sealed = seal_chunk(&key, 0, data).unwrap();
        let row = ChunkRow::from_sealed(mnemonic, &sealed);
        db.add_chunk_row(&row).unwrap();
        let hash = dabih_core::crypto::dataset_hash(&[sealed.plain_hash]).unwrap();
        db.set_dataset_complete(mnemonic, &hash, &key.fingerprint(), &[], owner).unwrap();
        row
    }

    #[test]
    fn migrations_are_applied_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db").join("dabih.sqlite");
        {
            let db = Database::open(&path).unwrap();
            assert_eq!(db.schema_version().unwrap(), 1);
        }
        let db = Database::open(&path).unwrap();
        assert_eq!(db.schema_version().unwrap(), 1);
    }

    #[test]
    fn duplicate_public_key_is_a_conflict() {
        let db = db_with_users();
        let fp = Digest::of(b"key");
        db.add_public_key(Some("alice"), b"der", &fp, false, false, None).unwrap();
        assert!(matches!(
            db.add_public_key(Some("bob"), b"der", &fp, false, false, None),
            Err(DbError::Conflict(_))
        ));
    }

    #[test]
    fn key_enable_flow() {
        let db = db_with_users();
        let fp = Digest::of(b"key");
        let rec = db.add_public_key(Some("alice"), b"der", &fp, false, false, None).unwrap();
        assert!(!rec.enabled);
        assert!(db.enabled_keys_of("alice").unwrap().is_empty());
        db.set_key_enabled(&fp, true, None).unwrap();
        assert_eq!(db.enabled_keys_of("alice").unwrap().len(), 1);
        assert!(matches!(
            db.set_key_enabled(&Digest::of(b"nope"), true, None),
            Err(DbError::NotFound(_))
        ));
    }

    #[test]
    fn dataset_hash_only_when_complete() {
        let db = db_with_users();
        dataset(&db, "brave_ann", "alice");
        let err = db
            .raw()
            .execute(
                "UPDATE datasets SET dataset_hash = 'aa' WHERE mnemonic = 'brave_ann'",
                [],
            )
            .unwrap_err();
        assert!(matches!(DbError::from(err), DbError::Conflict(_)));
    }

    #[test]
    fn chunk_index_is_unique_per_dataset() {
        let db = db_with_users();
        dataset(&db, "brave_ann", "alice");
        let sealed = seal_chunk(&DatasetKey::generate(), 0, b"abc").unwrap();
        let row = ChunkRow::from_sealed("brave_ann", &sealed);
        db.add_chunk_row(&row).unwrap();
        assert!(matches!(db.add_chunk_row(&row), Err(DbError::Conflict(_))));
        assert_eq!(db.chunk_rows("brave_ann").unwrap(), vec![row]);
    }

    #[test]
    fn chunks_need_an_existing_dataset() {
        let db = db_with_users();
        let sealed = seal_chunk(&DatasetKey::generate(), 0, b"abc").unwrap();
        assert!(matches!(
            db.add_chunk_row(&ChunkRow::from_sealed("ghost_ann", &sealed)),
            Err(DbError::NotFound(_))
        ));
    }

    #[test]
    fn chunk_lookup_is_scoped_to_the_user() {
        let db = db_with_users();
        let row = complete_with_chunk(&db, "brave_ann", "alice", b"same bytes");
        assert_eq!(
            db.find_chunk_by_hash("alice", &row.plain_hash).unwrap().map(|r| r.mnemonic),
            Some("brave_ann".to_string())
        );
        assert!(db.find_chunk_by_hash("bob", &row.plain_hash).unwrap().is_none());
        assert!(db.find_first_chunk_match("bob", &row.plain_hash).unwrap().is_none());
        let (m, hash) = db.find_first_chunk_match("alice", &row.plain_hash).unwrap().unwrap();
        assert_eq!(m, "brave_ann");
        assert_eq!(db.find_dataset_by_hash("alice", &hash).unwrap().unwrap().mnemonic, "brave_ann");
    }

    #[test]
    fn incomplete_uploads_list_filename_and_chunks() {
        let db = db_with_users();
        dataset(&db, "brave_ann", "alice");
        let key = DatasetKey::generate();
        for i in 0..2 {
            let sealed = seal_chunk(&key, i, &[i as u8 + 1; 4]).unwrap();
            db.add_chunk_row(&ChunkRow::from_sealed("brave_ann", &sealed)).unwrap();
        }
        let incomplete = db.find_incomplete_uploads("alice").unwrap();
        assert_eq!(incomplete.len(), 1);
        assert_eq!(incomplete[0].0.filename, "f.bin");
        assert_eq!(incomplete[0].1.len(), 2);
        assert_eq!(incomplete[0].1[1].1, Digest::of(&[2; 4]));
        assert!(db.find_incomplete_uploads("bob").unwrap().is_empty());
    }

    #[test]
    fn event_log_is_append_only() {
        let db = db_with_users();
        db.append_event(NewEvent {
            actor: "alice",
            action: "test",
            mnemonic: None,
            detail: String::new(),
        })
        .unwrap();
        let conn = db.raw();
        assert!(conn.execute("UPDATE events SET action = 'x'", []).is_err());
        assert!(conn.execute("DELETE FROM events", []).is_err());
    }

    #[test]
    fn share_upserts_permission() {
        let db = db_with_users();
        complete_with_chunk(&db, "brave_ann", "alice", b"x");
        let ev = || NewEvent {
            actor: "alice",
            action: "share",
            mnemonic: Some("brave_ann"),
            detail: String::new(),
        };
        db.share("brave_ann", "bob", Permission::Read, &[], ev()).unwrap();
        db.share("brave_ann", "bob", Permission::Read, &[], ev()).unwrap();
        assert_eq!(db.member_permission("brave_ann", "bob").unwrap(), Some(Permission::Read));
        db.share("brave_ann", "bob", Permission::Write, &[], ev()).unwrap();
        assert_eq!(db.member_permission("brave_ann", "bob").unwrap(), Some(Permission::Write));
        assert_eq!(db.members("brave_ann").unwrap().len(), 2);
        assert_eq!(db.datasets_for("bob").unwrap().len(), 1);
    }

    #[test]
    fn members_need_known_users() {
        let db = db_with_users();
        complete_with_chunk(&db, "brave_ann", "alice", b"x");
        let ev = NewEvent {
            actor: "alice",
            action: "share",
            mnemonic: Some("brave_ann"),
            detail: String::new(),
        };
        assert!(db.share("brave_ann", "mallory", Permission::Read, &[], ev).is_err());
    }

    #[test]
    fn replace_key_rejects_stale_fingerprint() {
        let db = db_with_users();
        complete_with_chunk(&db, "brave_ann", "alice", b"x");
        let ev = NewEvent {
            actor: "alice",
            action: "reencrypt",
            mnemonic: Some("brave_ann"),
            detail: String::new(),
        };
        assert!(matches!(
            db.replace_key("brave_ann", &Digest::of(b"stale"), &Digest::of(b"new"), &[], &[], ev),
            Err(DbError::Conflict(_))
        ));
    }

    #[test]
    fn soft_delete_keeps_row_and_drops_chunks() {
        let db = db_with_users();
        complete_with_chunk(&db, "brave_ann", "alice", b"x");
        db.mark_deleted(
            "brave_ann",
            NewEvent {
                actor: "alice",
                action: "delete",
                mnemonic: Some("brave_ann"),
                detail: String::new(),
            },
        )
        .unwrap();
        let d = db.get_dataset("brave_ann").unwrap().unwrap();
        assert_eq!(d.state, DatasetState::Deleted);
        assert!(d.dataset_hash.is_none());
        assert!(db.chunk_rows("brave_ann").unwrap().is_empty());
        assert!(db.mnemonic_taken("brave_ann").unwrap());
        assert!(db.datasets_for("alice").unwrap().is_empty());
    }

    #[test]
    fn tokens_roundtrip_and_revoke() {
        let db = db_with_users();
        let rec = TokenRecord {
            token_hash: "h".into(),
            owner: "alice".into(),
            scope: TokenScope::Upload,
            created_at: 1,
            expires_at: 2,
            revoked: false,
        };
        db.create_token(&rec, None).unwrap();
        assert_eq!(db.find_token("h").unwrap().unwrap(), rec);
        db.revoke_token(
            "h",
            NewEvent {
                actor: "alice",
                action: "token_revoked",
                mnemonic: None,
                detail: String::new(),
            },
        )
        .unwrap();
        assert!(db.find_token("h").unwrap().unwrap().revoked);
    }
}
