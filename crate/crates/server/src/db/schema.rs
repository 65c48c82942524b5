//! Forward-only schema migrations. Each entry upgrades from version `i` to
//! `i + 1`; the applied version is kept in `PRAGMA user_version`.

pub(crate) const MIGRATIONS: &[&str] = &[
    // v1
    r#"
    CREATE TABLE users (
        user_id       TEXT PRIMARY KEY,
        name          TEXT NOT NULL,
        email         TEXT NOT NULL,
        is_admin      INTEGER NOT NULL DEFAULT 0,
        password_hash TEXT,
        created_at    INTEGER NOT NULL
    );

    CREATE TABLE public_keys (
        key_id      INTEGER PRIMARY KEY AUTOINCREMENT,
        owner       TEXT REFERENCES users(user_id),
        der         BLOB NOT NULL,
        fingerprint TEXT NOT NULL UNIQUE,
        enabled     INTEGER NOT NULL,
        is_root     INTEGER NOT NULL,
        created_at  INTEGER NOT NULL,
        CHECK (is_root = 1 OR owner IS NOT NULL)
    );

    CREATE TABLE datasets (
        mnemonic        TEXT PRIMARY KEY,
        owner           TEXT NOT NULL REFERENCES users(user_id),
        filename        TEXT NOT NULL,
        size            INTEGER NOT NULL,
        dataset_hash    TEXT,
        key_fingerprint TEXT,
        created_at      INTEGER NOT NULL,
        state           TEXT NOT NULL CHECK (state IN ('uploading', 'complete', 'deleted')),
        CHECK ((state = 'complete') = (dataset_hash IS NOT NULL))
    );

    CREATE TABLE chunks (
        mnemonic    TEXT NOT NULL REFERENCES datasets(mnemonic),
        idx         INTEGER NOT NULL,
        iv          TEXT NOT NULL,
        plain_hash  TEXT NOT NULL,
        crc32       TEXT NOT NULL,
        plain_size  INTEGER NOT NULL,
        stored_size INTEGER NOT NULL,
        PRIMARY KEY (mnemonic, idx)
    );
    CREATE INDEX chunks_by_hash ON chunks (plain_hash, idx);

    CREATE TABLE members (
        mnemonic   TEXT NOT NULL REFERENCES datasets(mnemonic),
        user_id    TEXT NOT NULL REFERENCES users(user_id),
        permission TEXT NOT NULL CHECK (permission IN ('read', 'write')),
        PRIMARY KEY (mnemonic, user_id)
    );
    CREATE INDEX members_by_user ON members (user_id);

    CREATE TABLE envelopes (
        mnemonic              TEXT NOT NULL REFERENCES datasets(mnemonic),
        recipient_fingerprint TEXT NOT NULL,
        ciphertext            BLOB NOT NULL,
        key_fingerprint       TEXT NOT NULL,
        PRIMARY KEY (mnemonic, recipient_fingerprint)
    );

    CREATE TABLE tokens (
        token_hash TEXT PRIMARY KEY,
        owner      TEXT NOT NULL REFERENCES users(user_id),
        scope      TEXT NOT NULL CHECK (scope IN ('api', 'upload')),
        created_at INTEGER NOT NULL,
        expires_at INTEGER NOT NULL,
        revoked    INTEGER NOT NULL DEFAULT 0
    );

    CREATE TABLE events (
        id        INTEGER PRIMARY KEY AUTOINCREMENT,
        timestamp INTEGER NOT NULL,
        actor     TEXT NOT NULL,
        action    TEXT NOT NULL,
        mnemonic  TEXT,
        detail    TEXT NOT NULL
    );
    CREATE TRIGGER events_no_update BEFORE UPDATE ON events
        BEGIN SELECT RAISE(ABORT, 'event log is append-only'); END;
    CREATE TRIGGER events_no_delete BEFORE DELETE ON events
        BEGIN SELECT RAISE(ABORT, 'event log is append-only'); END;
    "#,
];
