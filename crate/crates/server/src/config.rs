use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("environment variable {name}: {reason}")]
    Env { name: &'static str, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Server configuration. Loaded from a TOML file, then overridden by
/// `DABIH_*` environment variables.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub storage_root: PathBuf,
    pub database_path: PathBuf,
    /// SubjectPublicKeyInfo PEM files of escrow root keys.
    pub root_keys: Vec<PathBuf>,
    /// User ids that get the admin flag on login.
    pub admins: Vec<String>,
    pub chunk_size: usize,
    /// Default lifetime of upload tokens, seconds.
    pub upload_token_ttl: u64,
    /// Lifetime of login session tokens, seconds.
    pub session_ttl: u64,
    /// Idle time after which an unfinished upload session is evicted, seconds.
    pub upload_idle_timeout: u64,
    pub adjectives_file: Option<PathBuf>,
    pub names_file: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 3000)),
            storage_root: PathBuf::from("data/storage"),
            database_path: PathBuf::from("data/dabih.sqlite"),
            root_keys: Vec::new(),
            admins: Vec::new(),
            chunk_size: dabih_core::DEFAULT_CHUNK_SIZE,
            upload_token_ttl: 30 * 24 * 3600,
            session_ttl: 12 * 3600,
            upload_idle_timeout: 24 * 3600,
            adjectives_file: None,
            names_file: None,
        }
    }
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// File (if given) plus process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        config.apply_env(|name| std::env::var(name).ok())?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &'static str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e: T::Err| ConfigError::Env {
                name,
                reason: e.to_string(),
            })
        }
        fn list(v: &str) -> impl Iterator<Item = &str> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty())
        }

        if let Some(v) = get("DABIH_LISTEN") {
            self.listen = parse("DABIH_LISTEN", &v)?;
        }
        if let Some(v) = get("DABIH_STORAGE") {
            self.storage_root = PathBuf::from(v);
        }
        if let Some(v) = get("DABIH_DATABASE") {
            self.database_path = PathBuf::from(v);
        }
        if let Some(v) = get("DABIH_ROOT_KEYS") {
            self.root_keys = list(&v).map(PathBuf::from).collect();
        }
        if let Some(v) = get("DABIH_ADMINS") {
            self.admins = list(&v).map(str::to_owned).collect();
        }
        if let Some(v) = get("DABIH_CHUNK_SIZE") {
            self.chunk_size = parse("DABIH_CHUNK_SIZE", &v)?;
        }
        if let Some(v) = get("DABIH_TOKEN_TTL") {
            self.upload_token_ttl = parse("DABIH_TOKEN_TTL", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chunk_size == 0 || self.chunk_size % 16 != 0 {
            return Err(ConfigError::Invalid(format!(
                "chunk_size must be a positive multiple of 16, got {}",
                self.chunk_size
            )));
        }
        if self.upload_token_ttl == 0 || self.session_ttl == 0 {
            return Err(ConfigError::Invalid("token lifetimes must be positive".into()));
        }
        if self.adjectives_file.is_some() != self.names_file.is_some() {
            return Err(ConfigError::Invalid(
                "adjectives_file and names_file must be set together".into(),
            ));
        }
        Ok(())
    }

    pub fn upload_idle_timeout(&self) -> Duration {
        Duration::from_secs(self.upload_idle_timeout)
    }

    /// Largest request body the server accepts: one chunk plus headroom.
    pub fn body_limit(&self) -> usize {
        self.chunk_size + 1024 * 1024
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn defaults_are_valid() {
        let c = ServerConfig::default();
        c.validate().unwrap();
        assert_eq!(c.chunk_size, 2 * 1024 * 1024);
        assert_eq!(c.upload_token_ttl, 30 * 24 * 3600);
    }

    #[test]
    fn file_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.toml");
        std::fs::write(
            &path,
            r#"
            listen = "0.0.0.0:8080"
            storage_root = "/srv/dabih"
            admins = ["root"]
            chunk_size = 1048576
            "#,
        )
        .unwrap();
        let mut c = ServerConfig::from_file(&path).unwrap();
        assert_eq!(c.listen.port(), 8080);
        assert_eq!(c.admins, vec!["root"]);
        assert_eq!(c.chunk_size, 1 << 20);

        let env: HashMap<&str, &str> = [
            ("DABIH_ADMINS", "alice, bob"),
            ("DABIH_ROOT_KEYS", "/k/a.pem,/k/b.pem"),
            ("DABIH_TOKEN_TTL", "60"),
        ]
        .into();
        c.apply_env(|n| env.get(n).map(|v| v.to_string())).unwrap();
        assert_eq!(c.admins, vec!["alice", "bob"]);
        assert_eq!(c.root_keys.len(), 2);
        assert_eq!(c.upload_token_ttl, 60);
        assert_eq!(c.storage_root, PathBuf::from("/srv/dabih"));
    }

    #[test]
    fn bad_values_are_reported() {
        let mut c = ServerConfig::default();
        assert!(c
            .apply_env(|n| (n == "DABIH_CHUNK_SIZE").then(|| "lots".to_string()))
            .is_err());
        c.chunk_size = 1000;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.toml");
        std::fs::write(&path, "chunksize = 5\n").unwrap();
        assert!(matches!(
            ServerConfig::from_file(&path),
            Err(ConfigError::Parse { .. })
        ));
    }
}
