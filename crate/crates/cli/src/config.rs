//! Client settings.
//!
//! Each setting resolves from command line flags first, then `DABIH_*`
//! environment variables, then the TOML config file
//! (`~/.config/dabih/config` unless `--config` or `DABIH_CONFIG` names
//! another one).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ENV_CONFIG: &str = "DABIH_CONFIG";
pub const ENV_SERVER: &str = "DABIH_SERVER";
pub const ENV_TOKEN: &str = "DABIH_TOKEN";
pub const ENV_KEY: &str = "DABIH_KEY";
pub const ENV_CHUNK_SIZE: &str = "DABIH_CHUNK_SIZE";

/// Contents of the config file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<u64>,
}

impl ConfigFile {
    /// Reads `path`; a missing file yields the empty config.
    pub fn load(path: &Path) -> CliResult<Self> {
        match fs::read_to_string(path) {
            Ok(text) => {
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        crate::keys::write_private(path, text.as_bytes())
    }
}

/// Settings given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub server: Option<String>,
    pub token: Option<String>,
    pub key: Option<PathBuf>,
    pub chunk_size: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientConfig {
    pub server: Option<String>,
    pub token: Option<String>,
    pub key: Option<PathBuf>,
    pub chunk_size: Option<u64>,
}

pub fn default_config_path() -> Option<PathBuf> {
    dirs::home_dir().map(|h| h.join(".config").join("dabih").join("config"))
}

/// The config file path after flag and environment overrides.
pub fn config_path(flags: &Overrides, env: &dyn Fn(&str) -> Option<String>) -> Option<PathBuf> {
    flags
        .config
        .clone()
        .or_else(|| env(ENV_CONFIG).map(PathBuf::from))
        .or_else(default_config_path)
}

impl ClientConfig {
    pub fn resolve(flags: &Overrides, env: &dyn Fn(&str) -> Option<String>, file: &ConfigFile) -> CliResult<Self> {
        let env_chunk = match env(ENV_CHUNK_SIZE) {
            Some(v) => Some(
                v.parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{ENV_CHUNK_SIZE} must be an integer, got {v:?}")))?,
            ),
            None => None,
        };
        Ok(Self {
            server: flags.server.clone().or_else(|| env(ENV_SERVER)).or_else(|| file.server.clone()),
            token: flags.token.clone().or_else(|| env(ENV_TOKEN)).or_else(|| file.token.clone()),
            key: flags
                .key
                .clone()
                .or_else(|| env(ENV_KEY).map(PathBuf::from))
                .or_else(|| file.key.clone()),
            chunk_size: flags.chunk_size.or(env_chunk).or(file.chunk_size),
        })
    }

    /// Resolves against the process environment and the config file on disk.
    pub fn from_environment(flags: &Overrides) -> CliResult<Self> {
        let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let file = match config_path(flags, &env) {
            Some(path) => ConfigFile::load(&path)?,
            None => ConfigFile::default(),
        };
        Self::resolve(flags, &env, &file)
    }

    pub fn server(&self) -> CliResult<&str> {
        self.server
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("no server configured; pass --server or set {ENV_SERVER}")))
    }

    pub fn key_path(&self) -> CliResult<&Path> {
        self.key
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("no private key configured; pass --key or set {ENV_KEY}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let file = ConfigFile {
            server: Some("http://file".into()),
            token: Some("file-token".into()),
            key: Some("file.pem".into()),
            chunk_size: Some(1024),
        };
        let env = env_of(&[(ENV_SERVER, "http://env"), (ENV_CHUNK_SIZE, "2048")]);
        let flags = Overrides {
            server: Some("http://flag".into()),
            ..Default::default()
        };
        let c = ClientConfig::resolve(&flags, &env, &file).unwrap();
        assert_eq!(c.server.as_deref(), Some("http://flag"));
        assert_eq!(c.token.as_deref(), Some("file-token"));
        assert_eq!(c.key.as_deref(), Some(Path::new("file.pem")));
        assert_eq!(c.chunk_size, Some(2048));

        let c = ClientConfig::resolve(&Overrides::default(), &env, &file).unwrap();
        assert_eq!(c.server.as_deref(), Some("http://env"));
    }

    #[test]
    fn bad_env_chunk_size() {
        let env = env_of(&[(ENV_CHUNK_SIZE, "lots")]);
        assert!(ClientConfig::resolve(&Overrides::default(), &env, &ConfigFile::default()).is_err());
    }

    #[test]
    fn config_path_precedence() {
        let env = env_of(&[(ENV_CONFIG, "/env/config")]);
        let flags = Overrides {
            config: Some("/flag/config".into()),
            ..Default::default()
        };
        assert_eq!(config_path(&flags, &env), Some(PathBuf::from("/flag/config")));
        assert_eq!(config_path(&Overrides::default(), &env), Some(PathBuf::from("/env/config")));
    }

    #[test]
    fn file_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/config");
        assert_eq!(ConfigFile::load(&path).unwrap(), ConfigFile::default());
        let file = ConfigFile {
            server: Some("http://localhost:3000".into()),
            token: Some("t".into()),
            key: None,
            chunk_size: None,
        };
        file.save(&path).unwrap();
        assert_eq!(ConfigFile::load(&path).unwrap(), file);
        fs::write(&path, "colour = 'blue'").unwrap();
        assert!(matches!(ConfigFile::load(&path), Err(CliError::Config(_))));
    }
}
