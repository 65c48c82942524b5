use std::ffi::OsString;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use dabih_core::api::{LoginRequest, Permission, ShareRequest};
use dabih_core::{decapsulate, Digest, PrivateKey, DEFAULT_CHUNK_SIZE};

use crate::client::Client;
use crate::config::{config_path, ClientConfig, ConfigFile, Overrides};
use crate::download::{self, check_destination, default_output};
use crate::error::{exit, CliError, CliResult};
use crate::keys;
use crate::recover;
use crate::upload::{self, collect_targets, ChunkEvent, UploadOptions, UploadOutcome};

#[derive(Debug, Parser)]
#[command(name = "dabih", version, about = "Client for the dabih encrypted data store")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Server base URL, e.g. http://localhost:3000
    #[arg(long, global = true)]
    pub server: Option<String>,
    /// Access or upload token
    #[arg(long, global = true)]
    pub token: Option<String>,
    /// Private key file (PKCS#8 PEM/DER or compact text)
    #[arg(long, global = true)]
    pub key: Option<PathBuf>,
    /// Config file [default: ~/.config/dabih/config]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Plaintext bytes per chunk
    #[arg(long, global = true)]
    pub chunk_size: Option<u64>,
    /// Chunks in flight
    #[arg(long, global = true, default_value_t = 4)]
    pub workers: usize,
    /// No progress output
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Log in with a local account and print an access token
    Login {
        #[arg(long)]
        user: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        email: Option<String>,
        /// Read from DABIH_PASSWORD or stdin when omitted
        #[arg(long)]
        password: Option<String>,
        /// Store server and token in the config file
        #[arg(long)]
        save: bool,
    },
    /// Generate a 4096-bit key pair
    Keygen {
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the compact text form
        #[arg(long)]
        compact: bool,
        #[arg(long)]
        force: bool,
    },
    /// Manage enrolled public keys
    #[command(subcommand)]
    Key(KeyCommand),
    /// Print dataset hashes of local files
    Hash {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Upload files; skips duplicates and resumes interrupted uploads
    Upload {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Upload every file below directories
        #[arg(short, long)]
        recursive: bool,
        /// Upload each directory as one zip archive
        #[arg(long)]
        zip: bool,
        /// Upload even when the server already holds the file
        #[arg(long)]
        no_dedupe: bool,
    },
    /// Download and decrypt a dataset
    Download {
        mnemonic: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Let the server decrypt and stream the plaintext
        #[arg(long)]
        server_side: bool,
        #[arg(long)]
        force: bool,
    },
    /// List accessible datasets
    Datasets {
        /// List your unfinished uploads instead
        #[arg(long)]
        incomplete: bool,
    },
    /// Grant a user access to a dataset
    Share {
        mnemonic: String,
        user: String,
        #[arg(long, default_value = "read")]
        permission: Permission,
    },
    /// Remove a member from a dataset
    Unshare { mnemonic: String, user: String },
    /// Rotate the dataset key
    Reencrypt { mnemonic: String },
    /// Delete a dataset
    Delete { mnemonic: String },
    /// Manage upload tokens
    #[command(subcommand)]
    Token(TokenCommand),
    /// Decrypt a dataset offline with a root key
    Recover {
        /// Path of recovery.json
        #[arg(long)]
        recovery: PathBuf,
        /// Directory holding the chunk files [default: the recovery file's directory]
        #[arg(long)]
        chunks: Option<PathBuf>,
        /// Root private key [default: --key]
        #[arg(long)]
        root_key: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Administration
    #[command(subcommand)]
    Admin(AdminCommand),
}

#[derive(Debug, Subcommand)]
pub enum KeyCommand {
    /// Enroll a public key; an admin must enable it
    Add {
        /// Public key PEM [default: derived from --key]
        #[arg(long)]
        public: Option<PathBuf>,
    },
    /// List your keys
    List,
    /// Enable a key (admin)
    Enable { fingerprint: String },
}

#[derive(Debug, Subcommand)]
pub enum TokenCommand {
    /// Create an upload token
    Create {
        /// Lifetime in seconds
        #[arg(long)]
        ttl: Option<u64>,
    },
    /// Revoke a token
    Revoke {
        #[arg(value_name = "TOKEN")]
        secret: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum AdminCommand {
    Users,
    Keys,
    Events {
        #[arg(long)]
        limit: Option<u64>,
    },
}

struct Ctx<'a> {
    config: ClientConfig,
    global: &'a Global,
    err: Mutex<&'a mut (dyn Write + Send)>,
    progress: bool,
}

impl Ctx<'_> {
    fn client(&self) -> CliResult<Client> {
        Ok(Client::new(self.config.server()?, self.config.token.clone()))
    }

    fn warn(&self, msg: &str) {
        let _ = writeln!(self.err.lock().unwrap(), "{msg}");
    }

    fn private_key(&self, path: Option<&Path>) -> CliResult<PrivateKey> {
        let path = match path {
            Some(p) => p,
            None => self.config.key_path()?,
        };
        if let Some(w) = keys::permission_warning(path) {
            self.warn(&w);
        }
        keys::load_private_key(path)
    }

    fn chunk_size(&self) -> CliResult<usize> {
        match self.config.chunk_size {
            Some(0) => Err(CliError::Usage("chunk size must be positive".into())),
            Some(n) => usize::try_from(n).map_err(|_| CliError::Usage("chunk size too large".into())),
            None => Ok(DEFAULT_CHUNK_SIZE),
        }
    }
}

/// Runs the client with `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::OTHER } else { exit::OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let progress = !cli.global.quiet && std::io::stderr().is_terminal();
    let overrides = Overrides {
        config: cli.global.config.clone(),
        server: cli.global.server.clone(),
        token: cli.global.token.clone(),
        key: cli.global.key.clone(),
        chunk_size: cli.global.chunk_size,
    };
    let config = match ClientConfig::from_environment(&overrides) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return e.exit_code();
        }
    };
    let ctx = Ctx {
        config,
        global: &cli.global,
        err: Mutex::new(err),
        progress,
    };
    match execute(&ctx, &cli.command, &overrides, out) {
        Ok(()) => exit::OK,
        Err(e) => {
            ctx.warn(&format!("error: {e}"));
            e.exit_code()
        }
    }
}

fn execute(ctx: &Ctx<'_>, command: &Command, overrides: &Overrides, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Login {
            user,
            name,
            email,
            password,
            save,
        } => {
            let password = match password {
                Some(p) => p.clone(),
                None => match std::env::var("DABIH_PASSWORD") {
                    Ok(p) => p,
                    Err(_) => {
                        let mut line = String::new();
                        std::io::stdin().lock().read_line(&mut line)?;
                        line.trim_end_matches(['\r', '\n']).to_string()
                    }
                },
            };
            let client = Client::new(ctx.config.server()?, None);
            let resp = client.login(&LoginRequest {
                user_id: user.clone(),
                name: name.clone().unwrap_or_else(|| user.clone()),
                email: email.clone().unwrap_or_default(),
                password,
            })?;
            if *save {
                let path = config_path(overrides, &|k| std::env::var(k).ok())
                    .ok_or_else(|| CliError::Config("no config path; pass --config".into()))?;
                let mut file = ConfigFile::load(&path)?;
                file.server = Some(ctx.config.server()?.to_string());
                file.token = Some(resp.token.clone());
                file.save(&path)?;
                ctx.warn(&format!("saved token to {}", path.display()));
            }
            writeln!(out, "{}", resp.token)?;
        }
        Command::Keygen { out: path, compact, force } => {
            let generated = keys::keygen(path, *compact, *force)?;
            writeln!(out, "private key: {}", generated.private.display())?;
            writeln!(out, "public key:  {}", generated.public.display())?;
            if let Some(c) = &generated.compact {
                writeln!(out, "compact key: {}", c.display())?;
            }
            writeln!(out, "fingerprint: {}", generated.fingerprint)?;
        }
        Command::Key(KeyCommand::Add { public }) => {
            let pem = match public {
                Some(p) => std::fs::read_to_string(p)?,
                None => ctx.private_key(None)?.public().to_pem(),
            };
            let info = ctx.client()?.enroll_key(&pem)?;
            writeln!(out, "{}  enrolled, waiting for an admin to enable it", info.fingerprint)?;
        }
        Command::Key(KeyCommand::List) => {
            for k in ctx.client()?.list_keys()? {
                writeln!(out, "{}  {}", k.fingerprint, if k.enabled { "enabled" } else { "disabled" })?;
            }
        }
        Command::Key(KeyCommand::Enable { fingerprint }) => {
            let fp = Digest::from_hex(fingerprint)
                .map_err(|_| CliError::Usage("fingerprint must be 64 hex digits".into()))?;
            let info = ctx.client()?.enable_key(&fp)?;
            writeln!(out, "{}  enabled", info.fingerprint)?;
        }
        Command::Hash { paths } => {
            let chunk_size = ctx.chunk_size()?;
            for path in paths {
                let h = upload::hash_file(path, chunk_size)?;
                writeln!(out, "{}  {}", h.dataset_hash, path.display())?;
            }
        }
        Command::Upload {
            paths,
            recursive,
            zip,
            no_dedupe,
        } => {
            let targets = collect_targets(paths, *recursive, *zip)?;
            let client = ctx.client()?;
            let opts = UploadOptions {
                chunk_size: ctx.config.chunk_size,
                workers: ctx.global.workers,
                dedupe: !no_dedupe,
            };
            let show = |e: ChunkEvent<'_>| {
                if ctx.progress {
                    let mut err = ctx.err.lock().unwrap();
                    let _ = write!(err, "\r{}: chunk {}/{}", e.name, e.done, e.total);
                    if e.done == e.total {
                        let _ = writeln!(err);
                    }
                }
                true
            };
            for target in &targets {
                match upload::upload_target(&client, target, &opts, &show)? {
                    UploadOutcome::Uploaded {
                        mnemonic,
                        dataset_hash,
                        resumed,
                        transferred,
                    } => {
                        if resumed {
                            ctx.warn(&format!(
                                "{}: resumed {mnemonic}, sent {} missing chunks",
                                target.name(),
                                transferred.len()
                            ));
                        }
                        writeln!(out, "{mnemonic}  {dataset_hash}  {}", target.name())?;
                    }
                    UploadOutcome::Duplicate { existing, dataset_hash } => {
                        writeln!(out, "{existing}  {dataset_hash}  {}  duplicate, skipped", target.name())?;
                    }
                }
            }
        }
        Command::Download {
            mnemonic,
            out: dest,
            server_side,
            force,
        } => {
            let client = ctx.client()?;
            let key = ctx.private_key(None)?;
            let dest = match dest {
                Some(d) => d.clone(),
                None => default_output(Path::new("."), &client.get_dataset(mnemonic)?),
            };
            check_destination(&dest, *force)?;
            let show = |done: u64, total: u64| {
                if ctx.progress {
                    let _ = write!(ctx.err.lock().unwrap(), "\r{mnemonic}: chunk {done}/{total}");
                }
            };
            let got = if *server_side {
                download::download_server_side(&client, mnemonic, &key, &dest)?
            } else {
                download::download_local(&client, mnemonic, &key, &dest, ctx.global.workers, &show)?
            };
            if ctx.progress {
                ctx.warn("");
            }
            writeln!(out, "{}  {}  {} bytes", got.dataset_hash, got.path.display(), got.size)?;
        }
        Command::Datasets { incomplete } => {
            let client = ctx.client()?;
            if *incomplete {
                for u in client.list_incomplete()? {
                    let chunks = u.size.div_ceil(u.chunk_size.max(1));
                    writeln!(out, "{}\t{}/{} chunks\t{}", u.mnemonic, u.chunks.len(), chunks, u.filename)?;
                }
            } else {
                for d in client.list_datasets()? {
                    let perm = d.permission.map(|p| p.as_str()).unwrap_or("-");
                    writeln!(out, "{}\t{perm}\t{}\t{}\t{}", d.mnemonic, d.owner, d.size, d.filename)?;
                }
            }
        }
        Command::Share {
            mnemonic,
            user,
            permission,
        } => {
            let client = ctx.client()?;
            let key = ctx.private_key(None)?;
            let (_, dataset_key) = download::dataset_key(&client, mnemonic, &key)?;
            let resp = client.share(
                mnemonic,
                &ShareRequest {
                    key: dabih_core::api::encode_key(&dataset_key),
                    user: user.clone(),
                    permission: *permission,
                },
            )?;
            writeln!(out, "shared {mnemonic} with {} ({})", resp.user, resp.permission)?;
        }
        Command::Unshare { mnemonic, user } => {
            ctx.client()?.revoke_member(mnemonic, user)?;
            writeln!(out, "removed {user} from {mnemonic}")?;
        }
        Command::Reencrypt { mnemonic } => {
            let client = ctx.client()?;
            let key = ctx.private_key(None)?;
            let (_, old) = download::dataset_key(&client, mnemonic, &key)?;
            let resp = client.reencrypt(mnemonic, &old)?;
            let envelope = client.get_envelope(mnemonic, Some(&key.fingerprint()))?;
            let new = decapsulate(&key, &envelope)?;
            if new.fingerprint() != resp.key_fingerprint {
                return Err(CliError::Integrity("the new envelope does not hold the rotated key".into()));
            }
            writeln!(out, "{}", resp.key_fingerprint)?;
        }
        Command::Delete { mnemonic } => {
            ctx.client()?.delete_dataset(mnemonic)?;
            writeln!(out, "deleted {mnemonic}")?;
        }
        Command::Token(TokenCommand::Create { ttl }) => {
            let resp = ctx.client()?.create_token(*ttl)?;
            writeln!(out, "{}", resp.token)?;
            ctx.warn(&format!("expires at {} (unix time)", resp.expires_at));
        }
        Command::Token(TokenCommand::Revoke { secret }) => {
            ctx.client()?.revoke_token(secret)?;
            writeln!(out, "revoked")?;
        }
        Command::Recover {
            recovery,
            chunks,
            root_key,
            out: dest,
            force,
        } => {
            check_destination(dest, *force)?;
            let file = recover::read_recovery_file(recovery)?;
            let dir = match chunks {
                Some(d) => d.clone(),
                None => recovery.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
            };
            let key = ctx.private_key(root_key.as_deref())?;
            let got = recover::recover(&file, &dir, &key, dest)?;
            writeln!(out, "{}  {}  {} bytes", got.dataset_hash, got.path.display(), got.size)?;
        }
        Command::Admin(AdminCommand::Users) => {
            for u in ctx.client()?.list_users()? {
                let role = if u.is_admin { "admin" } else { "user" };
                writeln!(out, "{}\t{role}\t{}\t{}", u.user_id, u.name, u.email)?;
            }
        }
        Command::Admin(AdminCommand::Keys) => {
            for k in ctx.client()?.list_all_keys()? {
                let owner = k.owner.as_deref().unwrap_or(if k.is_root { "(root)" } else { "-" });
                let state = if k.enabled { "enabled" } else { "disabled" };
                writeln!(out, "{}\t{owner}\t{state}", k.fingerprint)?;
            }
        }
        Command::Admin(AdminCommand::Events { limit }) => {
            for e in ctx.client()?.list_events(*limit)? {
                let m = e.mnemonic.as_deref().unwrap_or("-");
                writeln!(out, "{}\t{}\t{}\t{}\t{m}\t{}", e.id, e.timestamp, e.actor, e.action, e.detail)?;
            }
        }
    }
    Ok(())
}
