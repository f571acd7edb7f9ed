//! Command-line interface. Every command prints JSON on stdout.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tokenward_core::audit::{AuditFilter, EventType};
use tokenward_core::authz::{ClientMetadata, ClientState, TokenMode};
use tokenward_core::revocation::{RevocationKind, StalePolicy};
use tokenward_core::scopes::{join_scopes, parse_scopes};
use tokenward_core::token::{sign_token, verify_token, TokenClaims};
use tokenward_core::Platform;

use crate::clock::{Clock, SystemClock};
use crate::config::{PersistenceMode, ServerConfig};
use crate::harness::{run_replica_sync_harness, HarnessConfig, Scenario};
use crate::http::{serve_state, AppState, StubUsers};
use crate::state::{open_platform, read_scope_file};

#[derive(Debug, Parser)]
#[command(
    name = "tokenward",
    version,
    about = "OAuth 2.0 authorization server and token toolkit"
)]
pub struct Cli {
    /// TOML configuration file. `TOKENWARD_*` variables override it.
    #[arg(long, global = true, env = "TOKENWARD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir` from the configuration.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP server until interrupted.
    Serve,
    #[command(subcommand)]
    Client(ClientCommand),
    #[command(subcommand)]
    Key(KeyCommand),
    #[command(subcommand)]
    Scope(ScopeCommand),
    #[command(subcommand)]
    Token(TokenCommand),
    /// Record a revocation.
    Revoke {
        #[arg(value_parser = parse_kind)]
        kind: RevocationKind,
        subject: String,
        /// Tokens issued at or before this time are revoked. Defaults to now.
        #[arg(long)]
        cutoff: Option<i64>,
        #[arg(long, default_value = "operator request")]
        reason: String,
    },
    #[command(subcommand)]
    Audit(AuditCommand),
    #[command(subcommand)]
    Harness(HarnessCommand),
}

#[derive(Debug, Subcommand)]
pub enum ClientCommand {
    Register {
        #[arg(long)]
        name: String,
        #[arg(long = "redirect-uri", required = true)]
        redirect_uris: Vec<String>,
        /// Space-separated scopes.
        #[arg(long)]
        scope: String,
        /// Register a public client (no secret).
        #[arg(long)]
        public: bool,
        #[arg(long, value_enum, default_value_t = ModeArg::ByValue)]
        token_mode: ModeArg,
    },
    SetState {
        client_id: String,
        state: String,
    },
    List,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    ByValue,
    ByReference,
    Phantom,
}

impl From<ModeArg> for TokenMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ByValue => TokenMode::ByValue,
            ModeArg::ByReference => TokenMode::ByReference,
            ModeArg::Phantom => TokenMode::Phantom,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum KeyCommand {
    /// Add a pending key.
    Generate {
        #[arg(long)]
        algorithm: Option<String>,
        /// Activate it immediately.
        #[arg(long)]
        activate: bool,
    },
    /// Apply scheduled transitions; `--force` promotes the newest pending key.
    Rotate {
        #[arg(long)]
        force: bool,
    },
    List,
    /// The published verification key set.
    Publish,
}

#[derive(Debug, Subcommand)]
pub enum ScopeCommand {
    Load { path: PathBuf },
    List,
}

#[derive(Debug, Subcommand)]
pub enum TokenCommand {
    /// Sign a claims document (JSON) with the active default key.
    Sign {
        #[arg(long)]
        claims: String,
    },
    Verify {
        token: String,
    },
    Introspect {
        token: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    Query(AuditQuery),
    Anomalies {
        #[arg(long, default_value_t = 60)]
        duration: i64,
    },
}

#[derive(Debug, Args)]
pub struct AuditQuery {
    #[arg(long)]
    user: Option<String>,
    #[arg(long)]
    client: Option<String>,
    #[arg(long)]
    token: Option<String>,
    #[arg(long)]
    since: Option<i64>,
    #[arg(long)]
    until: Option<i64>,
    #[arg(long, value_parser = parse_event_type)]
    event_type: Option<EventType>,
}

#[derive(Debug, Subcommand)]
pub enum HarnessCommand {
    /// Simulate revocation propagation across verifier replicas.
    Replicas {
        #[arg(long, default_value_t = 5)]
        replicas: usize,
        #[arg(long, default_value_t = 10)]
        sync_interval: i64,
        #[arg(long, default_value_t = 60)]
        max_staleness: i64,
        #[arg(long, default_value_t = 180)]
        duration: i64,
        #[arg(long, default_value_t = 20)]
        users: usize,
        #[arg(long)]
        steady: bool,
        #[arg(long)]
        partitioned: Option<usize>,
        /// Ask the authority when stale instead of rejecting.
        #[arg(long)]
        fallback: bool,
    },
}

fn parse_kind(s: &str) -> Result<RevocationKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_event_type(s: &str) -> Result<EventType, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unknown event type {s:?}"))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("open: {0}")]
    Open(#[from] crate::state::OpenError),
    #[error("{class}: {message}")]
    Operation { class: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn op<E: std::fmt::Display>(class: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Operation {
        class: class.to_string(),
        message: e.to_string(),
    }
}

impl Cli {
    pub fn server_config(&self) -> Result<ServerConfig, CliError> {
        let mut config = ServerConfig::from_env(self.config.as_deref())?;
        if let Some(dir) = &self.data_dir {
            config.data_dir = dir.clone();
            config.persistence = PersistenceMode::File;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Runs everything except `serve`.
pub fn execute(cli: &Cli) -> Result<Value, CliError> {
    if let Command::Harness(HarnessCommand::Replicas {
        replicas,
        sync_interval,
        max_staleness,
        duration,
        users,
        steady,
        partitioned,
        fallback,
    }) = &cli.command
    {
        let report = run_replica_sync_harness(&HarnessConfig {
            replicas: *replicas,
            sync_interval: *sync_interval,
            max_staleness: *max_staleness,
            duration: *duration,
            users: *users,
            scenario: if *steady {
                Scenario::Steady
            } else {
                Scenario::MassRevocation
            },
            partitioned: *partitioned,
            stale_policy: if *fallback {
                StalePolicy::Fallback
            } else {
                StalePolicy::FailSafe
            },
        });
        return Ok(json!(report));
    }
    let config = cli.server_config()?;
    let now = SystemClock.now();
    let platform = open_platform(&config, now)?;
    run_command(&platform, &cli.command, now)
}

fn run_command(p: &Platform, command: &Command, now: i64) -> Result<Value, CliError> {
    Ok(match command {
        Command::Serve | Command::Harness(_) => unreachable!("handled by caller"),
        Command::Client(ClientCommand::Register {
            name,
            redirect_uris,
            scope,
            public,
            token_mode,
        }) => {
            let meta = ClientMetadata {
                name: name.clone(),
                redirect_uris: redirect_uris.clone(),
                requested_scopes: parse_scopes(scope),
                confidential: !public,
                token_mode: (*token_mode).into(),
            };
            let reg = p.authz.register_client(&meta, now).map_err(op("authz"))?;
            json!({
                "client_id": reg.client.client_id,
                "client_secret": reg.client_secret,
                "allowed_scopes": join_scopes(&reg.client.allowed_scopes),
                "lifecycle_state": reg.client.lifecycle_state,
            })
        }
        Command::Client(ClientCommand::SetState { client_id, state }) => {
            let to: ClientState = state.parse().map_err(op("authz"))?;
            let c = p
                .authz
                .transition_app_state(client_id, to, now)
                .map_err(op("authz"))?;
            json!({"client_id": c.client_id, "lifecycle_state": c.lifecycle_state})
        }
        Command::Client(ClientCommand::List) => Value::Array(
            p.authz
                .clients()
                .iter()
                .map(|c| {
                    json!({
                        "client_id": c.client_id,
                        "name": c.name,
                        "lifecycle_state": c.lifecycle_state,
                        "token_mode": c.token_mode,
                    })
                })
                .collect(),
        ),
        Command::Key(cmd) => key_command(p, cmd, now)?,
        Command::Scope(ScopeCommand::Load { path }) => {
            let entries = read_scope_file(path)?;
            p.scopes.load(&entries).map_err(op("scopes"))?;
            json!(p.scopes.snapshot().to_entries())
        }
        Command::Scope(ScopeCommand::List) => json!(p.scopes.snapshot().to_entries()),
        Command::Token(TokenCommand::Sign { claims }) => {
            let claims: TokenClaims = serde_json::from_str(claims).map_err(op("token"))?;
            let key = p.keys.default_signing_key().map_err(op("key"))?;
            let signed = sign_token(&claims, &key).map_err(op("token"))?;
            json!({"token": signed.compact, "kid": signed.header.kid})
        }
        Command::Token(TokenCommand::Verify { token }) => {
            let policy = p.authz.verification_policy();
            match verify_token(
                token,
                &*p.keys,
                &policy,
                |c| p.revocation.is_revoked(c, None),
                now,
            ) {
                Ok(claims) => json!({"valid": true, "claims": claims}),
                Err(e) => json!({"valid": false, "error_class": e.class()}),
            }
        }
        Command::Token(TokenCommand::Introspect { token }) => {
            json!(p.authz.introspect_token(token, now))
        }
        Command::Revoke {
            kind,
            subject,
            cutoff,
            reason,
        } => {
            let entry = p
                .revocation
                .revoke(*kind, subject, cutoff.unwrap_or(now), reason, now)
                .map_err(op("revocation"))?;
            json!({"revoked": entry, "version": p.revocation.version()})
        }
        Command::Audit(AuditCommand::Query(q)) => {
            let filter = AuditFilter {
                user_id: q.user.clone(),
                client_id: q.client.clone(),
                token_id: q.token.clone(),
                since: q.since,
                until: q.until,
                event_type: q.event_type,
            };
            json!(p.audit.query_events(&filter))
        }
        Command::Audit(AuditCommand::Anomalies { duration }) => {
            json!(p.scan_anomalies(*duration, now).map_err(op("audit"))?)
        }
    })
}

fn key_command(p: &Platform, cmd: &KeyCommand, now: i64) -> Result<Value, CliError> {
    let keys = &p.keys;
    Ok(match cmd {
        KeyCommand::Generate {
            algorithm,
            activate,
        } => {
            let alg = match algorithm {
                Some(a) => a.parse().map_err(op("key"))?,
                None => keys.settings().default_algorithm,
            };
            let key = keys.generate_key(alg, now, now).map_err(op("key"))?;
            if *activate {
                keys.activate_key(&key.kid, now).map_err(op("key"))?;
            }
            json!({"kid": key.kid, "algorithm": alg, "version": keys.version()})
        }
        KeyCommand::Rotate { force } => {
            let report = if *force {
                keys.force_rotate(now)
            } else {
                keys.rotate_keys(now)
            }
            .map_err(op("key"))?;
            json!({"report": report, "version": keys.version()})
        }
        KeyCommand::List => Value::Array(
            keys.list()
                .iter()
                .map(|k| {
                    json!({
                        "kid": k.kid,
                        "algorithm": k.algorithm,
                        "state": k.state,
                        "not_before": k.not_before,
                        "rollover_until": k.rollover_until,
                    })
                })
                .collect(),
        ),
        KeyCommand::Publish => json!(keys.publish_key_set()),
    })
}

/// Runs `serve`: HTTP plus a once-a-minute maintenance task.
pub async fn serve(cli: &Cli) -> Result<(), CliError> {
    let config = cli.server_config()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let platform = Arc::new(open_platform(&config, clock.now())?);
    let state = AppState {
        platform: platform.clone(),
        clock: clock.clone(),
        users: Arc::new(StubUsers),
        admin_token: config.admin_token.clone(),
    };
    let handle = serve_state(state, config.listen_addr()?).await?;
    println!("{}", json!({"listening": handle.addr.to_string()}));

    let upkeep = {
        let platform = platform.clone();
        let clock = clock.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(60));
            loop {
                tick.tick().await;
                if let Err(e) = platform.maintain(clock.now()) {
                    tracing::error!(error = %e, "maintenance failed");
                }
            }
        })
    };
    tokio::signal::ctrl_c().await?;
    upkeep.abort();
    handle.shutdown().await?;
    if config.persistence == PersistenceMode::File {
        platform.compact(clock.now()).map_err(op("storage"))?;
    }
    Ok(())
}
