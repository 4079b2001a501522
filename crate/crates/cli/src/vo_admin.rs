//! The VO registry tool: `vo-admin serve` runs a registry; the other
//! commands talk to it over its local admin socket, one JSON line per
//! request and reply.

use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use anyhow::{bail, Context};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gums_core::block::{record_to_block, render_blocks};
use gums_core::domain::{parse_roles, DistinguishedName, PeerIdentity, ProjectedRecord, UserRecord};
use gums_core::registry::{RegistryError, RegistryNode, RegistryServer, SharedRegistry};

use crate::config::{parse_projection, VoConfig};
use crate::{load_credential, parse_args, parse_dn, CommandOutcome};

const ADMIN_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Parser)]
#[command(name = "vo-admin", about = "VO registry administration", version)]
pub struct Cli {
    #[arg(long, short, global = true, default_value = "vo.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the registry: the query listener and the admin socket.
    Serve,
    /// Register a user; `--as` must be a registrar.
    AddUser {
        #[arg(long = "as", value_parser = parse_dn)]
        actor: DistinguishedName,
        #[arg(long, value_parser = parse_dn)]
        dn: DistinguishedName,
        #[arg(long)]
        name: String,
        #[arg(long)]
        institution: String,
        #[arg(long)]
        email: String,
        /// Comma separated.
        #[arg(long, default_value = "")]
        roles: String,
        /// Defaults to the DN.
        #[arg(long)]
        cert_ref: Option<String>,
        /// RFC 3339; defaults to now.
        #[arg(long)]
        signed_at: Option<DateTime<Utc>>,
    },
    /// Replace a user's roles.
    SetRoles {
        #[arg(long = "as", value_parser = parse_dn)]
        actor: DistinguishedName,
        #[arg(long, value_parser = parse_dn)]
        dn: DistinguishedName,
        #[arg(long, default_value = "")]
        roles: String,
    },
    RemoveUser {
        #[arg(long = "as", value_parser = parse_dn)]
        actor: DistinguishedName,
        #[arg(long, value_parser = parse_dn)]
        dn: DistinguishedName,
    },
    /// Allow a site administrator to query the given attributes.
    EnrollAdmin {
        #[arg(long, value_parser = parse_dn)]
        dn: DistinguishedName,
        #[arg(long)]
        projection: String,
    },
    /// Allow an identity (a registrar or a feeding authority) to add users.
    AddRegistrar {
        #[arg(long, value_parser = parse_dn)]
        dn: DistinguishedName,
    },
    /// Print every user record.
    Dumpdb {
        #[arg(long)]
        json: bool,
    },
    /// Run each line of a file as a vo-admin command.
    Script { file: PathBuf },
}

/// One admin socket request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum AdminRequest {
    AddUser { actor: DistinguishedName, record: UserRecord },
    SetRoles { actor: DistinguishedName, dn: DistinguishedName, roles: String },
    RemoveUser { actor: DistinguishedName, dn: DistinguishedName },
    EnrollAdmin { dn: DistinguishedName, projection: String },
    AddRegistrar { dn: DistinguishedName },
    Dump,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "kebab-case")]
pub enum AdminReply {
    Ok { seq: Option<u64> },
    Users { records: Vec<ProjectedRecord> },
    Err { code: String, message: String },
}

impl AdminReply {
    fn from_registry(r: Result<Option<u64>, RegistryError>) -> Self {
        match r {
            Ok(seq) => AdminReply::Ok { seq },
            Err(e) => AdminReply::Err {
                code: e.code().to_string(),
                message: e.to_string(),
            },
        }
    }
}

pub fn handle_admin(node: &SharedRegistry, req: AdminRequest) -> AdminReply {
    let mut node = node.write().expect("registry lock");
    match req {
        AdminRequest::AddUser { actor, mut record } => {
            if record.vo_path.is_empty() {
                record.vo_path = node.vo_path().to_string();
            }
            AdminReply::from_registry(node.register_user(&PeerIdentity::operator(actor), record).map(Some))
        }
        AdminRequest::SetRoles { actor, dn, roles } => match parse_roles(&roles) {
            Ok(roles) => {
                AdminReply::from_registry(node.assign_roles(&PeerIdentity::operator(actor), &dn, roles).map(Some))
            }
            Err(e) => AdminReply::Err {
                code: "InvalidRecord".into(),
                message: e.to_string(),
            },
        },
        AdminRequest::RemoveUser { actor, dn } => {
            AdminReply::from_registry(node.remove_user(&PeerIdentity::operator(actor), &dn).map(Some))
        }
        AdminRequest::EnrollAdmin { dn, projection } => match parse_projection(&projection) {
            Ok(p) => AdminReply::from_registry(node.enroll_site_admin(dn, p).map(|_| None)),
            Err(e) => AdminReply::Err {
                code: "InvalidProjection".into(),
                message: e.to_string(),
            },
        },
        AdminRequest::AddRegistrar { dn } => AdminReply::from_registry(node.add_registrar(dn).map(|_| None)),
        AdminRequest::Dump => AdminReply::Users {
            records: node.users().map(|(_, r)| r.clone()).collect(),
        },
    }
}

fn serve_admin_conn(node: &SharedRegistry, stream: UnixStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<AdminRequest>(&line) {
            Ok(req) => handle_admin(node, req),
            Err(e) => AdminReply::Err {
                code: "BadRequest".into(),
                message: e.to_string(),
            },
        };
        let mut out = serde_json::to_string(&reply).expect("replies serialize");
        out.push('\n');
        writer.write_all(out.as_bytes())?;
    }
    Ok(())
}

/// A running registry. Dropping it stops both listeners and removes the
/// admin socket.
pub struct VoServer {
    pub node: SharedRegistry,
    query: RegistryServer,
    socket: PathBuf,
    stop: Arc<AtomicBool>,
    admin: Option<JoinHandle<()>>,
}

impl VoServer {
    pub fn start(cfg: &VoConfig) -> anyhow::Result<Self> {
        let cred = load_credential(&cfg.credential)?;
        let node = RegistryNode::open(cfg.vo_path.clone(), &cfg.journal)?.into_shared();
        let listener = TcpListener::bind(&cfg.listen).with_context(|| format!("binding {}", cfg.listen))?;
        let query = RegistryServer::spawn(listener, node.clone(), cred, cfg.allow_insecure)?;
        if cfg.admin_socket.exists() {
            if UnixStream::connect(&cfg.admin_socket).is_ok() {
                bail!("admin socket {} is in use", cfg.admin_socket.display());
            }
            std::fs::remove_file(&cfg.admin_socket)?;
        }
        let admin_listener = UnixListener::bind(&cfg.admin_socket)
            .with_context(|| format!("binding {}", cfg.admin_socket.display()))?;
        admin_listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let admin = {
            let node = node.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match admin_listener.accept() {
                        Ok((s, _)) => {
                            let served = s.set_nonblocking(false).and_then(|_| serve_admin_conn(&node, s));
                            if let Err(e) = served {
                                tracing::warn!(error = %e, "admin connection failed");
                            }
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(ADMIN_POLL);
                        }
                        Err(e) => tracing::warn!(error = %e, "admin accept failed"),
                    }
                }
            })
        };
        Ok(Self {
            node,
            query,
            socket: cfg.admin_socket.clone(),
            stop,
            admin: Some(admin),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.query.addr()
    }
}

impl Drop for VoServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.admin.take() {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.socket);
    }
}

/// Sends one request over the admin socket.
pub fn request(socket: &Path, req: &AdminRequest) -> anyhow::Result<AdminReply> {
    let mut stream =
        UnixStream::connect(socket).with_context(|| format!("connecting to admin socket {}", socket.display()))?;
    let mut line = serde_json::to_string(req)?;
    line.push('\n');
    stream.write_all(line.as_bytes())?;
    stream.shutdown(std::net::Shutdown::Write)?;
    let mut reply = String::new();
    BufReader::new(stream).read_line(&mut reply)?;
    serde_json::from_str(&reply).with_context(|| format!("bad reply {reply:?}"))
}

pub fn run<I, T>(args: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_args::<Cli, _, _>(args) {
        Ok(cli) => execute(cli),
        Err(outcome) => outcome,
    }
}

pub fn execute(cli: Cli) -> CommandOutcome {
    let cfg = match VoConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => return CommandOutcome::failure(format!("{e:#}")),
    };
    match cli.command {
        Command::Serve => serve(&cfg).into(),
        Command::Script { file } => script(&cli.config, &file),
        other => match to_request(other) {
            Ok((req, json)) => send(&cfg, &req, json),
            Err(e) => CommandOutcome::failure(format!("{e:#}")),
        },
    }
}

fn serve(cfg: &VoConfig) -> anyhow::Result<String> {
    let server = VoServer::start(cfg)?;
    tracing::info!(vo = %cfg.vo_path, addr = %server.addr(), socket = %cfg.admin_socket.display(), "registry serving");
    loop {
        std::thread::park();
    }
}

/// The socket request for a command, and whether output is JSON.
fn to_request(command: Command) -> anyhow::Result<(AdminRequest, bool)> {
    let req = match command {
        Command::AddUser {
            actor,
            dn,
            name,
            institution,
            email,
            roles,
            cert_ref,
            signed_at,
        } => AdminRequest::AddUser {
            record: UserRecord {
                certificate_ref: cert_ref.unwrap_or_else(|| dn.to_string()),
                dn,
                real_name: name,
                institution,
                email,
                registrar_dn: actor.clone(),
                agreement_signed_at: signed_at.unwrap_or_else(Utc::now),
                roles: parse_roles(&roles)?,
                vo_path: String::new(),
            },
            actor,
        },
        Command::SetRoles { actor, dn, roles } => AdminRequest::SetRoles { actor, dn, roles },
        Command::RemoveUser { actor, dn } => AdminRequest::RemoveUser { actor, dn },
        Command::EnrollAdmin { dn, projection } => AdminRequest::EnrollAdmin { dn, projection },
        Command::AddRegistrar { dn } => AdminRequest::AddRegistrar { dn },
        Command::Dumpdb { json } => return Ok((AdminRequest::Dump, json)),
        Command::Serve | Command::Script { .. } => unreachable!("not a socket request"),
    };
    Ok((req, false))
}

fn send(cfg: &VoConfig, req: &AdminRequest, json: bool) -> CommandOutcome {
    match request(&cfg.admin_socket, req) {
        Ok(AdminReply::Ok { seq: Some(seq) }) => CommandOutcome::ok(format!("ok seq={seq}\n")),
        Ok(AdminReply::Ok { seq: None }) => CommandOutcome::ok("ok\n"),
        Ok(AdminReply::Users { records }) if json => match serde_json::to_string_pretty(&records) {
            Ok(s) => CommandOutcome::ok(s + "\n"),
            Err(e) => CommandOutcome::failure(e),
        },
        Ok(AdminReply::Users { records }) => {
            let blocks: Vec<_> = records.iter().map(record_to_block).collect();
            CommandOutcome::ok(render_blocks(&blocks))
        }
        Ok(AdminReply::Err { code, message }) => CommandOutcome::failure(format!("{code}: {message}")),
        Err(e) => CommandOutcome::failure(format!("{e:#}")),
    }
}

/// Runs every non-blank, non-comment line of `file`; stops at the first
/// failure.
fn script(config: &Path, file: &Path) -> CommandOutcome {
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => return CommandOutcome::failure(format!("reading {}: {e}", file.display())),
    };
    let mut stdout = String::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let words = match shell_words::split(line) {
            Ok(w) => w,
            Err(e) => return CommandOutcome::usage(format!("{}:{}: {e}\n", file.display(), i + 1)),
        };
        let mut args: Vec<OsString> = vec!["vo-admin".into(), "--config".into(), config.into()];
        args.extend(words.into_iter().map(OsString::from));
        let out = match parse_args::<Cli, _, _>(args) {
            Ok(Cli {
                command: Command::Serve | Command::Script { .. },
                ..
            }) => CommandOutcome::usage(format!("{}:{}: not allowed in a script\n", file.display(), i + 1)),
            Ok(cli) => execute(cli),
            Err(o) => o,
        };
        stdout.push_str(&out.stdout);
        if out.code != 0 {
            return CommandOutcome {
                code: out.code,
                stdout,
                stderr: format!("{}:{}: {}", file.display(), i + 1, out.stderr),
            };
        }
    }
    CommandOutcome::ok(stdout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_round_trip_as_json() {
        let req = AdminRequest::SetRoles {
            actor: DistinguishedName::parse("/CN=reg").unwrap(),
            dn: DistinguishedName::parse("/CN=u").unwrap(),
            roles: "analysis".into(),
        };
        let line = serde_json::to_string(&req).unwrap();
        assert!(line.contains("\"op\":\"set-roles\""));
        assert_eq!(serde_json::from_str::<AdminRequest>(&line).unwrap(), req);
        let reply = AdminReply::Err {
            code: "NotARegistrar".into(),
            message: "x".into(),
        };
        assert_eq!(
            serde_json::from_str::<AdminReply>(&serde_json::to_string(&reply).unwrap()).unwrap(),
            reply
        );
    }
}
