//! VO user database and registration authority.
//!
//! One node type serves as the root VO database and as a regional
//! registration authority. Every mutation is an entry in an append-only
//! change log; when the node is backed by a journal, state is rebuilt at
//! startup by replaying it.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{
    block_to_record, parse_blocks, record_to_block, render_blocks, tombstone_block, Block,
    BlockError, RecordBlock,
};
use crate::domain::{
    validate_record, AttributeProjection, DistinguishedName, PeerIdentity, ProjectedRecord,
    RoleName, UserRecord, Violation,
};
use crate::journal::{Journal, JournalError};
use crate::transport::{accept, AuthenticatedChannel, Credential, TransportError};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{0} is not a registrar")]
    NotARegistrar(DistinguishedName),
    #[error("invalid record: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidRecord(Vec<Violation>),
    #[error("{0} is already registered with different data")]
    ConflictingRecord(DistinguishedName),
    #[error("unknown user {0}")]
    UnknownUser(DistinguishedName),
    #[error("{0} is not an enrolled site administrator")]
    NotAuthorized(DistinguishedName),
    #[error("node is for VO {expected}, journal is for {found}")]
    WrongVo { expected: String, found: String },
    #[error(transparent)]
    Journal(#[from] JournalError),
}

impl RegistryError {
    /// The code sent on the wire as `ERR <code>`.
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::NotARegistrar(_) => "NotARegistrar",
            RegistryError::InvalidRecord(_) => "InvalidRecord",
            RegistryError::ConflictingRecord(_) => "ConflictingRecord",
            RegistryError::UnknownUser(_) => "UnknownUser",
            RegistryError::NotAuthorized(_) => "NotAuthorized",
            RegistryError::WrongVo { .. } | RegistryError::Journal(_) => "Internal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChangeKind {
    Added,
    Updated,
    RoleChanged,
    Removed,
}

/// One change-log entry. `record` carries the user's record after the
/// change (absent for removals) so that the log alone replays to state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeLogEntry {
    pub seq: u64,
    pub kind: ChangeKind,
    pub dn: DistinguishedName,
    pub at: DateTime<Utc>,
    pub actor: DistinguishedName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<ProjectedRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
enum RegistryEvent {
    Created { vo_path: String },
    Registrar { dn: DistinguishedName, present: bool },
    SiteAdmin { dn: DistinguishedName, allowed: Option<AttributeProjection> },
    Change(ChangeLogEntry),
    FeedMark { feeder: DistinguishedName, seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserEntry {
    pub record: ProjectedRecord,
    /// Registrar or feeder that added the record.
    pub origin: DistinguishedName,
    /// Sequence number of the last change to this record.
    pub seq: u64,
}

#[derive(Debug)]
pub struct RegistryNode {
    vo_path: String,
    registrars: BTreeSet<DistinguishedName>,
    users: BTreeMap<DistinguishedName, UserEntry>,
    site_admin_acl: BTreeMap<DistinguishedName, AttributeProjection>,
    feeder_marks: BTreeMap<DistinguishedName, u64>,
    log: Vec<ChangeLogEntry>,
    upstream: Option<String>,
    required_upstream_projection: AttributeProjection,
    journal: Option<Journal<RegistryEvent>>,
}

pub type SharedRegistry = Arc<RwLock<RegistryNode>>;

impl RegistryNode {
    /// A node with no durable backing.
    pub fn in_memory(vo_path: impl Into<String>) -> Self {
        Self {
            vo_path: vo_path.into(),
            registrars: BTreeSet::new(),
            users: BTreeMap::new(),
            site_admin_acl: BTreeMap::new(),
            feeder_marks: BTreeMap::new(),
            log: Vec::new(),
            upstream: None,
            required_upstream_projection: AttributeProjection::all(),
            journal: None,
        }
    }

    /// Opens or creates a journal-backed node and replays its history.
    pub fn open(vo_path: impl Into<String>, journal: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let vo_path = vo_path.into();
        let (mut j, events) = Journal::open(journal)?;
        let mut node = Self::in_memory(vo_path.clone());
        if events.is_empty() {
            j.append(&RegistryEvent::Created {
                vo_path: vo_path.clone(),
            })?;
        }
        for ev in events {
            if let RegistryEvent::Created { vo_path: found } = &ev {
                if *found != vo_path {
                    return Err(RegistryError::WrongVo {
                        expected: vo_path,
                        found: found.clone(),
                    });
                }
            }
            node.apply_event(ev);
        }
        node.journal = Some(j);
        Ok(node)
    }

    /// Replays a journal read-only. The node has no durable backing, so
    /// mutating it never touches the file.
    pub fn load(journal: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let events: Vec<RegistryEvent> = Journal::read(journal)?;
        let vo_path = match events.first() {
            Some(RegistryEvent::Created { vo_path }) => vo_path.clone(),
            _ => String::new(),
        };
        let mut node = Self::in_memory(vo_path);
        for ev in events {
            node.apply_event(ev);
        }
        Ok(node)
    }

    pub fn into_shared(self) -> SharedRegistry {
        Arc::new(RwLock::new(self))
    }

    pub fn vo_path(&self) -> &str {
        &self.vo_path
    }

    pub fn set_upstream(&mut self, addr: Option<String>, required: AttributeProjection) {
        self.upstream = addr;
        self.required_upstream_projection = required;
    }

    pub fn upstream(&self) -> Option<&str> {
        self.upstream.as_deref()
    }

    pub fn required_upstream_projection(&self) -> &AttributeProjection {
        &self.required_upstream_projection
    }

    pub fn registrars(&self) -> &BTreeSet<DistinguishedName> {
        &self.registrars
    }

    pub fn is_registrar(&self, dn: &DistinguishedName) -> bool {
        self.registrars.contains(dn)
    }

    pub fn user(&self, dn: &DistinguishedName) -> Option<&UserEntry> {
        self.users.get(dn)
    }

    pub fn users(&self) -> impl Iterator<Item = (&DistinguishedName, &ProjectedRecord)> {
        self.users.iter().map(|(d, e)| (d, &e.record))
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn log(&self) -> &[ChangeLogEntry] {
        &self.log
    }

    pub fn latest_seq(&self) -> u64 {
        self.log.last().map_or(0, |e| e.seq)
    }

    pub fn entries_after(&self, seq: u64) -> &[ChangeLogEntry] {
        let start = self.log.partition_point(|e| e.seq <= seq);
        &self.log[start..]
    }

    pub fn allowed_for(&self, admin: &DistinguishedName) -> Option<&AttributeProjection> {
        self.site_admin_acl.get(admin)
    }

    pub fn feeder_mark(&self, feeder: &DistinguishedName) -> u64 {
        self.feeder_marks.get(feeder).copied().unwrap_or(0)
    }

    fn apply_event(&mut self, ev: RegistryEvent) {
        match ev {
            RegistryEvent::Created { .. } => {}
            RegistryEvent::Registrar { dn, present } => {
                if present {
                    self.registrars.insert(dn);
                } else {
                    self.registrars.remove(&dn);
                }
            }
            RegistryEvent::SiteAdmin { dn, allowed } => match allowed {
                Some(p) => {
                    self.site_admin_acl.insert(dn, p);
                }
                None => {
                    self.site_admin_acl.remove(&dn);
                }
            },
            RegistryEvent::FeedMark { feeder, seq } => {
                let mark = self.feeder_marks.entry(feeder).or_default();
                *mark = (*mark).max(seq);
            }
            RegistryEvent::Change(entry) => {
                match (&entry.kind, &entry.record) {
                    (ChangeKind::Removed, _) | (_, None) => {
                        self.users.remove(&entry.dn);
                    }
                    (ChangeKind::Added, Some(r)) => {
                        self.users.insert(
                            entry.dn.clone(),
                            UserEntry {
                                record: r.clone(),
                                origin: entry.actor.clone(),
                                seq: entry.seq,
                            },
                        );
                    }
                    (_, Some(r)) => {
                        let origin = self
                            .users
                            .get(&entry.dn)
                            .map_or_else(|| entry.actor.clone(), |u| u.origin.clone());
                        self.users.insert(
                            entry.dn.clone(),
                            UserEntry {
                                record: r.clone(),
                                origin,
                                seq: entry.seq,
                            },
                        );
                    }
                }
                self.log.push(entry);
            }
        }
    }

    fn commit(&mut self, ev: RegistryEvent) -> Result<(), RegistryError> {
        if let Some(j) = &mut self.journal {
            j.append(&ev)?;
        }
        self.apply_event(ev);
        Ok(())
    }

    fn log_change(
        &mut self,
        kind: ChangeKind,
        dn: &DistinguishedName,
        actor: &DistinguishedName,
        record: Option<ProjectedRecord>,
    ) -> Result<u64, RegistryError> {
        let seq = self.latest_seq() + 1;
        self.commit(RegistryEvent::Change(ChangeLogEntry {
            seq,
            kind,
            dn: dn.clone(),
            at: Utc::now(),
            actor: actor.clone(),
            record,
        }))?;
        Ok(seq)
    }

    fn require_registrar(&self, actor: &PeerIdentity) -> Result<(), RegistryError> {
        if self.registrars.contains(actor.dn()) {
            Ok(())
        } else {
            Err(RegistryError::NotARegistrar(actor.dn().clone()))
        }
    }

    pub fn add_registrar(&mut self, dn: DistinguishedName) -> Result<(), RegistryError> {
        if self.registrars.contains(&dn) {
            return Ok(());
        }
        self.commit(RegistryEvent::Registrar { dn, present: true })
    }

    /// Records already registered by `dn` stay valid.
    pub fn remove_registrar(&mut self, dn: &DistinguishedName) -> Result<(), RegistryError> {
        if !self.registrars.contains(dn) {
            return Ok(());
        }
        self.commit(RegistryEvent::Registrar {
            dn: dn.clone(),
            present: false,
        })
    }

    /// Enrolls `actor` as the registrar of `record`. Registering an identical
    /// record again returns the sequence number of the existing one.
    pub fn register_user(&mut self, actor: &PeerIdentity, mut record: UserRecord) -> Result<u64, RegistryError> {
        self.require_registrar(actor)?;
        record.registrar_dn = actor.dn().clone();
        validate_record(&record).map_err(RegistryError::InvalidRecord)?;
        let projected = ProjectedRecord::from(record);
        if let Some(existing) = self.users.get(&projected.dn) {
            return if existing.record == projected {
                Ok(existing.seq)
            } else {
                Err(RegistryError::ConflictingRecord(projected.dn))
            };
        }
        let dn = projected.dn.clone();
        self.log_change(ChangeKind::Added, &dn, actor.dn(), Some(projected))
    }

    /// Replaces the user's role set.
    pub fn assign_roles(
        &mut self,
        actor: &PeerIdentity,
        dn: &DistinguishedName,
        roles: BTreeSet<RoleName>,
    ) -> Result<u64, RegistryError> {
        self.require_registrar(actor)?;
        let entry = self.users.get(dn).ok_or_else(|| RegistryError::UnknownUser(dn.clone()))?;
        let bad: Vec<_> = roles
            .iter()
            .filter(|r| !r.is_lowercase())
            .map(|r| Violation::RoleNotLowercase(r.clone()))
            .collect();
        if !bad.is_empty() {
            return Err(RegistryError::InvalidRecord(bad));
        }
        if entry.record.roles.as_ref() == Some(&roles) {
            return Ok(entry.seq);
        }
        let mut record = entry.record.clone();
        record.roles = Some(roles);
        self.log_change(ChangeKind::RoleChanged, dn, actor.dn(), Some(record))
    }

    pub fn remove_user(&mut self, actor: &PeerIdentity, dn: &DistinguishedName) -> Result<u64, RegistryError> {
        self.require_registrar(actor)?;
        if !self.users.contains_key(dn) {
            return Err(RegistryError::UnknownUser(dn.clone()));
        }
        self.log_change(ChangeKind::Removed, dn, actor.dn(), None)
    }

    /// Grants `admin` read access to at most `allowed`; re-enrolling
    /// replaces the previous grant.
    pub fn enroll_site_admin(
        &mut self,
        admin: DistinguishedName,
        allowed: AttributeProjection,
    ) -> Result<(), RegistryError> {
        if self.site_admin_acl.get(&admin) == Some(&allowed) {
            return Ok(());
        }
        self.commit(RegistryEvent::SiteAdmin {
            dn: admin,
            allowed: Some(allowed),
        })
    }

    pub fn revoke_site_admin(&mut self, admin: &DistinguishedName) -> Result<(), RegistryError> {
        if !self.site_admin_acl.contains_key(admin) {
            return Ok(());
        }
        self.commit(RegistryEvent::SiteAdmin {
            dn: admin.clone(),
            allowed: None,
        })
    }

    /// Projected records sorted by DN, each restricted to
    /// `want ∩ allowed(actor)`. Over-asking narrows silently.
    pub fn query_users(
        &self,
        actor: &PeerIdentity,
        want: &AttributeProjection,
    ) -> Result<Vec<ProjectedRecord>, RegistryError> {
        let allowed = self
            .site_admin_acl
            .get(actor.dn())
            .ok_or_else(|| RegistryError::NotAuthorized(actor.dn().clone()))?;
        let effective = want.intersect(allowed);
        Ok(self.users.values().map(|u| u.record.project(&effective)).collect())
    }

    /// Applies one pushed change from a downstream feeder. Changes at or
    /// below the feeder's high-water mark are acknowledged without being
    /// applied again, unless `force` (full resync) is set.
    pub fn apply_push(
        &mut self,
        actor: &PeerIdentity,
        seq: u64,
        change: RecordBlock,
        force: bool,
    ) -> Result<(), RegistryError> {
        self.require_registrar(actor)?;
        let feeder = actor.dn();
        if !force && seq <= self.feeder_mark(feeder) {
            return Ok(());
        }
        match change {
            RecordBlock::Record(record) => {
                record.validate().map_err(RegistryError::InvalidRecord)?;
                match self.users.get(&record.dn) {
                    Some(existing) if existing.record == record => {}
                    Some(existing) if existing.origin != *feeder => {
                        return Err(RegistryError::ConflictingRecord(record.dn));
                    }
                    Some(existing) => {
                        let mut roles_only = existing.record.clone();
                        roles_only.roles = record.roles.clone();
                        let kind = if roles_only == record {
                            ChangeKind::RoleChanged
                        } else {
                            ChangeKind::Updated
                        };
                        let dn = record.dn.clone();
                        self.log_change(kind, &dn, feeder, Some(record))?;
                    }
                    None => {
                        let dn = record.dn.clone();
                        self.log_change(ChangeKind::Added, &dn, feeder, Some(record))?;
                    }
                }
            }
            RecordBlock::Tombstone(dn) => match self.users.get(&dn) {
                None => {}
                Some(existing) if existing.origin != *feeder => {
                    return Err(RegistryError::ConflictingRecord(dn));
                }
                Some(_) => {
                    self.log_change(ChangeKind::Removed, &dn, feeder, None)?;
                }
            },
        }
        if seq > self.feeder_mark(feeder) {
            self.commit(RegistryEvent::FeedMark {
                feeder: feeder.clone(),
                seq,
            })?;
        }
        Ok(())
    }
}

/// Folds a change log over an empty membership.
pub fn replay(entries: &[ChangeLogEntry]) -> BTreeMap<DistinguishedName, ProjectedRecord> {
    let mut users = BTreeMap::new();
    for e in entries {
        match (&e.kind, &e.record) {
            (ChangeKind::Removed, _) | (_, None) => {
                users.remove(&e.dn);
            }
            (_, Some(r)) => {
                users.insert(e.dn.clone(), r.clone());
            }
        }
    }
    users
}

// ---------------------------------------------------------------------------
// Wire protocol

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("server error {0}")]
    Server(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error(transparent)]
    Block(#[from] BlockError),
}

pub fn query_request(want: &AttributeProjection) -> String {
    format!("QUERY attrs={want}")
}

pub fn render_query_response(records: &[ProjectedRecord]) -> String {
    let mut out = String::new();
    for r in records {
        record_to_block(r).render_into(&mut out);
        out.push('\n');
    }
    out.push_str(&format!("END count={}\n", records.len()));
    out
}

pub fn parse_query_response(text: &str) -> Result<Vec<ProjectedRecord>, ProtocolError> {
    if let Some(code) = text.strip_prefix("ERR ") {
        return Err(ProtocolError::Server(code.trim().to_string()));
    }
    let lines: Vec<&str> = text.lines().collect();
    let (last, body) = lines
        .split_last()
        .ok_or_else(|| ProtocolError::Malformed("empty response".into()))?;
    let count: usize = last
        .strip_prefix("END count=")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ProtocolError::Malformed(format!("bad terminator {last:?}")))?;
    let blocks = parse_blocks(body.iter().copied(), 1)?;
    if blocks.len() != count {
        return Err(ProtocolError::Malformed(format!(
            "END count={count} but {} blocks",
            blocks.len()
        )));
    }
    blocks
        .iter()
        .map(|b| match block_to_record(b)? {
            RecordBlock::Record(r) => Ok(r),
            RecordBlock::Tombstone(_) => Err(ProtocolError::Malformed("tombstone in query".into())),
        })
        .collect()
}

pub fn push_frame(seq: u64, change: &RecordBlock, full: bool) -> String {
    let block = match change {
        RecordBlock::Record(r) => record_to_block(r),
        RecordBlock::Tombstone(dn) => tombstone_block(dn),
    };
    let mut out = if full {
        format!("PUSH seq={seq} mode=full\n")
    } else {
        format!("PUSH seq={seq}\n")
    };
    out.push_str(&render_blocks(&[block]));
    out.push_str("END\n");
    out
}

struct Push {
    seq: u64,
    full: bool,
    change: RecordBlock,
}

fn parse_push(text: &str) -> Result<Push, String> {
    let mut lines = text.lines();
    let head = lines.next().unwrap_or_default();
    let mut words = head.split_whitespace();
    if words.next() != Some("PUSH") {
        return Err("not a PUSH".into());
    }
    let mut seq = None;
    let mut full = false;
    for w in words {
        if let Some(n) = w.strip_prefix("seq=") {
            seq = n.parse().ok();
        } else if w == "mode=full" {
            full = true;
        } else {
            return Err(format!("unknown PUSH option {w}"));
        }
    }
    let seq = seq.ok_or("missing seq")?;
    let body: Vec<&str> = lines.collect();
    let (last, body) = body.split_last().ok_or("missing END")?;
    if *last != "END" {
        return Err("missing END".into());
    }
    let blocks = parse_blocks(body.iter().copied(), 2).map_err(|e| e.to_string())?;
    let [block]: [Block; 1] = blocks.try_into().map_err(|_| "PUSH carries exactly one block")?;
    let change = block_to_record(&block).map_err(|e| e.to_string())?;
    Ok(Push { seq, full, change })
}

/// Handles one request frame from an authenticated peer and returns the
/// response frame.
pub fn handle_request(node: &RwLock<RegistryNode>, peer: &PeerIdentity, request: &str) -> String {
    let head = request.lines().next().unwrap_or_default();
    if let Some(args) = head.strip_prefix("QUERY") {
        let attrs = args.trim().strip_prefix("attrs=").unwrap_or("");
        let Ok(want) = AttributeProjection::parse(attrs) else {
            return "ERR BadRequest\n".into();
        };
        let guard = node.read().expect("registry lock poisoned");
        return match guard.query_users(peer, &want) {
            Ok(records) => render_query_response(&records),
            Err(e) => format!("ERR {}\n", e.code()),
        };
    }
    if head.starts_with("PUSH") {
        let push = match parse_push(request) {
            Ok(p) => p,
            Err(reason) => {
                tracing::warn!(peer = %peer.dn(), %reason, "bad PUSH");
                return "ERR BadRequest\n".into();
            }
        };
        let mut guard = node.write().expect("registry lock poisoned");
        return match guard.apply_push(peer, push.seq, push.change, push.full) {
            Ok(()) => format!("ACK seq={}\n", push.seq),
            Err(e) => {
                tracing::warn!(peer = %peer.dn(), error = %e, "PUSH rejected");
                format!("ERR {}\n", e.code())
            }
        };
    }
    "ERR BadRequest\n".into()
}

/// Answers one request on `ch`.
pub fn serve_one(node: &RwLock<RegistryNode>, ch: &mut AuthenticatedChannel) -> Result<(), TransportError> {
    let request = ch.recv_string()?;
    let peer = ch.remote_identity().clone();
    let response = handle_request(node, &peer, &request);
    ch.send_str(&response)
}

/// Answers requests until the peer closes the channel.
pub fn serve_channel(node: &RwLock<RegistryNode>, ch: &mut AuthenticatedChannel) -> Result<(), TransportError> {
    loop {
        match serve_one(node, ch) {
            Ok(()) => {}
            Err(TransportError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

/// A TCP listener answering QUERY and PUSH requests, one thread per
/// connection.
pub struct RegistryServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl RegistryServer {
    pub fn spawn(
        listener: TcpListener,
        node: SharedRegistry,
        cred: Credential,
        allow_insecure: bool,
    ) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let cred = Arc::new(cred);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let node = node.clone();
                let cred = cred.clone();
                std::thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    match accept(stream, &cred, allow_insecure) {
                        Ok(mut ch) => {
                            if let Err(e) = serve_channel(&node, &mut ch) {
                                tracing::debug!(?peer, error = %e, "connection ended");
                            }
                        }
                        Err(e) => tracing::warn!(?peer, error = %e, "handshake failed"),
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RegistryServer {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}
