//! Site admission policy, role to group mapping, and the queue of pending
//! administrator requests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DistinguishedName, ProjectedRecord, RoleName};
use crate::provision::{ProvisionId, ProvisionKind};

/// Admission outcome for one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Admit,
    Ban,
    Hold(String),
}

/// A site-supplied admission rule. Hooks run after the built-in checks,
/// left to right; the first non-`Admit` answer wins.
pub trait PolicyHook: Send + Sync {
    fn evaluate(&self, record: &ProjectedRecord) -> Decision;
}

impl<F> PolicyHook for F
where
    F: Fn(&ProjectedRecord) -> Decision + Send + Sync,
{
    fn evaluate(&self, record: &ProjectedRecord) -> Decision {
        self(record)
    }
}

#[derive(Clone)]
pub struct SitePolicy {
    pub banned_dns: BTreeSet<DistinguishedName>,
    pub reserved_accounts: BTreeSet<String>,
    pub role_group_map: BTreeMap<RoleName, String>,
    pub hold_unknown_roles: bool,
    hooks: Vec<Arc<dyn PolicyHook>>,
}

impl Default for SitePolicy {
    fn default() -> Self {
        Self {
            banned_dns: BTreeSet::new(),
            reserved_accounts: BTreeSet::new(),
            role_group_map: BTreeMap::new(),
            hold_unknown_roles: true,
            hooks: Vec::new(),
        }
    }
}

impl fmt::Debug for SitePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SitePolicy")
            .field("banned_dns", &self.banned_dns)
            .field("reserved_accounts", &self.reserved_accounts)
            .field("role_group_map", &self.role_group_map)
            .field("hold_unknown_roles", &self.hold_unknown_roles)
            .field("hooks", &self.hooks.len())
            .finish()
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reserved accounts overlap the account pool: {}", .0.join(", "))]
    ReservedInPool(Vec<String>),
    #[error("policy file {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl SitePolicy {
    pub fn with_hook(mut self, hook: impl PolicyHook + 'static) -> Self {
        self.hooks.push(Arc::new(hook));
        self
    }

    /// Identity mapping for the given roles.
    pub fn map_roles_to_same_name<'a>(mut self, roles: impl IntoIterator<Item = &'a str>) -> Self {
        for r in roles {
            let role = RoleName::parse(r).expect("valid role name");
            self.role_group_map.insert(role, r.to_string());
        }
        self
    }

    /// Parses the line-oriented policy file:
    /// `ban <dn>`, `reserve <account>`, `rolemap <role> <group>`,
    /// `hold-unknown-roles {true|false}`, `#` comments.
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut policy = SitePolicy::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| PolicyError::Parse { line: i + 1, reason };
            let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match word {
                "ban" => {
                    let dn = DistinguishedName::parse(rest).map_err(|e| err(e.to_string()))?;
                    policy.banned_dns.insert(dn);
                }
                "reserve" => {
                    if rest.is_empty() || rest.contains(char::is_whitespace) {
                        return Err(err("reserve takes one account name".into()));
                    }
                    policy.reserved_accounts.insert(rest.to_string());
                }
                "rolemap" => {
                    let mut parts = rest.split_whitespace();
                    let (Some(role), Some(group), None) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(err("rolemap takes <role> <group>".into()));
                    };
                    let role = RoleName::parse(role).map_err(|e| err(e.to_string()))?;
                    policy.role_group_map.insert(role, group.to_string());
                }
                "hold-unknown-roles" => {
                    policy.hold_unknown_roles = match rest {
                        "true" => true,
                        "false" => false,
                        other => return Err(err(format!("expected true or false, got {other:?}"))),
                    };
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        Ok(policy)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Fails if any reserved (non-grid) account is also a pool account.
    pub fn check_reserved<'a>(&self, pool_accounts: impl IntoIterator<Item = &'a str>) -> Result<(), PolicyError> {
        let overlap: Vec<String> = pool_accounts
            .into_iter()
            .filter(|a| self.reserved_accounts.contains(*a))
            .map(str::to_string)
            .collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(PolicyError::ReservedInPool(overlap))
        }
    }

    /// The effective policy once groups registered by the site administrator
    /// are layered over the file's role map.
    pub fn with_registered_groups(&self, registered: &BTreeMap<RoleName, String>) -> SitePolicy {
        let mut p = self.clone();
        for (role, group) in registered {
            p.role_group_map.insert(role.clone(), group.clone());
        }
        p
    }
}

/// Ban dominates; then unknown roles hold (when enabled); then hooks.
pub fn evaluate(record: &ProjectedRecord, policy: &SitePolicy) -> Decision {
    if policy.banned_dns.contains(&record.dn) {
        return Decision::Ban;
    }
    if policy.hold_unknown_roles {
        let (_, missing) = roles_to_groups(&record.role_set(), policy);
        if !missing.is_empty() {
            let names: Vec<_> = missing.iter().map(RoleName::as_str).collect();
            return Decision::Hold(format!("unmapped roles: {}", names.join(",")));
        }
    }
    for hook in &policy.hooks {
        let d = hook.evaluate(record);
        if d != Decision::Admit {
            return d;
        }
    }
    Decision::Admit
}

/// Maps roles through the policy; returns `(groups, unmapped roles)`.
pub fn roles_to_groups(
    roles: &BTreeSet<RoleName>,
    policy: &SitePolicy,
) -> (BTreeSet<String>, BTreeSet<RoleName>) {
    let mut groups = BTreeSet::new();
    let mut missing = BTreeSet::new();
    for role in roles {
        match policy.role_group_map.get(role) {
            Some(g) => {
                groups.insert(g.clone());
            }
            None => {
                missing.insert(role.clone());
            }
        }
    }
    (groups, missing)
}

// ---------------------------------------------------------------------------
// Pending requests and notifications

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub String);

impl RequestId {
    pub fn from_counter(n: u64) -> Self {
        Self(format!("req-{n:06}"))
    }

    pub fn counter(&self) -> Option<u64> {
        self.0.strip_prefix("req-")?.parse().ok()
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Why an account needs a human.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "review", rename_all = "kebab-case")]
pub enum ReviewAction {
    /// Carry out a provisioning request by hand (queue backend).
    Provision { request: ProvisionId, kind: ProvisionKind },
    /// The user is held after a provisioning failure; `done` re-queues it.
    Held { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RequestKind {
    CreateGroup {
        role: RoleName,
    },
    AddToGroup {
        vo: String,
        dn: DistinguishedName,
        group: String,
    },
    RemoveFromGroup {
        vo: String,
        dn: DistinguishedName,
        group: String,
    },
    ReviewAccount {
        vo: String,
        dn: DistinguishedName,
        action: ReviewAction,
    },
}

impl RequestKind {
    pub fn describe(&self) -> String {
        match self {
            RequestKind::CreateGroup { role } => {
                format!("create a UNIX group for new VO role {role}")
            }
            RequestKind::AddToGroup { dn, group, vo } => {
                format!("add {dn} (VO {vo}) to group {group}")
            }
            RequestKind::RemoveFromGroup { dn, group, vo } => {
                format!("remove {dn} (VO {vo}) from group {group}")
            }
            RequestKind::ReviewAccount { dn, vo, action } => match action {
                ReviewAction::Provision { request, kind } => {
                    format!("{kind:?} the local account of {dn} (VO {vo}), provisioning request {request}")
                }
                ReviewAction::Held { reason } => {
                    format!("review held account request of {dn} (VO {vo}): {reason}")
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestStatus {
    Open,
    Done,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRequest {
    pub id: RequestId,
    pub kind: RequestKind,
    pub created_at: DateTime<Utc>,
    pub status: RequestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub to: String,
    pub subject: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub related_request: Option<RequestId>,
}

impl Notification {
    pub fn for_request(to: &str, req: &PendingRequest) -> Self {
        let subject = match &req.kind {
            RequestKind::CreateGroup { role } => format!("[gums] {} create group for role {role}", req.id),
            RequestKind::AddToGroup { group, .. } => format!("[gums] {} add user to group {group}", req.id),
            RequestKind::RemoveFromGroup { group, .. } => {
                format!("[gums] {} remove user from group {group}", req.id)
            }
            RequestKind::ReviewAccount { .. } => format!("[gums] {} account review", req.id),
        };
        let body = format!(
            "Please {}.\nWhen finished run: gums complete {} done\n",
            req.kind.describe(),
            req.id
        );
        Self {
            to: to.to_string(),
            subject,
            body,
            related_request: Some(req.id.clone()),
        }
    }
}

/// `To:`, `Subject:`, blank line, body, `---` separator.
pub fn render_notification(n: &Notification) -> String {
    let mut out = format!("To: {}\nSubject: {}\n\n{}", n.to, n.subject, n.body);
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("---\n");
    out
}

/// Parses a notification file back into `(to, subject, body)` triples.
pub fn parse_notifications(text: &str) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    for chunk in text.split("---\n") {
        if chunk.trim().is_empty() {
            continue;
        }
        let (head, body) = chunk.split_once("\n\n").unwrap_or((chunk, ""));
        let mut to = String::new();
        let mut subject = String::new();
        for line in head.lines() {
            if let Some(v) = line.strip_prefix("To: ") {
                to = v.to_string();
            } else if let Some(v) = line.strip_prefix("Subject: ") {
                subject = v.to_string();
            }
        }
        out.push((to, subject, body.to_string()));
    }
    out
}

pub trait NotificationSink: Send {
    fn deliver(&mut self, n: &Notification) -> io::Result<()>;
}

/// Appends one block per notification to a file.
#[derive(Debug, Clone)]
pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl NotificationSink for FileSink {
    fn deliver(&mut self, n: &Notification) -> io::Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        f.write_all(render_notification(n).as_bytes())?;
        f.sync_data()
    }
}

/// Collects notifications in memory; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    inner: Arc<Mutex<Vec<Notification>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn notifications(&self) -> Vec<Notification> {
        self.inner.lock().expect("sink lock").clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("sink lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NotificationSink for MemorySink {
    fn deliver(&mut self, n: &Notification) -> io::Result<()> {
        self.inner.lock().expect("sink lock").push(n.clone());
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct NullSink;

impl NotificationSink for NullSink {
    fn deliver(&mut self, _: &Notification) -> io::Result<()> {
        Ok(())
    }
}
