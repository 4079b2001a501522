//! The site's durable user database.
//!
//! State changes are grouped into transactions. A committed transaction is
//! one JSON line in `journal.log`; every so often the full state is written
//! to `snapshot.json` and the journal is truncated. On open the snapshot is
//! loaded and newer journal batches are replayed, so the reloaded state is
//! exactly the last committed one.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block::{format_timestamp, record_to_block, Block};
use crate::domain::{DistinguishedName, ProjectedRecord, RoleName};
use crate::journal::{atomic_write_bytes, Journal, JournalError};
use crate::policy::{PendingRequest, RequestId, RequestKind, RequestStatus};
use crate::provision::{ProvisionId, ProvisionKind, ProvisionRequest};

const JOURNAL_FILE: &str = "journal.log";
const SNAPSHOT_FILE: &str = "snapshot.json";
const LOCK_FILE: &str = "store.lock";
const SNAPSHOT_EVERY: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UserStatus {
    PendingCreate,
    Active,
    Held,
    Disabled,
    Banned,
}

impl UserStatus {
    pub const ALL: [UserStatus; 5] = [
        UserStatus::PendingCreate,
        UserStatus::Active,
        UserStatus::Held,
        UserStatus::Disabled,
        UserStatus::Banned,
    ];

    /// The legal transition relation. `from = None` is a first sighting.
    pub fn can_become(from: Option<UserStatus>, to: UserStatus) -> bool {
        use UserStatus::*;
        match (from, to) {
            (_, Banned) => true,
            (None, PendingCreate | Held) => true,
            (Some(PendingCreate), Active | Held) => true,
            (Some(Active), Disabled) => true,
            (Some(Disabled), Active) => true,
            (Some(Held), PendingCreate) => true,
            _ => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UserStatus::PendingCreate => "PendingCreate",
            UserStatus::Active => "Active",
            UserStatus::Held => "Held",
            UserStatus::Disabled => "Disabled",
            UserStatus::Banned => "Banned",
        }
    }
}

impl std::fmt::Display for UserStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Why a user sits in `Held`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "kebab-case")]
pub enum HoldCause {
    UnknownRoles { roles: BTreeSet<RoleName> },
    Policy { reason: String },
    /// Needs the administrator before it is retried.
    Provisioning { reason: String },
    /// Released by the administrator; re-admitted at the next sync.
    Released,
}

impl HoldCause {
    /// Whether the next sync re-evaluates the user on its own.
    pub fn auto_release(&self) -> bool {
        !matches!(self, HoldCause::Provisioning { .. })
    }

    pub fn describe(&self) -> String {
        match self {
            HoldCause::UnknownRoles { roles } => {
                let names: Vec<_> = roles.iter().map(RoleName::as_str).collect();
                format!("unmapped roles {}", names.join(","))
            }
            HoldCause::Policy { reason } => format!("policy: {reason}"),
            HoldCause::Provisioning { reason } => format!("provisioning: {reason}"),
            HoldCause::Released => "released by administrator".to_string(),
        }
    }
}

/// Site-side record of one DN within one VO.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SiteUserState {
    pub dn: DistinguishedName,
    pub source_vo: String,
    pub status: UserStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_account: Option<String>,
    #[serde(default)]
    pub groups: BTreeSet<String>,
    pub first_seen: DateTime<Utc>,
    pub last_updated: DateTime<Utc>,
    pub snapshot: ProjectedRecord,
    /// Whether the last successful pull of `source_vo` listed this DN.
    pub in_vo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold: Option<HoldCause>,
    /// The provisioning request in flight for this user, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<ProvisionId>,
}

impl SiteUserState {
    pub fn key(&self) -> StateKey {
        (self.source_vo.clone(), self.dn.clone())
    }

    fn check_invariants(&self) -> Result<(), StoreError> {
        if self.status == UserStatus::Active && self.local_account.is_none() {
            return Err(StoreError::Invariant(format!("{} is Active without an account", self.dn)));
        }
        if self.status == UserStatus::Banned && !self.groups.is_empty() {
            return Err(StoreError::Invariant(format!("{} is Banned but still in groups", self.dn)));
        }
        if self.status == UserStatus::Held && self.hold.is_none() {
            return Err(StoreError::Invariant(format!("{} is Held without a cause", self.dn)));
        }
        Ok(())
    }

    /// The state as a record block, for `dumpdb`.
    pub fn to_block(&self) -> Block {
        let mut b = Block::default();
        b.push("dn", self.dn.as_str());
        b.push("sourceVo", self.source_vo.as_str());
        b.push("status", self.status.name());
        if let Some(a) = &self.local_account {
            b.push("localAccount", a.as_str());
        }
        b.push("groups", self.groups.iter().cloned().collect::<Vec<_>>().join(","));
        b.push("inVo", self.in_vo.to_string());
        if let Some(h) = &self.hold {
            b.push("hold", h.describe());
        }
        if let Some(p) = &self.pending {
            b.push("pending", p.0.as_str());
        }
        b.push("firstSeen", format_timestamp(&self.first_seen));
        b.push("lastUpdated", format_timestamp(&self.last_updated));
        for (k, v) in record_to_block(&self.snapshot).fields.into_iter().skip(1) {
            b.push(format!("snapshot.{k}"), v);
        }
        b
    }
}

pub type StateKey = (String, DistinguishedName);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub vo: String,
    pub dn: DistinguishedName,
    pub from: Option<UserStatus>,
    pub to: UserStatus,
    pub at: DateTime<Utc>,
    pub cause: String,
}

/// Pre-created local accounts `prefix + NNN`, bound one per DN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "PoolRepr", into = "PoolRepr")]
pub struct AccountPool {
    prefix: String,
    start: u32,
    end: u32,
    allocations: BTreeMap<String, DistinguishedName>,
    by_dn: HashMap<DistinguishedName, String>,
    free: BTreeSet<u32>,
}

#[derive(Serialize, Deserialize)]
struct PoolRepr {
    prefix: String,
    start: u32,
    end: u32,
    allocations: BTreeMap<String, DistinguishedName>,
}

impl From<PoolRepr> for AccountPool {
    fn from(r: PoolRepr) -> Self {
        let mut pool = AccountPool::new(&r.prefix, r.start, r.end);
        for (account, dn) in r.allocations {
            pool.bind(account, dn);
        }
        pool
    }
}

impl From<AccountPool> for PoolRepr {
    fn from(p: AccountPool) -> Self {
        PoolRepr {
            prefix: p.prefix,
            start: p.start,
            end: p.end,
            allocations: p.allocations,
        }
    }
}

impl AccountPool {
    pub fn new(prefix: &str, start: u32, end: u32) -> Self {
        Self {
            prefix: prefix.to_string(),
            start,
            end,
            allocations: BTreeMap::new(),
            by_dn: HashMap::new(),
            free: (start..=end).collect(),
        }
    }

    pub fn account_name(&self, n: u32) -> String {
        format!("{}{n:03}", self.prefix)
    }

    fn index_of(&self, account: &str) -> Option<u32> {
        let n: u32 = account.strip_prefix(self.prefix.as_str())?.parse().ok()?;
        (self.start..=self.end)
            .contains(&n)
            .then_some(n)
            .filter(|n| self.account_name(*n) == account)
    }

    /// All account names in pool order.
    pub fn accounts(&self) -> impl Iterator<Item = String> + '_ {
        (self.start..=self.end).map(|n| self.account_name(n))
    }

    pub fn len(&self) -> usize {
        if self.end < self.start {
            0
        } else {
            (self.end - self.start + 1) as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, account: &str) -> bool {
        self.index_of(account).is_some()
    }

    pub fn allocations(&self) -> &BTreeMap<String, DistinguishedName> {
        &self.allocations
    }

    pub fn account_of(&self, dn: &DistinguishedName) -> Option<&str> {
        self.by_dn.get(dn).map(String::as_str)
    }

    pub fn holder_of(&self, account: &str) -> Option<&DistinguishedName> {
        self.allocations.get(account)
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    /// `"grid001..grid099 (99 accounts)"`.
    pub fn describe(&self) -> String {
        if self.is_empty() {
            return "empty pool (0 accounts)".to_string();
        }
        format!(
            "{}..{} ({} accounts)",
            self.account_name(self.start),
            self.account_name(self.end),
            self.len()
        )
    }

    /// The account `dn` already holds, or the lowest free one.
    fn choose(&self, dn: &DistinguishedName) -> Result<String, StoreError> {
        if let Some(a) = self.by_dn.get(dn) {
            return Ok(a.clone());
        }
        let n = self.free.first().ok_or(StoreError::PoolExhausted)?;
        Ok(self.account_name(*n))
    }

    fn bind(&mut self, account: String, dn: DistinguishedName) {
        if let Some(n) = self.index_of(&account) {
            self.free.remove(&n);
        }
        self.by_dn.insert(dn.clone(), account.clone());
        self.allocations.insert(account, dn);
    }

    fn unbind(&mut self, account: &str) {
        if let Some(dn) = self.allocations.remove(account) {
            self.by_dn.remove(&dn);
        }
        if let Some(n) = self.index_of(account) {
            self.free.insert(n);
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store is not initialized; run initdb")]
    NotInitialized,
    #[error("store already initialized (use --force to reset)")]
    AlreadyInitialized,
    #[error("account pool exhausted")]
    PoolExhausted,
    #[error("illegal transition {} -> {to}", .from.map(|s| s.name()).unwrap_or("none"))]
    IllegalTransition { from: Option<UserStatus>, to: UserStatus },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("request {0} is already closed")]
    AlreadyClosed(RequestId),
    #[error("account {0} cannot be released: {1}")]
    NotReleasable(String, String),
    #[error("account {0} is not a free pool account")]
    NotAPoolAccount(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("store {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("snapshot {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

/// One durable mutation. A committed batch is a list of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum StoreOp {
    Init { prefix: String, start: u32, end: u32 },
    Put { state: Box<SiteUserState>, event: Option<HistoryEvent> },
    Allocate { account: String, dn: DistinguishedName },
    Release { account: String },
    Raise { request: PendingRequest },
    Close { id: RequestId, status: RequestStatus, note: Option<String>, at: DateTime<Utc> },
    Submit { request: ProvisionRequest },
    Settle { id: ProvisionId },
    RegisterGroup { role: RoleName, group: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Batch {
    batch: u64,
    ops: Vec<StoreOp>,
}

/// Everything except history, which is append-only and kept aside.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StoreState {
    pool: Option<AccountPool>,
    #[serde(with = "state_list")]
    states: BTreeMap<StateKey, SiteUserState>,
    requests: BTreeMap<RequestId, PendingRequest>,
    outstanding: BTreeMap<ProvisionId, ProvisionRequest>,
    settled: BTreeSet<ProvisionId>,
    registered_groups: BTreeMap<RoleName, String>,
    next_request: u64,
    next_provision: u64,
    #[serde(skip)]
    open_kinds: HashMap<RequestKind, RequestId>,
    #[serde(skip)]
    rejected_kinds: HashSet<RequestKind>,
}

mod state_list {
    use super::{SiteUserState, StateKey};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<StateKey, SiteUserState>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<&SiteUserState> = m.values().collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<StateKey, SiteUserState>, D::Error> {
        let v = Vec::<SiteUserState>::deserialize(d)?;
        Ok(v.into_iter().map(|s| (s.key(), s)).collect())
    }
}

impl StoreState {
    pub fn is_initialized(&self) -> bool {
        self.pool.is_some()
    }

    pub fn pool(&self) -> Option<&AccountPool> {
        self.pool.as_ref()
    }

    pub fn get(&self, vo: &str, dn: &DistinguishedName) -> Option<&SiteUserState> {
        self.states.get(&(vo.to_string(), dn.clone()))
    }

    pub fn states(&self) -> impl Iterator<Item = &SiteUserState> {
        self.states.values()
    }

    /// Every VO-scoped state of `dn`.
    pub fn states_of<'a>(&'a self, dn: &'a DistinguishedName) -> impl Iterator<Item = &'a SiteUserState> {
        self.states.values().filter(move |s| s.dn == *dn)
    }

    pub fn states_in_vo<'a>(&'a self, vo: &'a str) -> impl Iterator<Item = &'a SiteUserState> {
        self.states.values().filter(move |s| s.source_vo == vo)
    }

    pub fn list_by_status(&self, status: UserStatus) -> Vec<&SiteUserState> {
        self.states.values().filter(|s| s.status == status).collect()
    }

    pub fn requests(&self) -> impl Iterator<Item = &PendingRequest> {
        self.requests.values()
    }

    pub fn request(&self, id: &RequestId) -> Option<&PendingRequest> {
        self.requests.get(id)
    }

    pub fn open_requests(&self) -> impl Iterator<Item = &PendingRequest> {
        self.requests.values().filter(|r| r.status == RequestStatus::Open)
    }

    pub fn outstanding(&self) -> impl Iterator<Item = &ProvisionRequest> {
        self.outstanding.values()
    }

    pub fn outstanding_request(&self, id: &ProvisionId) -> Option<&ProvisionRequest> {
        self.outstanding.get(id)
    }

    pub fn is_settled(&self, id: &ProvisionId) -> bool {
        self.settled.contains(id)
    }

    pub fn registered_groups(&self) -> &BTreeMap<RoleName, String> {
        &self.registered_groups
    }

    pub fn is_rejected(&self, kind: &RequestKind) -> bool {
        self.rejected_kinds.contains(kind)
    }

    fn rebuild_indexes(&mut self) {
        self.open_kinds.clear();
        self.rejected_kinds.clear();
        for r in self.requests.values() {
            match r.status {
                RequestStatus::Open => {
                    self.open_kinds.insert(r.kind.clone(), r.id.clone());
                }
                RequestStatus::Rejected => {
                    self.rejected_kinds.insert(r.kind.clone());
                }
                RequestStatus::Done => {}
            }
        }
    }

    fn apply(&mut self, history: &mut Vec<HistoryEvent>, op: StoreOp) {
        match op {
            StoreOp::Init { prefix, start, end } => {
                *self = StoreState {
                    pool: Some(AccountPool::new(&prefix, start, end)),
                    ..StoreState::default()
                };
                history.clear();
            }
            StoreOp::Put { state, event } => {
                self.states.insert(state.key(), *state);
                history.extend(event);
            }
            StoreOp::Allocate { account, dn } => {
                if let Some(p) = &mut self.pool {
                    p.bind(account, dn);
                }
            }
            StoreOp::Release { account } => {
                if let Some(p) = &mut self.pool {
                    p.unbind(&account);
                }
            }
            StoreOp::Raise { request } => {
                self.next_request = self.next_request.max(request.id.counter().unwrap_or(0));
                self.open_kinds.insert(request.kind.clone(), request.id.clone());
                self.requests.insert(request.id.clone(), request);
            }
            StoreOp::Close { id, status, note, at } => {
                if let Some(r) = self.requests.get_mut(&id) {
                    r.status = status;
                    r.note = note;
                    r.closed_at = Some(at);
                    self.open_kinds.remove(&r.kind);
                    if status == RequestStatus::Rejected {
                        self.rejected_kinds.insert(r.kind.clone());
                    }
                }
            }
            StoreOp::Submit { request } => {
                let n = request.id.0.strip_prefix("prov-").and_then(|n| n.parse().ok()).unwrap_or(0);
                self.next_provision = self.next_provision.max(n);
                self.outstanding.insert(request.id.clone(), request);
            }
            StoreOp::Settle { id } => {
                self.outstanding.remove(&id);
                self.settled.insert(id);
            }
            StoreOp::RegisterGroup { role, group } => {
                self.registered_groups.insert(role, group);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    batch: u64,
    state: StoreState,
    history: Vec<HistoryEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DiskMark {
    journal_len: u64,
    snapshot: Option<(u64, SystemTime)>,
}

/// Outcome of [`Txn::raise`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Raised {
    New(PendingRequest),
    /// An identical request is already open.
    Coalesced(RequestId),
    /// The administrator rejected an identical request before.
    Suppressed,
}

#[derive(Debug)]
pub struct LocalStore {
    dir: PathBuf,
    journal: Journal<Batch>,
    state: StoreState,
    history: Vec<HistoryEvent>,
    batch: u64,
    snapshot_batch: u64,
    mark: DiskMark,
    writes: u64,
    tear_next: Option<usize>,
}

impl LocalStore {
    /// Opens (creating if needed) the store in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        let (state, history, snapshot_batch) = read_snapshot(&dir.join(SNAPSHOT_FILE))?;
        let (journal, batches) = Journal::<Batch>::open(dir.join(JOURNAL_FILE))?;
        let mut store = LocalStore {
            dir,
            journal,
            state,
            history,
            batch: snapshot_batch,
            snapshot_batch,
            mark: DiskMark {
                journal_len: 0,
                snapshot: None,
            },
            writes: 0,
            tear_next: None,
        };
        for b in batches {
            if b.batch <= snapshot_batch {
                continue;
            }
            for op in b.ops {
                store.state.apply(&mut store.history, op);
            }
            store.batch = b.batch;
        }
        store.state.rebuild_indexes();
        store.mark = store.disk_mark()?;
        Ok(store)
    }

    fn io_err(&self, path: &Path) -> impl Fn(io::Error) -> StoreError {
        let path = path.to_path_buf();
        move |source| StoreError::Io {
            path: path.clone(),
            source,
        }
    }

    fn disk_mark(&self) -> Result<DiskMark, StoreError> {
        let jpath = self.dir.join(JOURNAL_FILE);
        let journal_len = match std::fs::metadata(&jpath) {
            Ok(m) => m.len(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(self.io_err(&jpath)(e)),
        };
        let spath = self.dir.join(SNAPSHOT_FILE);
        let snapshot = std::fs::metadata(&spath)
            .ok()
            .map(|m| (m.len(), m.modified().unwrap_or(SystemTime::UNIX_EPOCH)));
        Ok(DiskMark { journal_len, snapshot })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// The last committed state.
    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn history_log(&self) -> &[HistoryEvent] {
        &self.history
    }

    /// Every transition of `dn`, oldest first.
    pub fn history(&self, dn: &DistinguishedName) -> Result<Vec<HistoryEvent>, StoreError> {
        let events: Vec<_> = self.history.iter().filter(|e| e.dn == *dn).cloned().collect();
        if events.is_empty() {
            Err(StoreError::NotFound(dn.to_string()))
        } else {
            Ok(events)
        }
    }

    pub fn get_state(&self, vo: &str, dn: &DistinguishedName) -> Result<&SiteUserState, StoreError> {
        self.state
            .get(vo, dn)
            .ok_or_else(|| StoreError::NotFound(format!("{dn} in {vo}")))
    }

    /// Batches committed through this handle.
    pub fn journal_writes(&self) -> u64 {
        self.writes
    }

    /// Fault injection: the next commit writes only `keep` bytes of its
    /// journal line and fails.
    pub fn tear_next_commit(&mut self, keep: usize) {
        self.tear_next = Some(keep);
    }

    /// Creates the account pool. With `force` any existing state, history
    /// included, is discarded first.
    pub fn initdb(&mut self, prefix: &str, start: u32, end: u32, force: bool) -> Result<&AccountPool, StoreError> {
        let mut txn = self.begin()?;
        if txn.state.is_initialized() && !force {
            return Err(StoreError::AlreadyInitialized);
        }
        txn.push(StoreOp::Init {
            prefix: prefix.to_string(),
            start,
            end,
        });
        txn.reset = true;
        self.commit(txn)?;
        Ok(self.state.pool.as_ref().expect("pool just created"))
    }

    /// Starts a transaction on a private copy of the state. Nothing is
    /// visible or durable until [`LocalStore::commit`].
    pub fn begin(&mut self) -> Result<Txn, StoreError> {
        let lock_path = self.dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(self.io_err(&lock_path))?;
        lock.lock().map_err(self.io_err(&lock_path))?;
        if self.disk_mark()? != self.mark {
            let writes = self.writes;
            let tear = self.tear_next.take();
            *self = LocalStore::open(&self.dir)?;
            self.writes = writes;
            self.tear_next = tear;
        }
        Ok(Txn {
            state: self.state.clone(),
            events: Vec::new(),
            ops: Vec::new(),
            now: Utc::now(),
            reset: false,
            _lock: lock,
        })
    }

    /// Makes the transaction durable as one journal line. Returns whether
    /// anything was written. On error the committed state is unchanged.
    pub fn commit(&mut self, txn: Txn) -> Result<bool, StoreError> {
        if txn.ops.is_empty() {
            return Ok(false);
        }
        if txn.reset {
            self.journal.truncate()?;
            let spath = self.dir.join(SNAPSHOT_FILE);
            match std::fs::remove_file(&spath) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(self.io_err(&spath)(e)),
                _ => {}
            }
            self.snapshot_batch = 0;
            self.batch = 0;
        }
        let batch = Batch {
            batch: self.batch + 1,
            ops: txn.ops,
        };
        if let Some(keep) = self.tear_next.take() {
            self.journal.tear_next_write(keep);
        }
        if let Err(e) = self.journal.append(&batch) {
            // The on-disk tail may be torn; re-read it on the next begin.
            self.mark.journal_len = u64::MAX;
            return Err(e.into());
        }
        self.batch = batch.batch;
        self.writes += 1;
        if txn.reset {
            self.history.clear();
        }
        self.state = txn.state;
        self.history.extend(txn.events);
        if self.batch - self.snapshot_batch >= SNAPSHOT_EVERY {
            self.write_snapshot()?;
        }
        self.mark = self.disk_mark()?;
        Ok(true)
    }

    fn write_snapshot(&mut self) -> Result<(), StoreError> {
        let snap = Snapshot {
            batch: self.batch,
            state: self.state.clone(),
            history: self.history.clone(),
        };
        let bytes = serde_json::to_vec(&snap).expect("snapshot serializes");
        let spath = self.dir.join(SNAPSHOT_FILE);
        atomic_write_bytes(&spath, &bytes).map_err(self.io_err(&spath))?;
        self.journal.truncate()?;
        self.snapshot_batch = self.batch;
        Ok(())
    }
}

fn read_snapshot(path: &Path) -> Result<(StoreState, Vec<HistoryEvent>, u64), StoreError> {
    match std::fs::read(path) {
        Ok(bytes) => {
            let snap: Snapshot = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            Ok((snap.state, snap.history, snap.batch))
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok((StoreState::default(), Vec::new(), 0)),
        Err(source) => Err(StoreError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

/// An open transaction. Holds the store's writer lock until committed or
/// dropped; dropping discards every change.
#[derive(Debug)]
pub struct Txn {
    state: StoreState,
    events: Vec<HistoryEvent>,
    ops: Vec<StoreOp>,
    now: DateTime<Utc>,
    reset: bool,
    _lock: File,
}

impl Txn {
    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }

    /// Number of mutations so far.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: StoreOp) {
        self.state.apply(&mut self.events, op.clone());
        self.ops.push(op);
    }

    fn pool(&self) -> Result<&AccountPool, StoreError> {
        self.state.pool.as_ref().ok_or(StoreError::NotInitialized)
    }

    /// Inserts or updates a state, enforcing the transition relation. A
    /// status change appends a history event with `cause`. Writing back an
    /// unchanged state is a no-op.
    pub fn upsert_state(&mut self, state: SiteUserState, cause: &str) -> Result<(), StoreError> {
        let from = self.state.states.get(&state.key()).map(|s| s.status);
        if from != Some(state.status) && !UserStatus::can_become(from, state.status) {
            return Err(StoreError::IllegalTransition { from, to: state.status });
        }
        self.put(state, cause)
    }

    /// Like [`Txn::upsert_state`] without the transition check; reserved for
    /// explicit operator overrides such as unban.
    pub fn force_state(&mut self, state: SiteUserState, cause: &str) -> Result<(), StoreError> {
        self.put(state, cause)
    }

    fn put(&mut self, mut state: SiteUserState, cause: &str) -> Result<(), StoreError> {
        self.pool()?;
        state.check_invariants()?;
        let old = self.state.states.get(&state.key());
        if let Some(old) = old {
            state.first_seen = old.first_seen;
            state.last_updated = old.last_updated;
            if *old == state {
                return Ok(());
            }
        }
        let from = old.map(|s| s.status);
        state.last_updated = self.now;
        if old.is_none() {
            state.first_seen = self.now;
        }
        let event = (from != Some(state.status)).then(|| HistoryEvent {
            vo: state.source_vo.clone(),
            dn: state.dn.clone(),
            from,
            to: state.status,
            at: self.now,
            cause: cause.to_string(),
        });
        self.push(StoreOp::Put {
            state: Box::new(state),
            event,
        });
        Ok(())
    }

    /// The account bound to `dn`, binding the lowest free one if needed.
    pub fn allocate_account(&mut self, dn: &DistinguishedName) -> Result<String, StoreError> {
        let pool = self.pool()?;
        if let Some(a) = pool.account_of(dn) {
            return Ok(a.to_string());
        }
        let account = pool.choose(dn)?;
        self.push(StoreOp::Allocate {
            account: account.clone(),
            dn: dn.clone(),
        });
        Ok(account)
    }

    /// Binds a specific free pool account, as named by a provisioning
    /// backend. Idempotent when `dn` already holds it.
    pub fn bind_account(&mut self, dn: &DistinguishedName, account: &str) -> Result<(), StoreError> {
        let pool = self.pool()?;
        match (pool.account_of(dn), pool.holder_of(account)) {
            (Some(a), _) if a == account => return Ok(()),
            (None, None) if pool.contains(account) => {}
            _ => return Err(StoreError::NotAPoolAccount(account.to_string())),
        }
        self.push(StoreOp::Allocate {
            account: account.to_string(),
            dn: dn.clone(),
        });
        Ok(())
    }

    /// Returns a banned user's account to the pool.
    pub fn release_account(&mut self, account: &str) -> Result<DistinguishedName, StoreError> {
        let holder = self
            .pool()?
            .holder_of(account)
            .cloned()
            .ok_or_else(|| StoreError::NotReleasable(account.to_string(), "not allocated".into()))?;
        let states: Vec<SiteUserState> = self.state.states_of(&holder).cloned().collect();
        if states.is_empty() || states.iter().any(|s| s.status != UserStatus::Banned) {
            return Err(StoreError::NotReleasable(
                account.to_string(),
                format!("holder {holder} is not banned"),
            ));
        }
        self.push(StoreOp::Release {
            account: account.to_string(),
        });
        for mut s in states {
            s.local_account = None;
            self.put(s, "account-released")?;
        }
        Ok(holder)
    }

    /// Opens a request unless an identical one is open or was rejected.
    pub fn raise(&mut self, kind: RequestKind) -> Raised {
        if let Some(id) = self.state.open_kinds.get(&kind) {
            return Raised::Coalesced(id.clone());
        }
        if self.state.rejected_kinds.contains(&kind) {
            return Raised::Suppressed;
        }
        let request = PendingRequest {
            id: RequestId::from_counter(self.state.next_request + 1),
            kind,
            created_at: self.now,
            status: RequestStatus::Open,
            note: None,
            closed_at: None,
        };
        self.push(StoreOp::Raise {
            request: request.clone(),
        });
        Raised::New(request)
    }

    /// Closes an open request as `Done` or `Rejected`.
    pub fn close_request(
        &mut self,
        id: &RequestId,
        status: RequestStatus,
        note: Option<String>,
    ) -> Result<PendingRequest, StoreError> {
        let r = self
            .state
            .requests
            .get(id)
            .ok_or_else(|| StoreError::UnknownRequest(id.clone()))?;
        if r.status != RequestStatus::Open {
            return Err(StoreError::AlreadyClosed(id.clone()));
        }
        let status = if status == RequestStatus::Open {
            RequestStatus::Done
        } else {
            status
        };
        self.push(StoreOp::Close {
            id: id.clone(),
            status,
            note,
            at: self.now,
        });
        Ok(self.state.requests[id].clone())
    }

    /// Records a new provisioning request and returns it for submission.
    pub fn new_provision(&mut self, vo: &str, dn: &DistinguishedName, kind: ProvisionKind) -> ProvisionRequest {
        let request = ProvisionRequest {
            id: ProvisionId::from_counter(self.state.next_provision + 1),
            vo: vo.to_string(),
            dn: dn.clone(),
            kind,
            created_at: self.now,
        };
        self.push(StoreOp::Submit {
            request: request.clone(),
        });
        request
    }

    /// Marks a provisioning request as answered.
    pub fn settle(&mut self, id: &ProvisionId) {
        if self.state.outstanding.contains_key(id) {
            self.push(StoreOp::Settle { id: id.clone() });
        }
    }

    /// Adds or changes a role's group. No-op if already mapped that way.
    pub fn register_group(&mut self, role: RoleName, group: &str) -> Result<(), StoreError> {
        self.pool()?;
        if group.trim().is_empty() {
            return Err(StoreError::Invariant("group name is empty".into()));
        }
        if self.state.registered_groups.get(&role).map(String::as_str) == Some(group) {
            return Ok(());
        }
        self.push(StoreOp::RegisterGroup {
            role,
            group: group.to_string(),
        });
        Ok(())
    }
}
